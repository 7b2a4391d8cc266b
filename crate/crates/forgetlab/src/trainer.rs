//! Sequential continual-training harness for the toy task suites.
//!
//! The model is a small two-head classifier: a tanh trunk of one or two
//! linear layers feeding a style head and a content head. Every linear layer
//! is a frozen base weight plus a trainable low-rank adapter; only adapters
//! receive gradients. Training walks a task sequence with SGD+momentum on
//! the total loss (summed head cross-entropies plus the accumulated-mask
//! regularizer); at each task boundary the adapter's key elements are
//! recorded, the update is merged into the base, and a fresh adapter is
//! initialized.
//!
//! Everything runs single-threaded in a fixed order, so runs are bitwise
//! reproducible from the config seed.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{Matrix, MatrixError};
use crate::metrics::{AccuracyMatrix, MetricsError};
use crate::reglora::{
    delta_w, init_adapter, merge, reg_loss, reg_loss_grad, select_key_elements, LoraAdapter,
    RegConfig, RegLoraError, RegMaskStack,
};
use crate::checkpoint::ModelCheckpoint;
use crate::rng::{derived_rng, salt, splitmix64};
use crate::toy_tasks::{ToySample, ToyTask, STYLE_DIMS};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    RegLora(#[from] RegLoraError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] Box<crate::checkpoint::CheckpointError>),
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("bad batch: {0}")]
    BadBatch(String),
    #[error("training diverged at task {task}, epoch {epoch}: loss {loss}")]
    Diverged { task: usize, epoch: usize, loss: f64 },
}

/// Which loss the sequential trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineMode {
    /// Adapters with no regularization: the forgetting baseline.
    #[serde(rename = "plain")]
    PlainLora,
    /// Adapters plus the accumulated-mask penalty on key positions.
    #[serde(rename = "reglora")]
    RegLora,
}

impl std::fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaselineMode::PlainLora => "plain",
            BaselineMode::RegLora => "reglora",
        })
    }
}

impl std::str::FromStr for BaselineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" => Ok(BaselineMode::PlainLora),
            "reglora" => Ok(BaselineMode::RegLora),
            other => Err(format!("unknown mode {other:?}; expected plain or reglora")),
        }
    }
}

/// Hyperparameters for one sequential run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Adapter rank for every layer.
    pub rank: usize,
    /// Trunk width.
    pub hidden_dim: usize,
    /// Trunk depth; one or two layers.
    pub trunk_layers: usize,
    /// Per-epoch multiplicative learning-rate decay; 1 keeps it constant.
    /// The regularizer's subgradient never vanishes at its optimum, so
    /// regularized runs need the late-epoch rate to shrink for masked
    /// updates to settle near zero.
    pub lr_decay: f64,
    /// Elementwise gradient clip: every gradient coordinate is clamped to
    /// `±grad_clip` before the momentum update. The penalty's subgradient on
    /// a masked coordinate scales with λ and would otherwise throw plain SGD
    /// into runaway oscillation at useful λ values; clamping bounds each
    /// coordinate's step the way adaptive optimizers do, without touching
    /// the (much smaller) cross-entropy gradients. It also sets how far a
    /// pinned coordinate can bounce around zero while the penalty and the
    /// task loss disagree (≈ `learning_rate × grad_clip` per step), so keep
    /// it small relative to typical weights. `f64::INFINITY` disables.
    pub grad_clip: f64,
    pub seed: u64,
    pub mode: BaselineMode,
    pub reg: RegConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            epochs: 30,
            rank: 4,
            hidden_dim: 64,
            trunk_layers: 1,
            lr_decay: 0.9,
            grad_clip: 0.25,
            seed: 0,
            mode: BaselineMode::PlainLora,
            reg: RegConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        fn fail(message: impl Into<String>) -> Result<(), TrainError> {
            Err(TrainError::BadConfig(message.into()))
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.rank == 0 {
            return fail("rank must be positive");
        }
        if self.hidden_dim == 0 {
            return fail("hidden_dim must be positive");
        }
        if !(1..=2).contains(&self.trunk_layers) {
            return fail(format!("trunk_layers {} must be 1 or 2", self.trunk_layers));
        }
        if !(self.lr_decay.is_finite() && 0.0 < self.lr_decay && self.lr_decay <= 1.0) {
            return fail(format!("lr_decay {} must lie in (0, 1]", self.lr_decay));
        }
        if !(self.grad_clip > 0.0) {
            return fail(format!("grad_clip {} must be positive", self.grad_clip));
        }
        self.reg.validate()?;
        Ok(())
    }

    /// The regularization weight the trainer actually applies.
    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            BaselineMode::PlainLora => 0.0,
            BaselineMode::RegLora => self.reg.lambda,
        }
    }
}

/// One linear layer: a frozen base weight, its trainable adapter, and the
/// accumulated key-position masks of completed tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub name: String,
    /// Stable id used to derive per-layer seeds.
    pub ordinal: u64,
    /// out_dim × in_dim; frozen during task training, advanced only by
    /// merging at task boundaries.
    pub base: Matrix,
    pub adapter: LoraAdapter,
    pub stack: RegMaskStack,
}

pub(crate) fn adapter_seed(seed: u64, ordinal: u64, generation: u64) -> u64 {
    splitmix64(seed ^ salt("adapter-gen", generation, ordinal))
}

/// Readout bases are drawn at a fraction of the trunk's scale: the synthetic
/// content classes are new at task time, so a near-blank head is the honest
/// starting point, and the rank-limited adapters then spend their capacity
/// building the classifier instead of cancelling readout noise.
const HEAD_BASE_SCALE: f64 = 0.1;

impl LoraLayer {
    /// Fresh layer with a seeded random frozen base (the stand-in for
    /// pretrained weights, drawn within `±bound_scale/√in_dim`) and a
    /// zero-update adapter.
    pub fn new(
        name: impl Into<String>,
        in_dim: usize,
        out_dim: usize,
        ordinal: u64,
        bound_scale: f64,
        config: &TrainConfig,
    ) -> Self {
        let bound = bound_scale / (in_dim as f64).sqrt();
        let mut rng = derived_rng(config.seed, salt("base-init", ordinal, in_dim as u64));
        let base = Matrix::from_fn(out_dim, in_dim, |_, _| rng.random_range(-bound..=bound));
        LoraLayer {
            name: name.into(),
            ordinal,
            base,
            adapter: init_adapter(in_dim, out_dim, config.rank, adapter_seed(config.seed, ordinal, 0)),
            stack: RegMaskStack::new(out_dim, in_dim),
        }
    }

    /// The weight the layer currently computes with: base plus the live
    /// adapter update.
    pub fn effective_weight(&self) -> Result<Matrix, RegLoraError> {
        merge(&self.base, &self.adapter)
    }

    pub fn in_dim(&self) -> usize {
        self.base.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.base.rows()
    }
}

/// Two-head classifier over toy-task inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub trunk: Vec<LoraLayer>,
    pub style_head: LoraLayer,
    pub content_head: LoraLayer,
    /// Tasks merged so far; also the adapter generation counter.
    pub tasks_completed: usize,
}

/// Stable ordinals for head layers (trunk layers use their index).
const STYLE_ORDINAL: u64 = 100;
const CONTENT_ORDINAL: u64 = 101;

impl ToyModel {
    pub fn new(d_in: usize, n_content: usize, config: &TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if d_in == 0 || n_content < 2 {
            return Err(TrainError::BadConfig(format!(
                "model dims d_in={d_in}, n_content={n_content} are degenerate"
            )));
        }
        let mut trunk = Vec::with_capacity(config.trunk_layers);
        let mut in_dim = d_in;
        for l in 0..config.trunk_layers {
            trunk.push(LoraLayer::new(
                format!("trunk{l}"),
                in_dim,
                config.hidden_dim,
                l as u64,
                1.0,
                config,
            ));
            in_dim = config.hidden_dim;
        }
        Ok(ToyModel {
            trunk,
            style_head: LoraLayer::new(
                "style_head",
                in_dim,
                STYLE_DIMS,
                STYLE_ORDINAL,
                HEAD_BASE_SCALE,
                config,
            ),
            content_head: LoraLayer::new(
                "content_head",
                in_dim,
                n_content,
                CONTENT_ORDINAL,
                HEAD_BASE_SCALE,
                config,
            ),
            tasks_completed: 0,
        })
    }

    pub fn d_in(&self) -> usize {
        self.trunk[0].in_dim()
    }

    pub fn n_content(&self) -> usize {
        self.content_head.out_dim()
    }

    /// All adapter-carrying layers in the fixed traversal order: trunk
    /// first, then style head, then content head.
    pub fn layers(&self) -> Vec<&LoraLayer> {
        let mut all: Vec<&LoraLayer> = self.trunk.iter().collect();
        all.push(&self.style_head);
        all.push(&self.content_head);
        all
    }

    pub fn layers_mut(&mut self) -> Vec<&mut LoraLayer> {
        let mut all: Vec<&mut LoraLayer> = self.trunk.iter_mut().collect();
        all.push(&mut self.style_head);
        all.push(&mut self.content_head);
        all
    }

    /// Class predictions (style index, content index) for one input;
    /// argmax with first-wins tie-breaking.
    pub fn predict(&self, x: &[f64]) -> Result<(usize, usize), TrainError> {
        let batch = Matrix::from_vec(1, x.len(), x.to_vec())?;
        let pass = self.forward(&batch)?;
        Ok((argmax_row(&pass.style_logits, 0), argmax_row(&pass.content_logits, 0)))
    }

    fn forward(&self, inputs: &Matrix) -> Result<ForwardPass, TrainError> {
        if inputs.cols() != self.d_in() {
            return Err(TrainError::BadBatch(format!(
                "input width {} does not match model d_in {}",
                inputs.cols(),
                self.d_in()
            )));
        }
        let mut activations = vec![inputs.clone()];
        let mut trunk_weights = Vec::with_capacity(self.trunk.len());
        for layer in &self.trunk {
            let w = layer.effective_weight()?;
            let pre = activations
                .last()
                .expect("activations start non-empty")
                .matmul(&w.transpose())?;
            activations.push(pre.map(f64::tanh));
            trunk_weights.push(w);
        }
        let h = activations.last().expect("trunk has at least one layer");
        let style_weight = self.style_head.effective_weight()?;
        let content_weight = self.content_head.effective_weight()?;
        let style_logits = h.matmul(&style_weight.transpose())?;
        let content_logits = h.matmul(&content_weight.transpose())?;
        Ok(ForwardPass {
            activations,
            trunk_weights,
            style_weight,
            content_weight,
            style_logits,
            content_logits,
        })
    }
}

struct ForwardPass {
    /// `activations[0]` is the input batch; `activations[l+1]` is trunk
    /// layer l's output.
    activations: Vec<Matrix>,
    trunk_weights: Vec<Matrix>,
    style_weight: Matrix,
    content_weight: Matrix,
    style_logits: Matrix,
    content_logits: Matrix,
}

fn argmax_row(m: &Matrix, row: usize) -> usize {
    let mut best = 0;
    for c in 1..m.cols() {
        if m.get(row, c) > m.get(row, best) {
            best = c;
        }
    }
    best
}

/// Mean cross-entropy of `logits` against `labels`, with the gradient
/// already divided by the batch size.
fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix), TrainError> {
    let n = logits.rows();
    if labels.len() != n {
        return Err(TrainError::BadBatch(format!(
            "{} labels for {} logit rows",
            labels.len(),
            n
        )));
    }
    let classes = logits.cols();
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, classes);
    for i in 0..n {
        let y = labels[i];
        if y >= classes {
            return Err(TrainError::BadBatch(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        let mut max = f64::NEG_INFINITY;
        for c in 0..classes {
            max = max.max(logits.get(i, c));
        }
        let mut sum = 0.0;
        for c in 0..classes {
            sum += (logits.get(i, c) - max).exp();
        }
        let log_sum = max + sum.ln();
        loss += log_sum - logits.get(i, y);
        for c in 0..classes {
            let p = (logits.get(i, c) - log_sum).exp();
            let target = if c == y { 1.0 } else { 0.0 };
            grad.set(i, c, (p - target) / n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}

fn batch_matrix(samples: &[&ToySample], d_in: usize) -> Result<Matrix, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::BadBatch("empty batch".to_string()));
    }
    let mut data = Vec::with_capacity(samples.len() * d_in);
    for s in samples {
        if s.x.len() != d_in {
            return Err(TrainError::BadBatch(format!(
                "sample width {} does not match model d_in {d_in}",
                s.x.len()
            )));
        }
        data.extend_from_slice(&s.x);
    }
    Ok(Matrix::from_vec(samples.len(), d_in, data)?)
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub reg: f64,
}

/// Adapter gradients for one layer.
struct LayerGrads {
    a: Matrix,
    b: Matrix,
}

/// Total loss of Eq-style form on one batch: summed head cross-entropies
/// plus the per-layer accumulated-mask penalty (zero in plain mode and on
/// the first task, where no masks exist yet).
pub fn task_loss(
    model: &ToyModel,
    batch: &[ToySample],
    config: &TrainConfig,
) -> Result<LossParts, TrainError> {
    let refs: Vec<&ToySample> = batch.iter().collect();
    let inputs = batch_matrix(&refs, model.d_in())?;
    let pass = model.forward(&inputs)?;
    let (style_labels, content_labels) = label_vectors(&refs);
    let (style_loss, _) = cross_entropy(&pass.style_logits, &style_labels)?;
    let (content_loss, _) = cross_entropy(&pass.content_logits, &content_labels)?;
    let lambda = config.effective_lambda();
    let mut reg = 0.0;
    for layer in model.layers() {
        reg += reg_loss(&layer.adapter, &layer.stack, lambda)?;
    }
    let ce = style_loss + content_loss;
    Ok(LossParts {
        total: ce + reg,
        ce,
        reg,
    })
}

fn label_vectors(samples: &[&ToySample]) -> (Vec<usize>, Vec<usize>) {
    let style = samples.iter().map(|s| s.style.index()).collect();
    let content = samples.iter().map(|s| s.content).collect();
    (style, content)
}

/// One backward pass: loss components plus adapter gradients in layer
/// traversal order.
fn batch_grads(
    model: &ToyModel,
    samples: &[&ToySample],
    config: &TrainConfig,
) -> Result<(LossParts, Vec<LayerGrads>), TrainError> {
    let inputs = batch_matrix(samples, model.d_in())?;
    let pass = model.forward(&inputs)?;
    let (style_labels, content_labels) = label_vectors(samples);
    let (style_loss, style_dlogits) = cross_entropy(&pass.style_logits, &style_labels)?;
    let (content_loss, content_dlogits) = cross_entropy(&pass.content_logits, &content_labels)?;

    let h = pass
        .activations
        .last()
        .expect("trunk has at least one layer");
    // Weight-space gradients for the heads.
    let style_wgrad = style_dlogits.transpose().matmul(h)?;
    let content_wgrad = content_dlogits.transpose().matmul(h)?;
    // Backpropagate into the shared hidden state and down the trunk.
    let mut dh = style_dlogits
        .matmul(&pass.style_weight)?
        .add(&content_dlogits.matmul(&pass.content_weight)?)?;
    let mut trunk_wgrads: Vec<Matrix> = Vec::with_capacity(model.trunk.len());
    for l in (0..model.trunk.len()).rev() {
        let output = &pass.activations[l + 1];
        let delta = dh.zip_map(output, |g, y| g * (1.0 - y * y))?;
        trunk_wgrads.push(delta.transpose().matmul(&pass.activations[l])?);
        if l > 0 {
            dh = delta.matmul(&pass.trunk_weights[l])?;
        }
    }
    trunk_wgrads.reverse();

    let lambda = config.effective_lambda();
    let mut reg_total = 0.0;
    let mut grads = Vec::with_capacity(model.trunk.len() + 2);
    let layers = model.layers();
    let wgrads = trunk_wgrads
        .into_iter()
        .chain([style_wgrad, content_wgrad]);
    for (layer, wgrad) in layers.into_iter().zip(wgrads) {
        // CE gradients through the low-rank factorization...
        let mut a_grad = layer
            .adapter
            .b
            .transpose()
            .matmul(&wgrad)?
            .scale(layer.adapter.scale);
        let mut b_grad = wgrad
            .matmul(&layer.adapter.a.transpose())?
            .scale(layer.adapter.scale);
        // ...plus the penalty's subgradient on masked positions.
        reg_total += reg_loss(&layer.adapter, &layer.stack, lambda)?;
        let (reg_a, reg_b) = reg_loss_grad(&layer.adapter, &layer.stack, lambda)?;
        a_grad.add_scaled(&reg_a, 1.0)?;
        b_grad.add_scaled(&reg_b, 1.0)?;
        grads.push(LayerGrads {
            a: a_grad,
            b: b_grad,
        });
    }

    let ce = style_loss + content_loss;
    Ok((
        LossParts {
            total: ce + reg_total,
            ce,
            reg: reg_total,
        },
        grads,
    ))
}

/// Mean per-epoch loss components recorded by [`train_task`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    /// Value of `tasks_completed` when this task started.
    pub task_index: usize,
    /// One entry per epoch: batch-averaged loss components.
    pub epochs: Vec<LossParts>,
}

/// Train the current adapters on one task's training split.
///
/// Base weights stay frozen; only adapters move. The loop is single-threaded
/// and seeded, so identical configs replay bit-identically.
pub fn train_task(
    model: &mut ToyModel,
    task: &ToyTask,
    config: &TrainConfig,
) -> Result<TaskLog, TrainError> {
    config.validate()?;
    let train = task.train();
    if train.is_empty() {
        return Err(TrainError::BadBatch("task has no training samples".to_string()));
    }
    let task_index = model.tasks_completed;
    let mut log = TaskLog {
        task_index,
        epochs: Vec::with_capacity(config.epochs),
    };
    // Momentum buffers, aligned with layer traversal order.
    let mut velocity: Vec<LayerGrads> = model
        .layers()
        .iter()
        .map(|layer| LayerGrads {
            a: Matrix::zeros(layer.adapter.a.rows(), layer.adapter.a.cols()),
            b: Matrix::zeros(layer.adapter.b.rows(), layer.adapter.b.cols()),
        })
        .collect();
    let mut shuffle_rng = derived_rng(config.seed, salt("train-shuffle", task_index as u64, 0));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut lr = config.learning_rate;

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_parts = LossParts {
            total: 0.0,
            ce: 0.0,
            reg: 0.0,
        };
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&ToySample> = chunk.iter().map(|&i| &train[i]).collect();
            let (parts, grads) = batch_grads(model, &batch, config)?;
            if !parts.total.is_finite() {
                return Err(TrainError::Diverged {
                    task: task_index,
                    epoch,
                    loss: parts.total,
                });
            }
            for (layer, (grad, vel)) in model
                .layers_mut()
                .into_iter()
                .zip(grads.iter().zip(velocity.iter_mut()))
            {
                update_momentum(&mut vel.a, &grad.a, config)?;
                update_momentum(&mut vel.b, &grad.b, config)?;
                layer.adapter.a.add_scaled(&vel.a, -lr)?;
                layer.adapter.b.add_scaled(&vel.b, -lr)?;
            }
            epoch_parts.total += parts.total;
            epoch_parts.ce += parts.ce;
            epoch_parts.reg += parts.reg;
            batches += 1;
        }
        let n = batches as f64;
        log.epochs.push(LossParts {
            total: epoch_parts.total / n,
            ce: epoch_parts.ce / n,
            reg: epoch_parts.reg / n,
        });
        lr *= config.lr_decay;
    }
    for layer in model.layers() {
        layer.adapter.a.check_finite()?;
        layer.adapter.b.check_finite()?;
    }
    Ok(log)
}

fn update_momentum(
    velocity: &mut Matrix,
    grad: &Matrix,
    config: &TrainConfig,
) -> Result<(), MatrixError> {
    // v <- mu*v + clamp(g)
    let clip = config.grad_clip;
    *velocity = velocity.scale(config.momentum);
    if clip.is_finite() {
        velocity.add_scaled(&grad.map(|g| g.clamp(-clip, clip)), 1.0)
    } else {
        velocity.add_scaled(grad, 1.0)
    }
}

/// Close out the current task: record the adapter's key positions, merge the
/// update into the base, and start a fresh adapter.
///
/// The forward function is unchanged by this call (the merged base plus a
/// zero new update computes the same weight), which keeps evaluation results
/// independent of when it runs.
pub fn finish_task(model: &mut ToyModel, config: &TrainConfig) -> Result<(), TrainError> {
    let seed = config.seed;
    let generation = (model.tasks_completed + 1) as u64;
    let m_percent = config.reg.m_percent;
    let rank = config.rank;
    for layer in model.layers_mut() {
        let delta = delta_w(&layer.adapter)?;
        let mask = select_key_elements(&delta, m_percent)?;
        layer.stack.accumulate(&mask)?;
        layer.base = layer.base.add(&delta)?;
        layer.adapter = init_adapter(
            layer.in_dim(),
            layer.out_dim(),
            rank,
            adapter_seed(seed, layer.ordinal, generation),
        );
    }
    model.tasks_completed += 1;
    Ok(())
}

/// Held-out accuracies of one task, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalAccuracy {
    pub style: f64,
    pub content: f64,
    /// Both heads correct on the same sample.
    pub joint: f64,
}

/// Accuracy of the model on a slice of labeled samples.
pub fn evaluate(model: &ToyModel, samples: &[ToySample]) -> Result<EvalAccuracy, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::BadBatch("empty evaluation set".to_string()));
    }
    let refs: Vec<&ToySample> = samples.iter().collect();
    let inputs = batch_matrix(&refs, model.d_in())?;
    let pass = model.forward(&inputs)?;
    let mut style_hits = 0usize;
    let mut content_hits = 0usize;
    let mut joint_hits = 0usize;
    for (i, s) in samples.iter().enumerate() {
        let style_ok = argmax_row(&pass.style_logits, i) == s.style.index();
        let content_ok = argmax_row(&pass.content_logits, i) == s.content;
        style_hits += usize::from(style_ok);
        content_hits += usize::from(content_ok);
        joint_hits += usize::from(style_ok && content_ok);
    }
    let pct = |hits: usize| 100.0 * hits as f64 / samples.len() as f64;
    Ok(EvalAccuracy {
        style: pct(style_hits),
        content: pct(content_hits),
        joint: pct(joint_hits),
    })
}

/// Everything a sequential run produces: the three lower-triangular
/// accuracy matrices, per-task training logs, and the final model.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub style: AccuracyMatrix,
    pub content: AccuracyMatrix,
    pub joint: AccuracyMatrix,
    pub logs: Vec<TaskLog>,
    /// One capture per task boundary, taken right after the merge.
    pub checkpoints: Vec<ModelCheckpoint>,
    pub model: ToyModel,
}

/// Train the task sequence in order; after each task, evaluate the held-out
/// split of every task seen so far (filling one matrix row), then merge and
/// reinitialize.
pub fn run_sequence(tasks: &[ToyTask], config: &TrainConfig) -> Result<RunOutcome, TrainError> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(TrainError::BadConfig("task sequence is empty".to_string()));
    }
    let d_in = tasks[0]
        .samples
        .first()
        .map(|s| s.x.len())
        .ok_or_else(|| TrainError::BadConfig("task 0 has no samples".to_string()))?;
    let n_content = tasks
        .iter()
        .flat_map(|t| t.samples.iter().map(|s| s.content + 1))
        .max()
        .unwrap_or(0)
        .max(2);
    let mut model = ToyModel::new(d_in, n_content, config)?;
    let mut style_rows = Vec::with_capacity(tasks.len());
    let mut content_rows = Vec::with_capacity(tasks.len());
    let mut joint_rows = Vec::with_capacity(tasks.len());
    let mut logs = Vec::with_capacity(tasks.len());
    let mut checkpoints = Vec::with_capacity(tasks.len());
    for (j, task) in tasks.iter().enumerate() {
        logs.push(train_task(&mut model, task, config)?);
        let mut style_row = Vec::with_capacity(j + 1);
        let mut content_row = Vec::with_capacity(j + 1);
        let mut joint_row = Vec::with_capacity(j + 1);
        for seen in &tasks[..=j] {
            let acc = evaluate(&model, seen.heldout())?;
            style_row.push(acc.style);
            content_row.push(acc.content);
            joint_row.push(acc.joint);
        }
        style_rows.push(style_row);
        content_rows.push(content_row);
        joint_rows.push(joint_row);
        finish_task(&mut model, config)?;
        checkpoints.push(ModelCheckpoint::from_model(&model, config).map_err(Box::new)?);
    }
    Ok(RunOutcome {
        style: AccuracyMatrix::from_rows(style_rows)?,
        content: AccuracyMatrix::from_rows(content_rows)?,
        joint: AccuracyMatrix::from_rows(joint_rows)?,
        logs,
        checkpoints,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_tasks::{generate_task_suite, SuiteConfig};

    fn tiny_suite(seed: u64, mix: f64) -> Vec<ToyTask> {
        generate_task_suite(&SuiteConfig {
            n_tasks: 2,
            samples_per_task: 60,
            seed,
            style_mix_percent: mix,
            ..SuiteConfig::default()
        })
        .unwrap()
    }

    fn zeroed_model(d_in: usize, n_content: usize, config: &TrainConfig) -> ToyModel {
        let mut model = ToyModel::new(d_in, n_content, config).unwrap();
        for layer in model.layers_mut() {
            layer.base = Matrix::zeros(layer.out_dim(), layer.in_dim());
        }
        model
    }

    fn bits(m: &Matrix) -> Vec<u64> {
        m.as_slice().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn uniform_logits_cost_ln_class_counts() {
        // Zero base + zero update means zero logits: exactly ln(5) + ln(4).
        let config = TrainConfig::default();
        let suite = tiny_suite(3, 20.0);
        let model = zeroed_model(21, 4, &config);
        let parts = task_loss(&model, task_batch(&suite[0]), &config).unwrap();
        assert_eq!(parts.reg, 0.0);
        let expected = (5.0f64).ln() + (4.0f64).ln();
        assert!((parts.total - expected).abs() <= 1e-12);
    }

    fn task_batch(task: &ToyTask) -> &[ToySample] {
        &task.samples[..16]
    }

    #[test]
    fn lambda_zero_and_first_task_have_no_reg_term() {
        let suite = tiny_suite(5, 20.0);
        let mut config = TrainConfig {
            mode: BaselineMode::RegLora,
            ..TrainConfig::default()
        };
        let model = ToyModel::new(21, 4, &config).unwrap();
        // Fresh model: empty stacks, so even reglora mode has zero penalty.
        let parts = task_loss(&model, task_batch(&suite[0]), &config).unwrap();
        assert_eq!(parts.reg, 0.0);
        config.reg.lambda = 0.0;
        let parts = task_loss(&model, task_batch(&suite[0]), &config).unwrap();
        assert_eq!(parts.total, parts.ce);
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let config = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let suite = tiny_suite(7, 20.0);
        let mut model = ToyModel::new(21, 4, &config).unwrap();
        let before = model.clone();
        let log = train_task(&mut model, &suite[0], &config).unwrap();
        assert!(log.epochs.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn bases_stay_frozen_through_task_training() {
        let config = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let suite = tiny_suite(11, 20.0);
        let mut model = ToyModel::new(21, 4, &config).unwrap();
        let base_bits: Vec<Vec<u64>> = model.layers().iter().map(|l| bits(&l.base)).collect();
        let adapter_bits: Vec<Vec<u64>> =
            model.layers().iter().map(|l| bits(&l.adapter.b)).collect();
        train_task(&mut model, &suite[0], &config).unwrap();
        for (layer, before) in model.layers().iter().zip(&base_bits) {
            assert_eq!(&bits(&layer.base), before, "base moved in {}", layer.name);
        }
        // ...while the adapters did move.
        let moved = model
            .layers()
            .iter()
            .zip(&adapter_bits)
            .any(|(l, before)| &bits(&l.adapter.b) != before);
        assert!(moved);
    }

    #[test]
    fn finish_task_preserves_forward_and_advances_state() {
        let config = TrainConfig {
            epochs: 4,
            ..TrainConfig::default()
        };
        let suite = tiny_suite(13, 20.0);
        let mut model = ToyModel::new(21, 4, &config).unwrap();
        train_task(&mut model, &suite[0], &config).unwrap();
        let probe: Vec<&ToySample> = suite[0].heldout().iter().collect();
        let inputs = batch_matrix(&probe, model.d_in()).unwrap();
        let before = model.forward(&inputs).unwrap();
        let old_a = bits(&model.trunk[0].adapter.a);
        finish_task(&mut model, &config).unwrap();
        let after = model.forward(&inputs).unwrap();
        for (b, a) in [
            (&before.style_logits, &after.style_logits),
            (&before.content_logits, &after.content_logits),
        ] {
            let diff: f64 = b
                .as_slice()
                .iter()
                .zip(a.as_slice())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(diff <= 1e-10, "forward drifted by {diff}");
        }
        assert_eq!(model.tasks_completed, 1);
        for layer in model.layers() {
            assert_eq!(layer.stack.task_count, 1);
            assert_eq!(layer.adapter.b.max_abs(), 0.0);
        }
        // Reinitialized adapters draw a fresh direction matrix.
        assert_ne!(bits(&model.trunk[0].adapter.a), old_a);
    }

    #[test]
    fn first_task_trajectories_are_bit_identical_across_modes() {
        let plain = TrainConfig {
            epochs: 5,
            mode: BaselineMode::PlainLora,
            ..TrainConfig::default()
        };
        let reg = TrainConfig {
            mode: BaselineMode::RegLora,
            ..plain.clone()
        };
        let suite = tiny_suite(17, 20.0);
        let mut model_plain = ToyModel::new(21, 4, &plain).unwrap();
        let mut model_reg = ToyModel::new(21, 4, &reg).unwrap();
        train_task(&mut model_plain, &suite[0], &plain).unwrap();
        train_task(&mut model_reg, &suite[0], &reg).unwrap();
        for (a, b) in model_plain.layers().iter().zip(model_reg.layers().iter()) {
            assert_eq!(bits(&a.adapter.a), bits(&b.adapter.a));
            assert_eq!(bits(&a.adapter.b), bits(&b.adapter.b));
        }
    }

    #[test]
    fn replays_are_bit_identical() {
        let config = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let suite = tiny_suite(19, 20.0);
        let a = run_sequence(&suite, &config).unwrap();
        let b = run_sequence(&suite, &config).unwrap();
        assert_eq!(a.joint.rows(), b.joint.rows());
        for (x, y) in a.model.layers().iter().zip(b.model.layers().iter()) {
            assert_eq!(bits(&x.base), bits(&y.base));
        }
    }

    #[test]
    fn run_sequence_emits_triangular_matrices() {
        let config = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let suite = tiny_suite(23, 20.0);
        let outcome = run_sequence(&suite, &config).unwrap();
        assert_eq!(outcome.joint.task_count(), 2);
        assert_eq!(outcome.logs.len(), 2);
        assert_eq!(outcome.model.tasks_completed, 2);
        for row in 0..2 {
            assert_eq!(outcome.style.rows()[row].len(), row + 1);
        }
        // One checkpoint per boundary, counting up.
        assert_eq!(outcome.checkpoints.len(), 2);
        for (j, cp) in outcome.checkpoints.iter().enumerate() {
            assert_eq!(cp.tasks_completed, j + 1);
        }
    }

    #[test]
    fn single_task_training_reaches_heldout_accuracy() {
        // Learnability bound: the default budget must solve one task.
        let config = TrainConfig::default();
        for seed in 0..3 {
            let suite = generate_task_suite(&SuiteConfig {
                n_tasks: 1,
                seed,
                ..SuiteConfig::default()
            })
            .unwrap();
            let outcome = run_sequence(&suite, &config).unwrap();
            let joint = outcome.joint.get(0, 0);
            assert!(joint >= 95.0, "seed {seed}: heldout joint {joint}");
        }
    }

    #[test]
    fn divergence_is_detected_and_reported() {
        // Runaway regularization: with the gradient clip disabled, the L1
        // penalty's constant-magnitude gradients feed A and B through each
        // other and the factors grow without bound — the very failure mode
        // the clip exists to tame. The trainer must report it, not emit
        // garbage numbers.
        let config = TrainConfig {
            learning_rate: 10.0,
            epochs: 50,
            grad_clip: f64::INFINITY,
            mode: BaselineMode::RegLora,
            reg: RegConfig {
                lambda: 1e8,
                ..RegConfig::default()
            },
            ..TrainConfig::default()
        };
        let suite = tiny_suite(29, 20.0);
        let mut model = ToyModel::new(21, 4, &config).unwrap();
        // Seed nonzero adapters and an accumulated mask so the penalty is
        // live from the first batch.
        let mut rng = derived_rng(13, 5);
        for layer in model.layers_mut() {
            let (rows, cols) = layer.adapter.b.shape();
            layer.adapter.b = Matrix::from_fn(rows, cols, |_, _| rng.random_range(0.25..=1.0));
            let delta = delta_w(&layer.adapter).unwrap();
            let mask = select_key_elements(&delta, 25.0).unwrap();
            layer.stack.accumulate(&mask).unwrap();
        }
        match train_task(&mut model, &suite[0], &config) {
            Err(TrainError::Diverged { .. }) | Err(TrainError::Matrix(MatrixError::NonFinite { .. })) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Independent oracle: central differences through task_loss on a
        // model with trained-looking adapters and an active mask stack.
        let config = TrainConfig {
            mode: BaselineMode::RegLora,
            ..TrainConfig::default()
        };
        let suite = tiny_suite(31, 20.0);
        let mut model = ToyModel::new(21, 4, &config).unwrap();
        // Give B nonzero entries and accumulate a mask so every loss term is
        // active, then nudge; keep |dW| entries away from the |.|-kink.
        let mut rng = derived_rng(99, 7);
        for layer in model.layers_mut() {
            let (rows, cols) = layer.adapter.b.shape();
            layer.adapter.b = Matrix::from_fn(rows, cols, |_, _| rng.random_range(0.25..=1.0));
            let delta = delta_w(&layer.adapter).unwrap();
            let mask = select_key_elements(&delta, 25.0).unwrap();
            layer.stack.accumulate(&mask).unwrap();
        }
        let batch = &suite[0].samples[..12];
        let h = 1e-6;
        let entries = [0usize, 3, 7, 11, 19];
        let mut checked = 0;
        for layer_idx in 0..model.layers().len() {
            for &which in &[0usize, 1] {
                for flat in entries {
                    let analytic = {
                        let refs: Vec<&ToySample> = batch.iter().collect();
                        let (_, grads) = batch_grads(&model, &refs, &config).unwrap();
                        let g = if which == 0 {
                            &grads[layer_idx].a
                        } else {
                            &grads[layer_idx].b
                        };
                        g.as_slice()[flat % g.as_slice().len()]
                    };
                    let idx = |m: &Matrix| flat % m.as_slice().len();
                    let probe = |delta: f64| -> f64 {
                        let mut m = model.clone();
                        {
                            let layers = m.layers_mut();
                            let target = if which == 0 {
                                &mut layers.into_iter().nth(layer_idx).unwrap().adapter.a
                            } else {
                                &mut layers.into_iter().nth(layer_idx).unwrap().adapter.b
                            };
                            let i = idx(target);
                            target.as_mut_slice()[i] += delta;
                        }
                        task_loss(&m, batch, &config).unwrap().total
                    };
                    let numeric = (probe(h) - probe(-h)) / (2.0 * h);
                    let scale = analytic.abs().max(numeric.abs()).max(1.0);
                    assert!(
                        (analytic - numeric).abs() / scale <= 1e-4,
                        "layer {layer_idx} which {which} flat {flat}: {analytic} vs {numeric}"
                    );
                    checked += 1;
                }
            }
        }
        assert_eq!(checked, model.layers().len() * 2 * entries.len());
    }
}
