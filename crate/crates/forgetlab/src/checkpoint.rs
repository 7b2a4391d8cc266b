//! Versioned on-disk container for trained models and task suites.
//!
//! Every file begins with the ASCII magic line `FLAB1` followed by one JSON
//! document. The same envelope carries either a model checkpoint (the merged
//! weight per layer plus its accumulated protection counts) or a generated
//! task suite, so run artifacts are self-describing and a reader can reject
//! foreign or corrupt files before trusting any numbers in them.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{Matrix, MatrixError};
use crate::reglora::{init_adapter, RegMaskStack};
use crate::toy_tasks::{SuiteConfig, ToyTask};
use crate::trainer::{adapter_seed, LoraLayer, ToyModel, TrainConfig};

/// Leading bytes of every container file.
pub const MAGIC: &[u8; 6] = b"FLAB1\n";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing or wrong magic header (expected FLAB1)")]
    BadMagic,
    #[error("payload is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("payload failed validation: {0}")]
    Invalid(String),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// One adapter-carrying layer at a task boundary: the merged weight the
/// model computes with and the mask counts protecting it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCheckpoint {
    pub name: String,
    /// Stable per-layer id, preserved so a restored model re-derives the
    /// same adapter seeds the live model would have used.
    pub ordinal: u64,
    /// Merged weight: frozen base plus every completed task's update.
    pub w: Matrix,
    /// Accumulated key-position counts, same shape as `w`.
    pub r_sum: Matrix,
    /// Number of masks accumulated into `r_sum`.
    pub task_count: usize,
}

/// Model state captured at a task boundary, after merge and re-init.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub layers: Vec<LayerCheckpoint>,
    pub config: TrainConfig,
    pub tasks_completed: usize,
}

impl ModelCheckpoint {
    /// Capture `model` as it stands. Taken right after a task merge, the
    /// fresh adapter is zero and `w` equals the merged base exactly.
    pub fn from_model(model: &ToyModel, config: &TrainConfig) -> Result<Self, CheckpointError> {
        let layers = model
            .layers()
            .into_iter()
            .map(|layer| {
                Ok(LayerCheckpoint {
                    name: layer.name.clone(),
                    ordinal: layer.ordinal,
                    w: layer
                        .effective_weight()
                        .map_err(|e| CheckpointError::Invalid(e.to_string()))?,
                    r_sum: layer.stack.r_sum.clone(),
                    task_count: layer.stack.task_count,
                })
            })
            .collect::<Result<Vec<_>, CheckpointError>>()?;
        Ok(ModelCheckpoint {
            layers,
            config: config.clone(),
            tasks_completed: model.tasks_completed,
        })
    }

    pub fn validate(&self) -> Result<(), CheckpointError> {
        if self.layers.len() < 3 {
            return Err(CheckpointError::Invalid(format!(
                "checkpoint has {} layers; a model is a trunk plus two heads",
                self.layers.len()
            )));
        }
        self.config
            .validate()
            .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        let trunk_end = self.layers.len() - 2;
        for l in 1..trunk_end {
            if self.layers[l].w.cols() != self.layers[l - 1].w.rows() {
                return Err(CheckpointError::Invalid(format!(
                    "layer {} expects width {} but {} produces {}",
                    self.layers[l].name,
                    self.layers[l].w.cols(),
                    self.layers[l - 1].name,
                    self.layers[l - 1].w.rows()
                )));
            }
        }
        let hidden = self.layers[trunk_end - 1].w.rows();
        for head in &self.layers[trunk_end..] {
            if head.w.cols() != hidden {
                return Err(CheckpointError::Invalid(format!(
                    "head {} expects width {} but the trunk produces {}",
                    head.name,
                    head.w.cols(),
                    hidden
                )));
            }
        }
        for layer in &self.layers {
            layer.w.validate()?;
            layer.r_sum.validate()?;
            if layer.w.shape() != layer.r_sum.shape() {
                return Err(CheckpointError::Invalid(format!(
                    "layer {}: w is {:?} but r_sum is {:?}",
                    layer.name,
                    layer.w.shape(),
                    layer.r_sum.shape()
                )));
            }
            if layer.r_sum.as_slice().iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
                return Err(CheckpointError::Invalid(format!(
                    "layer {}: r_sum entries must be non-negative counts",
                    layer.name
                )));
            }
        }
        Ok(())
    }

    /// Rebuild the live model this checkpoint captured.
    ///
    /// A capture happens right after a task merge, when the fresh adapter
    /// contributes nothing, so restoring `w` as the frozen base and
    /// re-deriving the adapter at the recorded generation reproduces the
    /// model exactly — evaluation and continued training agree with a run
    /// that never touched disk.
    pub fn to_model(&self) -> Result<ToyModel, CheckpointError> {
        self.validate()?;
        let rebuild = |cp: &LayerCheckpoint| LoraLayer {
            name: cp.name.clone(),
            ordinal: cp.ordinal,
            base: cp.w.clone(),
            adapter: init_adapter(
                cp.w.cols(),
                cp.w.rows(),
                self.config.rank,
                adapter_seed(self.config.seed, cp.ordinal, self.tasks_completed as u64),
            ),
            stack: RegMaskStack {
                r_sum: cp.r_sum.clone(),
                task_count: cp.task_count,
            },
        };
        let trunk_end = self.layers.len() - 2;
        Ok(ToyModel {
            trunk: self.layers[..trunk_end].iter().map(rebuild).collect(),
            style_head: rebuild(&self.layers[trunk_end]),
            content_head: rebuild(&self.layers[trunk_end + 1]),
            tasks_completed: self.tasks_completed,
        })
    }
}

/// A generated task suite together with the config that produced it, so a
/// training run can verify it is consuming what it thinks it is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuiteFile {
    pub config: SuiteConfig,
    pub tasks: Vec<ToyTask>,
}

impl TaskSuiteFile {
    pub fn validate(&self) -> Result<(), CheckpointError> {
        self.config
            .validate()
            .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        if self.tasks.is_empty() {
            return Err(CheckpointError::Invalid("task suite is empty".into()));
        }
        for task in &self.tasks {
            for sample in &task.samples {
                if sample.x.len() != self.config.d_in {
                    return Err(CheckpointError::Invalid(format!(
                        "task {}: sample width {} does not match d_in {}",
                        task.index,
                        sample.x.len(),
                        self.config.d_in
                    )));
                }
                if sample.content >= self.config.n_content {
                    return Err(CheckpointError::Invalid(format!(
                        "task {}: content label {} out of range",
                        task.index, sample.content
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Everything a container file can hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Checkpoint(ModelCheckpoint),
    TaskSuite(TaskSuiteFile),
}

impl Payload {
    pub fn validate(&self) -> Result<(), CheckpointError> {
        match self {
            Payload::Checkpoint(c) => c.validate(),
            Payload::TaskSuite(t) => t.validate(),
        }
    }
}

/// Write `payload` to `path` behind the magic header. Validates first so a
/// bad payload never produces a file at all.
pub fn save(path: &Path, payload: &Payload) -> Result<(), CheckpointError> {
    payload.validate()?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    serde_json::to_writer(&mut out, payload)?;
    out.flush()?;
    Ok(())
}

/// Read a container file, checking magic, JSON shape, and payload
/// invariants before returning.
pub fn load(path: &Path) -> Result<Payload, CheckpointError> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; MAGIC.len()];
    match input.read_exact(&mut magic) {
        Ok(()) if &magic == MAGIC => {}
        Ok(()) => return Err(CheckpointError::BadMagic),
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Err(CheckpointError::BadMagic),
        Err(e) => return Err(CheckpointError::Io(e)),
    }
    let payload: Payload = serde_json::from_reader(input)?;
    payload.validate()?;
    Ok(payload)
}
