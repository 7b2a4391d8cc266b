//! Synthetic task sequences that forget on purpose.
//!
//! Each task is a small classification problem with two labels per sample:
//! a *style* (one of the five answer styles) and a *content* class. The
//! style is readable off a dedicated one-hot input channel shared by all
//! tasks; the content label is defined by a task-specific random linear map
//! over the task's own block of the remaining input dimensions, around a
//! task-specific cluster center. That split mirrors the two ways a
//! sequentially trained model degrades:
//!
//! * **Superficial forgetting** — every task is dominated by one style, so
//!   without mixing, a model can score perfectly by predicting the dominant
//!   style and never reading the style channel; the next task then silently
//!   repurposes that shortcut. Mixing a percentage of samples into the other
//!   styles (the same partition law the dataset diversifier uses) keeps the
//!   channel supervised.
//! * **Essential forgetting** — each task's content rule lives on its own
//!   feature block and cluster, so nothing about the data forces tasks to
//!   fight over weights; yet an unconstrained trainer still overwrites the
//!   weights serving old blocks, and content knowledge degrades unless the
//!   trainer protects them.
//!
//! Generation is fully deterministic from the suite seed.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asd::plan_partition;
use crate::matrix::Matrix;
use crate::qa_format::QuestionFormat;
use crate::rng::{derived_rng, salt};

/// Width of the style one-hot channel (one dimension per answer style).
pub const STYLE_DIMS: usize = 5;
/// Magnitude written into the active style dimension. Sized so the style
/// signal survives mixing with the unit-variance content features after a
/// random trunk projection; rank-limited adapters cannot amplify a channel
/// they can barely see.
pub const STYLE_CHANNEL_SCALE: f64 = 6.0;
/// Required score gap between the best and second-best content class; keeps
/// labels unambiguous so single-task training can reach high accuracy.
pub const CONTENT_MARGIN: f64 = 4.0;
/// Norm of each task's content-feature center. Tasks occupy separated
/// regions of input space — as real task sequences draw on different
/// domains — so weights serving an old task's region can in principle be
/// kept while a new region is learned; forgetting is then a property of the
/// trainer, not a law of the data.
pub const TASK_CENTER_SCALE: f64 = 6.0;
/// Smallest content block a task may own. Each task's center and labeling
/// map live on one block of the content dimensions, cycling when tasks
/// outnumber blocks: tasks draw on distinct feature subspaces, so one
/// task's key weights are not automatically the next task's battleground —
/// overlap is a choice the trainer makes, not a property of the data.
pub const MIN_BLOCK_DIMS: usize = 4;

#[derive(Debug, Error)]
pub enum ToyTaskError {
    #[error("invalid task suite config: {0}")]
    BadConfig(String),
}

/// Shape of a synthetic task suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub n_tasks: usize,
    pub samples_per_task: usize,
    /// Total input width: the five style dimensions plus content features.
    pub d_in: usize,
    /// Number of content classes.
    pub n_content: usize,
    /// Percentage of each task's samples assigned a non-dominant style.
    pub style_mix_percent: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            n_tasks: 3,
            samples_per_task: 240,
            d_in: 21,
            n_content: 4,
            style_mix_percent: 20.0,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    /// Content feature width (input minus the style channel).
    pub fn content_dims(&self) -> usize {
        self.d_in.saturating_sub(STYLE_DIMS)
    }

    /// Number of content blocks the tasks cycle through.
    pub fn n_blocks(&self) -> usize {
        (self.content_dims() / MIN_BLOCK_DIMS).max(1).min(self.n_tasks)
    }

    /// Width of each task's content block.
    pub fn block_len(&self) -> usize {
        self.content_dims() / self.n_blocks()
    }

    pub fn validate(&self) -> Result<(), ToyTaskError> {
        fn fail(message: impl Into<String>) -> Result<(), ToyTaskError> {
            Err(ToyTaskError::BadConfig(message.into()))
        }
        if self.n_tasks == 0 {
            return fail("n_tasks must be positive");
        }
        if self.samples_per_task < 5 {
            return fail("samples_per_task must be at least 5 so a heldout fifth exists");
        }
        if self.d_in <= STYLE_DIMS {
            return fail(format!(
                "d_in must exceed the {STYLE_DIMS} style dimensions"
            ));
        }
        if self.n_content < 2 {
            return fail("n_content must be at least 2");
        }
        if self.block_len() < self.n_content {
            return fail(format!(
                "each of the {} content blocks is only {} dims wide; {} classes \
                 need that many orthogonal directions — widen d_in or reduce n_tasks",
                self.n_blocks(),
                self.block_len(),
                self.n_content
            ));
        }
        if !self.style_mix_percent.is_finite()
            || !(0.0..=100.0).contains(&self.style_mix_percent)
        {
            return fail(format!(
                "style_mix_percent {} is outside [0, 100]",
                self.style_mix_percent
            ));
        }
        Ok(())
    }
}

/// One labeled input vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySample {
    /// Input: style one-hot in the first five dimensions, content features
    /// after.
    pub x: Vec<f64>,
    pub style: QuestionFormat,
    /// Content class in `0..n_content`.
    pub content: usize,
}

/// One task of a suite: samples plus the generating metadata needed to
/// audit the labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub index: usize,
    pub dominant_style: QuestionFormat,
    /// First content dimension of the task's block.
    pub block_start: usize,
    /// The task's `n_content × block_len` labeling map; content labels are
    /// the argmax of `content_map · (x_block − center_block)`. Rows are
    /// mutually orthogonal with norm `√block_len`, so every class pair is
    /// equally separable.
    pub content_map: Matrix,
    /// The task's content-feature mean: zero outside the block,
    /// `TASK_CENTER_SCALE` in norm.
    pub center: Vec<f64>,
    pub samples: Vec<ToySample>,
}

impl ToyTask {
    /// The content dimensions this task's center and labels live on,
    /// relative to the content features (not the full input).
    pub fn block(&self) -> std::ops::Range<usize> {
        self.block_start..self.block_start + self.content_map.cols()
    }
}

impl ToyTask {
    /// Heldout slice: the final fifth of the samples, never trained on.
    pub fn heldout(&self) -> &[ToySample] {
        let split = self.train_len();
        &self.samples[split..]
    }

    /// Training slice: everything before the heldout fifth.
    pub fn train(&self) -> &[ToySample] {
        &self.samples[..self.train_len()]
    }

    fn train_len(&self) -> usize {
        self.samples.len() - self.samples.len() / 5
    }
}

/// Generate the full task sequence described by `config`.
pub fn generate_task_suite(config: &SuiteConfig) -> Result<Vec<ToyTask>, ToyTaskError> {
    config.validate()?;
    (0..config.n_tasks).map(|t| generate_task(config, t)).collect()
}

fn generate_task(config: &SuiteConfig, task_idx: usize) -> Result<ToyTask, ToyTaskError> {
    let n = config.samples_per_task;
    let dc = config.content_dims();
    let dominant = QuestionFormat::ALL[task_idx % STYLE_DIMS];

    let n_blocks = config.n_blocks();
    let block_len = config.block_len();
    let block_start = (task_idx % n_blocks) * block_len;

    let mut map_rng = derived_rng(config.seed, salt("toy-content-map", task_idx as u64, 0));
    let content_map =
        orthonormal_rows(config.n_content, block_len, &mut map_rng).scale((block_len as f64).sqrt());

    let mut center_rng = derived_rng(config.seed, salt("toy-center", task_idx as u64, 0));
    let center = {
        let raw: Vec<f64> =
            (0..block_len).map(|_| center_rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let mut full = vec![0.0; dc];
        for (slot, v) in full[block_start..block_start + block_len].iter_mut().zip(raw) {
            *slot = v * TASK_CENTER_SCALE / norm;
        }
        full
    };

    // Style assignment reuses the diversification partition law: the
    // dominant style plays the retained role, mixed styles fill quotas.
    let plan_seed = salt("toy-style-seed", config.seed, task_idx as u64);
    let plan = plan_partition(n, config.style_mix_percent, plan_seed, dominant)
        .map_err(|e| ToyTaskError::BadConfig(e.to_string()))?;

    let samples = (0..n)
        .map(|i| {
            let mut rng = derived_rng(config.seed, salt("toy-sample", task_idx as u64, i as u64));
            let (offsets, content) = draw_content(&content_map, block_start, dc, &mut rng)?;
            let style = plan.assignments[i].unwrap_or(dominant);
            let mut x = vec![0.0; config.d_in];
            x[style.index()] = STYLE_CHANNEL_SCALE;
            for (slot, (c, z)) in x[STYLE_DIMS..].iter_mut().zip(center.iter().zip(&offsets)) {
                *slot = c + z;
            }
            Ok(ToySample { x, style, content })
        })
        .collect::<Result<Vec<_>, ToyTaskError>>()?;

    Ok(ToyTask {
        index: task_idx,
        dominant_style: dominant,
        block_start,
        content_map,
        center,
        samples,
    })
}

/// Draw `n` mutually orthogonal unit rows of width `d` — a slice of a
/// random rotation — so every pair of content classes is equally separable.
/// Plain Gaussian rows occasionally land nearly parallel, which makes the
/// labeling margin unreachable for unlucky seeds.
fn orthonormal_rows<R: Rng>(n: usize, d: usize, rng: &mut R) -> Matrix {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> =
            (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for prev in &rows {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (vi, pi) in v.iter_mut().zip(prev) {
                *vi -= dot * pi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue; // essentially dependent draw; discard and redraw
        }
        for vi in &mut v {
            *vi /= norm;
        }
        rows.push(v);
    }
    Matrix::from_fn(n, d, |r, c| rows[r][c])
}

/// Draw center-relative content offsets until the labeling margin holds.
/// Labels depend only on the offsets inside the task's block — off-block
/// dimensions are pure noise — so each task's classes stay balanced no
/// matter where its center sits.
fn draw_content<R: Rng>(
    content_map: &Matrix,
    block_start: usize,
    dc: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, usize), ToyTaskError> {
    for _ in 0..10_000 {
        let offsets: Vec<f64> = (0..dc).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut best = (0, f64::NEG_INFINITY);
        let mut second = f64::NEG_INFINITY;
        for class in 0..content_map.rows() {
            let score: f64 = (0..content_map.cols())
                .map(|k| content_map.get(class, k) * offsets[block_start + k])
                .sum();
            if score > best.1 {
                second = best.1;
                best = (class, score);
            } else if score > second {
                second = score;
            }
        }
        if best.1 - second >= CONTENT_MARGIN {
            return Ok((offsets, best.0));
        }
    }
    Err(ToyTaskError::BadConfig(
        "content margin unreachable; map may be degenerate".to_string(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn suite_is_deterministic() {
        let config = SuiteConfig::default();
        let a = generate_task_suite(&config).unwrap();
        let b = generate_task_suite(&config).unwrap();
        assert_eq!(a, b);
        let c = generate_task_suite(&SuiteConfig {
            seed: 1,
            ..config
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn suite_has_documented_shape() {
        let config = SuiteConfig {
            n_tasks: 7,
            ..SuiteConfig::default()
        };
        let suite = generate_task_suite(&config).unwrap();
        assert_eq!(suite.len(), 7);
        let dc = config.content_dims();
        let n_blocks = config.n_blocks();
        let block_len = config.block_len();
        for (t, task) in suite.iter().enumerate() {
            assert_eq!(task.index, t);
            assert_eq!(task.dominant_style, QuestionFormat::ALL[t % STYLE_DIMS]);
            assert_eq!(task.samples.len(), config.samples_per_task);
            assert_eq!(task.content_map.shape(), (config.n_content, block_len));
            assert_eq!(task.block_start, (t % n_blocks) * block_len);
            assert!(task.block().end <= dc);
            for s in &task.samples {
                assert_eq!(s.x.len(), config.d_in);
                assert!(s.content < config.n_content);
            }
        }
        // Dominant styles wrap around after five tasks; blocks after n_blocks.
        assert_eq!(suite[5].dominant_style, suite[0].dominant_style);
        assert_eq!(suite[n_blocks].block_start, suite[0].block_start);
    }

    #[test]
    fn style_channel_is_one_hot_for_the_label() {
        let suite = generate_task_suite(&SuiteConfig::default()).unwrap();
        for task in &suite {
            for s in &task.samples {
                for (dim, &v) in s.x[..STYLE_DIMS].iter().enumerate() {
                    let expected = if dim == s.style.index() {
                        STYLE_CHANNEL_SCALE
                    } else {
                        0.0
                    };
                    assert_eq!(v, expected);
                }
            }
        }
    }

    #[test]
    fn style_mix_matches_partition_quotas() {
        let config = SuiteConfig {
            samples_per_task: 240,
            style_mix_percent: 20.0,
            ..SuiteConfig::default()
        };
        let suite = generate_task_suite(&config).unwrap();
        for task in &suite {
            let mut counts: BTreeMap<QuestionFormat, usize> = BTreeMap::new();
            for s in &task.samples {
                *counts.entry(s.style).or_insert(0) += 1;
            }
            // 20% of 240 = 48 mixed, split 12 per non-dominant style.
            assert_eq!(counts[&task.dominant_style], 192);
            for style in QuestionFormat::ALL {
                if style != task.dominant_style {
                    assert_eq!(counts[&style], 12, "style {style}");
                }
            }
        }
    }

    #[test]
    fn zero_mix_keeps_every_sample_dominant() {
        let config = SuiteConfig {
            style_mix_percent: 0.0,
            ..SuiteConfig::default()
        };
        let suite = generate_task_suite(&config).unwrap();
        for task in &suite {
            assert!(task.samples.iter().all(|s| s.style == task.dominant_style));
        }
    }

    #[test]
    fn content_labels_match_map_argmax_with_margin() {
        let suite = generate_task_suite(&SuiteConfig::default()).unwrap();
        for task in &suite {
            let block = task.block();
            for s in &task.samples {
                let features = &s.x[STYLE_DIMS..];
                let scores: Vec<f64> = (0..task.content_map.rows())
                    .map(|class| {
                        block
                            .clone()
                            .enumerate()
                            .map(|(k, dim)| {
                                task.content_map.get(class, k)
                                    * (features[dim] - task.center[dim])
                            })
                            .sum()
                    })
                    .collect();
                let mut order: Vec<usize> = (0..scores.len()).collect();
                order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
                assert_eq!(order[0], s.content);
                assert!(scores[order[0]] - scores[order[1]] >= CONTENT_MARGIN);
            }
        }
    }

    #[test]
    fn task_blocks_are_disjoint_until_they_cycle() {
        let config = SuiteConfig::default();
        let suite = generate_task_suite(&config).unwrap();
        for a in 0..suite.len() {
            for b in (a + 1)..suite.len() {
                let (ra, rb) = (suite[a].block(), suite[b].block());
                let overlap = ra.start < rb.end && rb.start < ra.end;
                assert!(!overlap, "tasks {a} and {b} share content dimensions");
            }
        }
    }

    #[test]
    fn content_maps_differ_between_tasks() {
        let suite = generate_task_suite(&SuiteConfig::default()).unwrap();
        assert_ne!(suite[0].content_map, suite[1].content_map);
    }

    #[test]
    fn content_map_rows_are_orthogonal_with_documented_norm() {
        let config = SuiteConfig::default();
        let suite = generate_task_suite(&config).unwrap();
        let expected = (config.block_len() as f64).sqrt();
        for task in &suite {
            let m = &task.content_map;
            for a in 0..m.rows() {
                for b in a..m.rows() {
                    let dot: f64 = (0..m.cols()).map(|k| m.get(a, k) * m.get(b, k)).sum();
                    let want = if a == b { expected * expected } else { 0.0 };
                    assert!(
                        (dot - want).abs() <= 1e-9,
                        "rows {a},{b}: dot {dot} want {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn task_centers_have_the_documented_norm_and_differ() {
        let suite = generate_task_suite(&SuiteConfig::default()).unwrap();
        for task in &suite {
            let norm = task.center.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - TASK_CENTER_SCALE).abs() <= 1e-9);
            let block = task.block();
            for (dim, &v) in task.center.iter().enumerate() {
                if !block.contains(&dim) {
                    assert_eq!(v, 0.0, "center leaks outside its block at dim {dim}");
                }
            }
        }
        let dist: f64 = suite[0]
            .center
            .iter()
            .zip(&suite[1].center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dist > TASK_CENTER_SCALE / 2.0, "centers too close: {dist}");
    }

    #[test]
    fn heldout_is_the_last_fifth() {
        let config = SuiteConfig::default();
        let suite = generate_task_suite(&config).unwrap();
        let task = &suite[0];
        assert_eq!(task.heldout().len(), config.samples_per_task / 5);
        assert_eq!(
            task.train().len() + task.heldout().len(),
            config.samples_per_task
        );
        assert_eq!(task.samples[task.train().len()..], *task.heldout());
    }

    #[test]
    fn config_validation_rejects_degenerate_shapes() {
        let bad = [
            SuiteConfig {
                n_tasks: 0,
                ..SuiteConfig::default()
            },
            SuiteConfig {
                samples_per_task: 4,
                ..SuiteConfig::default()
            },
            SuiteConfig {
                d_in: 5,
                ..SuiteConfig::default()
            },
            SuiteConfig {
                n_content: 1,
                ..SuiteConfig::default()
            },
            SuiteConfig {
                style_mix_percent: 120.0,
                ..SuiteConfig::default()
            },
        ];
        for config in bad {
            assert!(generate_task_suite(&config).is_err(), "{config:?}");
        }
    }
}
