//! forgetlab: a desk-scale laboratory for studying forgetting mitigation in
//! continual instruction tuning.
//!
//! Two mechanisms live here side by side:
//!
//! * **Answer-style diversification** — [`asd`] rewrites a fixed share of a
//!   single-format instruction dataset into four alternative question
//!   formats ([`qa_format`]), delegating text rewrites to a pluggable
//!   [`rewriter`] backend.
//! * **Regularized low-rank adapters** — [`reglora`] trains per-layer LoRA
//!   updates, marks each task's highest-magnitude update positions, and
//!   penalizes later tasks for reusing them; [`trainer`] drives the sequence
//!   over [`toy_tasks`] and [`metrics`] aggregates the outcome.
//!
//! The crate ships a `forgetlab` CLI binary (`asd`, `synth`, `train`,
//! `report`, `eval`) and a Python extension in the companion bindings crate.

pub mod asd;
pub mod checkpoint;
pub mod config;
pub mod matrix;
pub mod metrics;
pub mod qa_format;
pub mod reglora;
pub mod rewriter;
pub mod toy_tasks;
pub mod trainer;

pub(crate) mod rng;
