//! Low-rank adapters with accumulated position regularization.
//!
//! A linear layer's frozen base weight `W` (k×d) carries a trainable adapter
//! pair `A` (r×d), `B` (k×r) whose product is the weight update
//! `ΔW = B×A` — no rank scaling factor is applied (a configurable scale
//! exists for experimentation but defaults to 1).
//!
//! After a task finishes, the top `M`% of `|ΔW|` entries are marked as that
//! task's key elements; the marks from all completed tasks accumulate
//! additively into a per-layer stack. While training later tasks, the loss
//! gains `λ · Σ |ΔW| ⊙ R_sum` (entrywise, summed to a scalar), which pushes
//! new updates away from previously-claimed positions. Overlapping marks
//! accumulate, so twice-claimed positions are penalized twice as hard.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{round_ties_even_usize, Matrix, MatrixError};
use crate::rng::{derived_rng, salt};

#[derive(Debug, Error)]
pub enum RegLoraError {
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error("m_percent must be in (0, 100], got {0}")]
    BadMPercent(f64),
    #[error("lambda must be non-negative and finite, got {0}")]
    BadLambda(f64),
    #[error("adapter dims inconsistent: A is {a_rows}x{a_cols}, B is {b_rows}x{b_cols}")]
    InconsistentAdapter {
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },
    #[error("matrix with {len} entries is too small for percentile stats (need >= 100)")]
    TooSmallForStats { len: usize },
    #[error("mask stack is {expected}, got mask {got}")]
    MaskShape { expected: String, got: String },
}

/// Regularization configuration shared by trainer and CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegConfig {
    /// Percentage of entries marked as key elements per task.
    pub m_percent: f64,
    /// Weight of the accumulated-position penalty.
    pub lambda: f64,
    /// Masks and stacks are kept per layer; the only supported mode.
    pub per_layer: bool,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            m_percent: 2.0,
            lambda: 2.5e3,
            per_layer: true,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<(), RegLoraError> {
        if !(self.m_percent > 0.0 && self.m_percent <= 100.0) {
            return Err(RegLoraError::BadMPercent(self.m_percent));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(RegLoraError::BadLambda(self.lambda));
        }
        Ok(())
    }
}

/// Trainable low-rank pair modeling `ΔW = scale · B×A` on a frozen base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// r×d.
    pub a: Matrix,
    /// k×r; zero-initialized so the adapter starts as the identity update.
    pub b: Matrix,
    /// Update scale; 1 keeps the plain `B×A` form.
    pub scale: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.b.rows()
    }

    fn check_consistent(&self) -> Result<(), RegLoraError> {
        if self.b.cols() != self.a.rows() {
            return Err(RegLoraError::InconsistentAdapter {
                a_rows: self.a.rows(),
                a_cols: self.a.cols(),
                b_rows: self.b.rows(),
                b_cols: self.b.cols(),
            });
        }
        Ok(())
    }
}

/// Fresh adapter: `A ~ U[−1/√d, 1/√d]` from a seeded stream, `B = 0`, so the
/// initial update is exactly zero. Ranks above `min(d,k)` are accepted with a
/// warning to stderr (they waste capacity but break nothing).
pub fn init_adapter(d: usize, k: usize, r: usize, seed: u64) -> LoraAdapter {
    assert!(d >= 1 && k >= 1 && r >= 1, "adapter dims must be >= 1");
    if r > d.min(k) {
        eprintln!("warning: adapter rank {r} exceeds min(d,k) = {}", d.min(k));
    }
    let bound = 1.0 / (d as f64).sqrt();
    let mut rng = derived_rng(seed, salt("lora-init", d as u64, k as u64));
    let a = Matrix::from_fn(r, d, |_, _| rng.random_range(-bound..=bound));
    LoraAdapter {
        a,
        b: Matrix::zeros(k, r),
        scale: 1.0,
    }
}

/// The weight update `scale · B×A` (k×d).
pub fn delta_w(adapter: &LoraAdapter) -> Result<Matrix, RegLoraError> {
    adapter.check_consistent()?;
    let prod = adapter.b.matmul(&adapter.a)?;
    Ok(if adapter.scale == 1.0 {
        prod
    } else {
        prod.scale(adapter.scale)
    })
}

/// `W + ΔW`, leaving `W` untouched.
pub fn merge(w: &Matrix, adapter: &LoraAdapter) -> Result<Matrix, RegLoraError> {
    let dw = delta_w(adapter)?;
    Ok(w.add(&dw)?)
}

/// Binary mask over the `c = max(1, round(M/100 · k·d))` largest-|entry|
/// positions of `dw`; ties broken toward the smaller row-major index.
pub fn select_key_elements(dw: &Matrix, m_percent: f64) -> Result<Matrix, RegLoraError> {
    if !(m_percent > 0.0 && m_percent <= 100.0) {
        return Err(RegLoraError::BadMPercent(m_percent));
    }
    dw.check_finite()?;
    let total = dw.rows() * dw.cols();
    let c = round_ties_even_usize(m_percent / 100.0 * total as f64).max(1);
    let c = c.min(total);

    let entries = dw.as_slice();
    let mut order: Vec<usize> = (0..total).collect();
    // Partial selection: after this, the first c indices are exactly the c
    // best under (|value| descending, index ascending) — a total order, so
    // the selected set is unique even though it is internally unsorted.
    let better = |&x: &usize, &y: &usize| {
        entries[y]
            .abs()
            .partial_cmp(&entries[x].abs())
            .expect("finite entries compare")
            .then(x.cmp(&y))
    };
    if c < total {
        order.select_nth_unstable_by(c - 1, better);
    }

    let mut mask = Matrix::zeros(dw.rows(), dw.cols());
    for &idx in &order[..c] {
        mask.as_mut_slice()[idx] = 1.0;
    }
    Ok(mask)
}

/// Per-layer accumulated key-element marks from completed tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegMaskStack {
    /// k×d; entry = number of completed tasks that claimed the position.
    pub r_sum: Matrix,
    /// Number of masks accumulated so far.
    pub task_count: usize,
}

impl RegMaskStack {
    pub fn new(k: usize, d: usize) -> Self {
        RegMaskStack {
            r_sum: Matrix::zeros(k, d),
            task_count: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.task_count == 0
    }

    /// Add one task's binary mask; overlapping positions accumulate.
    pub fn accumulate(&mut self, mask: &Matrix) -> Result<(), RegLoraError> {
        if mask.shape() != self.r_sum.shape() {
            return Err(RegLoraError::MaskShape {
                expected: format!("{}x{}", self.r_sum.rows(), self.r_sum.cols()),
                got: format!("{}x{}", mask.rows(), mask.cols()),
            });
        }
        self.r_sum.add_scaled(mask, 1.0)?;
        self.task_count += 1;
        Ok(())
    }
}

/// `λ · Σ_pq |ΔW[p,q]| · R_sum[p,q]`; zero when no masks have accumulated.
pub fn reg_loss(
    adapter: &LoraAdapter,
    stack: &RegMaskStack,
    lambda: f64,
) -> Result<f64, RegLoraError> {
    if stack.is_empty() || lambda == 0.0 {
        return Ok(0.0);
    }
    let dw = delta_w(adapter)?;
    if dw.shape() != stack.r_sum.shape() {
        return Err(RegLoraError::MaskShape {
            expected: format!("{}x{}", stack.r_sum.rows(), stack.r_sum.cols()),
            got: format!("{}x{}", dw.rows(), dw.cols()),
        });
    }
    let total: f64 = dw
        .as_slice()
        .iter()
        .zip(stack.r_sum.as_slice())
        .map(|(&w, &r)| w.abs() * r)
        .sum();
    Ok(lambda * total)
}

/// Analytic gradient of [`reg_loss`] with respect to (A, B).
///
/// With `G = λ · sign(ΔW) ⊙ R_sum` (sign(0) = 0, the subgradient choice that
/// leaves untouched positions unconstrained), the chain rule through
/// `ΔW = scale·B×A` gives `dB = scale·G·Aᵀ` and `dA = scale·Bᵀ·G`.
pub fn reg_loss_grad(
    adapter: &LoraAdapter,
    stack: &RegMaskStack,
    lambda: f64,
) -> Result<(Matrix, Matrix), RegLoraError> {
    adapter.check_consistent()?;
    if stack.is_empty() || lambda == 0.0 {
        return Ok((
            Matrix::zeros(adapter.a.rows(), adapter.a.cols()),
            Matrix::zeros(adapter.b.rows(), adapter.b.cols()),
        ));
    }
    let dw = delta_w(adapter)?;
    if dw.shape() != stack.r_sum.shape() {
        return Err(RegLoraError::MaskShape {
            expected: format!("{}x{}", stack.r_sum.rows(), stack.r_sum.cols()),
            got: format!("{}x{}", dw.rows(), dw.cols()),
        });
    }
    let mut g = Matrix::zeros(dw.rows(), dw.cols());
    for (out, (&w, &r)) in g
        .as_mut_slice()
        .iter_mut()
        .zip(dw.as_slice().iter().zip(stack.r_sum.as_slice()))
    {
        *out = lambda * w.signum_or_zero() * r;
    }
    let da = adapter.b.transpose().matmul(&g)?.scale(adapter.scale);
    let db = g.matmul(&adapter.a.transpose())?.scale(adapter.scale);
    Ok((da, db))
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// Magnitude-concentration diagnostic of a weight update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationStats {
    pub top1_mean_abs: f64,
    pub bottom1_mean_abs: f64,
    /// top/bottom; `f64::INFINITY` when the bottom mean is exactly zero.
    pub ratio: f64,
}

/// Mean |entry| over the top-1% and bottom-1% magnitude entries
/// (counts `max(1, round(0.01·k·d))`), plus their ratio.
pub fn update_concentration_stats(dw: &Matrix) -> Result<ConcentrationStats, RegLoraError> {
    let total = dw.rows() * dw.cols();
    if total < 100 {
        return Err(RegLoraError::TooSmallForStats { len: total });
    }
    dw.check_finite()?;
    let mut mags: Vec<f64> = dw.as_slice().iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let c = round_ties_even_usize(0.01 * total as f64).max(1);
    let bottom: f64 = mags[..c].iter().sum::<f64>() / c as f64;
    let top: f64 = mags[total - c..].iter().sum::<f64>() / c as f64;
    let ratio = if bottom == 0.0 {
        f64::INFINITY
    } else {
        top / bottom
    };
    Ok(ConcentrationStats {
        top1_mean_abs: top,
        bottom1_mean_abs: bottom,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        derived_rng(seed, salt("reglora-test", 0, 0))
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn init_is_zero_update_and_deterministic() {
        let ad = init_adapter(4, 3, 2, 7);
        let dw = delta_w(&ad).unwrap();
        assert_eq!(dw.shape(), (3, 4));
        assert!(dw.as_slice().iter().all(|&v| v == 0.0));
        let again = init_adapter(4, 3, 2, 7);
        assert_eq!(ad.a, again.a);
        let bound = 1.0 / (4.0f64).sqrt();
        assert!(ad.a.as_slice().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn minimal_one_by_one_adapter_is_valid() {
        let ad = init_adapter(1, 1, 1, 3);
        assert_eq!(delta_w(&ad).unwrap().shape(), (1, 1));
    }

    #[test]
    fn delta_w_hand_example() {
        let ad = LoraAdapter {
            a: Matrix::from_rows(&[&[2.0, 3.0]]).unwrap(),
            b: Matrix::from_rows(&[&[1.0], &[0.0]]).unwrap(),
            scale: 1.0,
        };
        let dw = delta_w(&ad).unwrap();
        assert_eq!(dw.as_slice(), &[2.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn delta_w_matches_naive_triple_loop() {
        let mut r = rng(11);
        let b = random_matrix(5, 3, &mut r);
        let a = random_matrix(3, 4, &mut r);
        let fast = delta_w(&LoraAdapter {
            a: a.clone(),
            b: b.clone(),
            scale: 1.0,
        })
        .unwrap();
        // Independent naive product with the loops in a different order.
        let mut slow = Matrix::zeros(5, 4);
        for i in 0..5 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += b.get(i, k) * a.get(k, j);
                }
                slow.set(i, j, acc);
            }
        }
        for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn merge_laws() {
        let mut r = rng(13);
        let w = random_matrix(3, 4, &mut r);
        let zero = Matrix::zeros(3, 4);
        let ad = LoraAdapter {
            a: random_matrix(2, 4, &mut r),
            b: random_matrix(3, 2, &mut r),
            scale: 1.0,
        };
        let dw = delta_w(&ad).unwrap();
        // merge onto zero base recovers the update.
        assert_eq!(merge(&zero, &ad).unwrap(), dw);
        // merge then subtract recovers the base.
        let back = merge(&w, &ad).unwrap().sub(&dw).unwrap();
        for (x, y) in back.as_slice().iter().zip(w.as_slice()) {
            assert!((x - y).abs() <= 1e-12);
        }
        // fresh adapter merges transparently.
        let fresh = init_adapter(4, 3, 2, 99);
        assert_eq!(merge(&w, &fresh).unwrap(), w);
    }

    #[test]
    fn select_hand_example_m25() {
        let dw = Matrix::from_rows(&[&[1.0, -3.0], &[2.0, 0.5]]).unwrap();
        let mask = select_key_elements(&dw, 25.0).unwrap();
        assert_eq!(mask.as_slice(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn select_m100_is_all_ones() {
        let dw = Matrix::from_rows(&[&[1.0, -3.0], &[2.0, 0.5]]).unwrap();
        let mask = select_key_elements(&dw, 100.0).unwrap();
        assert!(mask.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn select_ties_prefer_smaller_index() {
        let dw = Matrix::from_rows(&[&[1.0, -1.0], &[1.0, 1.0]]).unwrap();
        let mask = select_key_elements(&dw, 50.0).unwrap();
        assert_eq!(mask.as_slice(), &[1.0, 1.0, 0.0, 0.0]);
    }

    /// Full-sort brute-force selection: the oracle the implementation's
    /// partial selection must agree with.
    fn full_sort_mask(dw: &Matrix, m_percent: f64) -> Matrix {
        let total = dw.rows() * dw.cols();
        let c = (m_percent / 100.0 * total as f64)
            .round_ties_even()
            .max(1.0) as usize;
        let c = c.min(total);
        let mut idx: Vec<usize> = (0..total).collect();
        let e = dw.as_slice();
        idx.sort_by(|&x, &y| {
            e[y].abs()
                .partial_cmp(&e[x].abs())
                .unwrap()
                .then(x.cmp(&y))
        });
        let mut mask = Matrix::zeros(dw.rows(), dw.cols());
        for &i in &idx[..c] {
            mask.as_mut_slice()[i] = 1.0;
        }
        mask
    }

    #[test]
    fn select_matches_full_sort_oracle_including_ties() {
        let mut r = rng(17);
        for trial in 0..200 {
            let rows = r.random_range(1..=20);
            let cols = r.random_range(1..=30);
            let mut dw = random_matrix(rows, cols, &mut r);
            if trial % 3 == 0 {
                // Inject duplicated magnitudes to exercise tie-breaking.
                let n = dw.as_slice().len();
                for i in 0..n / 2 {
                    let v = dw.as_slice()[i];
                    dw.as_mut_slice()[n - 1 - i] = -v;
                }
            }
            for m in [0.5, 2.0, 25.0, 100.0] {
                let got = select_key_elements(&dw, m).unwrap();
                let want = full_sort_mask(&dw, m);
                assert_eq!(got, want, "mismatch at trial {trial}, m={m}");
            }
        }
    }

    #[test]
    fn select_cardinality_example() {
        let mut r = rng(19);
        let dw = random_matrix(20, 30, &mut r);
        let mask = select_key_elements(&dw, 2.0).unwrap();
        let ones: f64 = mask.as_slice().iter().sum();
        assert_eq!(ones, 12.0); // 2% of 600
    }

    #[test]
    fn accumulate_masks() {
        let mut stack = RegMaskStack::new(2, 2);
        assert!(stack.is_empty());
        let m1 = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap();
        let m2 = Matrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]).unwrap();
        stack.accumulate(&m1).unwrap();
        assert_eq!(stack.r_sum, m1);
        stack.accumulate(&m2).unwrap();
        assert!(stack.r_sum.as_slice().iter().all(|&v| v == 0.0 || v == 1.0));
        stack.accumulate(&m1).unwrap();
        assert_eq!(stack.r_sum.get(0, 0), 2.0);
        assert_eq!(stack.task_count, 3);
    }

    fn example_loss_instance() -> (LoraAdapter, RegMaskStack) {
        // B×A = [[2,-1],[0,3]] via B = I, A = the target.
        let adapter = LoraAdapter {
            a: Matrix::from_rows(&[&[2.0, -1.0], &[0.0, 3.0]]).unwrap(),
            b: Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap(),
            scale: 1.0,
        };
        let mut stack = RegMaskStack::new(2, 2);
        let r = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]).unwrap();
        stack.r_sum = r;
        stack.task_count = 2;
        (adapter, stack)
    }

    #[test]
    fn reg_loss_hand_example() {
        let (adapter, stack) = example_loss_instance();
        assert_eq!(reg_loss(&adapter, &stack, 1.0).unwrap(), 8.0);
        // Linear in lambda.
        assert_eq!(reg_loss(&adapter, &stack, 2.5e3).unwrap(), 2.5e3 * 8.0);
    }

    #[test]
    fn reg_loss_zero_for_empty_stack() {
        let ad = init_adapter(6, 5, 2, 3);
        let stack = RegMaskStack::new(5, 6);
        assert_eq!(reg_loss(&ad, &stack, 123.0).unwrap(), 0.0);
        let (da, db) = reg_loss_grad(&ad, &stack, 123.0).unwrap();
        assert!(da.as_slice().iter().all(|&v| v == 0.0));
        assert!(db.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reg_grad_zero_at_zero_update() {
        // B = 0 ⇒ ΔW = 0 ⇒ sign term vanishes everywhere.
        let ad = init_adapter(6, 5, 2, 3);
        let mut stack = RegMaskStack::new(5, 6);
        let mask = Matrix::from_fn(5, 6, |_, _| 1.0);
        stack.accumulate(&mask).unwrap();
        let (da, db) = reg_loss_grad(&ad, &stack, 10.0).unwrap();
        assert!(da.as_slice().iter().all(|&v| v == 0.0));
        assert!(db.as_slice().iter().all(|&v| v == 0.0));
    }

    /// Central finite differences of reg_loss over every adapter coordinate.
    fn fd_grad(
        adapter: &LoraAdapter,
        stack: &RegMaskStack,
        lambda: f64,
        h: f64,
    ) -> (Matrix, Matrix) {
        let probe = |ad: &LoraAdapter| reg_loss(ad, stack, lambda).unwrap();
        let mut da = Matrix::zeros(adapter.a.rows(), adapter.a.cols());
        for i in 0..adapter.a.as_slice().len() {
            let mut plus = adapter.clone();
            plus.a.as_mut_slice()[i] += h;
            let mut minus = adapter.clone();
            minus.a.as_mut_slice()[i] -= h;
            da.as_mut_slice()[i] = (probe(&plus) - probe(&minus)) / (2.0 * h);
        }
        let mut db = Matrix::zeros(adapter.b.rows(), adapter.b.cols());
        for i in 0..adapter.b.as_slice().len() {
            let mut plus = adapter.clone();
            plus.b.as_mut_slice()[i] += h;
            let mut minus = adapter.clone();
            minus.b.as_mut_slice()[i] -= h;
            db.as_mut_slice()[i] = (probe(&plus) - probe(&minus)) / (2.0 * h);
        }
        (da, db)
    }

    fn assert_close_rel(got: &Matrix, want: &Matrix, rel: f64) {
        for (g, w) in got.as_slice().iter().zip(want.as_slice()) {
            let scale = w.abs().max(1.0);
            assert!(
                (g - w).abs() <= rel * scale,
                "gradient mismatch: got {g}, want {w}"
            );
        }
    }

    #[test]
    fn reg_grad_matches_finite_differences_away_from_kinks() {
        let mut r = rng(23);
        let mut checked = 0;
        while checked < 30 {
            let adapter = LoraAdapter {
                a: random_matrix(2, 4, &mut r),
                b: random_matrix(3, 2, &mut r),
                scale: 1.0,
            };
            let dw = delta_w(&adapter).unwrap();
            if dw.as_slice().iter().any(|v| v.abs() < 1e-3) {
                continue; // too close to a |ΔW| kink for finite differences
            }
            let mut stack = RegMaskStack::new(3, 4);
            let mask = Matrix::from_fn(3, 4, |i, j| f64::from((i + j) % 2 == 0));
            stack.accumulate(&mask).unwrap();
            if r.random_range(0..2) == 1 {
                stack.accumulate(&mask).unwrap(); // exercise weights > 1
            }
            let (da, db) = reg_loss_grad(&adapter, &stack, 1.0).unwrap();
            let (fda, fdb) = fd_grad(&adapter, &stack, 1.0, 1e-6);
            assert_close_rel(&da, &fda, 1e-4);
            assert_close_rel(&db, &fdb, 1e-4);
            checked += 1;
        }
    }

    #[test]
    fn reg_loss_ignores_unmasked_entries() {
        let (adapter, stack) = example_loss_instance();
        let before = reg_loss(&adapter, &stack, 3.0).unwrap();
        // Positions (0,1) and (1,0) carry zero mask weight; moving them via
        // a rank-preserving tweak of A's unmasked-only influence is awkward,
        // so perturb ΔW through an equivalent adapter with B = I.
        let mut tweaked = adapter.clone();
        tweaked.a.set(0, 1, 17.0); // ΔW[0,1], unmasked
        tweaked.a.set(1, 0, -4.0); // ΔW[1,0], unmasked
        let after = reg_loss(&tweaked, &stack, 3.0).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn reg_loss_monotone_in_masked_entries_and_lambda() {
        let (adapter, stack) = example_loss_instance();
        let base = reg_loss(&adapter, &stack, 1.0).unwrap();
        let mut bigger = adapter.clone();
        bigger.a.set(0, 0, 5.0); // |ΔW[0,0]| grows, masked at weight 1
        assert!(reg_loss(&bigger, &stack, 1.0).unwrap() > base);
        assert!(reg_loss(&adapter, &stack, 2.0).unwrap() > base);
    }

    #[test]
    fn concentration_stats_uniform_and_spike() {
        let uniform = Matrix::from_fn(10, 10, |_, _| 0.7);
        let s = update_concentration_stats(&uniform).unwrap();
        assert_eq!(s.ratio, 1.0);

        let mut spiked = Matrix::from_fn(10, 10, |_, _| 1.0);
        spiked.set(3, 3, 100.0);
        let s = update_concentration_stats(&spiked).unwrap();
        assert_eq!(s.top1_mean_abs, 100.0);
        assert_eq!(s.bottom1_mean_abs, 1.0);
        assert_eq!(s.ratio, 100.0);
    }

    #[test]
    fn concentration_stats_rejects_small_and_reports_infinite() {
        assert!(update_concentration_stats(&Matrix::zeros(3, 3)).is_err());
        let mut m = Matrix::from_fn(10, 10, |_, _| 1.0);
        m.set(0, 0, 0.0);
        let s = update_concentration_stats(&m).unwrap();
        assert!(s.ratio.is_infinite());
    }
}
