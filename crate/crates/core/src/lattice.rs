//! Log-space forward/backward dynamic programs over the 2D lattice, the
//! multi-sequence loss, and its analytic gradients.
//!
//! The probability of a label sequence given a grid sums, over every monotone
//! path from `(0,0)` to `(H-1,W-1)`, the path's transition-weight product
//! times the 1D CTC probability of the sequence along that path's cells. The
//! forward tensor folds both sums into one recurrence over the blank-extended
//! label: with `g` adding the stay/advance/skip predecessors and multiplying
//! by the current cell's emission,
//!
//! ```text
//! alpha[i][j](s) = lambda1 * g(alpha[i][j-1], s) + lambda2 * g(alpha[i-1][j], s)
//! ```
//!
//! Cells in row 0 keep only the horizontal term, cells in column 0 only the
//! vertical term, and `(0,0)` holds the initialization (blank or the first
//! character). The backward tensor mirrors this from the bottom-right corner,
//! with emissions charged at the successor cell so that `alpha * beta`
//! counts every emission and every transition exactly once.
//!
//! All state is `f64` log-probabilities combined with max-subtracted
//! log-sum-exp; the lambda weights enter as additive log terms. Emissions are
//! clamped to [`PROB_FLOOR`] before the log so that zero entries stay finite;
//! structurally impossible sequences still come out as exact `-inf`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::grid::softmax_grid;
use crate::labels::{extend_label, TargetSet};
use crate::{Error, LogitsGrid, ProbGrid, Result, BLANK};

/// Emissions are clamped to at least this value before entering log-space.
pub const PROB_FLOOR: f64 = 1e-30;

/// Transition weights: `lambda1` for a move from the left neighbor,
/// `lambda2` for a move from the neighbor above.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaParams {
    lambda1: f64,
    lambda2: f64,
}

impl LambdaParams {
    /// Requires both weights non-negative, finite, and not both zero.
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !lambda1.is_finite() || !lambda2.is_finite() {
            return Err(Error::InvalidConfig("lambda weights must be finite".into()));
        }
        if lambda1 < 0.0 || lambda2 < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda weights must be non-negative (got {lambda1}, {lambda2})"
            )));
        }
        if lambda1 + lambda2 <= 0.0 {
            return Err(Error::InvalidConfig("lambda1 + lambda2 must be > 0".into()));
        }
        Ok(LambdaParams { lambda1, lambda2 })
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    /// True when the weights sum to 1.
    pub fn is_stochastic(&self) -> bool {
        (self.lambda1 + self.lambda2 - 1.0).abs() <= 1e-12
    }

    /// The weights with horizontal and vertical roles exchanged.
    pub fn swapped(&self) -> LambdaParams {
        LambdaParams {
            lambda1: self.lambda2,
            lambda2: self.lambda1,
        }
    }
}

impl Default for LambdaParams {
    /// The reference setting: horizontal moves strongly preferred.
    fn default() -> Self {
        LambdaParams {
            lambda1: 0.9,
            lambda2: 0.1,
        }
    }
}

/// `log(exp(a) + exp(b))` with the usual max-subtraction guard.
#[inline]
pub(crate) fn lse2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

#[inline]
pub(crate) fn lse_slice(v: &[f64]) -> f64 {
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
    }
}

/// In-place `acc = log(exp(acc) + exp(v))`.
#[inline]
fn logaddexp_into(acc: &mut f64, v: f64) {
    *acc = lse2(*acc, v);
}

/// Whether extended-label position `s` can hold any probability mass at cell
/// `(i, j)`: enough positions must already be matchable (`s <= 2(i+j)+1`) and
/// enough cells must remain to match the rest of the label.
pub fn feasible(i: usize, j: usize, s: usize, len_lprime: usize, h: usize, w: usize) -> bool {
    if s > 2 * (i + j) + 1 {
        return false;
    }
    let remaining = ((h - i) + (w - j) - 1) as isize;
    (s as isize) >= len_lprime as isize - 2 * remaining
}

fn check_labels(labels: &[usize], q: usize) -> Result<()> {
    for &k in labels {
        if k == BLANK || k >= q {
            return Err(Error::InvalidLabel(format!(
                "class {k} invalid in a label over {q} classes"
            )));
        }
    }
    Ok(())
}

fn check_capacity(labels: &[usize], h: usize, w: usize, index: Option<usize>) -> Result<()> {
    let len_ext = 2 * labels.len() + 1;
    let max_ext = 2 * (h + w - 1) + 1;
    if len_ext > max_ext {
        return Err(Error::InfeasibleTarget {
            index,
            len_ext,
            max_ext,
            h,
            w,
        });
    }
    Ok(())
}

#[inline]
fn floored_log(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Shared storage for the forward and backward tensors: `H x W x |l'|`
/// log-probabilities plus the extended label they were computed for.
macro_rules! dp_tensor {
    ($name:ident, $doc:literal) => {
        #[doc = $doc]
        #[derive(Debug, Clone)]
        pub struct $name {
            h: usize,
            w: usize,
            ext: Vec<usize>,
            data: Vec<f64>,
        }

        impl $name {
            pub fn h(&self) -> usize {
                self.h
            }

            pub fn w(&self) -> usize {
                self.w
            }

            /// Length of the extended label (the tensor's third dimension).
            pub fn s_len(&self) -> usize {
                self.ext.len()
            }

            /// The blank-extended label this tensor was computed for.
            pub fn ext(&self) -> &[usize] {
                &self.ext
            }

            #[inline]
            pub fn get(&self, i: usize, j: usize, s: usize) -> f64 {
                self.data[(i * self.w + j) * self.ext.len() + s]
            }
        }
    };
}

dp_tensor!(
    AlphaTensor,
    "Forward tensor: `alpha[i][j](s)` is the log mass of all partial paths \
     ending at `(i, j)` whose labelings match the extended label up to \
     position `s`, including the emission at `(i, j)`."
);

dp_tensor!(
    BetaTensor,
    "Backward tensor: `beta[i][j](s)` is the log mass of all path suffixes \
     leaving `(i, j)` that complete the extended label from position `s`, \
     excluding the emission at `(i, j)` itself."
);

impl AlphaTensor {
    /// `log p(l|X)`: the final cell's mass at the last two extended positions.
    pub fn log_prob(&self) -> f64 {
        let s_len = self.s_len();
        let base = ((self.h - 1) * self.w + (self.w - 1)) * s_len;
        let mut p = self.data[base + s_len - 1];
        if s_len >= 2 {
            p = lse2(p, self.data[base + s_len - 2]);
        }
        p
    }
}

/// Runs the forward dynamic program. `labels` holds non-blank classes and may
/// be empty (the all-blank sequence). Grids are only required to be finite
/// and non-negative; gradient checks feed cells that do not sum to 1.
///
/// Fails with an infeasible-target error when even the longest path cannot
/// match the label; sequences that are merely impossible on this particular
/// grid (repeats with no room for the separating blank) come back with
/// `log_prob() == -inf` instead.
pub fn forward(x: &ProbGrid, labels: &[usize], lambda: &LambdaParams) -> Result<AlphaTensor> {
    check_labels(labels, x.q())?;
    check_capacity(labels, x.h(), x.w(), None)?;
    let (h, w) = (x.h(), x.w());
    let ext = extend_label(labels);
    let s_len = ext.len();
    // skip[s]: the s-2 predecessor participates (distinct non-blank run).
    let skip: Vec<bool> = (0..s_len)
        .map(|s| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2])
        .collect();
    let log_l1 = lambda.lambda1.ln();
    let log_l2 = lambda.lambda2.ln();
    let mut data = vec![f64::NEG_INFINITY; h * w * s_len];
    for i in 0..h {
        for j in 0..w {
            let base = (i * w + j) * s_len;
            for s in 0..s_len {
                if !feasible(i, j, s, s_len, h, w) {
                    continue;
                }
                let v = if i == 0 && j == 0 {
                    if s <= 1 {
                        floored_log(x.get(0, 0, ext[s]))
                    } else {
                        f64::NEG_INFINITY
                    }
                } else {
                    let emit = floored_log(x.get(i, j, ext[s]));
                    let g_from = |pred_base: usize| {
                        let mut m = data[pred_base + s];
                        if s >= 1 {
                            m = lse2(m, data[pred_base + s - 1]);
                        }
                        if skip[s] {
                            m = lse2(m, data[pred_base + s - 2]);
                        }
                        m + emit
                    };
                    let mut v = f64::NEG_INFINITY;
                    if j > 0 {
                        v = log_l1 + g_from(base - s_len);
                    }
                    if i > 0 {
                        v = lse2(v, log_l2 + g_from(base - w * s_len));
                    }
                    v
                };
                data[base + s] = v;
            }
        }
    }
    Ok(AlphaTensor { h, w, ext, data })
}

/// Runs the backward dynamic program; see [`forward`] for input rules.
pub fn backward(x: &ProbGrid, labels: &[usize], lambda: &LambdaParams) -> Result<BetaTensor> {
    check_labels(labels, x.q())?;
    check_capacity(labels, x.h(), x.w(), None)?;
    let (h, w) = (x.h(), x.w());
    let ext = extend_label(labels);
    let s_len = ext.len();
    // skip[s]: the s+2 successor participates (distinct non-blank run).
    let skip: Vec<bool> = (0..s_len)
        .map(|s| s + 2 < s_len && ext[s] != BLANK && ext[s] != ext[s + 2])
        .collect();
    let log_l1 = lambda.lambda1.ln();
    let log_l2 = lambda.lambda2.ln();
    let mut data = vec![f64::NEG_INFINITY; h * w * s_len];
    for i in (0..h).rev() {
        for j in (0..w).rev() {
            let base = (i * w + j) * s_len;
            for s in (0..s_len).rev() {
                if !feasible(i, j, s, s_len, h, w) {
                    continue;
                }
                let v = if i == h - 1 && j == w - 1 {
                    if s + 2 >= s_len {
                        0.0
                    } else {
                        f64::NEG_INFINITY
                    }
                } else {
                    // g' charges emissions at the successor cell.
                    let g_to = |succ_base: usize, si: usize, sj: usize| {
                        let mut m = data[succ_base + s] + floored_log(x.get(si, sj, ext[s]));
                        if s + 1 < s_len {
                            m = lse2(
                                m,
                                data[succ_base + s + 1] + floored_log(x.get(si, sj, ext[s + 1])),
                            );
                        }
                        if skip[s] {
                            m = lse2(
                                m,
                                data[succ_base + s + 2] + floored_log(x.get(si, sj, ext[s + 2])),
                            );
                        }
                        m
                    };
                    let mut v = f64::NEG_INFINITY;
                    if j + 1 < w {
                        v = log_l1 + g_to(base + s_len, i, j + 1);
                    }
                    if i + 1 < h {
                        v = lse2(v, log_l2 + g_to(base + w * s_len, i + 1, j));
                    }
                    v
                };
                data[base + s] = v;
            }
        }
    }
    Ok(BetaTensor { h, w, ext, data })
}

/// `log p(l|X)` without retaining the tensor.
pub fn sequence_log_prob(x: &ProbGrid, labels: &[usize], lambda: &LambdaParams) -> Result<f64> {
    forward(x, labels, lambda).map(|a| a.log_prob())
}

/// Result of a full lattice analysis of one sequence.
#[derive(Debug, Clone)]
pub struct LatticeResult {
    pub log_prob: f64,
    pub alpha: Option<AlphaTensor>,
    pub beta: Option<BetaTensor>,
}

/// Runs both dynamic programs and retains the tensors (for gradient work or
/// visualization dumps).
pub fn forward_backward(
    x: &ProbGrid,
    labels: &[usize],
    lambda: &LambdaParams,
) -> Result<LatticeResult> {
    let alpha = forward(x, labels, lambda)?;
    let beta = backward(x, labels, lambda)?;
    Ok(LatticeResult {
        log_prob: alpha.log_prob(),
        alpha: Some(alpha),
        beta: Some(beta),
    })
}

/// Which objective [`set_loss`] computes from the per-sequence probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// `-(ln sum_i p(l_i|X) - ln N)`: negative log of the mean sequence
    /// probability. The reference objective.
    #[default]
    NegLogMeanProb,
    /// `-sum_i ln p(l_i|X)`: treats the sequences as independent. Provided as
    /// an experimental alternative only.
    SumNegLogProbs,
}

impl LossMode {
    pub fn name(&self) -> &'static str {
        match self {
            LossMode::NegLogMeanProb => "neg-log-mean-prob",
            LossMode::SumNegLogProbs => "sum-neg-log-probs",
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neg-log-mean-prob" => Ok(LossMode::NegLogMeanProb),
            "sum-neg-log-probs" => Ok(LossMode::SumNegLogProbs),
            other => Err(Error::InvalidConfig(format!(
                "unknown loss mode {other:?} (expected neg-log-mean-prob or sum-neg-log-probs)"
            ))),
        }
    }
}

/// Per-sample loss together with the per-sequence log-probabilities that
/// produced it.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub loss: f64,
    pub per_seq_log_probs: Vec<f64>,
}

/// Loss for one sample: all target sequences scored against one grid. The
/// loss can be `+inf` when every sequence (or, in sum mode, any sequence) has
/// zero mass; an error is raised only for targets that could never fit.
pub fn set_loss(
    x: &ProbGrid,
    targets: &TargetSet,
    lambda: &LambdaParams,
    mode: LossMode,
) -> Result<LossBreakdown> {
    let mut per_seq = Vec::with_capacity(targets.len());
    for (t, l) in targets.sequences().iter().enumerate() {
        check_capacity(l.labels(), x.h(), x.w(), Some(t))?;
        per_seq.push(sequence_log_prob(x, l.labels(), lambda)?);
    }
    Ok(LossBreakdown {
        loss: loss_from_log_probs(&per_seq, mode),
        per_seq_log_probs: per_seq,
    })
}

fn loss_from_log_probs(log_probs: &[f64], mode: LossMode) -> f64 {
    match mode {
        LossMode::NegLogMeanProb => {
            let total = lse_slice(log_probs);
            (log_probs.len() as f64).ln() - total
        }
        LossMode::SumNegLogProbs => -log_probs.iter().sum::<f64>(),
    }
}

/// Gradient of [`set_loss`] with respect to every grid entry, treating the
/// entries as free variables (the simplex coupling belongs to
/// [`grad_wrt_logits`]). Entries whose class appears nowhere in any target's
/// extended label get exactly 0; all others are negative.
pub fn grad_wrt_probs(
    x: &ProbGrid,
    targets: &TargetSet,
    lambda: &LambdaParams,
    mode: LossMode,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let (h, w, q) = (x.h(), x.w(), x.q());
    let mut per_seq = Vec::with_capacity(targets.len());
    // log_acc[(i,j,k)] accumulates log of sum over targets t and positions s
    // with ext_t[s] = k of alpha_t * beta_t, weighted per mode.
    let mut log_acc = vec![f64::NEG_INFINITY; h * w * q];
    for (t, l) in targets.sequences().iter().enumerate() {
        check_capacity(l.labels(), x.h(), x.w(), Some(t))?;
        let alpha = forward(x, l.labels(), lambda)?;
        let beta = backward(x, l.labels(), lambda)?;
        let log_p = alpha.log_prob();
        per_seq.push(log_p);
        // In sum mode each target is normalized by its own probability.
        let target_weight = match mode {
            LossMode::NegLogMeanProb => 0.0,
            LossMode::SumNegLogProbs => {
                if log_p == f64::NEG_INFINITY {
                    return Err(Error::VanishingMass { index: Some(t) });
                }
                -log_p
            }
        };
        let ext = alpha.ext().to_vec();
        for i in 0..h {
            for j in 0..w {
                for (s, &k) in ext.iter().enumerate() {
                    let term = alpha.get(i, j, s) + beta.get(i, j, s) + target_weight;
                    if term > f64::NEG_INFINITY {
                        logaddexp_into(&mut log_acc[(i * w + j) * q + k], term);
                    }
                }
            }
        }
    }
    let breakdown = LossBreakdown {
        loss: loss_from_log_probs(&per_seq, mode),
        per_seq_log_probs: per_seq,
    };
    // In mean mode the whole accumulator is normalized by the total mass.
    let norm = match mode {
        LossMode::NegLogMeanProb => {
            let total = lse_slice(&breakdown.per_seq_log_probs);
            if total == f64::NEG_INFINITY {
                return Err(Error::VanishingMass { index: None });
            }
            total
        }
        LossMode::SumNegLogProbs => 0.0,
    };
    let mut grad = vec![0.0; h * w * q];
    for i in 0..h {
        for j in 0..w {
            for k in 0..q {
                let acc = log_acc[(i * w + j) * q + k];
                if acc > f64::NEG_INFINITY {
                    let log_x = floored_log(x.get(i, j, k));
                    grad[(i * w + j) * q + k] = -((acc - log_x - norm).exp());
                }
            }
        }
    }
    Ok((breakdown, grad))
}

/// Pulls a gradient on probabilities back through a per-cell softmax:
/// `g_logit[k] = x[k] * (g_prob[k] - sum_r x[r] * g_prob[r])`.
pub fn chain_through_softmax(x: &ProbGrid, grad_probs: &[f64]) -> Result<Vec<f64>> {
    if grad_probs.len() != x.data().len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient length {} vs grid {}",
            grad_probs.len(),
            x.data().len()
        )));
    }
    let q = x.q();
    let mut out = vec![0.0; grad_probs.len()];
    for (cell_idx, g_cell) in grad_probs.chunks_exact(q).enumerate() {
        let base = cell_idx * q;
        let x_cell = &x.data()[base..base + q];
        let dot: f64 = x_cell.iter().zip(g_cell).map(|(&p, &g)| p * g).sum();
        for k in 0..q {
            out[base + k] = x_cell[k] * (g_cell[k] - dot);
        }
    }
    Ok(out)
}

/// Loss and gradient with respect to pre-softmax logits. Every cell's logit
/// gradient sums to zero.
pub fn grad_wrt_logits(
    z: &LogitsGrid,
    targets: &TargetSet,
    lambda: &LambdaParams,
    mode: LossMode,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let x = softmax_grid(z);
    let (breakdown, grad_probs) = grad_wrt_probs(&x, targets, lambda, mode)?;
    let grad = chain_through_softmax(&x, &grad_probs)?;
    Ok((breakdown, grad))
}

/// Writes both tensors as CSV rows `i,j,s,log_alpha,log_beta`.
pub fn write_alpha_beta_csv<Wr: Write>(
    mut out: Wr,
    alpha: &AlphaTensor,
    beta: &BetaTensor,
) -> Result<()> {
    if alpha.h() != beta.h() || alpha.w() != beta.w() || alpha.ext() != beta.ext() {
        return Err(Error::ShapeMismatch(
            "alpha and beta tensors disagree on grid or label".into(),
        ));
    }
    writeln!(out, "i,j,s,log_alpha,log_beta")?;
    for i in 0..alpha.h() {
        for j in 0..alpha.w() {
            for s in 0..alpha.s_len() {
                writeln!(out, "{i},{j},{s},{},{}", alpha.get(i, j, s), beta.get(i, j, s))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::LabelSequence;
    use crate::oracle;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) {
        assert!(
            (a - b).abs() <= tol * b.abs().max(1.0),
            "{a} vs {b} (tol {tol})"
        );
    }

    fn close_rel(a: f64, b: f64, tol: f64) {
        if b == 0.0 {
            assert!(a.abs() <= tol, "{a} vs exact 0");
        } else {
            assert!((a - b).abs() / b.abs() <= tol, "{a} vs {b} rel");
        }
    }

    fn grid_1x2() -> ProbGrid {
        ProbGrid::from_vec(1, 2, 2, vec![0.5, 0.5, 0.2, 0.8]).unwrap()
    }

    fn targets(q: usize, labels: &[&[usize]]) -> TargetSet {
        TargetSet::new(
            labels
                .iter()
                .map(|l| LabelSequence::new(l.to_vec(), q).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn lambda_validation() {
        assert!(LambdaParams::new(0.9, 0.1).is_ok());
        assert!(LambdaParams::new(1.0, 0.0).is_ok());
        assert!(LambdaParams::new(-0.1, 0.5).is_err());
        assert!(LambdaParams::new(0.0, 0.0).is_err());
        assert!(LambdaParams::new(f64::NAN, 0.5).is_err());
        assert!(LambdaParams::new(0.9, 0.1).unwrap().is_stochastic());
        assert!(!LambdaParams::new(0.9, 0.2).unwrap().is_stochastic());
        let swapped = LambdaParams::new(0.9, 0.1).unwrap().swapped();
        assert_eq!((swapped.lambda1(), swapped.lambda2()), (0.1, 0.9));
    }

    #[test]
    fn feasibility_bounds() {
        // 2x2 grid, three-character label: |l'| = 7.
        assert!(!feasible(0, 0, 0, 7, 2, 2)); // too few cells remain for the rest
        assert!(!feasible(0, 0, 2, 7, 2, 2)); // cannot have matched that far yet
        assert!(feasible(0, 0, 1, 7, 2, 2));
        // Final cell of a fitting label (2x2, |l'| = 5) admits the last state.
        assert!(feasible(1, 1, 4, 5, 2, 2));
        assert!(feasible(1, 1, 3, 5, 2, 2));
        assert!(!feasible(0, 0, 3, 5, 2, 2));
    }

    #[test]
    fn forward_single_cell() {
        let x = ProbGrid::from_vec(1, 1, 3, vec![0.2, 0.5, 0.3]).unwrap();
        let p = sequence_log_prob(&x, &[1], &LambdaParams::default())
            .unwrap()
            .exp();
        close(p, 0.5, 1e-12);
    }

    #[test]
    fn forward_one_by_two_frozen_values() {
        // Cells (0.5, 0.5) then (0.2, 0.8), label "a": the single path's CTC
        // mass is 0.5*0.8 + 0.5*0.2 + 0.5*0.8 = 0.9, scaled by lambda1 once.
        let x = grid_1x2();
        let p1 = sequence_log_prob(&x, &[1], &LambdaParams::new(1.0, 0.0).unwrap())
            .unwrap()
            .exp();
        close(p1, 0.9, 1e-12);
        let p09 = sequence_log_prob(&x, &[1], &LambdaParams::new(0.9, 0.1).unwrap())
            .unwrap()
            .exp();
        close(p09, 0.81, 1e-12);
        // Vertical mirror: same cells stacked top-to-bottom, lambda2 = 0.1.
        let xt = x.transpose();
        let p_vert = sequence_log_prob(&xt, &[1], &LambdaParams::new(0.9, 0.1).unwrap())
            .unwrap()
            .exp();
        close(p_vert, 0.09, 1e-12);
    }

    #[test]
    fn forward_alpha_initialization_and_masking() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = oracle::random_grid(&mut rng, 2, 3, 3);
        let alpha = forward(&x, &[1, 2], &LambdaParams::default()).unwrap();
        let s_len = alpha.s_len();
        assert_eq!(s_len, 5);
        close(alpha.get(0, 0, 0), x.get(0, 0, 0).ln(), 1e-12);
        close(alpha.get(0, 0, 1), x.get(0, 0, 1).ln(), 1e-12);
        for s in 2..s_len {
            assert_eq!(alpha.get(0, 0, s), f64::NEG_INFINITY);
        }
        // Everything outside the feasibility band is exactly -inf.
        for i in 0..2 {
            for j in 0..3 {
                for s in 0..s_len {
                    if !feasible(i, j, s, s_len, 2, 3) {
                        assert_eq!(alpha.get(i, j, s), f64::NEG_INFINITY);
                    }
                }
            }
        }
    }

    #[test]
    fn forward_matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lambda = LambdaParams::default();
        for _ in 0..30 {
            let (x, labels) =
                oracle::random_instance(&mut rng, &oracle::InstanceLimits::default());
            let dp = sequence_log_prob(&x, &labels, &lambda).unwrap().exp();
            let brute = oracle::brute_force_sequence_prob(&x, &labels, &lambda).unwrap();
            close_rel(dp, brute, 1e-9);
        }
    }

    #[test]
    fn forward_rejects_oversized_labels() {
        let x = ProbGrid::uniform(1, 1, 3);
        match sequence_log_prob(&x, &[1, 2], &LambdaParams::default()) {
            Err(Error::InfeasibleTarget { len_ext, max_ext, .. }) => {
                assert_eq!(len_ext, 5);
                assert_eq!(max_ext, 3);
            }
            other => panic!("expected infeasible target, got {other:?}"),
        }
    }

    #[test]
    fn forward_structural_zero_is_neg_infinity() {
        // "aa" on two frames fits the capacity check but has no labeling.
        let x = grid_1x2();
        let lp = sequence_log_prob(&x, &[1, 1], &LambdaParams::new(1.0, 0.0).unwrap()).unwrap();
        assert_eq!(lp, f64::NEG_INFINITY);
    }

    #[test]
    fn forward_empty_label_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = oracle::random_grid(&mut rng, 2, 2, 3);
        let lambda = LambdaParams::default();
        let dp = sequence_log_prob(&x, &[], &lambda).unwrap().exp();
        let brute = oracle::brute_force_sequence_prob(&x, &[], &lambda).unwrap();
        close_rel(dp, brute, 1e-12);
    }

    #[test]
    fn backward_initialization_and_frozen_value() {
        let x = grid_1x2();
        let beta = backward(&x, &[1], &LambdaParams::new(1.0, 0.0).unwrap()).unwrap();
        // Final cell: log 1 at the last two states, -inf below.
        assert_eq!(beta.get(0, 1, 2), 0.0);
        assert_eq!(beta.get(0, 1, 1), 0.0);
        assert_eq!(beta.get(0, 1, 0), f64::NEG_INFINITY);
        // From (0,0) at state 1 the continuation mass is x1_b + x1_a = 1.
        close(beta.get(0, 0, 1).exp(), 1.0, 1e-12);
        let beta09 = backward(&x, &[1], &LambdaParams::new(0.9, 0.1).unwrap()).unwrap();
        close(beta09.get(0, 0, 1).exp(), 0.9, 1e-12);
    }

    #[test]
    fn anti_diagonal_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let lambda = LambdaParams::default();
        let limits = oracle::InstanceLimits {
            ensure_positive: true,
            ..oracle::InstanceLimits::default()
        };
        for _ in 0..20 {
            let (x, labels) = oracle::random_instance(&mut rng, &limits);
            let alpha = forward(&x, &labels, &lambda).unwrap();
            let beta = backward(&x, &labels, &lambda).unwrap();
            let log_p = alpha.log_prob();
            for d in 0..x.h() + x.w() - 1 {
                let mut terms = Vec::new();
                for i in 0..x.h() {
                    if d >= i && d - i < x.w() {
                        let j = d - i;
                        for s in 0..alpha.s_len() {
                            terms.push(alpha.get(i, j, s) + beta.get(i, j, s));
                        }
                    }
                }
                let diag = lse_slice(&terms);
                assert!(
                    ((diag - log_p).exp() - 1.0).abs() <= 1e-9,
                    "diagonal {d}: {diag} vs {log_p}"
                );
            }
        }
    }

    #[test]
    fn transpose_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..10 {
            let (x, labels) =
                oracle::random_instance(&mut rng, &oracle::InstanceLimits::default());
            let lambda = LambdaParams::new(0.7, 0.3).unwrap();
            let a = sequence_log_prob(&x, &labels, &lambda).unwrap();
            let b = sequence_log_prob(&x.transpose(), &labels, &lambda.swapped()).unwrap();
            if a == f64::NEG_INFINITY {
                assert_eq!(b, f64::NEG_INFINITY);
            } else {
                close(a, b, 1e-12);
            }
        }
    }

    #[test]
    fn set_loss_matches_hand_computed_cases() {
        // One cell with (blank, a, b) = (0, 0.9, 0.1).
        let x = ProbGrid::from_vec(1, 1, 3, vec![0.0, 0.9, 0.1]).unwrap();
        let lambda = LambdaParams::default();
        let single = set_loss(&x, &targets(3, &[&[1]]), &lambda, LossMode::NegLogMeanProb).unwrap();
        close(single.loss, -(0.9_f64.ln()), 1e-12);
        // Two targets with p = 0.9 and 0.1: loss = -ln((0.9 + 0.1)/2) = ln 2.
        let both = set_loss(
            &x,
            &targets(3, &[&[1], &[2]]),
            &lambda,
            LossMode::NegLogMeanProb,
        )
        .unwrap();
        close(both.loss, -(0.5_f64.ln()), 1e-12);
        close(both.per_seq_log_probs[0].exp(), 0.9, 1e-12);
        close(both.per_seq_log_probs[1].exp(), 0.1, 1e-12);
        // Order of the target set must not matter.
        let flipped = set_loss(
            &x,
            &targets(3, &[&[2], &[1]]),
            &lambda,
            LossMode::NegLogMeanProb,
        )
        .unwrap();
        close(flipped.loss, both.loss, 1e-15);
        // Equal probabilities: loss is -ln p.
        let xeq = ProbGrid::from_vec(1, 1, 3, vec![0.2, 0.4, 0.4]).unwrap();
        let eq = set_loss(
            &xeq,
            &targets(3, &[&[1], &[2]]),
            &lambda,
            LossMode::NegLogMeanProb,
        )
        .unwrap();
        close(eq.loss, -(0.4_f64.ln()), 1e-12);
        // Sum-of-logs variant.
        let sum = set_loss(
            &x,
            &targets(3, &[&[1], &[2]]),
            &lambda,
            LossMode::SumNegLogProbs,
        )
        .unwrap();
        close(sum.loss, -(0.9_f64.ln()) - (0.1_f64.ln()), 1e-12);
    }

    #[test]
    fn set_loss_reports_offending_sequence() {
        let x = ProbGrid::uniform(1, 2, 3);
        let z = targets(3, &[&[1], &[1, 2, 1]]);
        match set_loss(&x, &z, &LambdaParams::default(), LossMode::default()) {
            Err(Error::InfeasibleTarget { index: Some(1), .. }) => {}
            other => panic!("expected infeasible target #1, got {other:?}"),
        }
    }

    #[test]
    fn grad_single_cell_hand_computed() {
        let x = ProbGrid::from_vec(1, 1, 3, vec![0.2, 0.5, 0.3]).unwrap();
        let (bd, grad) = grad_wrt_probs(
            &x,
            &targets(3, &[&[1]]),
            &LambdaParams::default(),
            LossMode::NegLogMeanProb,
        )
        .unwrap();
        close(bd.loss, -(0.5_f64.ln()), 1e-12);
        // p = x_a exactly, so dO/dx_a = -1/x_a and the others vanish.
        close(grad[1], -2.0, 1e-12);
        assert_eq!(grad[0], 0.0);
        assert_eq!(grad[2], 0.0);
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = oracle::random_grid(&mut rng, 2, 3, 3);
        let z = targets(3, &[&[1, 2], &[2]]);
        let lambda = LambdaParams::default();
        for mode in [LossMode::NegLogMeanProb, LossMode::SumNegLogProbs] {
            let (_, grad) = grad_wrt_probs(&x, &z, &lambda, mode).unwrap();
            let fd = oracle::finite_diff_grad(
                |point| {
                    let g = ProbGrid::from_vec(2, 3, 3, point.to_vec()).unwrap();
                    set_loss(&g, &z, &lambda, mode).unwrap().loss
                },
                x.data(),
                1e-6,
            )
            .unwrap();
            for (k, (&a, &n)) in grad.iter().zip(&fd).enumerate() {
                let denom = n.abs().max(1e-8);
                assert!(
                    (a - n).abs() / denom < 1e-5,
                    "coordinate {k}: analytic {a} vs numeric {n} ({mode:?})"
                );
            }
        }
    }

    #[test]
    fn grad_entries_are_never_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let limits = oracle::InstanceLimits {
            ensure_positive: true,
            ..oracle::InstanceLimits::default()
        };
        for _ in 0..10 {
            let (x, labels) = oracle::random_instance(&mut rng, &limits);
            let z = TargetSet::new(vec![LabelSequence::new(labels, x.q()).unwrap()]).unwrap();
            let (_, grad) =
                grad_wrt_probs(&x, &z, &LambdaParams::default(), LossMode::default()).unwrap();
            assert!(grad.iter().all(|&g| g <= 0.0));
        }
    }

    #[test]
    fn grad_errors_when_all_mass_vanishes() {
        // "aa" cannot fit on two frames, so the mean-mode denominator is zero.
        let x = grid_1x2();
        let z = targets(2, &[&[1, 1]]);
        assert!(matches!(
            grad_wrt_probs(&x, &z, &LambdaParams::default(), LossMode::NegLogMeanProb),
            Err(Error::VanishingMass { index: None })
        ));
        assert!(matches!(
            grad_wrt_probs(&x, &z, &LambdaParams::default(), LossMode::SumNegLogProbs),
            Err(Error::VanishingMass { index: Some(0) })
        ));
    }

    #[test]
    fn logit_gradient_sums_to_zero_per_cell_and_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let logits: Vec<f64> = (0..2 * 3 * 3).map(|_| rng.random_range(-1.5..1.5)).collect();
        let z = LogitsGrid::from_vec(2, 3, 3, logits.clone()).unwrap();
        let zt = targets(3, &[&[1, 2], &[2]]);
        let lambda = LambdaParams::default();
        let (_, grad) = grad_wrt_logits(&z, &zt, &lambda, LossMode::default()).unwrap();
        for cell in grad.chunks_exact(3) {
            assert!(cell.iter().sum::<f64>().abs() < 1e-10);
        }
        let fd = oracle::finite_diff_grad(
            |point| {
                let zz = LogitsGrid::from_vec(2, 3, 3, point.to_vec()).unwrap();
                let x = softmax_grid(&zz);
                set_loss(&x, &zt, &lambda, LossMode::default()).unwrap().loss
            },
            &logits,
            1e-6,
        )
        .unwrap();
        for (k, (&a, &n)) in grad.iter().zip(&fd).enumerate() {
            let denom = n.abs().max(1e-8);
            assert!((a - n).abs() / denom < 1e-5, "logit {k}: {a} vs {n}");
        }
    }

    #[test]
    fn zero_prob_gradient_gives_zero_logit_gradient() {
        let x = ProbGrid::uniform(1, 2, 3);
        let g = chain_through_softmax(&x, &vec![0.0; 6]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn csv_dump_covers_every_state() {
        let x = grid_1x2();
        let lambda = LambdaParams::new(0.9, 0.1).unwrap();
        let result = forward_backward(&x, &[1], &lambda).unwrap();
        let mut buf = Vec::new();
        write_alpha_beta_csv(
            &mut buf,
            result.alpha.as_ref().unwrap(),
            result.beta.as_ref().unwrap(),
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "i,j,s,log_alpha,log_beta");
        assert_eq!(lines.len(), 1 + 1 * 2 * 3);
        // Spot-check (0,0,0): alpha = ln 0.5, beta = continuation mass.
        let fields: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(&fields[..3], &["0", "0", "0"]);
        close(fields[3].parse::<f64>().unwrap(), 0.5_f64.ln(), 1e-9);
    }

    #[test]
    fn validated_stochastic_log_prob_is_nonpositive() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let lambda = LambdaParams::new(0.5, 0.5).unwrap();
        for _ in 0..10 {
            let (x, labels) =
                oracle::random_instance(&mut rng, &oracle::InstanceLimits::default());
            let lp = sequence_log_prob(&x, &labels, &lambda).unwrap();
            assert!(lp <= 1e-12, "log p = {lp}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn prop_transpose_symmetry(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, labels) =
                oracle::random_instance(&mut rng, &oracle::InstanceLimits::default());
            let lambda = LambdaParams::default();
            let a = sequence_log_prob(&x, &labels, &lambda).unwrap();
            let b = sequence_log_prob(&x.transpose(), &labels, &lambda.swapped()).unwrap();
            if a == f64::NEG_INFINITY {
                prop_assert_eq!(b, f64::NEG_INFINITY);
            } else {
                prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
            }
        }

        #[test]
        fn prop_dp_equals_oracle(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9));
            let (x, labels) =
                oracle::random_instance(&mut rng, &oracle::InstanceLimits::default());
            let lambda = LambdaParams::default();
            let dp = sequence_log_prob(&x, &labels, &lambda).unwrap().exp();
            let brute = oracle::brute_force_sequence_prob(&x, &labels, &lambda).unwrap();
            if brute == 0.0 {
                prop_assert!(dp == 0.0);
            } else {
                prop_assert!((dp - brute).abs() / brute <= 1e-9);
            }
        }
    }
}
