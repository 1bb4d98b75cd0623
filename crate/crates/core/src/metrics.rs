//! Evaluation metrics for unordered sequence sets: edit distance, optimal
//! set-to-set matching, and the NED / SA / IA aggregates.
//!
//! Predictions and ground truths come without any ordering or geometry, so
//! per-image scoring first solves a minimum-cost one-to-one assignment on the
//! normalized-edit-distance matrix. Ground-truth sequences left unmatched
//! cost a full 1.0 and count as wrong; spurious predictions carry no distance
//! penalty but break image-level exactness.

use std::fmt;

use serde::Serialize;

use crate::labels::{LabelSequence, TargetSet};
use crate::{Error, Result};

/// Unit-cost Levenshtein distance between two sequences.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// [`edit_distance`] over characters.
pub fn edit_distance_str(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    edit_distance(&a, &b)
}

/// Edit distance normalized by the ground-truth length. Can exceed 1 when
/// the prediction is much longer than the truth.
pub fn ned(gt: &LabelSequence, pred: &LabelSequence) -> f64 {
    edit_distance(gt.labels(), pred.labels()) as f64 / gt.len() as f64
}

/// One matched (ground truth, prediction) pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairMatch {
    pub gt_index: usize,
    pub pred_index: usize,
    pub ned: f64,
    pub exact: bool,
}

/// Per-image result of matching predictions against ground truth.
#[derive(Debug, Clone, Serialize)]
pub struct MatchReport {
    pub pairs: Vec<PairMatch>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
    /// Number of ground-truth sequences in the image.
    pub gt_count: usize,
    /// Ground-truth sequences recognized exactly.
    pub exact_sequences: usize,
    /// Sum of pair distances plus 1.0 per unmatched ground truth.
    pub total_ned: f64,
    /// True when the predicted multiset equals the ground-truth multiset.
    pub image_exact: bool,
}

impl MatchReport {
    /// Mean normalized edit distance per ground-truth sequence.
    pub fn mean_ned(&self) -> f64 {
        self.total_ned / self.gt_count as f64
    }
}

/// Matches predictions to ground truth by minimum total normalized edit
/// distance (one-to-one; unmatched truths cost 1.0, unmatched predictions
/// cost nothing). Deterministic: among equal-cost assignments, earlier
/// predictions and earlier truths are preferred.
pub fn match_sets(pred: &[LabelSequence], gt: &TargetSet) -> MatchReport {
    let truths = gt.sequences();
    let n_gt = truths.len();
    let n_pred = pred.len();
    debug_assert!(n_gt <= 20, "assignment uses a bitmask over ground truths");
    let cost: Vec<Vec<f64>> = pred
        .iter()
        .map(|p| truths.iter().map(|t| ned(t, p)).collect())
        .collect();
    // dp[p][mask]: best cost using predictions p.. with `mask` truths still
    // unmatched; leftovers pay 1.0 each.
    let full = 1usize << n_gt;
    let mut dp = vec![vec![0.0f64; full]; n_pred + 1];
    for mask in 0..full {
        dp[n_pred][mask] = mask.count_ones() as f64;
    }
    for p in (0..n_pred).rev() {
        for mask in 0..full {
            let mut best = dp[p + 1][mask]; // leave prediction p unmatched
            for g in 0..n_gt {
                if mask & (1 << g) != 0 {
                    let cand = cost[p][g] + dp[p + 1][mask & !(1 << g)];
                    if cand < best {
                        best = cand;
                    }
                }
            }
            dp[p][mask] = best;
        }
    }
    // Reconstruct the argmin choices.
    let mut pairs = Vec::new();
    let mut unmatched_pred = Vec::new();
    let mut mask = full - 1;
    for p in 0..n_pred {
        let skip = dp[p + 1][mask];
        let mut chosen = None;
        let mut best = skip;
        for g in 0..n_gt {
            if mask & (1 << g) != 0 {
                let cand = cost[p][g] + dp[p + 1][mask & !(1 << g)];
                if cand < best {
                    best = cand;
                    chosen = Some(g);
                }
            }
        }
        match chosen {
            Some(g) => {
                pairs.push(PairMatch {
                    gt_index: g,
                    pred_index: p,
                    ned: cost[p][g],
                    exact: cost[p][g] == 0.0,
                });
                mask &= !(1 << g);
            }
            None => unmatched_pred.push(p),
        }
    }
    let unmatched_gt: Vec<usize> = (0..n_gt).filter(|g| mask & (1 << g) != 0).collect();
    let total_ned =
        pairs.iter().map(|p| p.ned).sum::<f64>() + unmatched_gt.len() as f64;
    let exact_sequences = pairs.iter().filter(|p| p.exact).count();
    let mut pred_sorted: Vec<&LabelSequence> = pred.iter().collect();
    let mut gt_sorted: Vec<&LabelSequence> = truths.iter().collect();
    pred_sorted.sort();
    gt_sorted.sort();
    MatchReport {
        pairs,
        unmatched_gt,
        unmatched_pred,
        gt_count: n_gt,
        exact_sequences,
        total_ned,
        image_exact: pred_sorted == gt_sorted,
    }
}

/// Dataset-level metrics, all percentages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetMetrics {
    /// 100 x mean normalized edit distance per ground-truth sequence.
    pub ned_pct: f64,
    /// 100 x exactly recognized sequences / total ground-truth sequences.
    pub sa_pct: f64,
    /// 100 x exactly recognized images / images.
    pub ia_pct: f64,
    pub images: usize,
    pub sequences: usize,
}

impl fmt::Display for DatasetMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "images     {}", self.images)?;
        writeln!(f, "sequences  {}", self.sequences)?;
        writeln!(f, "NED%       {:.2}", self.ned_pct)?;
        writeln!(f, "SA%        {:.2}", self.sa_pct)?;
        write!(f, "IA%        {:.2}", self.ia_pct)
    }
}

/// Pools per-image reports into dataset metrics. Sequence-level figures are
/// weighted by ground-truth count, not averaged per image.
pub fn aggregate(reports: &[MatchReport]) -> Result<DatasetMetrics> {
    if reports.is_empty() {
        return Err(Error::InvalidConfig("no match reports to aggregate".into()));
    }
    let sequences: usize = reports.iter().map(|r| r.gt_count).sum();
    let total_ned: f64 = reports.iter().map(|r| r.total_ned).sum();
    let exact: usize = reports.iter().map(|r| r.exact_sequences).sum();
    let exact_images = reports.iter().filter(|r| r.image_exact).count();
    Ok(DatasetMetrics {
        ned_pct: 100.0 * total_ned / sequences as f64,
        sa_pct: 100.0 * exact as f64 / sequences as f64,
        ia_pct: 100.0 * exact_images as f64 / reports.len() as f64,
        images: reports.len(),
        sequences,
    })
}
