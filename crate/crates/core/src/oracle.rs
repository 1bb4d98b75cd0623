//! Brute-force reference implementations used to certify the lattice module.
//!
//! Everything here runs in plain linear-space double precision, deliberately
//! sharing no code with the log-space dynamic programs it certifies. Guards
//! refuse inputs large enough to make enumeration meaningless or linear-space
//! arithmetic unsafe: with at most 10^4 paths and 10^6 path-labeling pairs,
//! products of at most a dozen probabilities cannot underflow.

use std::collections::BTreeMap;

use rand::Rng;

use crate::labels::collapse;
use crate::lattice::LambdaParams;
use crate::{Error, ProbGrid, Result};

/// Maximum number of monotone paths [`enumerate_paths`] will materialize.
pub const PATH_GUARD: u64 = 10_000;

/// Maximum `paths * Q^T` work [`brute_force_total_prob`] will attempt.
pub const LABELING_GUARD: u64 = 1_000_000;

/// A monotone path: `H + W - 1` cells from `(0,0)` to `(H-1,W-1)`, each step
/// moving right or down.
pub type MonotonePath = Vec<(usize, usize)>;

/// Number of monotone paths on an `h x w` grid: `C(h+w-2, h-1)`.
pub fn path_count(h: usize, w: usize) -> u128 {
    let n = (h + w - 2) as u128;
    let k = (h - 1).min(w - 1) as u128;
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) / (i + 1);
    }
    c
}

/// Enumerates every monotone path exactly once (depth-first, right before
/// down, so the all-right-then-down path comes first).
pub fn enumerate_paths(h: usize, w: usize) -> Result<Vec<MonotonePath>> {
    let count = path_count(h, w);
    if count > PATH_GUARD as u128 {
        return Err(Error::GuardExceeded {
            what: "path enumeration",
            limit: PATH_GUARD,
            actual: count.min(u64::MAX as u128) as u64,
        });
    }
    let mut paths = Vec::with_capacity(count as usize);
    let mut prefix = vec![(0, 0)];
    walk(h, w, &mut prefix, &mut paths);
    Ok(paths)
}

fn walk(h: usize, w: usize, prefix: &mut MonotonePath, out: &mut Vec<MonotonePath>) {
    let &(i, j) = prefix.last().expect("prefix starts non-empty");
    if i == h - 1 && j == w - 1 {
        out.push(prefix.clone());
        return;
    }
    if j + 1 < w {
        prefix.push((i, j + 1));
        walk(h, w, prefix, out);
        prefix.pop();
    }
    if i + 1 < h {
        prefix.push((i + 1, j));
        walk(h, w, prefix, out);
        prefix.pop();
    }
}

/// Product of per-step transition weights along a path.
pub fn path_weight(path: &[(usize, usize)], lambda: &LambdaParams) -> f64 {
    let mut weight = 1.0;
    for step in path.windows(2) {
        if step[1].1 == step[0].1 + 1 {
            weight *= lambda.lambda1();
        } else {
            weight *= lambda.lambda2();
        }
    }
    weight
}

/// Standard 1D CTC forward probability of `labels` over `cells` (one class
/// distribution per frame), in linear space.
///
/// Labels that no frame labeling can produce (for example a repeated
/// character with too few frames for the separating blank) yield exactly 0.
/// Only a label too long for *any* labeling of that many frames is an error,
/// mirroring the lattice's feasibility precondition.
pub fn ctc1d_forward(cells: &[&[f64]], labels: &[usize]) -> Result<f64> {
    let t_len = cells.len();
    if labels.len() > t_len {
        return Err(Error::InfeasibleTarget {
            index: None,
            len_ext: 2 * labels.len() + 1,
            max_ext: 2 * t_len + 1,
            h: 1,
            w: t_len,
        });
    }
    let ext = crate::labels::extend_label(labels);
    let s_len = ext.len();
    let mut a = vec![0.0; s_len];
    a[0] = cells[0][ext[0]];
    if s_len > 1 {
        a[1] = cells[0][ext[1]];
    }
    for &cell in &cells[1..] {
        let prev = a.clone();
        for s in 0..s_len {
            let mut m = prev[s];
            if s >= 1 {
                m += prev[s - 1];
            }
            if s >= 2 && ext[s] != crate::BLANK && ext[s] != ext[s - 2] {
                m += prev[s - 2];
            }
            a[s] = m * cell[ext[s]];
        }
    }
    let mut p = a[s_len - 1];
    if s_len >= 2 {
        p += a[s_len - 2];
    }
    Ok(p)
}

/// Sum over all labelings of `cells` that collapse to `labels`, by direct
/// enumeration of the `Q^T` assignments. Certifies [`ctc1d_forward`].
pub fn exhaustive_sequence_mass(cells: &[&[f64]], labels: &[usize]) -> Result<f64> {
    let q = cells[0].len();
    let work = (q as u128).pow(cells.len() as u32);
    if work > LABELING_GUARD as u128 {
        return Err(Error::GuardExceeded {
            what: "labeling enumeration",
            limit: LABELING_GUARD,
            actual: work.min(u64::MAX as u128) as u64,
        });
    }
    let mut total = 0.0;
    let mut assignment = vec![0usize; cells.len()];
    loop {
        if collapse(&assignment, q)? == labels {
            total += assignment
                .iter()
                .zip(cells)
                .map(|(&k, cell)| cell[k])
                .product::<f64>();
        }
        // Increment the base-q counter; stop after wrapping.
        let mut pos = 0;
        loop {
            if pos == assignment.len() {
                return Ok(total);
            }
            assignment[pos] += 1;
            if assignment[pos] < q {
                break;
            }
            assignment[pos] = 0;
            pos += 1;
        }
    }
}

/// Probability of `labels` by full path enumeration: for each monotone path,
/// its transition-weight product times the 1D CTC probability along its cells.
pub fn brute_force_sequence_prob(
    x: &ProbGrid,
    labels: &[usize],
    lambda: &LambdaParams,
) -> Result<f64> {
    let paths = enumerate_paths(x.h(), x.w())?;
    let mut total = 0.0;
    for path in &paths {
        let cells: Vec<&[f64]> = path.iter().map(|&(i, j)| x.cell(i, j)).collect();
        total += path_weight(path, lambda) * ctc1d_forward(&cells, labels)?;
    }
    Ok(total)
}

/// Total probability mass over every label sequence, with the per-sequence
/// breakdown, by enumerating all `Q^T` labelings of every path.
#[derive(Debug, Clone)]
pub struct TotalMass {
    /// Sum over paths and labelings of weight times emission product.
    pub total: f64,
    /// The same mass grouped by the collapsed sequence each labeling yields.
    /// The empty sequence (all-blank labelings) is a key like any other.
    pub by_sequence: BTreeMap<Vec<usize>, f64>,
}

/// Enumerates every (path, labeling) pair and groups the mass by collapsed
/// sequence. The grand total always equals the total path weight
/// (`sum over paths of the lambda product`) on a validated grid, since the
/// per-cell distributions sum to 1.
pub fn brute_force_total_prob(x: &ProbGrid, lambda: &LambdaParams) -> Result<TotalMass> {
    let t_len = x.h() + x.w() - 1;
    let count = path_count(x.h(), x.w());
    let work = count.saturating_mul((x.q() as u128).pow(t_len as u32));
    if work > LABELING_GUARD as u128 {
        return Err(Error::GuardExceeded {
            what: "total-mass enumeration",
            limit: LABELING_GUARD,
            actual: work.min(u64::MAX as u128) as u64,
        });
    }
    let paths = enumerate_paths(x.h(), x.w())?;
    let q = x.q();
    let mut by_sequence: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    let mut total = 0.0;
    for path in &paths {
        let weight = path_weight(path, lambda);
        let cells: Vec<&[f64]> = path.iter().map(|&(i, j)| x.cell(i, j)).collect();
        let mut assignment = vec![0usize; t_len];
        'labelings: loop {
            let mass = weight
                * assignment
                    .iter()
                    .zip(&cells)
                    .map(|(&k, cell)| cell[k])
                    .product::<f64>();
            total += mass;
            *by_sequence.entry(collapse(&assignment, q)?).or_insert(0.0) += mass;
            let mut pos = 0;
            loop {
                if pos == t_len {
                    break 'labelings;
                }
                assignment[pos] += 1;
                if assignment[pos] < q {
                    break;
                }
                assignment[pos] = 0;
                pos += 1;
            }
        }
    }
    Ok(TotalMass { total, by_sequence })
}

/// Central finite differences of `f` at `point`: coordinate `i` gets
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_diff_grad<F>(mut f: F, point: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(point.len());
    let mut x = point.to_vec();
    for i in 0..point.len() {
        x[i] = point[i] + eps;
        let up = f(&x);
        x[i] = point[i] - eps;
        let down = f(&x);
        x[i] = point[i];
        let d = (up - down) / (2.0 * eps);
        if !d.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite difference at coordinate {i} (f(+)={up}, f(-)={down})"
            )));
        }
        grad.push(d);
    }
    Ok(grad)
}

/// Bounds for [`random_instance`].
#[derive(Debug, Clone)]
pub struct InstanceLimits {
    pub max_h: usize,
    pub max_w: usize,
    pub max_q: usize,
    pub max_len: usize,
    /// Restrict label length so that even an all-repeats label fits on every
    /// path, guaranteeing strictly positive probability mass.
    pub ensure_positive: bool,
}

impl Default for InstanceLimits {
    fn default() -> Self {
        InstanceLimits {
            max_h: 4,
            max_w: 4,
            max_q: 4,
            max_len: 3,
            ensure_positive: false,
        }
    }
}

/// Draws a random validated grid plus a feasible label for it. Entries are
/// uniform on [0.05, 1] before per-cell normalization, keeping every
/// probability comfortably away from zero.
pub fn random_instance<R: Rng>(rng: &mut R, limits: &InstanceLimits) -> (ProbGrid, Vec<usize>) {
    let h = rng.random_range(1..=limits.max_h);
    let w = rng.random_range(1..=limits.max_w);
    let q = rng.random_range(2..=limits.max_q.max(2));
    let x = random_grid(rng, h, w, q);
    // A path holds h+w-1 cells; an all-repeats label of length n needs 2n-1.
    let cap = if limits.ensure_positive {
        (h + w) / 2
    } else {
        h + w - 1
    };
    let len = rng.random_range(1..=limits.max_len.min(cap).max(1));
    let labels = (0..len).map(|_| rng.random_range(1..q)).collect();
    (x, labels)
}

/// Random validated grid with entries bounded away from zero.
pub fn random_grid<R: Rng>(rng: &mut R, h: usize, w: usize, q: usize) -> ProbGrid {
    let mut data = Vec::with_capacity(h * w * q);
    for _ in 0..h * w {
        let cell: Vec<f64> = (0..q).map(|_| rng.random_range(0.05..1.0)).collect();
        let sum: f64 = cell.iter().sum();
        data.extend(cell.into_iter().map(|v| v / sum));
    }
    ProbGrid::from_vec(h, w, q, data).expect("random grid construction is valid")
}
