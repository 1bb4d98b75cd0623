//! Probability and logit grids.
//!
//! A [`ProbGrid`] stores an `H x W` matrix of length-`Q` distributions in a
//! flat row-major buffer (`((i * w) + j) * q + k`). Construction checks only
//! finiteness and non-negativity: gradient-check harnesses legitimately feed
//! grids whose cells do not sum to one. [`validate_grid`] is the strict check
//! with tolerance [`VALIDATED_SUM_TOL`]; callers that require the validated
//! form (the CLI, the decoder) run it explicitly.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance on per-cell sums for a grid to count as validated.
pub const VALIDATED_SUM_TOL: f64 = 1e-9;

/// `H x W` grid of non-negative class weights, one length-`Q` vector per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbGrid {
    h: usize,
    w: usize,
    q: usize,
    data: Vec<f64>,
}

impl ProbGrid {
    /// Builds a grid from a flat row-major buffer, rejecting wrong lengths,
    /// non-finite entries, and negative entries.
    pub fn from_vec(h: usize, w: usize, q: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || q < 2 {
            return Err(Error::InvalidGrid(format!(
                "dimensions {h}x{w}x{q} (need h,w >= 1 and q >= 2)"
            )));
        }
        if data.len() != h * w * q {
            return Err(Error::InvalidGrid(format!(
                "buffer length {} != {h}*{w}*{q}",
                data.len()
            )));
        }
        for (n, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidGrid(format!("non-finite entry at offset {n}")));
            }
            if v < 0.0 {
                return Err(Error::InvalidGrid(format!(
                    "negative entry {v} at offset {n}"
                )));
            }
        }
        Ok(ProbGrid { h, w, q, data })
    }

    /// Grid with every cell uniform (`1/q` per class).
    pub fn uniform(h: usize, w: usize, q: usize) -> Self {
        ProbGrid::from_vec(h, w, q, vec![1.0 / q as f64; h * w * q]).expect("uniform grid is valid")
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.w + j) * self.q + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.w + j) * self.q + k] = v;
    }

    /// The length-`Q` distribution at one cell.
    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let base = (i * self.w + j) * self.q;
        &self.data[base..base + self.q]
    }

    /// Transposed copy: cell `(i, j)` moves to `(j, i)`.
    pub fn transpose(&self) -> ProbGrid {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.h {
            for j in 0..self.w {
                let src = (i * self.w + j) * self.q;
                let dst = (j * self.h + i) * self.q;
                data[dst..dst + self.q].copy_from_slice(&self.data[src..src + self.q]);
            }
        }
        ProbGrid {
            h: self.w,
            w: self.h,
            q: self.q,
            data,
        }
    }

    /// Serializes as JSON `{"h", "w", "q", "probs"}` with row-major floats.
    pub fn to_json<W: Write>(&self, mut out: W) -> Result<()> {
        let file = GridFile {
            h: self.h,
            w: self.w,
            q: self.q,
            probs: self.data.clone(),
        };
        serde_json::to_writer(&mut out, &file)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    /// Reads the JSON form written by [`ProbGrid::to_json`].
    pub fn from_json<R: Read>(input: R) -> Result<Self> {
        let file: GridFile = serde_json::from_reader(input)?;
        ProbGrid::from_vec(file.h, file.w, file.q, file.probs)
    }
}

#[derive(Serialize, Deserialize)]
struct GridFile {
    h: usize,
    w: usize,
    q: usize,
    probs: Vec<f64>,
}

/// One problem found by [`validate_grid`].
#[derive(Debug, Clone, PartialEq)]
pub enum GridFinding {
    /// Cell weights do not sum to 1; `deviation` = `sum - 1`.
    CellSumDeviation { i: usize, j: usize, deviation: f64 },
    NonFinite { i: usize, j: usize, k: usize },
    Negative { i: usize, j: usize, k: usize, value: f64 },
}

/// Report from [`validate_grid`]: empty `findings` means the grid is a proper
/// per-cell probability distribution.
#[derive(Debug, Clone, Default)]
pub struct GridDiagnostics {
    pub findings: Vec<GridFinding>,
    /// Smallest entry anywhere in the grid.
    pub min_entry: f64,
    /// Largest `|sum - 1|` over cells.
    pub max_sum_deviation: f64,
}

impl GridDiagnostics {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Checks that every cell is a probability distribution: finite, non-negative,
/// summing to 1 within [`VALIDATED_SUM_TOL`].
pub fn validate_grid(x: &ProbGrid) -> GridDiagnostics {
    let mut diag = GridDiagnostics {
        findings: Vec::new(),
        min_entry: f64::INFINITY,
        max_sum_deviation: 0.0,
    };
    for i in 0..x.h() {
        for j in 0..x.w() {
            let cell = x.cell(i, j);
            let mut sum = 0.0;
            for (k, &v) in cell.iter().enumerate() {
                if !v.is_finite() {
                    diag.findings.push(GridFinding::NonFinite { i, j, k });
                    continue;
                }
                if v < 0.0 {
                    diag.findings.push(GridFinding::Negative { i, j, k, value: v });
                }
                diag.min_entry = diag.min_entry.min(v);
                sum += v;
            }
            let deviation = sum - 1.0;
            if deviation.abs() > diag.max_sum_deviation.abs() {
                diag.max_sum_deviation = deviation;
            }
            if deviation.abs() > VALIDATED_SUM_TOL {
                diag.findings.push(GridFinding::CellSumDeviation { i, j, deviation });
            }
        }
    }
    diag
}

/// `H x W` grid of unconstrained pre-softmax activations, same layout as
/// [`ProbGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsGrid {
    h: usize,
    w: usize,
    q: usize,
    data: Vec<f64>,
}

impl LogitsGrid {
    /// Builds a logit grid, rejecting non-finite entries.
    pub fn from_vec(h: usize, w: usize, q: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || q < 2 {
            return Err(Error::InvalidGrid(format!(
                "dimensions {h}x{w}x{q} (need h,w >= 1 and q >= 2)"
            )));
        }
        if data.len() != h * w * q {
            return Err(Error::InvalidGrid(format!(
                "buffer length {} != {h}*{w}*{q}",
                data.len()
            )));
        }
        if let Some(n) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite logit at offset {n}")));
        }
        Ok(LogitsGrid { h, w, q, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.w + j) * self.q + k]
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let base = (i * self.w + j) * self.q;
        &self.data[base..base + self.q]
    }
}

/// Per-cell softmax, stabilized by max-subtraction.
pub fn softmax_grid(z: &LogitsGrid) -> ProbGrid {
    let q = z.q();
    let mut data = Vec::with_capacity(z.data().len());
    for chunk in z.data().chunks_exact(q) {
        let max = chunk.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut exps: Vec<f64> = chunk.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for e in &mut exps {
            *e /= sum;
        }
        data.extend_from_slice(&exps);
    }
    ProbGrid::from_vec(z.h(), z.w(), z.q(), data).expect("softmax output is a valid grid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_shape_and_entries() {
        assert!(ProbGrid::from_vec(1, 1, 2, vec![0.5, 0.5]).is_ok());
        assert!(ProbGrid::from_vec(1, 1, 2, vec![0.5]).is_err());
        assert!(ProbGrid::from_vec(0, 1, 2, vec![]).is_err());
        assert!(ProbGrid::from_vec(1, 1, 2, vec![0.5, f64::NAN]).is_err());
        assert!(ProbGrid::from_vec(1, 1, 2, vec![-0.1, 1.1]).is_err());
    }

    #[test]
    fn validate_flags_nothing_on_clean_grid() {
        let diag = validate_grid(&ProbGrid::uniform(2, 3, 4));
        assert!(diag.is_clean());
        assert!((diag.min_entry - 0.25).abs() < 1e-15);
        assert!(diag.max_sum_deviation.abs() < 1e-15);
    }

    #[test]
    fn validate_flags_sum_deviation_with_location() {
        // Cell (0, 1) sums to 0.9.
        let mut x = ProbGrid::uniform(1, 2, 2);
        x.set(0, 1, 0, 0.4);
        x.set(0, 1, 1, 0.5);
        let diag = validate_grid(&x);
        assert_eq!(diag.findings.len(), 1);
        match &diag.findings[0] {
            GridFinding::CellSumDeviation { i, j, deviation } => {
                assert_eq!((*i, *j), (0, 1));
                assert!((deviation + 0.1).abs() < 1e-12);
            }
            other => panic!("unexpected finding {other:?}"),
        }
        assert!((diag.max_sum_deviation + 0.1).abs() < 1e-12);
    }

    #[test]
    fn validate_flags_nan() {
        let mut x = ProbGrid::uniform(1, 1, 2);
        // Bypass from_vec checks to simulate a corrupted buffer.
        x.data[0] = f64::NAN;
        let diag = validate_grid(&x);
        assert!(diag
            .findings
            .iter()
            .any(|f| matches!(f, GridFinding::NonFinite { i: 0, j: 0, k: 0 })));
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let z = LogitsGrid::from_vec(1, 1, 4, vec![3.0; 4]).unwrap();
        let x = softmax_grid(&z);
        for k in 0..4 {
            assert!((x.get(0, 0, k) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_matches_analytic_two_class_case() {
        // Logits (0, ln 3) -> (0.25, 0.75).
        let z = LogitsGrid::from_vec(1, 1, 2, vec![0.0, 3.0_f64.ln()]).unwrap();
        let x = softmax_grid(&z);
        assert!((x.get(0, 0, 0) - 0.25).abs() < 1e-12);
        assert!((x.get(0, 0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let z1 = LogitsGrid::from_vec(1, 1, 3, vec![0.1, -2.0, 1.4]).unwrap();
        let z2 = LogitsGrid::from_vec(1, 1, 3, vec![100.1, 98.0, 101.4]).unwrap();
        let x1 = softmax_grid(&z1);
        let x2 = softmax_grid(&z2);
        for k in 0..3 {
            assert!((x1.get(0, 0, k) - x2.get(0, 0, k)).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_output_passes_validation() {
        let z = LogitsGrid::from_vec(2, 2, 3, (0..12).map(|v| v as f64 * 0.7 - 4.0).collect())
            .unwrap();
        assert!(validate_grid(&softmax_grid(&z)).is_clean());
    }

    #[test]
    fn logits_reject_non_finite() {
        assert!(LogitsGrid::from_vec(1, 1, 2, vec![0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn transpose_moves_cells() {
        let x = ProbGrid::from_vec(1, 2, 2, vec![0.9, 0.1, 0.3, 0.7]).unwrap();
        let t = x.transpose();
        assert_eq!((t.h(), t.w()), (2, 1));
        assert_eq!(t.cell(0, 0), &[0.9, 0.1]);
        assert_eq!(t.cell(1, 0), &[0.3, 0.7]);
    }

    #[test]
    fn json_round_trip() {
        let x = ProbGrid::from_vec(1, 2, 2, vec![0.9, 0.1, 0.3, 0.7]).unwrap();
        let mut buf = Vec::new();
        x.to_json(&mut buf).unwrap();
        let back = ProbGrid::from_json(&buf[..]).unwrap();
        assert_eq!(back, x);
    }
}
