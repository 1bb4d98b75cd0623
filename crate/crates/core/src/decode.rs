//! Prediction path: argmax grids, grouping strategies that read sequences out
//! of them, and data-driven strategy selection.
//!
//! The recognizer never outputs geometry, so turning a grid of per-cell
//! classes into an ordered set of sequences requires a grouping rule. Each
//! [`GroupingStrategy`] builds groups of full-line segments, concatenates the
//! segment cells in reading order, collapses the result (merge adjacent
//! repeats, drop blanks), and discards empty sequences. [`select_strategy`]
//! picks among candidate rules by scoring their decodes against ground truth
//! on sample data: mean over ground-truth sequences of the best normalized
//! edit distance any decoded sequence achieves.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::labels::{collapse, LabelSequence, TargetSet};
use crate::metrics::edit_distance;
use crate::{Alphabet, Error, ProbGrid, Result, BLANK};

/// `H x W` matrix of winning class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgmaxGrid {
    h: usize,
    w: usize,
    q: usize,
    data: Vec<usize>,
}

impl ArgmaxGrid {
    /// Builds directly from class indices (row-major).
    pub fn from_classes(h: usize, w: usize, q: usize, data: Vec<usize>) -> Result<Self> {
        if h == 0 || w == 0 || q < 2 {
            return Err(Error::InvalidGrid(format!(
                "dimensions {h}x{w} with {q} classes"
            )));
        }
        if data.len() != h * w {
            return Err(Error::InvalidGrid(format!(
                "class buffer length {} != {h}*{w}",
                data.len()
            )));
        }
        if let Some(&k) = data.iter().find(|&&k| k >= q) {
            return Err(Error::InvalidGrid(format!(
                "class {k} out of range for {q} classes"
            )));
        }
        Ok(ArgmaxGrid { h, w, q, data })
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> usize {
        self.data[i * self.w + j]
    }

    /// One row of class indices.
    pub fn row(&self, i: usize) -> &[usize] {
        &self.data[i * self.w..(i + 1) * self.w]
    }

    /// One column of class indices, top to bottom.
    pub fn column(&self, j: usize) -> Vec<usize> {
        (0..self.h).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> ArgmaxGrid {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.w {
            for i in 0..self.h {
                data.push(self.get(i, j));
            }
        }
        ArgmaxGrid {
            h: self.w,
            w: self.h,
            q: self.q,
            data,
        }
    }
}

/// Per-cell argmax of a probability grid. Ties break toward the smallest
/// class index, so flat cells come out blank.
pub fn argmax_grid(x: &ProbGrid) -> ArgmaxGrid {
    let mut data = Vec::with_capacity(x.h() * x.w());
    for i in 0..x.h() {
        for j in 0..x.w() {
            let cell = x.cell(i, j);
            let mut best = 0;
            for (k, &v) in cell.iter().enumerate() {
                if v > cell[best] {
                    best = k;
                }
            }
            data.push(best);
        }
    }
    ArgmaxGrid {
        h: x.h(),
        w: x.w(),
        q: x.q(),
        data,
    }
}

/// How grid cells are grouped into sequences before collapsing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupingStrategy {
    /// One group per row.
    Rows,
    /// One group per column.
    Columns,
    /// Union of row and column groups, deduplicated by decoded sequence.
    RowsAndColumns,
    /// Runs of consecutive non-blank rows form one group each (multi-line
    /// reading of a single sequence).
    MergedRows,
}

impl GroupingStrategy {
    /// Every strategy, in the canonical candidate order.
    pub fn all() -> [GroupingStrategy; 4] {
        [
            GroupingStrategy::Rows,
            GroupingStrategy::Columns,
            GroupingStrategy::RowsAndColumns,
            GroupingStrategy::MergedRows,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            GroupingStrategy::Rows => "rows",
            GroupingStrategy::Columns => "columns",
            GroupingStrategy::RowsAndColumns => "rows-and-columns",
            GroupingStrategy::MergedRows => "merged-rows",
        }
    }
}

impl fmt::Display for GroupingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GroupingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rows" => Ok(GroupingStrategy::Rows),
            "columns" => Ok(GroupingStrategy::Columns),
            "rows-and-columns" => Ok(GroupingStrategy::RowsAndColumns),
            "merged-rows" => Ok(GroupingStrategy::MergedRows),
            other => Err(Error::InvalidConfig(format!(
                "unknown strategy {other:?} (expected rows, columns, rows-and-columns, or merged-rows)"
            ))),
        }
    }
}

/// A full-line span contributing to a decoded sequence. For vertical groups
/// the same fields describe the transposed frame: `r` is the column index and
/// `st..=en` the row span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowSegment {
    pub r: usize,
    pub st: usize,
    pub en: usize,
}

/// One decoded sequence plus the segments it was read from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedGroup {
    pub sequence: LabelSequence,
    /// True when the segments run top-to-bottom (column reading).
    pub vertical: bool,
    pub segments: Vec<RowSegment>,
}

/// Ordered decoded sequences; groups that collapsed to nothing are dropped.
#[derive(Debug, Clone, Default)]
pub struct DecodeResult {
    pub groups: Vec<DecodedGroup>,
}

impl DecodeResult {
    pub fn sequences(&self) -> impl Iterator<Item = &LabelSequence> {
        self.groups.iter().map(|g| &g.sequence)
    }

    pub fn to_sequences(&self) -> Vec<LabelSequence> {
        self.groups.iter().map(|g| g.sequence.clone()).collect()
    }

    /// Renders every decoded sequence through an alphabet.
    pub fn strings(&self, alphabet: &Alphabet) -> Result<Vec<String>> {
        self.groups
            .iter()
            .map(|g| alphabet.format(g.sequence.labels()))
            .collect()
    }
}

/// Reads sequences out of an argmax grid with the given strategy.
pub fn decode_with_strategy(m: &ArgmaxGrid, strategy: GroupingStrategy) -> DecodeResult {
    let groups = match strategy {
        GroupingStrategy::Rows => decode_rows(m),
        GroupingStrategy::Columns => decode_columns(m),
        GroupingStrategy::RowsAndColumns => {
            let mut groups = decode_rows(m);
            for g in decode_columns(m) {
                if !groups.iter().any(|existing| existing.sequence == g.sequence) {
                    groups.push(g);
                }
            }
            groups
        }
        GroupingStrategy::MergedRows => decode_merged_rows(m),
    };
    DecodeResult { groups }
}

fn push_group(
    out: &mut Vec<DecodedGroup>,
    cells: &[usize],
    q: usize,
    vertical: bool,
    segments: Vec<RowSegment>,
) {
    let collapsed = collapse(cells, q).expect("argmax classes are in range");
    if !collapsed.is_empty() {
        let sequence = LabelSequence::new(collapsed, q).expect("collapse output is a valid label");
        out.push(DecodedGroup {
            sequence,
            vertical,
            segments,
        });
    }
}

fn decode_rows(m: &ArgmaxGrid) -> Vec<DecodedGroup> {
    let mut out = Vec::new();
    for r in 0..m.h() {
        push_group(
            &mut out,
            m.row(r),
            m.q(),
            false,
            vec![RowSegment {
                r,
                st: 0,
                en: m.w() - 1,
            }],
        );
    }
    out
}

fn decode_columns(m: &ArgmaxGrid) -> Vec<DecodedGroup> {
    let mut out = Vec::new();
    for c in 0..m.w() {
        push_group(
            &mut out,
            &m.column(c),
            m.q(),
            true,
            vec![RowSegment {
                r: c,
                st: 0,
                en: m.h() - 1,
            }],
        );
    }
    out
}

fn decode_merged_rows(m: &ArgmaxGrid) -> Vec<DecodedGroup> {
    let mut out = Vec::new();
    let mut run_cells: Vec<usize> = Vec::new();
    let mut run_segments: Vec<RowSegment> = Vec::new();
    for r in 0..m.h() {
        let row = m.row(r);
        if row.iter().all(|&k| k == BLANK) {
            if !run_segments.is_empty() {
                push_group(&mut out, &run_cells, m.q(), false, run_segments.clone());
                run_cells.clear();
                run_segments.clear();
            }
        } else {
            run_cells.extend_from_slice(row);
            run_segments.push(RowSegment {
                r,
                st: 0,
                en: m.w() - 1,
            });
        }
    }
    if !run_segments.is_empty() {
        push_group(&mut out, &run_cells, m.q(), false, run_segments);
    }
    out
}

/// Mean over all ground-truth sequences of the best normalized edit distance
/// any decoded sequence achieves; an empty decode contributes 1.0 per truth.
pub fn strategy_score(strategy: GroupingStrategy, samples: &[(ArgmaxGrid, TargetSet)]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (m, gt) in samples {
        let decoded = decode_with_strategy(m, strategy);
        let sequences = decoded.to_sequences();
        for truth in gt.sequences() {
            count += 1;
            let best = sequences
                .iter()
                .map(|d| edit_distance(truth.labels(), d.labels()) as f64 / truth.len() as f64)
                .fold(f64::INFINITY, f64::min);
            total += if best.is_finite() { best } else { 1.0 };
        }
    }
    total / count as f64
}

/// Scores every candidate on the samples and returns the winner (ties go to
/// the earliest candidate) with its score.
pub fn select_strategy(
    candidates: &[GroupingStrategy],
    samples: &[(ArgmaxGrid, TargetSet)],
) -> Result<(GroupingStrategy, f64)> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("no candidate strategies".into()));
    }
    if samples.is_empty() {
        return Err(Error::InvalidConfig("no samples to score strategies on".into()));
    }
    let mut best = candidates[0];
    let mut best_score = strategy_score(best, samples);
    for &candidate in &candidates[1..] {
        let score = strategy_score(candidate, samples);
        if score < best_score {
            best = candidate;
            best_score = score;
        }
    }
    Ok((best, best_score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::LabelSequence;

    fn grid(h: usize, w: usize, q: usize, data: &[usize]) -> ArgmaxGrid {
        ArgmaxGrid::from_classes(h, w, q, data.to_vec()).unwrap()
    }

    fn seqs(result: &DecodeResult) -> Vec<Vec<usize>> {
        result.sequences().map(|s| s.labels().to_vec()).collect()
    }

    fn target_set(q: usize, labels: &[&[usize]]) -> TargetSet {
        TargetSet::new(
            labels
                .iter()
                .map(|l| LabelSequence::new(l.to_vec(), q).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn argmax_breaks_ties_toward_blank() {
        let x = ProbGrid::from_vec(1, 3, 3, vec![
            1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, // uniform -> blank
            0.1, 0.7, 0.2, // clear winner -> class 1
            0.3, 0.3, 0.4, // class 2
        ])
        .unwrap();
        let m = argmax_grid(&x);
        assert_eq!(m.row(0), &[0, 1, 2]);
    }

    #[test]
    fn rows_strategy_collapses_each_row() {
        let m = grid(2, 4, 10, &[0, 1, 1, 0, 0, 5, 0, 9]);
        let result = decode_with_strategy(&m, GroupingStrategy::Rows);
        assert_eq!(seqs(&result), vec![vec![1], vec![5, 9]]);
        assert_eq!(
            result.groups[0].segments,
            vec![RowSegment { r: 0, st: 0, en: 3 }]
        );
        assert!(!result.groups[0].vertical);
    }

    #[test]
    fn all_blank_grid_decodes_to_nothing() {
        let m = grid(3, 3, 4, &[0; 9]);
        for strategy in GroupingStrategy::all() {
            assert!(decode_with_strategy(&m, strategy).groups.is_empty());
        }
    }

    #[test]
    fn columns_equals_rows_on_transpose() {
        let m = grid(3, 4, 6, &[0, 1, 1, 0, 2, 0, 3, 0, 0, 4, 0, 5]);
        let by_columns: std::collections::BTreeSet<_> =
            seqs(&decode_with_strategy(&m, GroupingStrategy::Columns))
                .into_iter()
                .collect();
        let by_rows_t: std::collections::BTreeSet<_> =
            seqs(&decode_with_strategy(&m.transpose(), GroupingStrategy::Rows))
                .into_iter()
                .collect();
        assert_eq!(by_columns, by_rows_t);
    }

    #[test]
    fn rows_and_columns_deduplicates_decoded_sequences() {
        // Single cell: the row reading and the column reading are both "1".
        let m = grid(1, 1, 2, &[1]);
        let result = decode_with_strategy(&m, GroupingStrategy::RowsAndColumns);
        assert_eq!(seqs(&result), vec![vec![1]]);
    }

    #[test]
    fn merged_rows_joins_runs_separated_by_blank_rows() {
        let m = grid(4, 2, 6, &[
            1, 2, // row 0
            3, 0, // row 1 (continues the run)
            0, 0, // row 2 (separator)
            4, 0, // row 3
        ]);
        let result = decode_with_strategy(&m, GroupingStrategy::MergedRows);
        assert_eq!(seqs(&result), vec![vec![1, 2, 3], vec![4]]);
        assert_eq!(result.groups[0].segments.len(), 2);
        assert_eq!(result.groups[1].segments[0].r, 3);
    }

    #[test]
    fn decoding_is_deterministic() {
        let m = grid(2, 3, 4, &[1, 0, 2, 0, 3, 3]);
        for strategy in GroupingStrategy::all() {
            let a = decode_with_strategy(&m, strategy);
            let b = decode_with_strategy(&m, strategy);
            assert_eq!(seqs(&a), seqs(&b));
        }
    }

    #[test]
    fn perfect_rows_score_zero_and_win() {
        let m = grid(2, 4, 10, &[0, 1, 2, 0, 5, 0, 9, 0]);
        let gt = target_set(10, &[&[1, 2], &[5, 9]]);
        let samples = vec![(m, gt)];
        let (winner, score) =
            select_strategy(&[GroupingStrategy::Rows, GroupingStrategy::Columns], &samples)
                .unwrap();
        assert_eq!(winner, GroupingStrategy::Rows);
        assert_eq!(score, 0.0);
    }

    #[test]
    fn vertical_content_needs_column_reading() {
        // Column 0 holds "123"; row reading sees three singletons.
        let m = grid(3, 3, 5, &[1, 0, 0, 2, 0, 0, 3, 0, 0]);
        let gt = target_set(5, &[&[1, 2, 3]]);
        let samples = vec![(m, gt)];
        let rows_score = strategy_score(GroupingStrategy::Rows, &samples);
        let both_score = strategy_score(GroupingStrategy::RowsAndColumns, &samples);
        assert!(both_score < rows_score);
        assert_eq!(both_score, 0.0);
        // Best row decode is one character out of three: distance 2/3.
        assert!((rows_score - 2.0 / 3.0).abs() < 1e-12);
        let (winner, _) = select_strategy(
            &[GroupingStrategy::Rows, GroupingStrategy::RowsAndColumns],
            &samples,
        )
        .unwrap();
        assert_eq!(winner, GroupingStrategy::RowsAndColumns);
    }

    #[test]
    fn empty_decode_scores_one_per_truth() {
        let m = grid(1, 2, 3, &[0, 0]);
        let gt = target_set(3, &[&[1], &[2]]);
        let score = strategy_score(GroupingStrategy::Rows, &[(m, gt)]);
        assert_eq!(score, 1.0);
    }

    #[test]
    fn ties_go_to_the_first_candidate() {
        let m = grid(1, 3, 3, &[1, 0, 2]);
        let gt = target_set(3, &[&[1, 2]]);
        let samples = vec![(m, gt)];
        // A single row decodes identically under rows and merged-rows.
        let (winner, score) = select_strategy(
            &[GroupingStrategy::MergedRows, GroupingStrategy::Rows],
            &samples,
        )
        .unwrap();
        assert_eq!(winner, GroupingStrategy::MergedRows);
        assert_eq!(score, 0.0);
    }

    #[test]
    fn single_candidate_is_returned_with_its_score() {
        let m = grid(1, 2, 3, &[0, 0]);
        let gt = target_set(3, &[&[1]]);
        let (winner, score) =
            select_strategy(&[GroupingStrategy::Columns], &[(m, gt)]).unwrap();
        assert_eq!(winner, GroupingStrategy::Columns);
        assert_eq!(score, 1.0);
    }

    #[test]
    fn select_strategy_rejects_empty_inputs() {
        let m = grid(1, 1, 2, &[1]);
        let gt = target_set(2, &[&[1]]);
        assert!(select_strategy(&[], &[(m, gt)]).is_err());
        assert!(select_strategy(&[GroupingStrategy::Rows], &[]).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in GroupingStrategy::all() {
            assert_eq!(s.name().parse::<GroupingStrategy>().unwrap(), s);
        }
        assert!("diagonal".parse::<GroupingStrategy>().is_err());
    }
}
