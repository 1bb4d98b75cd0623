//! Alphabets, label sequences, and the blank-extension / collapse machinery.
//!
//! Class index 0 is always the blank. A [`LabelSequence`] holds non-blank
//! classes only; the lattice works on its *extended* form, which interleaves
//! blanks around every character (`"ab"` becomes `- a - b -`). [`collapse`]
//! is the inverse reading direction: merge adjacent repeats, then drop blanks.

use crate::{Error, Result};

/// The class index reserved for blank in every alphabet.
pub const BLANK: usize = 0;

/// Maps non-blank class indices to display characters. Index 0 is blank and
/// has no character.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Alphabet {
    /// Builds an alphabet from the characters for classes `1..=symbols.len()`.
    pub fn new(symbols: Vec<char>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::InvalidAlphabet(
                "need at least one non-blank symbol".into(),
            ));
        }
        for (i, &c) in symbols.iter().enumerate() {
            if symbols[..i].contains(&c) {
                return Err(Error::InvalidAlphabet(format!("duplicate symbol {c:?}")));
            }
        }
        Ok(Alphabet { symbols })
    }

    /// The ten decimal digits: class `d + 1` displays as the digit `d`.
    pub fn digits() -> Self {
        Alphabet {
            symbols: ('0'..='9').collect(),
        }
    }

    /// Number of classes including blank.
    pub fn q(&self) -> usize {
        self.symbols.len() + 1
    }

    /// Display character for a non-blank class.
    pub fn char_of(&self, class: usize) -> Option<char> {
        if class == BLANK {
            None
        } else {
            self.symbols.get(class - 1).copied()
        }
    }

    /// Class index for a character.
    pub fn class_of(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c).map(|i| i + 1)
    }

    /// Parses a string of symbols into a label sequence.
    pub fn parse(&self, s: &str) -> Result<LabelSequence> {
        let mut labels = Vec::with_capacity(s.chars().count());
        for c in s.chars() {
            let class = self
                .class_of(c)
                .ok_or_else(|| Error::InvalidLabel(format!("character {c:?} not in alphabet")))?;
            labels.push(class);
        }
        LabelSequence::new(labels, self.q())
    }

    /// Renders non-blank class indices back into a string.
    pub fn format(&self, labels: &[usize]) -> Result<String> {
        labels
            .iter()
            .map(|&k| {
                self.char_of(k)
                    .ok_or_else(|| Error::InvalidLabel(format!("class {k} has no symbol")))
            })
            .collect()
    }
}

/// A non-empty sequence of non-blank class indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelSequence {
    labels: Vec<usize>,
}

impl LabelSequence {
    /// Validates that `labels` is non-empty and every class is in `[1, q)`.
    pub fn new(labels: Vec<usize>, q: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidLabel("label sequence must be non-empty".into()));
        }
        for &k in &labels {
            if k == BLANK {
                return Err(Error::InvalidLabel("blank not allowed in a label".into()));
            }
            if k >= q {
                return Err(Error::InvalidLabel(format!(
                    "class {k} out of range for {q} classes"
                )));
            }
        }
        Ok(LabelSequence { labels })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false // by construction
    }

    /// The blank-extended form driving the lattice.
    pub fn extended(&self) -> Vec<usize> {
        extend_label(&self.labels)
    }
}

/// Interleaves blanks around every label: length becomes `2n + 1`, blanks at
/// even positions. Accepts the empty sequence (extends to a single blank).
pub fn extend_label(labels: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &k in labels {
        ext.push(k);
        ext.push(BLANK);
    }
    ext
}

/// Merges adjacent repeats, then removes blanks. May return an empty vector.
pub fn collapse(path_labels: &[usize], q: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path_labels {
        if k >= q {
            return Err(Error::InvalidLabel(format!(
                "class {k} out of range for {q} classes"
            )));
        }
        if prev != Some(k) {
            if k != BLANK {
                out.push(k);
            }
            prev = Some(k);
        }
    }
    Ok(out)
}

/// An unordered, non-empty collection of target sequences for one image.
///
/// Stored order is whatever the caller supplied; no computed value may depend
/// on it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSet {
    sequences: Vec<LabelSequence>,
}

impl TargetSet {
    pub fn new(sequences: Vec<LabelSequence>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::InvalidLabel("target set must be non-empty".into()));
        }
        Ok(TargetSet { sequences })
    }

    pub fn sequences(&self) -> &[LabelSequence] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        false // by construction
    }

    /// True when both sets hold the same sequences with the same multiplicities.
    pub fn multiset_eq(&self, other: &TargetSet) -> bool {
        let mut a = self.sequences.clone();
        let mut b = other.sequences.clone();
        a.sort();
        b.sort();
        a == b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(labels: &[usize]) -> LabelSequence {
        LabelSequence::new(labels.to_vec(), 10).unwrap()
    }

    #[test]
    fn extend_interleaves_blanks() {
        // "ab" -> - a - b -
        assert_eq!(extend_label(&[1, 2]), vec![0, 1, 0, 2, 0]);
        // "a" -> - a -
        assert_eq!(extend_label(&[1]), vec![0, 1, 0]);
        // "aa" -> - a - a -
        assert_eq!(extend_label(&[1, 1]), vec![0, 1, 0, 1, 0]);
        assert_eq!(extend_label(&[]), vec![0]);
    }

    #[test]
    fn extend_round_trips_through_blank_stripping() {
        for labels in [vec![1], vec![1, 2, 3], vec![2, 2, 2], vec![5, 1, 5, 1]] {
            let ext = extend_label(&labels);
            assert_eq!(ext.len(), 2 * labels.len() + 1);
            let stripped: Vec<usize> = ext.into_iter().filter(|&k| k != BLANK).collect();
            assert_eq!(stripped, labels);
        }
    }

    #[test]
    fn collapse_merges_then_strips() {
        // "--aa-b" -> "ab"
        assert_eq!(collapse(&[0, 0, 1, 1, 0, 2], 3).unwrap(), vec![1, 2]);
        // "aab-ba" -> "abba"
        assert_eq!(collapse(&[1, 1, 2, 0, 2, 1], 3).unwrap(), vec![1, 2, 2, 1]);
        // "----" -> ""
        assert_eq!(collapse(&[0, 0, 0, 0], 3).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn collapse_rejects_out_of_range() {
        assert!(collapse(&[0, 3], 3).is_err());
    }

    #[test]
    fn collapse_output_is_blank_free_but_keeps_separated_repeats() {
        // Collapse is deliberately not idempotent: a blank between equal
        // labels keeps them distinct, and that distinction lives only in the
        // pre-collapse form.
        assert_eq!(collapse(&[0, 1, 1, 2, 0, 2], 4).unwrap(), vec![1, 2, 2]);
        assert_eq!(collapse(&[3, 3, 0, 3], 4).unwrap(), vec![3, 3]);
        for path in [vec![0, 1, 1, 2, 0, 2], vec![3, 3, 0, 3], vec![0, 0]] {
            assert!(!collapse(&path, 4).unwrap().contains(&BLANK));
        }
    }

    #[test]
    fn collapse_of_extended_label_recovers_label() {
        for labels in [vec![1], vec![1, 1], vec![2, 3, 2], vec![4, 4, 4, 4]] {
            let ext = extend_label(&labels);
            assert_eq!(collapse(&ext, 10).unwrap(), labels);
        }
    }

    #[test]
    fn label_sequence_rejects_blank_empty_and_out_of_range() {
        assert!(LabelSequence::new(vec![], 3).is_err());
        assert!(LabelSequence::new(vec![0], 3).is_err());
        assert!(LabelSequence::new(vec![3], 3).is_err());
        assert!(LabelSequence::new(vec![1, 2], 3).is_ok());
    }

    #[test]
    fn digits_alphabet_round_trips() {
        let a = Alphabet::digits();
        assert_eq!(a.q(), 11);
        let l = a.parse("579").unwrap();
        assert_eq!(l.labels(), &[6, 8, 10]);
        assert_eq!(a.format(l.labels()).unwrap(), "579");
        assert!(a.parse("x").is_err());
        assert_eq!(a.char_of(BLANK), None);
    }

    #[test]
    fn alphabet_rejects_duplicates() {
        assert!(Alphabet::new(vec!['a', 'a']).is_err());
        assert!(Alphabet::new(vec![]).is_err());
    }

    #[test]
    fn target_set_multiset_equality_ignores_order() {
        let z1 = TargetSet::new(vec![seq(&[1, 2]), seq(&[5, 7, 9])]).unwrap();
        let z2 = TargetSet::new(vec![seq(&[5, 7, 9]), seq(&[1, 2])]).unwrap();
        assert!(z1.multiset_eq(&z2));
        let z3 = TargetSet::new(vec![seq(&[1, 2]), seq(&[1, 2])]).unwrap();
        assert!(!z1.multiset_eq(&z3));
        assert!(TargetSet::new(vec![]).is_err());
    }
}
