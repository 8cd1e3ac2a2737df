//! Levenshtein alignment counts and character/word/piece error rates.

use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_length: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

impl Add for ErrorCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            substitutions: self.substitutions + o.substitutions,
            insertions: self.insertions + o.insertions,
            deletions: self.deletions + o.deletions,
            reference_length: self.reference_length + o.reference_length,
        }
    }
}

impl AddAssign for ErrorCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ErrorCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Minimal unit-cost alignment. Among equally short alignments the backtrace
/// prefers substitution (or match), then deletion, then insertion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> ErrorCounts {
    let (n, m) = (reference.len(), hyp.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, v) in d[0].iter_mut().enumerate() {
        *v = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }

    let mut c = ErrorCounts { reference_length: n, ..Default::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if d[i][j] == d[i - 1][j - 1] + usize::from(!same) {
                if !same {
                    c.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

/// `100 · (S + I + D) / N`; may exceed 100.
pub fn error_rate(counts: &ErrorCounts) -> Result<f64> {
    if counts.reference_length == 0 {
        return Err(Error::invalid("error rate undefined for an empty reference"));
    }
    Ok(100.0 * counts.errors() as f64 / counts.reference_length as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricMode {
    Char,
    Word,
    Piece,
}

impl fmt::Display for MetricMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricMode::Char => "char",
            MetricMode::Word => "word",
            MetricMode::Piece => "piece",
        })
    }
}

impl FromStr for MetricMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(MetricMode::Char),
            "word" => Ok(MetricMode::Word),
            "piece" => Ok(MetricMode::Piece),
            other => Err(Error::invalid(format!("unknown metric mode {other:?}"))),
        }
    }
}

/// Splits text into scoring symbols. Char mode drops whitespace; piece mode
/// needs the corpus vocabulary.
pub fn tokenize_for_metric(text: &str, mode: MetricMode, vocab: Option<&Vocab>) -> Result<Vec<String>> {
    match mode {
        MetricMode::Char => Ok(text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect()),
        MetricMode::Word => Ok(text.split_whitespace().map(String::from).collect()),
        MetricMode::Piece => {
            let v = vocab.ok_or_else(|| Error::invalid("piece-level scoring needs a vocabulary"))?;
            Ok(v.segment(text))
        }
    }
}

/// Counts for one (reference, hypothesis) text pair.
pub fn score_pair(reference: &str, hyp: &str, mode: MetricMode, vocab: Option<&Vocab>) -> Result<ErrorCounts> {
    let r = tokenize_for_metric(reference, mode, vocab)?;
    let h = tokenize_for_metric(hyp, mode, vocab)?;
    Ok(edit_distance(&r, &h))
}
