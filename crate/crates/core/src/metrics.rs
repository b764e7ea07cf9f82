//! Edit distance, WER and CER with multi-reference resolution, and sweep
//! tables.
//!
//! A word counts as correct when the prediction equals any of its
//! references. For CER, each word is scored against the reference with the
//! smallest edit distance, and that reference's length is what enters the
//! denominator.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::corpus::WordPairGroup;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{predictions} predictions for {groups} reference groups")]
    AlignmentError { predictions: usize, groups: usize },
    #[error("duplicate sweep label {0:?}")]
    DuplicateLabel(String),
}

/// Unit-cost edit operations turning a reference into a hypothesis.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct EditOps {
    pub insertions: usize,
    pub deletions: usize,
    pub substitutions: usize,
}

impl EditOps {
    pub fn total(&self) -> usize {
        self.insertions + self.deletions + self.substitutions
    }
}

impl std::ops::AddAssign for EditOps {
    fn add_assign(&mut self, rhs: Self) {
        self.insertions += rhs.insertions;
        self.deletions += rhs.deletions;
        self.substitutions += rhs.substitutions;
    }
}

/// Levenshtein alignment of `reference` to `hypothesis`.
///
/// Insertions are hypothesis symbols with no reference counterpart,
/// deletions are reference symbols missing from the hypothesis. On ties the
/// backtrace prefers substitution, then deletion, then insertion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditOps {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut ops = EditOps::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if here == d[(i - 1) * w + j - 1] + usize::from(!same) {
                if !same {
                    ops.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * w + j] + 1 {
            ops.deletions += 1;
            i -= 1;
        } else {
            ops.insertions += 1;
            j -= 1;
        }
    }
    ops
}

/// Scoring of one prediction against its reference group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WordEval {
    pub correct: bool,
    /// Index of the closest reference.
    pub best_reference: usize,
    pub ops: EditOps,
    pub reference_chars: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_total: usize,
    pub n_correct: usize,
    pub words: Vec<WordEval>,
    pub ops: EditOps,
    pub reference_chars: usize,
    pub wer: f64,
    pub cer: f64,
}

/// Scores predictions (token sequences) against reference groups.
pub fn evaluate<S: AsRef<str>>(predictions: &[Vec<S>], groups: &[WordPairGroup]) -> Result<EvalReport, MetricsError> {
    if predictions.len() != groups.len() {
        return Err(MetricsError::AlignmentError {
            predictions: predictions.len(),
            groups: groups.len(),
        });
    }
    let mut words = Vec::with_capacity(groups.len());
    let mut ops = EditOps::default();
    let mut reference_chars = 0;
    let mut n_correct = 0;
    for (pred, group) in predictions.iter().zip(groups) {
        let pred: Vec<&str> = pred.iter().map(AsRef::as_ref).collect();
        let mut best: Option<(usize, EditOps, usize)> = None;
        let mut correct = false;
        for (r, reference) in group.references.iter().enumerate() {
            let rt: Vec<&str> = reference.tokens.iter().map(String::as_str).collect();
            if rt == pred {
                correct = true;
            }
            let e = edit_distance(&rt, &pred);
            if best.is_none_or(|(_, b, _)| e.total() < b.total()) {
                best = Some((r, e, rt.len()));
            }
        }
        let (best_reference, e, len) = best.unwrap_or((0, edit_distance::<&str>(&[], &pred), 0));
        n_correct += usize::from(correct);
        ops += e;
        reference_chars += len;
        words.push(WordEval {
            correct,
            best_reference,
            ops: e,
            reference_chars: len,
        });
    }
    let n_total = groups.len();
    let wer = if n_total == 0 { 0.0 } else { 1.0 - n_correct as f64 / n_total as f64 };
    let cer = if reference_chars == 0 {
        0.0
    } else {
        ops.total() as f64 / reference_chars as f64
    };
    Ok(EvalReport {
        n_total,
        n_correct,
        words,
        ops,
        reference_chars,
        wer,
        cer,
    })
}

pub fn wer<S: AsRef<str>>(predictions: &[Vec<S>], groups: &[WordPairGroup]) -> Result<(f64, EvalReport), MetricsError> {
    let r = evaluate(predictions, groups)?;
    Ok((r.wer, r))
}

pub fn cer<S: AsRef<str>>(predictions: &[Vec<S>], groups: &[WordPairGroup]) -> Result<(f64, EvalReport), MetricsError> {
    let r = evaluate(predictions, groups)?;
    Ok((r.cer, r))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub label: String,
    pub wer: f64,
    pub cer: f64,
}

/// Results of a configuration sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn new(rows: Vec<SweepRow>) -> Result<Self, MetricsError> {
        for (i, r) in rows.iter().enumerate() {
            if rows[..i].iter().any(|o| o.label == r.label) {
                return Err(MetricsError::DuplicateLabel(r.label.clone()));
            }
        }
        Ok(Self { rows })
    }

    fn argmin(&self, key: impl Fn(&SweepRow) -> f64) -> Option<&str> {
        let mut best: Option<&SweepRow> = None;
        for r in &self.rows {
            if best.is_none_or(|b| key(r) < key(b)) {
                best = Some(r);
            }
        }
        best.map(|r| r.label.as_str())
    }

    pub fn best_wer(&self) -> Option<&str> {
        self.argmin(|r| r.wer)
    }

    pub fn best_cer(&self) -> Option<&str> {
        self.argmin(|r| r.cer)
    }

    /// `label,wer,cer` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,wer,cer\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", csv_field(&r.label), r.wer, r.cer);
        }
        out
    }
}

pub fn sweep_report(results: &[(String, f64, f64)]) -> Result<SweepReport, MetricsError> {
    SweepReport::new(
        results
            .iter()
            .map(|(label, wer, cer)| SweepRow {
                label: label.clone(),
                wer: *wer,
                cer: *cer,
            })
            .collect(),
    )
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
