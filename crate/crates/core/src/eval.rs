//! Entity-level (exact boundary and class) and token-level scoring.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tags_to_spans, CorpusError, EntitySpan, LabeledDataset};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{gold} gold sentences but {pred} predictions")]
    SentenceCountMismatch { gold: usize, pred: usize },
    #[error("sentence {sentence}: {gold} gold tags but {pred} predicted")]
    LengthMismatch { sentence: usize, gold: usize, pred: usize },
    #[error("sentence {sentence} has no gold tags")]
    Unlabeled { sentence: usize },
    #[error("sentence {sentence}: {source}")]
    Corpus { sentence: usize, source: CorpusError },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub n_gold: usize,
    pub n_pred: usize,
    pub n_correct: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.n_correct, self.n_pred)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.n_correct, self.n_gold)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub token_accuracy: f64,
    pub per_class: BTreeMap<String, ClassScores>,
    pub counts: Counts,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean, defined as 0 when both inputs are 0.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Scores predicted tag sequences against a labeled dataset.
///
/// Every class in the dataset's class set gets a `per_class` row, as does any
/// class that only appears in predictions.
pub fn score<S: AsRef<str>>(gold: &LabeledDataset, pred: &[Vec<S>]) -> Result<MetricsReport, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::SentenceCountMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let mut total = Counts::default();
    let mut per_class: BTreeMap<String, Counts> =
        gold.classes().iter().map(|c| (c.clone(), Counts::default())).collect();
    let (mut tok_correct, mut tok_total) = (0usize, 0usize);

    for (i, (s, p)) in gold.sentences().iter().zip(pred).enumerate() {
        let g = s.tags().ok_or(EvalError::Unlabeled { sentence: i })?;
        if g.len() != p.len() {
            return Err(EvalError::LengthMismatch {
                sentence: i,
                gold: g.len(),
                pred: p.len(),
            });
        }
        tok_total += g.len();
        tok_correct += g.iter().zip(p).filter(|(a, b)| a.as_str() == b.as_ref()).count();

        let corpus_err = |source| EvalError::Corpus { sentence: i, source };
        let gold_spans = tags_to_spans(g).map_err(corpus_err)?;
        let pred_spans = tags_to_spans(p).map_err(corpus_err)?;
        let gold_set: HashSet<&EntitySpan> = gold_spans.iter().collect();
        for sp in &gold_spans {
            total.n_gold += 1;
            per_class.entry(sp.class.clone()).or_default().n_gold += 1;
        }
        for sp in &pred_spans {
            let c = per_class.entry(sp.class.clone()).or_default();
            total.n_pred += 1;
            c.n_pred += 1;
            if gold_set.contains(sp) {
                total.n_correct += 1;
                c.n_correct += 1;
            }
        }
    }

    Ok(MetricsReport {
        precision: total.precision(),
        recall: total.recall(),
        f1: total.f1(),
        token_accuracy: ratio(tok_correct, tok_total),
        per_class: per_class
            .into_iter()
            .map(|(k, c)| {
                (
                    k,
                    ClassScores {
                        precision: c.precision(),
                        recall: c.recall(),
                        f1: c.f1(),
                        support: c.n_gold,
                    },
                )
            })
            .collect(),
        counts: total,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table, values rounded to 3 decimals.
    pub fn to_table(&self) -> String {
        let width = self.per_class.keys().map(String::len).max().unwrap_or(0).max("micro".len());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>6}  {:>8}  {:>7}",
            "class", "precision", "recall", "f1", "support"
        );
        let mut row = |name: &str, p: f64, r: f64, f: f64, support: usize| {
            let _ = writeln!(out, "{name:<width$}  {p:>9.3}  {r:>6.3}  {f:>8.3}  {support:>7}");
        };
        for (c, s) in &self.per_class {
            row(c, s.precision, s.recall, s.f1, s.support);
        }
        row("micro", self.precision, self.recall, self.f1, self.counts.n_gold);
        let _ = writeln!(out, "\ntoken accuracy {:.3}", self.token_accuracy);
        let _ = writeln!(
            out,
            "gold {}  predicted {}  correct {}",
            self.counts.n_gold, self.counts.n_pred, self.counts.n_correct
        );
        out
    }
}
