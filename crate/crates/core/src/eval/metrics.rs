use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    MacroF1,
    /// Fraction of examples whose predicted set equals the gold set.
    MultiLabelAccuracy,
    MultiLabelMacroF1,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTally {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl LabelTally {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

/// Per-label tallies. `None` predictions (abstentions) only produce false
/// negatives.
pub fn confusion<'a>(
    pairs: impl IntoIterator<Item = (&'a BTreeSet<String>, Option<&'a BTreeSet<String>>)>,
) -> BTreeMap<String, LabelTally> {
    let mut out: BTreeMap<String, LabelTally> = BTreeMap::new();
    let empty = BTreeSet::new();
    for (gold, pred) in pairs {
        let pred = pred.unwrap_or(&empty);
        for l in gold.intersection(pred) {
            out.entry(l.clone()).or_default().tp += 1;
        }
        for l in pred.difference(gold) {
            out.entry(l.clone()).or_default().fp += 1;
        }
        for l in gold.difference(pred) {
            out.entry(l.clone()).or_default().fn_ += 1;
        }
    }
    out
}

/// Unweighted mean F1 over the labels present in the tallies, or `None`
/// when no label occurs at all.
pub fn macro_f1(confusion: &BTreeMap<String, LabelTally>) -> Option<f64> {
    if confusion.is_empty() {
        return None;
    }
    Some(confusion.values().map(LabelTally::f1).sum::<f64>() / confusion.len() as f64)
}

pub fn exact_match_rate(correct: &[bool]) -> f64 {
    if correct.is_empty() {
        return 0.0;
    }
    correct.iter().filter(|c| **c).count() as f64 / correct.len() as f64
}

impl Metric {
    pub fn is_multi_label(self) -> bool {
        matches!(self, Metric::MultiLabelAccuracy | Metric::MultiLabelMacroF1)
    }

    /// Score from exact-match flags and label tallies.
    pub fn compute(self, correct: &[bool], confusion: &BTreeMap<String, LabelTally>) -> f64 {
        match self {
            Metric::Accuracy | Metric::MultiLabelAccuracy => exact_match_rate(correct),
            // With no label anywhere (all-empty gold and predictions), fall
            // back to exact agreement.
            Metric::MacroF1 | Metric::MultiLabelMacroF1 => macro_f1(confusion).unwrap_or_else(|| exact_match_rate(correct)),
        }
    }
}
