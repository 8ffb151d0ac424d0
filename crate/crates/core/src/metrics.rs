//! Per-class recall, micro-F1 and confusion matrices.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Stance;
use crate::error::{Error, Result};

/// `100 · num / den` rounded half-up to two decimals, as text.
pub fn percent_2dp(num: u64, den: u64) -> String {
    assert!(den > 0, "percentage of an empty total");
    let hundredths = (20_000 * num + den) / (2 * den);
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    /// `confusion[gold][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    /// Recall per class in percent; `None` when the class never occurs in gold.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub micro_f1: f64,
    pub accuracy: f64,
    pub total: u64,
}

fn class_names(n: usize) -> Vec<String> {
    if n == Stance::ALL.len() {
        Stance::ALL.iter().map(|s| s.name().to_string()).collect()
    } else {
        (0..n).map(|c| format!("class{c}")).collect()
    }
}

/// Four-class stance evaluation.
pub fn evaluate(predictions: &[usize], gold: &[usize]) -> Result<MetricsReport> {
    evaluate_with_classes(predictions, gold, Stance::ALL.len())
}

pub fn evaluate_with_classes(predictions: &[usize], gold: &[usize], n_classes: usize) -> Result<MetricsReport> {
    if predictions.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &g) in predictions.iter().zip(gold) {
        if p >= n_classes || g >= n_classes {
            return Err(Error::Contract(format!("label out of range: gold {g}, predicted {p}")));
        }
        confusion[g][p] += 1;
    }
    Ok(MetricsReport::from_confusion(class_names(n_classes), confusion))
}

impl MetricsReport {
    pub fn from_confusion(class_names: Vec<String>, confusion: Vec<Vec<u64>>) -> Self {
        let n = confusion.len();
        let total: u64 = confusion.iter().flatten().sum();
        let tp: u64 = (0..n).map(|c| confusion[c][c]).sum();
        let gold_counts: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let pred_counts: Vec<u64> = (0..n).map(|c| confusion.iter().map(|r| r[c]).sum()).collect();
        let fp: u64 = pred_counts.iter().enumerate().map(|(c, &k)| k - confusion[c][c]).sum();
        let fn_: u64 = gold_counts.iter().enumerate().map(|(c, &k)| k - confusion[c][c]).sum();
        let per_class_accuracy = (0..n)
            .map(|c| (gold_counts[c] > 0).then(|| 100.0 * confusion[c][c] as f64 / gold_counts[c] as f64))
            .collect();
        let denom = 2 * tp + fp + fn_;
        let micro_f1 = if denom == 0 { 0.0 } else { 100.0 * (2 * tp) as f64 / denom as f64 };
        let accuracy = if total == 0 { 0.0 } else { 100.0 * tp as f64 / total as f64 };
        MetricsReport {
            class_names,
            confusion,
            per_class_accuracy,
            micro_f1,
            accuracy,
            total,
        }
    }

    pub fn accuracy(&self) -> f64 {
        self.accuracy
    }

    pub fn micro_f1(&self) -> f64 {
        self.micro_f1
    }

    pub fn correct(&self) -> u64 {
        (0..self.confusion.len()).map(|c| self.confusion[c][c]).sum()
    }

    pub fn gold_counts(&self) -> Vec<u64> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }

    /// Flat `key=value` report; percentages rounded half-up to 2 decimals.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let gold = self.gold_counts();
        let _ = writeln!(s, "total={}", self.total);
        let _ = writeln!(s, "correct={}", self.correct());
        let _ = writeln!(s, "micro_f1={}", percent_2dp(2 * self.correct(), 2 * self.total));
        let _ = writeln!(s, "accuracy={}", percent_2dp(self.correct(), self.total));
        for (c, name) in self.class_names.iter().enumerate() {
            let v = if gold[c] == 0 {
                "undefined".to_string()
            } else {
                percent_2dp(self.confusion[c][c], gold[c])
            };
            let _ = writeln!(s, "accuracy.{name}={v}");
        }
        for (g, gname) in self.class_names.iter().enumerate() {
            for (p, pname) in self.class_names.iter().enumerate() {
                let _ = writeln!(s, "confusion.{gname}.{pname}={}", self.confusion[g][p]);
            }
        }
        s
    }

    /// Rebuilds a report from [`to_key_value`](Self::to_key_value) output.
    pub fn from_key_value(text: &str) -> Result<Self> {
        let map: BTreeMap<&str, &str> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_once('=')
                    .ok_or_else(|| Error::Contract(format!("malformed report line {l:?}")))
            })
            .collect::<Result<_>>()?;
        let names: Vec<String> = map
            .keys()
            .filter_map(|k| k.strip_prefix("accuracy."))
            .map(str::to_string)
            .collect();
        // keys are sorted; restore the canonical class order
        let n = names.len();
        let canonical = class_names(n);
        let names = if canonical.iter().all(|c| names.contains(c)) { canonical } else { names };
        let mut confusion = vec![vec![0u64; n]; n];
        for (g, gname) in names.iter().enumerate() {
            for (p, pname) in names.iter().enumerate() {
                let key = format!("confusion.{gname}.{pname}");
                let raw = map
                    .get(key.as_str())
                    .ok_or_else(|| Error::Contract(format!("report lacks {key}")))?;
                confusion[g][p] = raw
                    .parse()
                    .map_err(|_| Error::Contract(format!("bad count {raw:?} for {key}")))?;
            }
        }
        let report = Self::from_confusion(names, confusion);
        if map.get("total").and_then(|t| t.parse::<u64>().ok()) != Some(report.total) {
            return Err(Error::Contract("report total disagrees with confusion matrix".into()));
        }
        Ok(report)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Contract(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Contract(e.to_string()))
    }
}
