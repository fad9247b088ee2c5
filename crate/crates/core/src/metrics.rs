//! Forecasting and classification metrics.
//!
//! Degenerate denominators produce [`MetricValue::Undefined`] instead of NaN
//! so that aggregation can skip them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricValue {
    Value(f64),
    Undefined(String),
}

impl MetricValue {
    fn undefined(why: &str) -> Self {
        MetricValue::Undefined(why.to_string())
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            MetricValue::Value(v) => Some(*v),
            MetricValue::Undefined(_) => None,
        }
    }

    pub fn is_defined(&self) -> bool {
        self.value().is_some()
    }
}

/// Mean of the defined values; undefined when none are.
pub fn mean_defined(values: &[MetricValue]) -> MetricValue {
    let v: Vec<f64> = values.iter().filter_map(MetricValue::value).collect();
    if v.is_empty() {
        MetricValue::undefined("no defined values")
    } else {
        MetricValue::Value(crate::exec::pairwise_sum(&v) / v.len() as f64)
    }
}

fn check_pair(truth: &[f64], pred: &[f64]) -> Result<()> {
    if truth.is_empty() {
        return Err(Error::Domain("metric of an empty series".into()));
    }
    if truth.len() != pred.len() {
        return Err(Error::dim("metric", &[truth.len()], &[pred.len()]));
    }
    Ok(())
}

pub fn mse(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(truth, pred)?;
    let s: f64 = truth.iter().zip(pred).map(|(y, p)| (y - p) * (y - p)).sum();
    Ok(s / truth.len() as f64)
}

pub fn mae(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(truth, pred)?;
    let s: f64 = truth.iter().zip(pred).map(|(y, p)| (y - p).abs()).sum();
    Ok(s / truth.len() as f64)
}

/// Symmetric MAPE in `[0, 200]`. Terms with `|y| + |ŷ| = 0` contribute 0.
pub fn smape(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(truth, pred)?;
    let s: f64 = truth
        .iter()
        .zip(pred)
        .map(|(y, p)| {
            let den = y.abs() + p.abs();
            if den == 0.0 {
                0.0
            } else {
                2.0 * (y - p).abs() / den
            }
        })
        .sum();
    Ok(100.0 * s / truth.len() as f64)
}

/// Seasonal-naive mean absolute difference of `series` at lag `m`.
fn naive_scale(series: &[f64], m: usize) -> Result<f64> {
    if m == 0 || series.len() <= m {
        return Err(Error::Domain(format!(
            "MASE needs more than m = {m} in-sample values, got {}",
            series.len()
        )));
    }
    let s: f64 = series[m..]
        .iter()
        .zip(series)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(s / (series.len() - m) as f64)
}

/// MASE with the scale taken from `truth` itself.
pub fn mase(truth: &[f64], pred: &[f64], m: usize) -> Result<MetricValue> {
    mase_scaled(truth, pred, truth, m)
}

/// MASE with the scale taken from a separate in-sample series.
pub fn mase_scaled(truth: &[f64], pred: &[f64], insample: &[f64], m: usize) -> Result<MetricValue> {
    let num = mae(truth, pred)?;
    let den = naive_scale(insample, m)?;
    Ok(if den == 0.0 {
        MetricValue::undefined("seasonal-naive scale is zero")
    } else {
        MetricValue::Value(num / den)
    })
}

/// Repeats the last observed cycle of length `m` over `horizon` steps.
pub fn seasonal_naive(history: &[f64], horizon: usize, m: usize) -> Result<Vec<f64>> {
    if m == 0 || history.len() < m {
        return Err(Error::Domain(format!(
            "seasonal naive needs at least m = {m} values, got {}",
            history.len()
        )));
    }
    let cycle = &history[history.len() - m..];
    Ok((0..horizon).map(|h| cycle[h % m]).collect())
}

/// Overall weighted average of the model against a naive forecast. Both
/// MASE terms share the scale computed from `insample`.
pub fn owa(
    truth: &[f64],
    model: &[f64],
    naive: &[f64],
    insample: &[f64],
    m: usize,
) -> Result<MetricValue> {
    let sm = smape(truth, model)?;
    let sn = smape(truth, naive)?;
    let (mm, mn) = (
        mase_scaled(truth, model, insample, m)?,
        mase_scaled(truth, naive, insample, m)?,
    );
    Ok(match (mm.value(), mn.value()) {
        (Some(a), Some(b)) if sn > 0.0 && b > 0.0 => MetricValue::Value(0.5 * (sm / sn + a / b)),
        _ => MetricValue::undefined("naive sMAPE or MASE is zero or undefined"),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_labels(truth: &[bool], pred: &[bool]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::dim("confusion", &[truth.len()], &[pred.len()]));
        }
        let mut c = ConfusionCounts::default();
        for (&t, &p) in truth.iter().zip(pred) {
            match (t, p) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: MetricValue,
    pub precision: MetricValue,
    pub recall: MetricValue,
    pub f1: MetricValue,
}

fn ratio(num: u64, den: u64, what: &str) -> MetricValue {
    if den == 0 {
        MetricValue::undefined(what)
    } else {
        MetricValue::Value(num as f64 / den as f64)
    }
}

pub fn classification_metrics(c: &ConfusionCounts) -> Result<ClassificationMetrics> {
    if c.total() == 0 {
        return Err(Error::Domain("all confusion counts are zero".into()));
    }
    let precision = ratio(c.tp, c.tp + c.fp, "no predicted positives");
    let recall = ratio(c.tp, c.tp + c.fn_, "no actual positives");
    let f1 = match (precision.value(), recall.value()) {
        (Some(p), Some(r)) if p + r > 0.0 => MetricValue::Value(2.0 * p * r / (p + r)),
        _ => MetricValue::undefined("precision + recall is zero or undefined"),
    };
    Ok(ClassificationMetrics {
        accuracy: ratio(c.tp + c.tn, c.total(), "empty"),
        precision,
        recall,
        f1,
    })
}

/// Named metric values plus the settings that produced them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub values: BTreeMap<String, MetricValue>,
    pub seasonal_period: Option<usize>,
    pub naive_baseline: Option<String>,
}

impl MetricReport {
    pub fn insert(&mut self, name: &str, value: MetricValue) {
        self.values.insert(name.to_string(), value);
    }

    pub fn insert_value(&mut self, name: &str, value: f64) {
        self.insert(name, MetricValue::Value(value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).and_then(MetricValue::value)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!((mse(&[1.0, 2.0, 3.0], &[2.0; 3]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((mae(&[1.0, 2.0, 3.0], &[2.0; 3]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((smape(&[100.0], &[50.0]).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(smape(&[1.0], &[-1.0]).unwrap(), 200.0);
        assert_eq!(smape(&[0.0, 2.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert_eq!(
            mase(&[1.0, 2.0, 3.0, 4.0], &[2.0, 3.0, 4.0, 5.0], 1).unwrap(),
            MetricValue::Value(1.0)
        );
        assert!(!mase(&[1.0; 4], &[3.0; 4], 1).unwrap().is_defined());
        assert!(mse(&[], &[]).is_err());
    }

    #[test]
    fn owa_cases() {
        let y = [3.0, 5.0, 4.0, 6.0];
        let hist = [1.0, 2.0, 4.0, 3.0];
        let naive = [2.0, 2.0, 2.0, 2.0];
        assert_eq!(owa(&y, &naive, &naive, &hist, 1).unwrap(), MetricValue::Value(1.0));
        let flat = [1.0; 4];
        assert!(!owa(&y, &naive, &naive, &flat, 1).unwrap().is_defined());
        assert_eq!(seasonal_naive(&[1.0, 2.0, 3.0, 4.0], 5, 2).unwrap(), vec![3.0, 4.0, 3.0, 4.0, 3.0]);
    }

    #[test]
    fn classification_cases() {
        let perfect = classification_metrics(&ConfusionCounts { tp: 5, fp: 0, tn: 5, fn_: 0 }).unwrap();
        for v in [&perfect.accuracy, &perfect.precision, &perfect.recall, &perfect.f1] {
            assert_eq!(v.value(), Some(1.0));
        }
        let m = classification_metrics(&ConfusionCounts { tp: 1, fp: 1, tn: 0, fn_: 1 }).unwrap();
        assert_eq!(m.precision.value(), Some(0.5));
        assert_eq!(m.recall.value(), Some(0.5));
        assert_eq!(m.f1.value(), Some(0.5));
        assert!((m.accuracy.value().unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let d = classification_metrics(&ConfusionCounts { tp: 0, fp: 0, tn: 3, fn_: 1 }).unwrap();
        assert!(!d.precision.is_defined());
        assert!(classification_metrics(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn report_json_is_sorted() {
        let mut r = MetricReport::default();
        r.insert_value("mse", 0.5);
        r.insert("mase", MetricValue::undefined("flat"));
        let j = r.to_json().unwrap();
        assert!(j.find("mase").unwrap() < j.find("mse").unwrap());
        assert!(j.contains("\"undefined\": \"flat\""));
    }
}
