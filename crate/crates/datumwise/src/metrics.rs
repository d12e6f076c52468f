//! ROC-AUC (Mann-Whitney with tie handling), thresholded accuracy, and
//! fold aggregation into a serializable report.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Rank-based ROC-AUC: the probability that a random positive outscores
/// a random negative, ties counting one half. Computed via average
/// ranks in O(n log n); exactly equal to the pairwise count because
/// ranks are half-integers and all sums stay well inside f64's integer
/// range.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::data("roc_auc: scores/labels length mismatch"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::data("roc_auc: NaN score"));
    }
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::data(
            "ROC-AUC undefined: only one class present in labels",
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Average of 1-based ranks i+1 ..= j+1.
        let avg = (i + j + 2) as f64 / 2.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1) / 2) as f64;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Fraction of rows where `(score >= threshold)` matches the label.
/// A score exactly at the threshold predicts the positive class.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::data("accuracy: empty or mismatched input"));
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Arithmetic mean and sample standard deviation (n-1). The deviation
/// is absent for fewer than two values.
pub fn aggregate(values: &[f64]) -> (f64, Option<f64>) {
    assert!(!values.is_empty(), "aggregate of no values");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TableMetrics {
    pub auc: f64,
    pub accuracy: f64,
    pub n_rows: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FoldMetrics {
    pub fold_index: usize,
    pub auc: f64,
    pub accuracy: f64,
    pub n_rows: usize,
    pub per_table: BTreeMap<String, TableMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AggregateMetrics {
    pub auc_mean: f64,
    pub auc_std: Option<f64>,
    pub acc_mean: f64,
    pub acc_std: Option<f64>,
}

/// Cross-validation result: per-fold AUC/accuracy with per-table
/// breakdowns, plus mean and sample standard deviation across folds.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub per_fold: Vec<FoldMetrics>,
    pub aggregate: AggregateMetrics,
    /// Declared so the ± numbers are unambiguous.
    pub std_convention: String,
}

impl MetricsReport {
    pub fn from_folds(per_fold: Vec<FoldMetrics>) -> Self {
        let aucs: Vec<f64> = per_fold.iter().map(|f| f.auc).collect();
        let accs: Vec<f64> = per_fold.iter().map(|f| f.accuracy).collect();
        let (auc_mean, auc_std) = aggregate(&aucs);
        let (acc_mean, acc_std) = aggregate(&accs);
        MetricsReport {
            per_fold,
            aggregate: AggregateMetrics {
                auc_mean,
                auc_std,
                acc_mean,
                acc_std,
            },
            std_convention: "sample (n-1)".to_string(),
        }
    }

    /// Canonical JSON form; byte-identical for identical contents.
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    /// Flat CSV summary: fold,table,metric,value. Fold-level rows use
    /// table "*", aggregate rows use fold "agg".
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("fold,table,metric,value\n");
        for f in &self.per_fold {
            out.push_str(&format!("{},*,auc,{}\n", f.fold_index, f.auc));
            out.push_str(&format!("{},*,accuracy,{}\n", f.fold_index, f.accuracy));
            for (t, m) in &f.per_table {
                out.push_str(&format!("{},{},auc,{}\n", f.fold_index, t, m.auc));
                out.push_str(&format!("{},{},accuracy,{}\n", f.fold_index, t, m.accuracy));
            }
        }
        out.push_str(&format!("agg,*,auc_mean,{}\n", self.aggregate.auc_mean));
        if let Some(s) = self.aggregate.auc_std {
            out.push_str(&format!("agg,*,auc_std,{}\n", s));
        }
        out.push_str(&format!("agg,*,acc_mean,{}\n", self.aggregate.acc_mean));
        if let Some(s) = self.aggregate.acc_std {
            out.push_str(&format!("agg,*,acc_std,{}\n", s));
        }
        out
    }
}

/// O(n^2) pairwise AUC used as the oracle in tests.
pub fn roc_auc_bruteforce(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::data("ROC-AUC undefined: only one class present"));
    }
    let mut num = 0.0f64;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                num += 1.0;
            } else if p == n {
                num += 0.5;
            }
        }
    }
    Ok(num / (pos.len() as f64 * neg.len() as f64))
}
