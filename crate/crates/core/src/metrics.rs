//! RMSE, Pearson NCC, per-fold aggregation and Spearman rank correlation.

use serde::{Deserialize, Serialize};

use crate::datastore::registry::{self, Attribute};
use crate::error::{Error, Result};

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction length {} != target length {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Domain("metrics need at least one value".into()));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let sse: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// Pearson correlation. Constant inputs are an error rather than 0.
pub fn ncc(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    if pred.len() < 2 {
        return Err(Error::UndefinedCorrelation("need at least two values".into()));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = target.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        let (dp, dt) = (p - mp, t - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    if sxx == 0.0 || syy == 0.0 {
        let which = if sxx == 0.0 { "predictions" } else { "targets" };
        return Err(Error::UndefinedCorrelation(format!("{which} are constant")));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub rmse: f64,
    /// `None` when predictions or targets are constant.
    pub ncc: Option<f64>,
}

impl FoldMetrics {
    pub fn compute(pred: &[f64], target: &[f64]) -> Result<Self> {
        let rmse = rmse(pred, target)?;
        let ncc = match ncc(pred, target) {
            Ok(r) => Some(r),
            Err(Error::UndefinedCorrelation(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self { rmse, ncc })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: String,
    pub folds: Vec<FoldMetrics>,
    pub mean_rmse: f64,
    /// Mean over folds; `None` if any fold's NCC is undefined.
    pub mean_ncc: Option<f64>,
}

impl MetricReport {
    pub fn from_folds(config: impl Into<String>, folds: Vec<FoldMetrics>) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::Domain("a report needs at least one fold".into()));
        }
        let n = folds.len() as f64;
        let mean_rmse = folds.iter().map(|f| f.rmse).sum::<f64>() / n;
        let mean_ncc = folds
            .iter()
            .map(|f| f.ncc)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n);
        Ok(Self {
            config: config.into(),
            folds,
            mean_rmse,
            mean_ncc,
        })
    }
}

/// Metrics for each fold's `(predictions, targets)` pair, plus means.
pub fn fold_report(config: &str, folds: &[(Vec<f64>, Vec<f64>)]) -> Result<MetricReport> {
    let metrics = folds
        .iter()
        .enumerate()
        .map(|(i, (p, t))| FoldMetrics::compute(p, t).map_err(|e| e.context(format!("fold {i}"))))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_folds(config, metrics)
}

/// 1-based ranks in ascending order of value; ties get their average rank.
pub fn rank_with_ties(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman coefficient: Pearson correlation of tie-averaged ranks.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("rank vectors differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Domain("rank correlation needs at least two items".into()));
    }
    ncc(&rank_with_ties(a), &rank_with_ties(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeCorrelation {
    pub attribute: String,
    pub spearman: Option<f64>,
}

/// Correlate each registry attribute with performance over the named
/// SFMs. Both sides are ranked so that rank 1 is best: attributes by
/// [`Attribute::key`] (descending), performance by RMSE (ascending).
pub fn attribute_correlations(rmse_by_sfm: &[(String, f64)]) -> Result<Vec<AttributeCorrelation>> {
    let mut keys = Vec::new();
    for (name, _) in rmse_by_sfm {
        let d = registry::descriptor(name).ok_or_else(|| Error::Config(format!("SFM {name:?} is not registered")))?;
        keys.push(d.attributes);
    }
    let perf: Vec<f64> = rmse_by_sfm.iter().map(|(_, r)| *r).collect();
    Attribute::ALL
        .iter()
        .map(|&attr| {
            let ranked: Vec<f64> = keys.iter().map(|a| -attr.key(a)).collect();
            let spearman = match rank_correlation(&ranked, &perf) {
                Ok(r) => Some(r),
                Err(Error::UndefinedCorrelation(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(AttributeCorrelation {
                attribute: attr.label().to_string(),
                spearman,
            })
        })
        .collect()
}
