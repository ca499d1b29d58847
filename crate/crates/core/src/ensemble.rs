//! Softmax-weighted ensembles of per-SFM predictions.
//!
//! Weights are fitted on the validation split and reported on test.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{FoldMetrics, MetricReport};
use crate::numerics::tape::{huber_elem, softmax_vec};
use crate::numerics::{adam_step, AdamConfig, AdamState, ParamSet, Tensor};
use crate::sweep::SweepRow;

const LOGITS: &str = "logits";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub members: Vec<String>,
    pub logits: Vec<f64>,
}

impl EnsembleModel {
    pub fn uniform(members: Vec<String>) -> Self {
        let logits = vec![0.0; members.len()];
        Self { members, logits }
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax_vec(&self.logits)
    }
}

/// Predictions of several members over one shared, ordered id list.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberPredictions {
    pub members: Vec<String>,
    pub sample_ids: Vec<String>,
    /// `preds[m][i]`: member `m` on sample `sample_ids[i]`.
    pub preds: Vec<Vec<f64>>,
}

impl MemberPredictions {
    /// Align per-member `(ids, predictions)`; every member must cover the
    /// same id set. Output follows the first member's id order.
    pub fn align(members: &[(String, &[String], &[f64])]) -> Result<Self> {
        let (_, first_ids, _) = members
            .first()
            .ok_or_else(|| Error::Domain("no ensemble members".into()))?;
        let reference: BTreeSet<&String> = first_ids.iter().collect();
        let mut preds = Vec::with_capacity(members.len());
        for (name, ids, values) in members {
            if ids.len() != values.len() {
                return Err(Error::Shape(format!(
                    "member {name:?} has {} ids and {} predictions",
                    ids.len(),
                    values.len()
                )));
            }
            let lookup: BTreeMap<&String, f64> = ids.iter().zip(values.iter().copied()).collect();
            if lookup.len() != ids.len() {
                return Err(Error::Alignment(format!("member {name:?} repeats sample ids")));
            }
            let own: BTreeSet<&String> = lookup.keys().copied().collect();
            if own != reference {
                let missing: Vec<_> = reference.difference(&own).take(5).collect();
                let extra: Vec<_> = own.difference(&reference).take(5).collect();
                return Err(Error::Alignment(format!(
                    "member {name:?} differs from {:?}: missing {missing:?}, unexpected {extra:?}",
                    members[0].0
                )));
            }
            preds.push(first_ids.iter().map(|id| lookup[id]).collect());
        }
        Ok(Self {
            members: members.iter().map(|(n, _, _)| n.clone()).collect(),
            sample_ids: first_ids.to_vec(),
            preds,
        })
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub lr: f64,
    pub steps: usize,
    pub huber_delta: f64,
    pub adam: AdamConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            steps: 500,
            huber_delta: 1.0,
            adam: AdamConfig::default(),
        }
    }
}

pub fn ensemble_predict(model: &EnsembleModel, preds: &MemberPredictions) -> Result<Vec<f64>> {
    if model.members != preds.members {
        return Err(Error::Alignment(format!(
            "model members {:?} do not match prediction members {:?}",
            model.members, preds.members
        )));
    }
    let w = model.weights();
    Ok((0..preds.len())
        .map(|i| w.iter().zip(&preds.preds).map(|(wm, p)| wm * p[i]).sum())
        .collect())
}

/// Full-batch Adam on the logits, minimizing the mean Huber loss of the
/// weighted average. Starts from equal logits, so it is deterministic.
pub fn fit_ensemble(val: &MemberPredictions, targets: &[f64], cfg: &FitConfig) -> Result<EnsembleModel> {
    if val.members.is_empty() {
        return Err(Error::Domain("no ensemble members".into()));
    }
    if targets.len() != val.len() || val.is_empty() {
        return Err(Error::Shape(format!(
            "{} targets for {} aligned samples",
            targets.len(),
            val.len()
        )));
    }
    let m = val.members.len();
    let mut model = EnsembleModel::uniform(val.members.clone());
    let mut params = ParamSet::new();
    params.insert(LOGITS, Tensor::zeros(&[1, m]), true)?;
    let mut state = AdamState::new();
    let n = targets.len() as f64;
    for _ in 0..cfg.steps {
        model.logits = params.get(LOGITS).expect("inserted").data().to_vec();
        let w = model.weights();
        let pred = ensemble_predict(&model, val)?;
        // dL/dw_m, then through the softmax Jacobian
        let mut gw = vec![0.0; m];
        for (i, (p, t)) in pred.iter().zip(targets).enumerate() {
            let (_, d) = huber_elem(p - t, cfg.huber_delta);
            for (g, member) in gw.iter_mut().zip(&val.preds) {
                *g += d * member[i] / n;
            }
        }
        let dot: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        let gl: Vec<f64> = w.iter().zip(&gw).map(|(wi, gi)| wi * (gi - dot)).collect();
        let grads = BTreeMap::from([(LOGITS.to_string(), Tensor::matrix(1, m, gl)?)]);
        adam_step(&mut params, &grads, &mut state, &cfg.adam, cfg.lr)?;
    }
    model.logits = params.get(LOGITS).expect("inserted").data().to_vec();
    Ok(model)
}

/// All `k`-subsets of `items` in lexicographic (index) order.
pub fn enumerate_combinations<T: Clone>(items: &[T], k: usize) -> Result<Vec<Vec<T>>> {
    let n = items.len();
    if k == 0 || k > n {
        return Err(Error::Domain(format!("cannot choose {k} of {n} members")));
    }
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.iter().map(|&i| items[i].clone()).collect());
        // rightmost index that can still advance
        let Some(pos) = (0..k).rev().find(|&p| idx[p] < n - k + p) else {
            return Ok(out);
        };
        idx[pos] += 1;
        for p in pos + 1..k {
            idx[p] = idx[p - 1] + 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolated quantile of sorted data (the common "type 7").
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn weight_stats(samples: &[f64]) -> Result<WeightStats> {
    if samples.is_empty() {
        return Err(Error::Domain("no weights to summarize".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(WeightStats {
        count: s.len(),
        min: s[0],
        q1: quantile(&s, 0.25),
        median: quantile(&s, 0.5),
        q3: quantile(&s, 0.75),
        max: s[s.len() - 1],
    })
}

/// Order statistics of `member`'s weight over every model containing it.
pub fn member_weight_stats(models: &[EnsembleModel], member: &str) -> Result<WeightStats> {
    let samples: Vec<f64> = models
        .iter()
        .filter_map(|m| {
            let pos = m.members.iter().position(|x| x == member)?;
            Some(m.weights()[pos])
        })
        .collect();
    if samples.is_empty() {
        return Err(Error::Domain(format!("member {member:?} is in no ensemble")));
    }
    weight_stats(&samples)
}

/// Weight statistics for every member that appears in any model.
pub fn weight_distribution(models: &[EnsembleModel]) -> Result<BTreeMap<String, WeightStats>> {
    let names: BTreeSet<&String> = models.iter().flat_map(|m| &m.members).collect();
    names
        .into_iter()
        .map(|n| Ok((n.clone(), member_weight_stats(models, n)?)))
        .collect()
}

/// One member's best configuration with its per-fold predictions.
#[derive(Debug, Clone)]
pub struct Member<'a> {
    pub name: String,
    pub row: &'a SweepRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRow {
    pub rank: usize,
    pub members: Vec<String>,
    /// Fitted model per fold.
    pub models: Vec<EnsembleModel>,
    pub val: Vec<FoldMetrics>,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub k: usize,
    pub fit: FitConfig,
    /// Ranked by mean test RMSE, then mean NCC, then member list.
    pub rows: Vec<EnsembleRow>,
    pub weights: BTreeMap<String, WeightStats>,
    /// Per member, every fitted weight it received (ensemble rank order,
    /// then fold).
    pub weight_samples: BTreeMap<String, Vec<f64>>,
}

fn fold_preds<'a>(
    members: &[&Member<'a>],
    fold_pos: usize,
    pick: impl Fn(&'a crate::sweep::FoldRun) -> (&'a [String], &'a [f64]),
) -> Result<MemberPredictions> {
    let parts: Vec<(String, &[String], &[f64])> = members
        .iter()
        .map(|m| {
            let run = m
                .row
                .runs
                .get(fold_pos)
                .ok_or_else(|| Error::Alignment(format!("member {:?} lacks fold position {fold_pos}", m.name)))?;
            let (ids, p) = pick(run);
            Ok((m.name.clone(), ids, p))
        })
        .collect::<Result<_>>()?;
    MemberPredictions::align(&parts)
}

/// Fit and evaluate one ensemble per `k`-combination of `members`, fold by
/// fold. `targets` maps sample id to score.
pub fn ensemble_sweep(
    members: &[Member<'_>],
    k: usize,
    targets: &BTreeMap<String, f64>,
    fit: &FitConfig,
) -> Result<EnsembleReport> {
    let folds = members
        .first()
        .ok_or_else(|| Error::Domain("no ensemble members".into()))?
        .row
        .runs
        .iter()
        .map(|r| r.fold)
        .collect::<Vec<_>>();
    for m in members {
        let f: Vec<usize> = m.row.runs.iter().map(|r| r.fold).collect();
        if f != folds {
            return Err(Error::Alignment(format!("member {:?} has folds {f:?}, expected {folds:?}", m.name)));
        }
    }
    let lookup = |ids: &[String]| -> Result<Vec<f64>> {
        ids.iter()
            .map(|id| {
                targets
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Alignment(format!("no target for sample {id:?}")))
            })
            .collect()
    };

    let refs: Vec<&Member> = members.iter().collect();
    let mut rows = Vec::new();
    for combo in enumerate_combinations(&refs, k)? {
        let names: Vec<String> = combo.iter().map(|m| m.name.clone()).collect();
        let mut models = Vec::new();
        let mut val = Vec::new();
        let mut test = Vec::new();
        for pos in 0..folds.len() {
            let vp = fold_preds(&combo, pos, |r| (&r.val_ids, &r.val_predictions))?;
            let tp = fold_preds(&combo, pos, |r| (&r.test_ids, &r.test_predictions))?;
            let vt = lookup(&vp.sample_ids)?;
            let tt = lookup(&tp.sample_ids)?;
            let model = fit_ensemble(&vp, &vt, fit)?;
            val.push(FoldMetrics::compute(&ensemble_predict(&model, &vp)?, &vt)?);
            test.push(FoldMetrics::compute(&ensemble_predict(&model, &tp)?, &tt)?);
            models.push(model);
        }
        rows.push(EnsembleRow {
            rank: 0,
            report: MetricReport::from_folds(names.join("+"), test)?,
            members: names,
            models,
            val,
        });
    }
    rows.sort_by(|a, b| {
        a.report
            .mean_rmse
            .total_cmp(&b.report.mean_rmse)
            .then_with(|| {
                let na = a.report.mean_ncc.unwrap_or(f64::NEG_INFINITY);
                let nb = b.report.mean_ncc.unwrap_or(f64::NEG_INFINITY);
                nb.total_cmp(&na)
            })
            .then_with(|| a.members.cmp(&b.members))
    });
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    let all_models: Vec<EnsembleModel> = rows.iter().flat_map(|r| r.models.iter().cloned()).collect();
    let mut weight_samples: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for model in &all_models {
        for (name, w) in model.members.iter().zip(model.weights()) {
            weight_samples.entry(name.clone()).or_default().push(w);
        }
    }
    Ok(EnsembleReport {
        k,
        fit: *fit,
        weights: weight_distribution(&all_models)?,
        weight_samples,
        rows,
    })
}
