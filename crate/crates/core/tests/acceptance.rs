//! One test per acceptance criterion of the core crate.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use common::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use siphi_core::datastore::{
    make_splits, split_violations, synth_dataset, synth_family, Audiogram, Dataset, FamilyMember, Sample, SynthSpec,
};
use siphi_core::ensemble::{
    ensemble_predict, ensemble_sweep, enumerate_combinations, fit_ensemble, FitConfig, Member,
    MemberPredictions,
};
use siphi_core::heads::model::FUSION_LOGITS;
use siphi_core::heads::{self, Arch, HeadConfig, HeadDims, LayerMode, Prepared};
use siphi_core::metrics::{ncc, rank_correlation, rmse};
use siphi_core::numerics::{grad_check, lr_at, Tensor};
use siphi_core::report;
use siphi_core::sweep::{best_config, layer_sweep, SweepOptions};
use siphi_core::trainer::{self, default_recipe, desk_recipe, PreparedSplit};

/// Criteria run one at a time so their runtime budgets measure their own
/// work, not a neighbour's.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

#[test]
fn gradient_correctness() {
    let _serial = serial();
    let start = Instant::now();
    let dims = HeadDims {
        layers: 3,
        channels: 8,
        frequencies: 8,
    };
    for arch in Arch::ALL {
        for seed in 0..5u64 {
            let head = grad_check_head(arch, LayerMode::All, 16, dims, seed);
            let mut r = rng(1000 + seed);
            let prepared: Vec<Prepared> = (0..2)
                .map(|_| {
                    let x = random_features(&mut r, 3, 45, 8);
                    let a = random_audiogram(&mut r, 8);
                    Prepared::new(&x, &a, head.pooling()).unwrap()
                })
                .collect();
            let refs: Vec<&Prepared> = prepared.iter().collect();
            let targets: Vec<f64> = heads::predict_prepared(&head, &refs, 8)
                .unwrap()
                .iter()
                .map(|y| y + r.gen_range(-2.0..2.0))
                .collect();
            let rep = grad_check(loss_fn(&head, &prepared, &targets), &head.params, 1e-5).unwrap();
            assert!(rep.max_relative_error < 1e-4, "{arch} seed {seed}: {rep:?}");
        }
    }
    assert!(start.elapsed().as_secs() < 60, "took {:?}", start.elapsed());
}

#[test]
fn planted_layer_recovery() {
    let _serial = serial();
    let start = Instant::now();
    let mut wins = 0;
    for seed in 0..10u64 {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SynthSpec::new(600, 6, 20, 64, 8, 2.0, seed);
        spec.informative_layer = 4;
        let out = synth_dataset(&spec, dir.path()).unwrap();
        let ds = Dataset::load(&out.manifest_path).unwrap();
        let split = make_splits(ds.samples(), seed).unwrap();
        let mut opts = SweepOptions::new(Arch::WaTgp, seed);
        opts.recipe = desk_recipe(Arch::WaTgp, 40, 32);
        let res = layer_sweep(&ds, &split, Arch::WaTgp, 32, &opts).unwrap();
        if best_config(&res).unwrap().layer_mode == LayerMode::Single(4) {
            wins += 1;
        }
        let best_single = res
            .rows
            .iter()
            .filter(|r| r.id.layer_mode != LayerMode::All)
            .map(|r| r.report.mean_rmse)
            .fold(f64::INFINITY, f64::min);
        let all = res.rows.iter().find(|r| r.id.layer_mode == LayerMode::All).unwrap();
        assert!(
            all.report.mean_rmse >= best_single - 0.5,
            "seed {seed}: all-layers {} vs best single {best_single}",
            all.report.mean_rmse
        );
    }
    assert!(wins >= 9, "Single(4) chosen in {wins}/10 seeds");
    assert!(start.elapsed().as_secs() < 600, "took {:?}", start.elapsed());
}

#[test]
fn overfit_sanity() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let out = synth_dataset(&SynthSpec::new(32, 3, 45, 8, 8, 0.0, 21), dir.path()).unwrap();
    let ds = Dataset::load(&out.manifest_path).unwrap();
    let idx: Vec<usize> = (0..32).collect();
    for arch in Arch::ALL {
        let start = Instant::now();
        let cfg = HeadConfig::new(arch, LayerMode::All, 16);
        let res = trainer::train(&cfg, &desk_recipe(arch, 200, 8), &ds, &idx, &idx, None).unwrap();
        let split = PreparedSplit::new(&ds, &idx, &cfg).unwrap();
        let train_rmse = trainer::split_rmse(&res.head, &split).unwrap();
        assert!(train_rmse < 2.0, "{arch}: train RMSE {train_rmse}");
        assert!(start.elapsed().as_secs() < 120, "{arch} took {:?}", start.elapsed());
    }
}

fn oracle_rmse(p: &[f64], t: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.len() {
        acc += (p[i] - t[i]).powi(2);
    }
    (acc / p.len() as f64).sqrt()
}

/// Textbook single-pass formula, deliberately different from the library's.
fn oracle_ncc(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Rank by counting, ties averaged.
fn oracle_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&a| {
            let below = v.iter().filter(|&&b| b < a).count() as f64;
            let equal = v.iter().filter(|&&b| b == a).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Pearson with the same final arithmetic as the library, so equal ranks
/// give bit-identical results.
fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

#[test]
fn metric_oracles() {
    let _serial = serial();
    let mut r = rng(2024);
    for i in 0..1000 {
        let n = r.gen_range(2..200);
        let p: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..100.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..100.0)).collect();
        assert!((rmse(&p, &t).unwrap() - oracle_rmse(&p, &t)).abs() <= 1e-9, "case {i}");
        assert!((ncc(&p, &t).unwrap() - oracle_ncc(&p, &t)).abs() <= 1e-9, "case {i}");

        // integer values force ties
        let a: Vec<f64> = (0..n).map(|_| r.gen_range(0..10) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| r.gen_range(0..10) as f64).collect();
        let (ra, rb) = (oracle_ranks(&a), oracle_ranks(&b));
        let constant = ra.iter().all(|&v| v == ra[0]) || rb.iter().all(|&v| v == rb[0]);
        match rank_correlation(&a, &b) {
            Ok(s) => assert_eq!(s, pearson(&ra, &rb), "case {i}"),
            Err(_) => assert!(constant, "case {i}"),
        }
    }
}

#[test]
fn recipe_fidelity() {
    let _serial = serial();
    let close = |got: f64, want: f64| (got - want).abs() <= 1e-12 * want;
    let tgp = default_recipe(Arch::WaTgp).schedule;
    for (e, want) in [(0, 1e-4), (50, 1e-6)] {
        let got = lr_at(&tgp, e).unwrap();
        assert!(close(got, want), "WA-TGP epoch {e}: {got}");
    }
    for arch in [Arch::WaTt, Arch::Dt] {
        let s = default_recipe(arch).schedule;
        for (e, want) in [(0, 3e-6), (10, 3e-5), (50, 1e-6)] {
            let got = lr_at(&s, e).unwrap();
            assert!(close(got, want), "{arch} epoch {e}: {got}");
        }
    }
}

fn member_preds(rng: &mut impl Rng, truth: &[f64], sds: &[f64]) -> MemberPredictions {
    MemberPredictions {
        members: (0..sds.len()).map(|m| format!("m{m}")).collect(),
        sample_ids: (0..truth.len()).map(|i| format!("S{i:05}")).collect(),
        preds: sds
            .iter()
            .map(|&sd| {
                let d = Normal::new(0.0, sd).unwrap();
                truth.iter().map(|t| t + d.sample(rng)).collect()
            })
            .collect(),
    }
}

#[test]
fn ensemble_contracts() {
    let _serial = serial();
    assert_eq!(enumerate_combinations(&[0, 1, 2, 3, 4], 3).unwrap().len(), 10);
    let cfg = FitConfig::default();
    let mut wins = 0;
    for seed in 0..10u64 {
        let mut r = rng(500 + seed);
        let val_truth: Vec<f64> = (0..150).map(|_| r.gen_range(5.0..95.0)).collect();
        let test_truth: Vec<f64> = (0..150).map(|_| r.gen_range(5.0..95.0)).collect();
        let sds = [8.0, 8.0, 8.0];
        let val = member_preds(&mut r, &val_truth, &sds);
        let test = member_preds(&mut r, &test_truth, &sds);
        let model = fit_ensemble(&val, &val_truth, &cfg).unwrap();
        assert!((model.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let ens = rmse(&ensemble_predict(&model, &test).unwrap(), &test_truth).unwrap();
        let mean_member = test.preds.iter().map(|p| rmse(p, &test_truth).unwrap()).sum::<f64>() / 3.0;
        if ens < 0.75 * mean_member {
            wins += 1;
        }
    }
    assert!(wins >= 9, "ensemble beat 0.75 x mean member in {wins}/10 seeds");

    for seed in 0..50u64 {
        let mut r = rng(9000 + seed);
        let k = r.gen_range(1..6);
        let truth: Vec<f64> = (0..r.gen_range(10..200)).map(|_| r.gen_range(0.0..100.0)).collect();
        let sds: Vec<f64> = (0..k).map(|_| r.gen_range(0.5..30.0)).collect();
        let val = member_preds(&mut r, &truth, &sds);
        let model = fit_ensemble(&val, &truth, &cfg).unwrap();
        assert!((model.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12, "seed {seed}");
        let got = rmse(&ensemble_predict(&model, &val).unwrap(), &truth).unwrap();
        let best = val.preds.iter().map(|p| rmse(p, &truth).unwrap()).fold(f64::INFINITY, f64::min);
        assert!(got <= best + 0.1, "seed {seed}: ensemble {got} vs best member {best}");
    }
}

#[test]
fn architecture_invariants() {
    let _serial = serial();
    let dims = HeadDims {
        layers: 4,
        channels: 6,
        frequencies: 8,
    };
    for arch in Arch::ALL {
        for i in 0..100u64 {
            let head = random_head(arch, LayerMode::All, 8, dims, i);
            let mut r = rng(i + 77);
            let frames = r.gen_range(1..80);
            let x = random_features(&mut r, 4, frames, 6);
            let a = random_audiogram(&mut r, 8);
            let s = scores(&head, &[(x.clone(), a.clone())])[0];
            let t = scores(&head, &[(x.swap_ears(), a.swapped())])[0];
            assert!((s - t).abs() < 1e-10, "{arch} input {i}: {s} vs {t}");
        }
    }

    // power-of-two shifts of dyadic logits are exact in floating point
    let base_logits = [0.5, -1.25, 2.0, 0.75, 0.0];
    for arch in Arch::ALL {
        let mut head = random_head(arch, LayerMode::All, 8, dims, 3);
        if head.fusion_weights().is_none() {
            continue;
        }
        head.params.set(FUSION_LOGITS, Tensor::matrix(1, 5, base_logits.to_vec()).unwrap()).unwrap();
        let mut r = rng(4);
        let batch: Vec<_> = (0..4).map(|_| (random_features(&mut r, 4, 30, 6), random_audiogram(&mut r, 8))).collect();
        let want = scores(&head, &batch);
        for shift in [-8.0, 1.0, 4.0, 32.0] {
            let mut h = head.clone();
            h.params
                .set(FUSION_LOGITS, Tensor::matrix(1, 5, base_logits.iter().map(|l| l + shift).collect()).unwrap())
                .unwrap();
            assert_eq!(scores(&h, &batch), want, "{arch} shift {shift}");
        }
    }

    for k in 0..4 {
        let single = random_head(Arch::WaTgp, LayerMode::Single(k), 8, dims, 10 + k as u64);
        let mut all = random_head(Arch::WaTgp, LayerMode::All, 8, dims, 99);
        for name in single.params.names() {
            if name != FUSION_LOGITS {
                all.params.set(name, single.params.get(name).unwrap().clone()).unwrap();
            }
        }
        let sl = single.params.get(FUSION_LOGITS).unwrap().data().to_vec();
        let mut logits = vec![0.0; 5];
        logits[k] = 50.0 + sl[0];
        logits[4] = 50.0 + sl[1];
        all.params.set(FUSION_LOGITS, Tensor::matrix(1, 5, logits).unwrap()).unwrap();
        let mut r = rng(k as u64);
        let batch: Vec<_> = (0..20).map(|_| (random_features(&mut r, 4, 25, 6), random_audiogram(&mut r, 8))).collect();
        for (s, m) in scores(&single, &batch).iter().zip(scores(&all, &batch)) {
            assert!((s - m).abs() < 1e-6, "layer {k}: {s} vs {m}");
        }
    }
}

/// split -> per-member layer sweep -> 2-ensembles -> summary, all as bytes.
fn pipeline(dir: &Path, seed: u64) -> Vec<(String, Vec<u8>)> {
    let spec = SynthSpec::new(90, 3, 12, 8, 8, 2.0, 5);
    let members: Vec<FamilyMember> = ["fa", "fb", "fc"]
        .iter()
        .enumerate()
        .map(|(i, n)| FamilyMember {
            name: n.to_string(),
            informative_layer: i % 3,
            corruption_sd: 0.3,
        })
        .collect();
    let family = synth_family(&spec, &members, dir).unwrap();
    let first = Dataset::load(&family[0].manifest_path).unwrap();
    let split = make_splits(first.samples(), seed).unwrap();
    let mut artifacts = vec![("split.json".to_string(), split.to_json().unwrap().into_bytes())];

    let mut opts = SweepOptions::new(Arch::WaTgp, seed);
    opts.recipe = desk_recipe(Arch::WaTgp, 4, 16);
    opts.template.pool_factor = 4;
    let mut sweeps = Vec::new();
    for out in &family {
        let ds = Dataset::load(&out.manifest_path).unwrap();
        let res = layer_sweep(&ds, &split, Arch::WaTgp, 8, &opts).unwrap();
        artifacts.push((format!("{}.layers.json", res.sfm), res.to_json().unwrap().into_bytes()));
        sweeps.push(res);
    }

    let targets: BTreeMap<String, f64> = first.samples().iter().map(|s| (s.sample_id.clone(), s.score)).collect();
    let best: Vec<Member> = sweeps
        .iter()
        .map(|s| {
            let id = best_config(s).unwrap();
            Member {
                name: s.sfm.clone(),
                row: s.rows.iter().find(|r| r.id == id).unwrap(),
            }
        })
        .collect();
    let ens = ensemble_sweep(&best, 2, &targets, &FitConfig::default()).unwrap();
    artifacts.push(("ensemble.json".into(), serde_json::to_vec_pretty(&ens).unwrap()));
    let summary = report::summarize(&sweeps).unwrap();
    artifacts.push(("summary.json".into(), serde_json::to_vec_pretty(&summary).unwrap()));
    artifacts.push(("summary.txt".into(), report::summary_table(&summary).into_bytes()));
    artifacts.push(("ensemble.txt".into(), report::ensemble_table(&ens).into_bytes()));
    artifacts
}

#[test]
fn pipeline_determinism() {
    let _serial = serial();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path(), 17);
    let second = pipeline(b.path(), 17);
    assert_eq!(first.len(), second.len());
    for ((na, ba), (nb, bb)) in first.iter().zip(&second) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs between runs");
    }
}

#[test]
fn split_safety() {
    let _serial = serial();
    let mut r = rng(31337);
    let mut overlaps = 0;
    for case in 0..10_000 {
        let listeners = r.gen_range(3..40);
        let n = r.gen_range(listeners..listeners * 4 + 1);
        let samples: Vec<Sample> = (0..n)
            .map(|i| Sample {
                sample_id: format!("S{i:05}"),
                // every listener appears at least once
                listener_id: format!("L{:03}", if i < listeners { i } else { r.gen_range(0..listeners) }),
                system_id: "E000".into(),
                score: 0.0,
                feature_path: String::new(),
                audiogram: Audiogram {
                    left: vec![],
                    right: vec![],
                },
            })
            .collect();
        let split = make_splits(&samples, r.gen()).unwrap();
        let problems = split_violations(&split, &samples);
        assert!(problems.is_empty(), "case {case}: {problems:?}");
        let owner: BTreeMap<&str, &str> = samples.iter().map(|s| (s.sample_id.as_str(), s.listener_id.as_str())).collect();
        for fold in &split.folds {
            let parts: Vec<std::collections::BTreeSet<&str>> = [&fold.train, &fold.val, &fold.test]
                .iter()
                .map(|ids| ids.iter().map(|id| owner[id.as_str()]).collect())
                .collect();
            for (x, y) in [(0, 1), (0, 2), (1, 2)] {
                overlaps += parts[x].intersection(&parts[y]).count();
            }
        }
    }
    assert_eq!(overlaps, 0);
}

