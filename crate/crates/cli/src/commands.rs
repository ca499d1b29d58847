//! Subcommand bodies. Each validates its input paths, stamps provenance,
//! then does the work and writes artifacts under `--out`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::Serialize;
use siphi_core::datastore::{
    make_splits, split_violations, synth_dataset, synth_family, Dataset, FamilyMember, FoldSplit, Manifest, SynthSpec,
};
use siphi_core::ensemble::{ensemble_sweep, FitConfig, Member};
use siphi_core::heads::{head_to_bytes, load_head, Arch, LayerMode, ValueWidth};
use siphi_core::metrics::FoldMetrics;
use siphi_core::report;
use siphi_core::sweep::{best_config, ConfigId, dim_sweep, inherited_layer_mode, layer_sweep, run_fold, FoldRun, SweepKind, SweepOptions};
use siphi_core::trainer::{self, default_recipe, desk_recipe, PreparedSplit, RunRecord, TrainRecipe};
use siphi_core::SweepResult;

use crate::args::*;
use crate::artifact::{blob_hash, read_payload, OutDir, Provenance};
use crate::error::{require_file, CliError, CliResult};

pub struct Context {
    pub command: Vec<String>,
}

impl Context {
    fn out(&self, common: &Common, inputs: impl FnOnce(&mut Provenance) -> CliResult<()>) -> CliResult<OutDir> {
        if common.workers == 0 {
            return Err(CliError::usage("--workers", "must be at least 1"));
        }
        let mut prov = Provenance::new(self.command.clone(), common.seed);
        inputs(&mut prov)?;
        log::info!("{} (seed {})", self.command.join(" "), common.seed);
        OutDir::create(&common.out, prov)
    }
}

fn recipe(args: &RecipeArgs, arch: Arch) -> CliResult<TrainRecipe> {
    let mut r = match args.recipe {
        RecipeKind::Full => default_recipe(arch),
        RecipeKind::Desk => desk_recipe(arch, 50, 32),
    };
    if let Some(epochs) = args.epochs {
        r = match args.recipe {
            RecipeKind::Full => r.with_epochs(epochs),
            RecipeKind::Desk => desk_recipe(arch, epochs, r.batch_size),
        };
    }
    if let Some(batch) = args.batch {
        r.batch_size = batch;
    }
    if let Some(lr) = args.lr {
        r.schedule.base_lr = lr;
    }
    r.validate().map_err(|e| CliError::usage("--recipe", e.to_string()))?;
    if args.pool_factor == 0 {
        return Err(CliError::usage("--pool-factor", "must be at least 1"));
    }
    Ok(r)
}

fn sweep_options(common: &Common, args: &RecipeArgs, arch: Arch, folds: Vec<usize>) -> CliResult<SweepOptions> {
    let mut o = SweepOptions::new(arch, common.seed);
    o.recipe = recipe(args, arch)?;
    o.template.pool_factor = args.pool_factor;
    o.folds = folds;
    o.workers = common.workers;
    Ok(o)
}

fn check_data_paths(data: &DataArgs) -> CliResult<()> {
    require_file("--manifest", &data.manifest)?;
    if let Some(s) = &data.split {
        require_file("--split", s)?;
    }
    Ok(())
}

fn stamp_data(prov: &mut Provenance, data: &DataArgs) -> CliResult<()> {
    prov.add_dataset("manifest", &data.manifest)?;
    if let Some(s) = &data.split {
        prov.add_file("split", s)?;
    }
    Ok(())
}

/// The dataset and its split: read from --split, or derived from --seed.
fn load_data(data: &DataArgs, seed: u64) -> CliResult<(Dataset, FoldSplit)> {
    let ds = Dataset::load(&data.manifest)?;
    let split = match &data.split {
        Some(p) => read_payload::<FoldSplit>(p)?,
        None => make_splits(ds.samples(), seed)?,
    };
    let problems = split_violations(&split, ds.samples());
    if !problems.is_empty() {
        return Err(CliError::Runtime(format!("split does not fit the manifest: {}", problems.join("; "))));
    }
    Ok((ds, split))
}

fn targets(ds: &Dataset, ids: &[String]) -> CliResult<Vec<f64>> {
    Ok(ds.indices(ids)?.into_iter().map(|i| ds.samples()[i].score).collect())
}

pub fn synth(ctx: &Context, a: &SynthArgs) -> CliResult<()> {
    let out = ctx.out(&a.common, |_| Ok(()))?;
    let mut spec = SynthSpec::new(a.samples, a.layers, a.frames, a.channels, a.frequencies, a.noise, a.common.seed);
    spec.name = a.name.clone();
    spec.listeners = a.listeners;
    spec.systems = a.systems;
    if let Some(k) = a.informative_layer {
        spec.informative_layer = k;
    }

    #[derive(Serialize)]
    struct Planted {
        name: String,
        manifest: String,
        informative_layer: usize,
        weights: Vec<f64>,
        bias: f64,
    }
    let outputs = if a.members.is_empty() {
        vec![(a.name.clone(), "manifest.json".to_string(), synth_dataset(&spec, out.root())?)]
    } else {
        let unique: BTreeSet<&String> = a.members.iter().collect();
        if unique.len() != a.members.len() {
            return Err(CliError::usage("--members", "member names must be distinct"));
        }
        for m in &a.members {
            if m.contains(['/', '\\']) {
                return Err(CliError::usage("--members", format!("{m:?} is not a plain name")));
            }
            out.path(m)?;
        }
        let members: Vec<FamilyMember> = a
            .members
            .iter()
            .enumerate()
            .map(|(i, name)| FamilyMember {
                name: name.clone(),
                informative_layer: i % a.layers.max(1),
                corruption_sd: a.corruption,
            })
            .collect();
        synth_family(&spec, &members, out.root())?
            .into_iter()
            .zip(&a.members)
            .map(|(o, name)| (name.clone(), format!("{name}/manifest.json"), o))
            .collect()
    };
    let planted: Vec<Planted> = outputs
        .into_iter()
        .map(|(name, manifest, o)| Planted {
            name,
            manifest,
            informative_layer: o.informative_layer,
            weights: o.weights,
            bias: o.bias,
        })
        .collect();
    out.write_json("synth.json", &planted)?;
    Ok(())
}

pub fn split(ctx: &Context, a: &SplitArgs) -> CliResult<()> {
    require_file("--manifest", &a.manifest)?;
    let out = ctx.out(&a.common, |p| p.add_dataset("manifest", &a.manifest))?;
    let manifest = Manifest::load(&a.manifest)?;
    let split = make_splits(&manifest.samples, a.common.seed)?;
    out.write_json("split.json", &split)?;
    Ok(())
}

#[derive(Serialize)]
struct TrainReport<'a> {
    id: &'a ConfigId,
    run: &'a FoldRun,
    test: FoldMetrics,
    record: &'a RunRecord,
    checkpoint: &'a str,
    checkpoint_sha256: String,
}

pub fn train(ctx: &Context, a: &TrainArgs) -> CliResult<()> {
    check_data_paths(&a.data)?;
    let opts = sweep_options(&a.common, &a.recipe, a.arch, vec![a.fold])?;
    let out = ctx.out(&a.common, |p| stamp_data(p, &a.data))?;
    let (ds, split) = load_data(&a.data, a.common.seed)?;
    split.fold(a.fold).map_err(|e| CliError::usage("--fold", e.to_string()))?;
    let id = ConfigId {
        sfm: ds.manifest.sfm.name.clone(),
        arch: a.arch,
        layer_mode: a.layer,
        dim: a.dim,
    };
    let (run, mut outcome) = run_fold(&ds, &split, &id, a.fold, &opts)?;
    let bytes = head_to_bytes(&outcome.head, ValueWidth::F64)?;
    let checkpoint = "head.ckpt";
    out.write_bytes(checkpoint, &bytes)?;
    outcome.record.checkpoint_path = Some(checkpoint.into());
    let test = FoldMetrics::compute(&run.test_predictions, &targets(&ds, &run.test_ids)?)?;
    log::info!("{id} fold {}: test rmse {:.3}", a.fold, test.rmse);
    out.write_json(
        "run.json",
        &TrainReport {
            id: &id,
            run: &run,
            test,
            record: &outcome.record,
            checkpoint,
            checkpoint_sha256: hex::encode(blob_hash(&bytes)),
        },
    )?;
    Ok(())
}

fn sweep_stem(res: &SweepResult) -> String {
    let kind = match res.kind {
        SweepKind::Layers => "layers",
        SweepKind::Dims => "dims",
    };
    format!("{}.{}.{kind}", res.sfm, res.arch)
}

fn write_sweep(out: &OutDir, res: &SweepResult) -> CliResult<()> {
    let stem = sweep_stem(res);
    out.write_json(&format!("{stem}.json"), res)?;
    out.write_text(&format!("{stem}.txt"), &report::sweep_table(res)?)?;
    Ok(())
}

pub fn sweep_layers(ctx: &Context, a: &SweepLayersArgs) -> CliResult<()> {
    check_data_paths(&a.data)?;
    let opts = sweep_options(&a.common, &a.recipe, a.arch, a.folds.clone())?;
    let out = ctx.out(&a.common, |p| stamp_data(p, &a.data))?;
    let (ds, split) = load_data(&a.data, a.common.seed)?;
    let res = layer_sweep(&ds, &split, a.arch, a.dim, &opts)?;
    write_sweep(&out, &res)
}

pub fn sweep_dims(ctx: &Context, a: &SweepDimsArgs) -> CliResult<()> {
    check_data_paths(&a.data)?;
    if let Some(p) = &a.inherit {
        require_file("--inherit", p)?;
    }
    let opts = sweep_options(&a.common, &a.recipe, a.arch, a.folds.clone())?;
    let out = ctx.out(&a.common, |p| {
        stamp_data(p, &a.data)?;
        match &a.inherit {
            Some(i) => p.add_file("inherit", i),
            None => Ok(()),
        }
    })?;
    let mode = match &a.inherit {
        Some(p) => {
            let layers: SweepResult = read_payload(p)?;
            inherited_layer_mode(&layers).map_err(|e| CliError::usage("--inherit", e.to_string()))?
        }
        None => a.layer.unwrap_or(LayerMode::All),
    };
    let (ds, split) = load_data(&a.data, a.common.seed)?;
    let res = dim_sweep(&ds, &split, a.arch, mode, &a.dims, &opts)?;
    write_sweep(&out, &res)
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint_sha256: String,
    id: ConfigId,
    fold: usize,
    partition: &'static str,
    metrics: FoldMetrics,
    sample_ids: Vec<String>,
    predictions: Vec<f64>,
}

pub fn eval(ctx: &Context, a: &EvalArgs) -> CliResult<()> {
    check_data_paths(&a.data)?;
    require_file("--checkpoint", &a.checkpoint)?;
    let out = ctx.out(&a.common, |p| {
        stamp_data(p, &a.data)?;
        p.add_file("checkpoint", &a.checkpoint)
    })?;
    let head = load_head(&a.checkpoint)?;
    let (ds, split) = load_data(&a.data, a.common.seed)?;
    if head.dims != trainer::head_dims(&ds) {
        return Err(CliError::Runtime(format!(
            "checkpoint expects {:?} but the manifest provides {:?}",
            head.dims,
            trainer::head_dims(&ds)
        )));
    }
    let fold = split.fold(a.fold).map_err(|e| CliError::usage("--fold", e.to_string()))?;
    let (partition, ids) = match a.partition {
        PartitionArg::Train => ("train", &fold.train),
        PartitionArg::Val => ("val", &fold.val),
        PartitionArg::Test => ("test", &fold.test),
    };
    let prepared = PreparedSplit::new(&ds, &ds.indices(ids)?, &head.config)?;
    let predictions = trainer::predict(&head, &prepared)?;
    let metrics = FoldMetrics::compute(&predictions, &prepared.targets)?;
    log::info!("fold {} {partition}: rmse {:.3}", a.fold, metrics.rmse);
    let checkpoint_sha256 = out.provenance().inputs.last().map(|i| i.sha256.clone()).unwrap_or_default();
    out.write_json(
        "eval.json",
        &EvalReport {
            checkpoint_sha256,
            id: ConfigId {
                sfm: ds.manifest.sfm.name.clone(),
                arch: head.config.arch,
                layer_mode: head.config.layer_mode,
                dim: head.config.embed_dim,
            },
            fold: a.fold,
            partition,
            metrics,
            sample_ids: ids.clone(),
            predictions,
        },
    )?;
    Ok(())
}

fn load_sweeps(paths: &[PathBuf]) -> CliResult<Vec<SweepResult>> {
    for p in paths {
        require_file("--sweep", p)?;
    }
    paths.iter().map(|p| read_payload(p)).collect()
}

fn stamp_sweeps(prov: &mut Provenance, paths: &[PathBuf]) -> CliResult<()> {
    paths.iter().try_for_each(|p| prov.add_file("sweep", p))
}

pub fn ensemble(ctx: &Context, a: &EnsembleArgs) -> CliResult<()> {
    require_file("--manifest", &a.manifest)?;
    for p in &a.sweeps {
        require_file("--sweep", p)?;
    }
    if a.k == 0 || a.k > a.sweeps.len() {
        return Err(CliError::usage(
            "--k",
            format!("must be between 1 and the number of sweeps ({})", a.sweeps.len()),
        ));
    }
    let out = ctx.out(&a.common, |p| {
        p.add_dataset("manifest", &a.manifest)?;
        stamp_sweeps(p, &a.sweeps)
    })?;
    let sweeps = load_sweeps(&a.sweeps)?;
    let mut seen = BTreeSet::new();
    for s in &sweeps {
        if !seen.insert(s.sfm.as_str()) {
            return Err(CliError::usage("--sweep", format!("model {:?} given more than once", s.sfm)));
        }
    }
    let members = sweeps
        .iter()
        .map(|s| {
            let id = best_config(s)?;
            let row = s.rows.iter().find(|r| r.id == id).expect("best config comes from the rows");
            Ok(Member {
                name: s.sfm.clone(),
                row,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let manifest = Manifest::load(&a.manifest)?;
    let targets: BTreeMap<String, f64> = manifest.samples.iter().map(|s| (s.sample_id.clone(), s.score)).collect();
    let rep = ensemble_sweep(&members, a.k, &targets, &FitConfig::default())?;
    out.write_json("ensemble.json", &rep)?;
    out.write_text("ensemble.txt", &report::ensemble_table(&rep))?;
    Ok(())
}

pub fn report(ctx: &Context, a: &ReportArgs) -> CliResult<()> {
    for p in &a.sweeps {
        require_file("--sweep", p)?;
    }
    let out = ctx.out(&a.common, |p| stamp_sweeps(p, &a.sweeps))?;
    let sweeps = load_sweeps(&a.sweeps)?;
    let summary = report::summarize(&sweeps)?;
    out.write_json("summary.json", &summary)?;
    let mut text = report::summary_table(&summary);
    for s in &sweeps {
        text.push('\n');
        text.push_str(&report::sweep_table(s)?);
    }
    let dims: Vec<SweepResult> = sweeps.iter().filter(|s| s.kind == SweepKind::Dims).cloned().collect();
    if !dims.is_empty() {
        text.push('\n');
        text.push_str(&report::dim_grid_table(&dims));
    }
    out.write_text("report.txt", &text)?;
    Ok(())
}
