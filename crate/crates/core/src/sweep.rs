//! Layer and embedding-dimension sweeps over the three folds.
//!
//! Every (configuration, fold) pair is an independent run whose seed is a
//! hash of the global seed, the configuration id and the fold, so results
//! do not depend on worker count or completion order.

use std::hash::Hasher;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::{Dataset, FoldSplit};
use crate::error::{Error, Result};
use crate::heads::{Arch, HeadConfig, LayerMode, DIM_GRID};
use crate::metrics::{FoldMetrics, MetricReport};
use crate::trainer::{self, head_dims, PreparedSplit, TrainRecipe};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConfigId {
    pub sfm: String,
    pub arch: Arch,
    pub layer_mode: LayerMode,
    pub dim: usize,
}

impl std::fmt::Display for ConfigId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}/d{}", self.sfm, self.arch, self.layer_mode, self.dim)
    }
}

/// Seed for one run, independent of scheduling.
pub fn run_seed(seed: u64, id: &ConfigId, fold: usize) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(&seed.to_le_bytes());
    h.write(id.to_string().as_bytes());
    h.write(&(fold as u64).to_le_bytes());
    h.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRun {
    pub fold: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub val: FoldMetrics,
    pub val_ids: Vec<String>,
    pub val_predictions: Vec<f64>,
    pub test_ids: Vec<String>,
    pub test_predictions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub id: ConfigId,
    /// Test-split metrics per fold and their means.
    pub report: MetricReport,
    pub runs: Vec<FoldRun>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    Layers,
    Dims,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub kind: SweepKind,
    pub sfm: String,
    pub arch: Arch,
    pub seed: u64,
    pub recipe: TrainRecipe,
    pub template: HeadConfig,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Settings shared by every run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    /// Per-run seeds are derived from this.
    pub seed: u64,
    pub recipe: TrainRecipe,
    /// Pool factor, depth, heads and positional flag for every config;
    /// arch, layer mode, width and seed are overwritten per run.
    pub template: HeadConfig,
    pub folds: Vec<usize>,
    pub workers: usize,
}

impl SweepOptions {
    pub fn new(arch: Arch, seed: u64) -> Self {
        Self {
            seed,
            recipe: trainer::default_recipe(arch),
            template: HeadConfig::new(arch, LayerMode::All, DIM_GRID[0]),
            folds: vec![0, 1, 2],
            workers: 1,
        }
    }
}

/// On-disk description of a sweep for the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub manifest: PathBuf,
    pub archs: Vec<Arch>,
    #[serde(default = "default_grid")]
    pub dims: Vec<usize>,
    #[serde(default = "default_folds")]
    pub folds: Vec<usize>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_grid() -> Vec<usize> {
    DIM_GRID.to_vec()
}

fn default_folds() -> Vec<usize> {
    vec![0, 1, 2]
}

fn default_seed() -> u64 {
    17
}

fn default_workers() -> usize {
    1
}

fn run_config(
    dataset: &Dataset,
    split: &FoldSplit,
    id: &ConfigId,
    fold: usize,
    opts: &SweepOptions,
) -> Result<FoldRun> {
    run_fold(dataset, split, id, fold, opts).map(|(run, _)| run)
}

/// Train one config on one fold exactly as a sweep would, keeping the
/// selected head and its training log.
pub fn run_fold(
    dataset: &Dataset,
    split: &FoldSplit,
    id: &ConfigId,
    fold: usize,
    opts: &SweepOptions,
) -> Result<(FoldRun, trainer::TrainOutcome)> {
    let seed = run_seed(opts.seed, id, fold);
    let mut config = opts.template.clone();
    config.arch = id.arch;
    config.layer_mode = id.layer_mode;
    config.embed_dim = id.dim;
    config.seed = seed;
    let mut recipe = opts.recipe.clone();
    recipe.seed = seed;

    let f = split.fold(fold)?;
    let train_idx = dataset.indices(&f.train)?;
    let val_idx = dataset.indices(&f.val)?;
    let test_idx = dataset.indices(&f.test)?;
    let train = PreparedSplit::new(dataset, &train_idx, &config)?;
    let val = PreparedSplit::new(dataset, &val_idx, &config)?;
    let test = PreparedSplit::new(dataset, &test_idx, &config)?;
    let out = trainer::train_prepared(&config, head_dims(dataset), &recipe, &train, &val, None)?;
    let test_predictions = trainer::predict(&out.head, &test)?;
    let run = FoldRun {
        fold,
        seed,
        best_epoch: out.record.best_epoch,
        val: FoldMetrics::compute(&out.val_predictions, &val.targets)?,
        val_ids: f.val.clone(),
        val_predictions: out.val_predictions.clone(),
        test_ids: f.test.clone(),
        test_predictions,
    };
    Ok((run, out))
}

fn check_folds(split: &FoldSplit, folds: &[usize]) -> Result<()> {
    if folds.is_empty() {
        return Err(Error::Config("a sweep needs at least one fold".into()));
    }
    for &f in folds {
        split.fold(f)?;
    }
    Ok(())
}

/// Train and evaluate every config on every fold; rows come back in the
/// order of `ids`.
pub fn run_grid(
    dataset: &Dataset,
    split: &FoldSplit,
    ids: &[ConfigId],
    opts: &SweepOptions,
) -> Result<Vec<SweepRow>> {
    check_folds(split, &opts.folds)?;
    let jobs: Vec<(usize, usize)> = (0..ids.len())
        .flat_map(|c| opts.folds.iter().map(move |&f| (c, f)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let runs: Vec<FoldRun> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, f)| {
                log::info!("run {} fold {f}", ids[c]);
                run_config(dataset, split, &ids[c], f, opts).map_err(|e| e.context(format!("{} fold {f}", ids[c])))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let per = opts.folds.len();
    ids.iter()
        .zip(runs.chunks(per))
        .map(|(id, runs)| {
            let folds = runs
                .iter()
                .map(|r| {
                    let targets = targets_for(dataset, &r.test_ids)?;
                    FoldMetrics::compute(&r.test_predictions, &targets)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepRow {
                id: id.clone(),
                report: MetricReport::from_folds(id.to_string(), folds)?,
                runs: runs.to_vec(),
            })
        })
        .collect()
}

fn targets_for(dataset: &Dataset, ids: &[String]) -> Result<Vec<f64>> {
    Ok(dataset
        .indices(ids)?
        .into_iter()
        .map(|i| dataset.samples()[i].score)
        .collect())
}

/// Every single layer, then all layers fused: `L + 1` rows.
pub fn layer_sweep(
    dataset: &Dataset,
    split: &FoldSplit,
    arch: Arch,
    dim: usize,
    opts: &SweepOptions,
) -> Result<SweepResult> {
    let sfm = dataset.manifest.sfm.name.clone();
    let modes = (0..dataset.manifest.sfm.layers)
        .map(LayerMode::Single)
        .chain(std::iter::once(LayerMode::All));
    let ids: Vec<ConfigId> = modes
        .map(|layer_mode| ConfigId {
            sfm: sfm.clone(),
            arch,
            layer_mode,
            dim,
        })
        .collect();
    Ok(SweepResult {
        kind: SweepKind::Layers,
        sfm,
        arch,
        seed: opts.seed,
        recipe: opts.recipe.clone(),
        template: opts.template.clone(),
        rows: run_grid(dataset, split, &ids, opts)?,
    })
}

/// One row per width in `grid`, at a fixed layer mode.
pub fn dim_sweep(
    dataset: &Dataset,
    split: &FoldSplit,
    arch: Arch,
    layer_mode: LayerMode,
    grid: &[usize],
    opts: &SweepOptions,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Config("dimension grid is empty".into()));
    }
    let sfm = dataset.manifest.sfm.name.clone();
    let ids: Vec<ConfigId> = grid
        .iter()
        .map(|&dim| ConfigId {
            sfm: sfm.clone(),
            arch,
            layer_mode,
            dim,
        })
        .collect();
    Ok(SweepResult {
        kind: SweepKind::Dims,
        sfm,
        arch,
        seed: opts.seed,
        recipe: opts.recipe.clone(),
        template: opts.template.clone(),
        rows: run_grid(dataset, split, &ids, opts)?,
    })
}

/// Lowest mean RMSE; ties go to higher mean NCC (undefined counts as
/// lowest), then to the lexicographically smaller config id.
pub fn best_row(rows: &[SweepRow]) -> Result<&SweepRow> {
    rows.iter()
        .min_by(|a, b| {
            a.report
                .mean_rmse
                .total_cmp(&b.report.mean_rmse)
                .then_with(|| {
                    let na = a.report.mean_ncc.unwrap_or(f64::NEG_INFINITY);
                    let nb = b.report.mean_ncc.unwrap_or(f64::NEG_INFINITY);
                    nb.total_cmp(&na)
                })
                .then_with(|| a.id.to_string().cmp(&b.id.to_string()))
        })
        .ok_or_else(|| Error::Domain("no rows to choose from".into()))
}

pub fn best_config(result: &SweepResult) -> Result<ConfigId> {
    best_row(&result.rows).map(|r| r.id.clone())
}

/// WA-TT is swept at the layer mode WA-TGP selected.
pub fn inherited_layer_mode(wa_tgp_layers: &SweepResult) -> Result<LayerMode> {
    if wa_tgp_layers.arch != Arch::WaTgp {
        return Err(Error::Config(format!(
            "layer mode is inherited from a WA-TGP sweep, got {}",
            wa_tgp_layers.arch
        )));
    }
    Ok(best_config(wa_tgp_layers)?.layer_mode)
}
