use siphi_core::datastore::{make_splits, synth_dataset, Dataset, FoldSplit, SynthSpec};
use siphi_core::heads::{Arch, LayerMode, DIM_GRID};
use siphi_core::sweep::{self, best_row, dim_sweep, inherited_layer_mode, layer_sweep, SweepKind, SweepOptions};
use siphi_core::trainer::desk_recipe;

fn setup(dir: &std::path::Path) -> (Dataset, FoldSplit) {
    let mut spec = SynthSpec::new(60, 4, 12, 8, 8, 1.0, 3);
    spec.informative_layer = 2;
    let out = synth_dataset(&spec, dir).unwrap();
    let ds = Dataset::load(&out.manifest_path).unwrap();
    let split = make_splits(ds.samples(), 17).unwrap();
    (ds, split)
}

fn opts(arch: Arch, workers: usize) -> SweepOptions {
    let mut o = SweepOptions::new(arch, 17);
    o.recipe = desk_recipe(arch, 3, 16);
    o.template.pool_factor = 4;
    o.workers = workers;
    o
}

#[test]
fn layer_sweep_has_one_row_per_layer_plus_all() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, split) = setup(dir.path());
    let res = layer_sweep(&ds, &split, Arch::WaTgp, 8, &opts(Arch::WaTgp, 1)).unwrap();
    assert_eq!(res.kind, SweepKind::Layers);
    assert_eq!(res.rows.len(), 5);
    let modes: Vec<LayerMode> = res.rows.iter().map(|r| r.id.layer_mode).collect();
    assert_eq!(
        modes,
        vec![LayerMode::Single(0), LayerMode::Single(1), LayerMode::Single(2), LayerMode::Single(3), LayerMode::All]
    );
    for row in &res.rows {
        assert_eq!(row.runs.len(), 3);
        assert_eq!(row.report.folds.len(), 3);
        for run in &row.runs {
            assert_eq!(run.seed, sweep::run_seed(17, &row.id, run.fold));
            assert_eq!(run.test_ids.len(), run.test_predictions.len());
            assert_eq!(run.val_ids.len(), run.val_predictions.len());
        }
    }
}

#[test]
fn dim_sweep_covers_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, split) = setup(dir.path());
    let mut o = opts(Arch::WaTgp, 1);
    o.folds = vec![0];
    let res = dim_sweep(&ds, &split, Arch::WaTgp, LayerMode::All, &DIM_GRID, &o).unwrap();
    assert_eq!(res.rows.iter().map(|r| r.id.dim).collect::<Vec<_>>(), DIM_GRID.to_vec());
    let res = dim_sweep(&ds, &split, Arch::WaTgp, LayerMode::Single(2), &[8, 16], &o).unwrap();
    assert_eq!(res.rows.len(), 2);
    assert!(dim_sweep(&ds, &split, Arch::WaTgp, LayerMode::All, &[], &o).is_err());
    o.folds = vec![3];
    assert!(dim_sweep(&ds, &split, Arch::WaTgp, LayerMode::All, &[8], &o).is_err());
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, split) = setup(dir.path());
    for arch in [Arch::WaTgp, Arch::Dt] {
        let mut o = opts(arch, 1);
        o.folds = vec![0, 2];
        let a = dim_sweep(&ds, &split, arch, LayerMode::All, &[8, 16], &o).unwrap();
        let b = dim_sweep(&ds, &split, arch, LayerMode::All, &[8, 16], &o).unwrap();
        o.workers = 3;
        let c = dim_sweep(&ds, &split, arch, LayerMode::All, &[8, 16], &o).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.to_json().unwrap(), c.to_json().unwrap());
    }
}

#[test]
fn best_config_is_order_independent_and_inherited() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, split) = setup(dir.path());
    let res = layer_sweep(&ds, &split, Arch::WaTgp, 8, &opts(Arch::WaTgp, 1)).unwrap();
    let best = sweep::best_config(&res).unwrap();
    let mut rows = res.rows.clone();
    for shift in 1..rows.len() {
        rows.rotate_left(1);
        assert_eq!(best_row(&rows).unwrap().id, best, "rotation {shift}");
    }
    rows.reverse();
    assert_eq!(best_row(&rows).unwrap().id, best);
    assert_eq!(inherited_layer_mode(&res).unwrap(), best.layer_mode);

    let path = dir.path().join("layers.json");
    std::fs::write(&path, res.to_json().unwrap()).unwrap();
    assert_eq!(sweep::SweepResult::load(&path).unwrap(), res);

    let tt = layer_sweep(&ds, &split, Arch::WaTt, 8, &{
        let mut o = opts(Arch::WaTt, 1);
        o.folds = vec![0];
        o
    })
    .unwrap();
    assert!(inherited_layer_mode(&tt).is_err());
}
