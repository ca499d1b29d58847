use siphi_core::datastore::{dataset_hash, synth_dataset, Dataset, SynthSpec};
use siphi_core::heads::{self, Arch, HeadConfig, LayerMode, Prepared};
use siphi_core::numerics::{lr_at, AdamState};
use siphi_core::trainer::{self, default_recipe, desk_recipe, select_checkpoint, PreparedSplit};

fn dataset(dir: &std::path::Path, n: usize, noise: f64) -> (Dataset, std::path::PathBuf) {
    let mut spec = SynthSpec::new(n, 3, 30, 8, 8, noise, 12);
    spec.informative_layer = 1;
    let out = synth_dataset(&spec, dir).unwrap();
    (Dataset::load(&out.manifest_path).unwrap(), out.manifest_path)
}

#[test]
fn equal_seeds_give_identical_records() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, _) = dataset(dir.path(), 40, 1.0);
    let train: Vec<usize> = (0..30).collect();
    let val: Vec<usize> = (30..40).collect();
    for arch in Arch::ALL {
        let cfg = HeadConfig::new(arch, LayerMode::All, 8);
        let recipe = desk_recipe(arch, 6, 8);
        let a = trainer::train(&cfg, &recipe, &ds, &train, &val, None).unwrap();
        let b = trainer::train(&cfg, &recipe, &ds, &train, &val, None).unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.head.params.content_hash(), b.head.params.content_hash());
        assert_eq!(a.record.epochs.len(), 6);
        assert_eq!(a.record.best_epoch, select_checkpoint(&a.record).unwrap());
        let reseeded = trainer::TrainRecipe { seed: 99, ..recipe };
        let other = trainer::train(&cfg, &reseeded, &ds, &train, &val, None).unwrap();
        assert_ne!(a.record.epochs, other.record.epochs);
    }
}

#[test]
fn fixed_batch_loss_decreases_at_base_lr() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, _) = dataset(dir.path(), 16, 1.0);
    let idx: Vec<usize> = (0..16).collect();
    for arch in Arch::ALL {
        let cfg = HeadConfig::new(arch, LayerMode::Single(1), 16);
        let recipe = default_recipe(arch);
        let split = PreparedSplit::new(&ds, &idx, &cfg).unwrap();
        let batch: Vec<&Prepared> = split.inputs.iter().collect();
        let mut head = heads::init_head(&cfg, &ds.manifest.sfm, ds.manifest.frequencies()).unwrap();
        let mut state = AdamState::new();
        let lr = recipe.schedule.base_lr;
        let mut losses = Vec::new();
        for _ in 0..6 {
            losses.push(trainer::train_step(&mut head, &mut state, &recipe, &batch, &split.targets, lr).unwrap());
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{arch}: {losses:?}");
    }
}

#[test]
fn checkpoint_reload_reproduces_val_rmse() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, _) = dataset(dir.path(), 40, 2.0);
    let train: Vec<usize> = (0..30).collect();
    let val: Vec<usize> = (30..40).collect();
    for arch in Arch::ALL {
        let cfg = HeadConfig::new(arch, LayerMode::All, 8);
        let ckpt = dir.path().join(format!("{arch}.head"));
        let out = trainer::train(&cfg, &desk_recipe(arch, 8, 8), &ds, &train, &val, Some(&ckpt)).unwrap();
        assert_eq!(out.record.checkpoint_path.as_deref(), Some(ckpt.display().to_string().as_str()));
        let reloaded = heads::load_head(&ckpt).unwrap();
        let split = PreparedSplit::new(&ds, &val, &reloaded.config).unwrap();
        let got = trainer::split_rmse(&reloaded, &split).unwrap();
        let recorded = out.record.epochs[out.record.best_epoch].val_rmse;
        assert!((got - recorded).abs() <= 1e-9, "{arch}: {got} vs {recorded}");
    }
}

#[test]
fn training_leaves_data_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, manifest) = dataset(dir.path(), 20, 1.0);
    let before = dataset_hash(&manifest).unwrap();
    let idx: Vec<usize> = (0..20).collect();
    let cfg = HeadConfig::new(Arch::Dt, LayerMode::All, 8);
    trainer::train(&cfg, &desk_recipe(Arch::Dt, 3, 4), &ds, &idx, &idx, None).unwrap();
    assert_eq!(dataset_hash(&manifest).unwrap(), before);
}

#[test]
fn lr_log_follows_schedule_and_bad_recipes_fail() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, _) = dataset(dir.path(), 12, 1.0);
    let idx: Vec<usize> = (0..12).collect();
    let cfg = HeadConfig::new(Arch::WaTt, LayerMode::Single(0), 8);
    let recipe = desk_recipe(Arch::WaTt, 10, 4);
    let out = trainer::train(&cfg, &recipe, &ds, &idx, &idx, None).unwrap();
    for e in &out.record.epochs {
        assert_eq!(e.lr, lr_at(&recipe.schedule, e.epoch).unwrap());
    }
    let mut bad = recipe.clone();
    bad.batch_size = 0;
    assert!(trainer::train(&cfg, &bad, &ds, &idx, &idx, None).is_err());
    assert!(trainer::train(&cfg, &recipe, &ds, &idx, &[], None).is_err());
}
