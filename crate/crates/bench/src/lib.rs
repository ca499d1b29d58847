//! Shared fixtures for the benchmarks.

use siphi_core::heads::{init_head_with_dims, HeadDims, Prepared};
use siphi_core::{Arch, Audiogram, Head, HeadConfig, LayerFeatureTensor, LayerMode};

/// Encoder shape used by every benchmark: 6 layers, 100 frames, 64 channels,
/// 8 audiogram frequencies.
pub const DIMS: HeadDims = HeadDims {
    layers: 6,
    channels: 64,
    frequencies: 8,
};
pub const FRAMES: usize = 100;
pub const EMBED_DIM: usize = 32;

/// Deterministic pseudo-random values without pulling in an RNG.
fn wave(i: usize, salt: f64) -> f64 {
    ((i as f64 + salt) * 0.618_033_988_75).sin()
}

pub fn features(sample: usize) -> (LayerFeatureTensor, Audiogram) {
    let n = 2 * DIMS.layers * FRAMES * DIMS.channels;
    let values = (0..n).map(|i| wave(i, sample as f64 * 13.0) as f32).collect();
    let x = LayerFeatureTensor::new(DIMS.layers, FRAMES, DIMS.channels, values).expect("fixture shape");
    let ear = |e: f64| (0..DIMS.frequencies).map(|f| 40.0 + 30.0 * wave(f, e + sample as f64)).collect();
    (x, Audiogram { left: ear(0.0), right: ear(0.5) })
}

pub fn head(arch: Arch) -> Head {
    let mut config = HeadConfig::new(arch, LayerMode::All, EMBED_DIM);
    config.heads = 4;
    init_head_with_dims(&config, DIMS).expect("fixture head")
}

/// A pooled batch ready for the head, plus matching targets.
pub fn batch(head: &Head, size: usize) -> (Vec<Prepared>, Vec<f64>) {
    let prepared = (0..size)
        .map(|s| {
            let (x, a) = features(s);
            Prepared::new(&x, &a, head.pooling()).expect("fixture batch")
        })
        .collect();
    let targets = (0..size).map(|s| 50.0 + 20.0 * wave(s, 7.0)).collect();
    (prepared, targets)
}
