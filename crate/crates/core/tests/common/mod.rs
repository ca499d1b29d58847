//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use siphi_core::datastore::{Audiogram, LayerFeatureTensor};
use siphi_core::heads::{self, Arch, Head, HeadConfig, HeadDims, LayerMode, Prepared};
use siphi_core::numerics::{Tape, Tensor};
use siphi_core::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_features(rng: &mut impl Rng, layers: usize, frames: usize, channels: usize) -> LayerFeatureTensor {
    let values = (0..2 * layers * frames * channels)
        .map(|_| StandardNormal.sample(rng))
        .collect::<Vec<f64>>()
        .into_iter()
        .map(|v| v as f32)
        .collect();
    LayerFeatureTensor::new(layers, frames, channels, values).unwrap()
}

pub fn random_audiogram(rng: &mut impl Rng, frequencies: usize) -> Audiogram {
    let mut ear = || (0..frequencies).map(|_| rng.gen_range(-10.0..120.0)).collect();
    Audiogram {
        left: ear(),
        right: ear(),
    }
}

/// A freshly initialised head with randomised fusion logits, so gradient
/// and invariance checks do not sit at the symmetric start point.
pub fn random_head(arch: Arch, mode: LayerMode, dim: usize, dims: HeadDims, seed: u64) -> Head {
    let mut cfg = HeadConfig::new(arch, mode, dim).with_seed(seed);
    cfg.heads = 4.min(dim);
    let mut head = heads::init_head_with_dims(&cfg, dims).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    if let Some(l) = head.params.get(heads::model::FUSION_LOGITS) {
        let n = l.numel();
        let data = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        head.params.set(heads::model::FUSION_LOGITS, Tensor::matrix(1, n, data).unwrap()).unwrap();
    }
    head
}

/// `random_head` moved to a point suited to finite differences: scores
/// near 50 carry ~1e-14 absolute rounding, which swamps gradients of
/// order 1e-6 at eps = 1e-5, so the output bias is made small.
pub fn grad_check_head(arch: Arch, mode: LayerMode, dim: usize, dims: HeadDims, seed: u64) -> Head {
    let mut head = random_head(arch, mode, dim, dims, seed);
    head.params.set(heads::model::OUTPUT_BIAS, Tensor::scalar(0.25)).unwrap();
    head
}

pub fn scores(head: &Head, batch: &[(LayerFeatureTensor, Audiogram)]) -> Vec<f64> {
    let refs: Vec<_> = batch.iter().map(|(x, a)| (x, a)).collect();
    heads::head_forward(&refs, head).unwrap()
}

/// Squared error of the head's scores against `targets`, as a tape scalar,
/// for gradient checks.
pub fn loss_fn<'a>(
    head: &'a Head,
    prepared: &'a [Prepared],
    targets: &'a [f64],
) -> impl Fn(&mut Tape, &siphi_core::numerics::Vars) -> Result<siphi_core::numerics::Var> + 'a {
    move |tape, vars| {
        let refs: Vec<&Prepared> = prepared.iter().collect();
        let y = heads::build_graph(tape, vars, head, &refs)?;
        // delta far beyond any residual: smooth quadratic everywhere
        tape.huber(y, targets, 1e6)
    }
}
