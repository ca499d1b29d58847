//! Head parameters, input preparation and batched forward graphs.
//!
//! Every architecture processes the two ears with one shared parameter set
//! and averages the ear vectors before the output layer. Channel
//! projections are affine, so they commute with frame averaging: inputs are
//! mean-pooled over frames (globally for WA-TGP, by windows of
//! `pool_factor` for the transformer heads) before projection, which is
//! the same function as projecting every frame and pooling afterwards.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Arch, HeadConfig, LayerMode};
use crate::datastore::feature_file::EARS;
use crate::datastore::{Audiogram, LayerFeatureTensor, SfmDescriptor};
use crate::error::{Error, Result};
use crate::numerics::layers::{self, lookup, segment_positions, TransformerShape, Vars};
use crate::numerics::ops::pool_windows;
use crate::numerics::tape::softmax_vec;
use crate::numerics::{ParamSet, Tape, Tensor, Var};

/// Audiogram thresholds are divided by this before projection.
pub const AUDIOGRAM_SCALE_DB: f64 = 100.0;
/// Initial output bias: the middle of the 0-100 score range.
pub const OUTPUT_BIAS_INIT: f64 = 50.0;

pub const FUSION_LOGITS: &str = "fusion.logits";
pub const OUTPUT_WEIGHT: &str = "out.w";
pub const OUTPUT_BIAS: &str = "out.b";

pub fn projection_prefix(layer: usize) -> String {
    format!("proj.layer{layer}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    pub layers: usize,
    pub channels: usize,
    pub frequencies: usize,
}

/// A head's configuration, input dimensions and learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub config: HeadConfig,
    pub dims: HeadDims,
    pub params: ParamSet,
}

impl Head {
    pub fn selected_layers(&self) -> Vec<usize> {
        self.config.layer_mode.layers(self.dims.layers)
    }

    fn transformer_shape(&self) -> TransformerShape {
        TransformerShape {
            dim: self.config.embed_dim,
            heads: self.config.heads,
            depth: self.config.depth,
        }
    }

    /// Normalized layer-fusion weights (selected layers, then audiogram).
    pub fn fusion_weights(&self) -> Option<Vec<f64>> {
        self.params.get(FUSION_LOGITS).map(|l| softmax_vec(l.data()))
    }

    pub fn pooling(&self) -> Pooling {
        pooling_for(&self.config)
    }
}

pub fn init_head(config: &HeadConfig, sfm: &SfmDescriptor, frequencies: usize) -> Result<Head> {
    let dims = HeadDims {
        layers: sfm.layers,
        channels: sfm.channels,
        frequencies,
    };
    init_head_with_dims(config, dims)
}

pub fn init_head_with_dims(config: &HeadConfig, dims: HeadDims) -> Result<Head> {
    config.validate(dims.layers)?;
    if dims.channels == 0 || dims.frequencies == 0 {
        return Err(Error::Config("channels and audiogram frequencies must be positive".into()));
    }
    let d = config.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamSet::new();
    let selected = config.layer_mode.layers(dims.layers);
    for &l in &selected {
        layers::init_linear(&mut params, &projection_prefix(l), dims.channels, d, &mut rng)?;
    }
    layers::init_linear(&mut params, "audiogram", dims.frequencies, d, &mut rng)?;
    let shape = TransformerShape {
        dim: d,
        heads: config.heads,
        depth: config.depth,
    };
    if config.arch.uses_temporal_transformer() {
        layers::init_transformer(&mut params, "temporal", shape, &mut rng)?;
    }
    match config.arch {
        Arch::WaTgp | Arch::WaTt => {
            params.insert(FUSION_LOGITS, Tensor::zeros(&[1, selected.len() + 1]), true)?;
        }
        Arch::Dt => layers::init_transformer(&mut params, "layerwise", shape, &mut rng)?,
    }
    params.insert(OUTPUT_WEIGHT, layers::init_weight(&mut rng, d, 1), true)?;
    params.insert(OUTPUT_BIAS, Tensor::scalar(OUTPUT_BIAS_INIT), true)?;
    Ok(Head {
        config: config.clone(),
        dims,
        params,
    })
}

/// Frame pooling applied before projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pooling {
    Global,
    Windows(usize),
}

pub fn pooling_for(config: &HeadConfig) -> Pooling {
    if config.arch.uses_temporal_transformer() {
        Pooling::Windows(config.pool_factor)
    } else {
        Pooling::Global
    }
}

/// One sample's pooled features for every layer of both ears, plus the
/// scaled audiogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    layers: usize,
    channels: usize,
    tokens: usize,
    /// `[ear][layer]` blocks of `tokens x channels`.
    pooled: Vec<f64>,
    audiogram: [Vec<f64>; EARS],
}

impl Prepared {
    pub fn new(x: &LayerFeatureTensor, a: &Audiogram, pooling: Pooling) -> Result<Self> {
        let (l, t, c) = (x.layers(), x.frames(), x.channels());
        let windows = match pooling {
            Pooling::Global => vec![0..t],
            Pooling::Windows(f) => pool_windows(t, f)?,
        };
        let tokens = windows.len();
        let mut pooled = Vec::with_capacity(EARS * l * tokens * c);
        for ear in 0..EARS {
            for layer in 0..l {
                let slab = x.slab(ear, layer);
                for w in &windows {
                    let mut acc = vec![0.0f64; c];
                    for frame in w.clone() {
                        for (a, &v) in acc.iter_mut().zip(&slab[frame * c..(frame + 1) * c]) {
                            *a += v as f64;
                        }
                    }
                    let n = w.len() as f64;
                    pooled.extend(acc.into_iter().map(|v| v / n));
                }
            }
        }
        if a.left.len() != a.right.len() {
            return Err(Error::Shape("audiogram ears differ in length".into()));
        }
        let scale = |v: &[f64]| v.iter().map(|t| t / AUDIOGRAM_SCALE_DB).collect::<Vec<_>>();
        Ok(Self {
            layers: l,
            channels: c,
            tokens,
            pooled,
            audiogram: [scale(&a.left), scale(&a.right)],
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    fn block(&self, ear: usize, layer: usize) -> &[f64] {
        let size = self.tokens * self.channels;
        let off = (ear * self.layers + layer) * size;
        &self.pooled[off..off + size]
    }

    fn check(&self, dims: &HeadDims) -> Result<()> {
        if self.layers != dims.layers || self.channels != dims.channels {
            return Err(Error::Shape(format!(
                "input has L={} C={}, head expects L={} C={}",
                self.layers, self.channels, dims.layers, dims.channels
            )));
        }
        if self.audiogram[0].len() != dims.frequencies {
            return Err(Error::Shape(format!(
                "audiogram has {} thresholds, head expects {}",
                self.audiogram[0].len(),
                dims.frequencies
            )));
        }
        Ok(())
    }
}

/// Rows ordered `(ear, sample)`: the audiogram matrix for a batch.
fn audiogram_rows(batch: &[&Prepared]) -> Result<Tensor> {
    let f = batch[0].audiogram[0].len();
    let mut data = Vec::with_capacity(EARS * batch.len() * f);
    for ear in 0..EARS {
        for p in batch {
            data.extend_from_slice(&p.audiogram[ear]);
        }
    }
    Tensor::matrix(EARS * batch.len(), f, data)
}

/// Rows ordered `(ear, sample, token)` for one layer, with one segment per
/// `(ear, sample)`.
fn layer_rows(batch: &[&Prepared], layer: usize) -> Result<(Tensor, Vec<Range<usize>>)> {
    let c = batch[0].channels;
    let mut data = Vec::new();
    let mut segments = Vec::with_capacity(EARS * batch.len());
    let mut row = 0;
    for ear in 0..EARS {
        for p in batch {
            data.extend_from_slice(p.block(ear, layer));
            segments.push(row..row + p.tokens);
            row += p.tokens;
        }
    }
    Ok((Tensor::matrix(row, c, data)?, segments))
}

fn offset_segments(segments: &[Range<usize>], by: usize) -> impl Iterator<Item = Range<usize>> + '_ {
    segments.iter().map(move |s| s.start + by..s.end + by)
}

fn maybe_positions(tape: &mut Tape, x: Var, segments: &[Range<usize>], enabled: bool) -> Result<Var> {
    if !enabled {
        return Ok(x);
    }
    let (rows, dim) = (tape.value(x).rows(), tape.value(x).cols());
    let pe = tape.constant(segment_positions(segments, rows, dim));
    tape.add(x, pe)
}

/// `sum_j w_j * items_j` with `w = softmax(fusion logits)`.
fn weighted_fusion(tape: &mut Tape, vars: &Vars, items: &[Var]) -> Result<Var> {
    let logits = lookup(vars, FUSION_LOGITS)?;
    if tape.value(logits).numel() != items.len() {
        return Err(Error::Shape(format!(
            "{} fusion logits for {} items",
            tape.value(logits).numel(),
            items.len()
        )));
    }
    let w = tape.softmax(logits)?;
    let mut acc: Option<Var> = None;
    for (j, &item) in items.iter().enumerate() {
        let wj = tape.select(w, j)?;
        let term = tape.scale_by(item, wj)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one fusion item"))
}

/// Ear average of a `(ear, sample)`-ordered `2B x d` matrix, then the output layer.
fn ear_average_and_output(tape: &mut Tape, vars: &Vars, x: Var, batch: usize) -> Result<Var> {
    let left = tape.slice_rows(x, 0, batch)?;
    let right = tape.slice_rows(x, batch, batch)?;
    let sum = tape.add(left, right)?;
    let avg = tape.scale(sum, 0.5)?;
    let w = lookup(vars, OUTPUT_WEIGHT)?;
    let b = lookup(vars, OUTPUT_BIAS)?;
    let y = tape.matmul(avg, w)?;
    tape.add_row(y, b)
}

/// Record the head's forward pass for `batch` on `tape`; returns the
/// `B x 1` score column.
pub fn build_graph(tape: &mut Tape, vars: &Vars, head: &Head, batch: &[&Prepared]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Shape("cannot build a graph for an empty batch".into()));
    }
    for p in batch {
        p.check(&head.dims)?;
        let expect_tokens = matches!(head.pooling(), Pooling::Global);
        if expect_tokens && p.tokens != 1 {
            return Err(Error::Shape("WA-TGP needs globally pooled inputs".into()));
        }
    }
    let b = batch.len();
    let selected = head.selected_layers();
    let cfg = &head.config;

    let aud = tape.constant(audiogram_rows(batch)?);
    let aud = layers::linear(tape, vars, "audiogram", aud)?;

    // per-layer (ear, sample) vectors, 2B x d each
    let mut layer_vecs: Vec<Var> = Vec::with_capacity(selected.len());
    match cfg.arch {
        Arch::WaTgp => {
            for &l in &selected {
                let (x, _) = layer_rows(batch, l)?;
                let x = tape.constant(x);
                layer_vecs.push(layers::linear(tape, vars, &projection_prefix(l), x)?);
            }
        }
        Arch::WaTt | Arch::Dt => {
            let mut projected = Vec::with_capacity(selected.len());
            let mut segments = Vec::new();
            let mut offset = 0;
            for &l in &selected {
                let (x, segs) = layer_rows(batch, l)?;
                let rows = x.rows();
                let x = tape.constant(x);
                projected.push(layers::linear(tape, vars, &projection_prefix(l), x)?);
                segments.extend(offset_segments(&segs, offset));
                offset += rows;
            }
            let h = tape.concat_rows(&projected)?;
            let h = maybe_positions(tape, h, &segments, cfg.positional)?;
            let h = layers::transformer(tape, vars, "temporal", h, &segments, head.transformer_shape())?;
            let pooled = tape.group_mean(h, &segments)?;
            for j in 0..selected.len() {
                layer_vecs.push(tape.slice_rows(pooled, j * EARS * b, EARS * b)?);
            }
        }
    }

    let fused = match cfg.arch {
        Arch::WaTgp | Arch::WaTt => {
            let mut items = layer_vecs;
            items.push(aud);
            weighted_fusion(tape, vars, &items)?
        }
        Arch::Dt => {
            // token sequence per (ear, sample): selected layers then audiogram
            let k = layer_vecs.len();
            let mut parts = layer_vecs;
            parts.push(aud);
            let all = tape.concat_rows(&parts)?;
            let mut idx = Vec::with_capacity(EARS * b * (k + 1));
            for row in 0..EARS * b {
                for j in 0..=k {
                    idx.push(j * EARS * b + row);
                }
            }
            let seq = tape.gather_rows(all, &idx)?;
            let segments: Vec<Range<usize>> = (0..EARS * b).map(|r| r * (k + 1)..(r + 1) * (k + 1)).collect();
            let seq = maybe_positions(tape, seq, &segments, cfg.positional)?;
            let h = layers::transformer(tape, vars, "layerwise", seq, &segments, head.transformer_shape())?;
            tape.group_mean(h, &segments)?
        }
    };
    ear_average_and_output(tape, vars, fused, b)
}

/// Scores for prepared inputs, evaluated in chunks of `chunk` samples.
pub fn predict_prepared(head: &Head, batch: &[&Prepared], chunk: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(batch.len());
    for part in batch.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let vars = tape.load_params(&head.params);
        let y = build_graph(&mut tape, &vars, head, part)?;
        out.extend_from_slice(tape.value(y).data());
    }
    Ok(out)
}

/// Scores for raw feature/audiogram pairs, in input order.
pub fn head_forward(batch: &[(&LayerFeatureTensor, &Audiogram)], head: &Head) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let pooling = head.pooling();
    let prepared = batch
        .iter()
        .map(|(x, a)| Prepared::new(x, a, pooling))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Prepared> = prepared.iter().collect();
    predict_prepared(head, &refs, refs.len())
}

fn forward_single(arch: Arch, x: &LayerFeatureTensor, a: &Audiogram, head: &Head) -> Result<f64> {
    if head.config.arch != arch {
        return Err(Error::Config(format!(
            "head is {}, called as {arch}",
            head.config.arch
        )));
    }
    Ok(head_forward(&[(x, a)], head)?[0])
}

pub fn forward_wa_tgp(x: &LayerFeatureTensor, a: &Audiogram, head: &Head) -> Result<f64> {
    forward_single(Arch::WaTgp, x, a, head)
}

pub fn forward_wa_tt(x: &LayerFeatureTensor, a: &Audiogram, head: &Head) -> Result<f64> {
    forward_single(Arch::WaTt, x, a, head)
}

pub fn forward_dt(x: &LayerFeatureTensor, a: &Audiogram, head: &Head) -> Result<f64> {
    forward_single(Arch::Dt, x, a, head)
}

/// Token count the layer-wise transformer sees per ear.
pub fn layerwise_tokens(mode: LayerMode, layers: usize) -> usize {
    mode.layers(layers).len() + 1
}
