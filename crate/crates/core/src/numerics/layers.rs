//! Parameter layouts and tape builders for linear maps and pre-norm
//! transformer blocks.
//!
//! Parameters live in a flat [`ParamSet`] under dotted prefixes, e.g.
//! `temporal.block0.attn.wq`. Builders look them up by name on the tape.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Tape, Var};
use super::tensor::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const FF_MULT: usize = 4;

pub type Vars = BTreeMap<String, Var>;

pub(crate) fn lookup(vars: &Vars, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
}

/// Gaussian weights with variance `1 / fan_in`.
pub fn init_weight<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
    let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("non-zero dims")
}

/// `{prefix}.w` (`in x out`) and `{prefix}.b` (`1 x out`).
pub fn init_linear<R: Rng>(
    params: &mut ParamSet,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    params.insert(format!("{prefix}.w"), init_weight(rng, fan_in, fan_out), true)?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out]), true)
}

pub fn linear(tape: &mut Tape, vars: &Vars, prefix: &str, x: Var) -> Result<Var> {
    let w = lookup(vars, &format!("{prefix}.w"))?;
    let b = lookup(vars, &format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn init_norm(params: &mut ParamSet, prefix: &str, dim: usize) -> Result<()> {
    params.insert(format!("{prefix}.g"), Tensor::full(&[1, dim], 1.0), true)?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[1, dim]), true)
}

fn norm(tape: &mut Tape, vars: &Vars, prefix: &str, x: Var) -> Result<Var> {
    let g = lookup(vars, &format!("{prefix}.g"))?;
    let b = lookup(vars, &format!("{prefix}.b"))?;
    let y = tape.layer_norm(x, LAYER_NORM_EPS)?;
    let y = tape.mul_row(y, g)?;
    tape.add_row(y, b)
}

/// Shape of a stack of transformer blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerShape {
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
}

impl TransformerShape {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "transformer width {} must be a positive multiple of {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

pub fn init_block<R: Rng>(params: &mut ParamSet, prefix: &str, dim: usize, rng: &mut R) -> Result<()> {
    init_norm(params, &format!("{prefix}.ln1"), dim)?;
    for proj in ["q", "k", "v", "o"] {
        init_linear(params, &format!("{prefix}.attn.{proj}"), dim, dim, rng)?;
    }
    init_norm(params, &format!("{prefix}.ln2"), dim)?;
    init_linear(params, &format!("{prefix}.ff1"), dim, FF_MULT * dim, rng)?;
    init_linear(params, &format!("{prefix}.ff2"), FF_MULT * dim, dim, rng)
}

pub fn init_transformer<R: Rng>(
    params: &mut ParamSet,
    prefix: &str,
    shape: TransformerShape,
    rng: &mut R,
) -> Result<()> {
    shape.validate()?;
    for i in 0..shape.depth {
        init_block(params, &format!("{prefix}.block{i}"), shape.dim, rng)?;
    }
    Ok(())
}

/// `x + attn(ln1(x))`, then `h + ff(ln2(h))`. Attention is restricted to
/// each row range in `segments`.
pub fn block(
    tape: &mut Tape,
    vars: &Vars,
    prefix: &str,
    x: Var,
    segments: &[Range<usize>],
    heads: usize,
) -> Result<Var> {
    let h = norm(tape, vars, &format!("{prefix}.ln1"), x)?;
    let q = linear(tape, vars, &format!("{prefix}.attn.q"), h)?;
    let k = linear(tape, vars, &format!("{prefix}.attn.k"), h)?;
    let v = linear(tape, vars, &format!("{prefix}.attn.v"), h)?;
    let a = tape.attention(q, k, v, segments, heads)?;
    let a = linear(tape, vars, &format!("{prefix}.attn.o"), a)?;
    let x = tape.add(x, a)?;

    let h = norm(tape, vars, &format!("{prefix}.ln2"), x)?;
    let h = linear(tape, vars, &format!("{prefix}.ff1"), h)?;
    let h = tape.gelu(h)?;
    let h = linear(tape, vars, &format!("{prefix}.ff2"), h)?;
    tape.add(x, h)
}

pub fn transformer(
    tape: &mut Tape,
    vars: &Vars,
    prefix: &str,
    x: Var,
    segments: &[Range<usize>],
    shape: TransformerShape,
) -> Result<Var> {
    let width = tape.value(x).cols();
    if width != shape.dim {
        return Err(Error::Shape(format!(
            "transformer {prefix:?} expects width {}, got {width}",
            shape.dim
        )));
    }
    (0..shape.depth).try_fold(x, |h, i| {
        block(tape, vars, &format!("{prefix}.block{i}"), h, segments, shape.heads)
    })
}

/// Sinusoidal position table for positions `0..len`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
            out[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Positional table restarting at 0 for each segment.
pub fn segment_positions(segments: &[Range<usize>], rows: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; rows * dim];
    for seg in segments {
        let table = sinusoidal_positions(seg.len(), dim);
        data[seg.start * dim..seg.end * dim].copy_from_slice(&table);
    }
    Tensor::matrix(rows, dim, data).expect("non-zero dims")
}

/// Evaluate one transformer block (`{prefix}.*` in `params`) on a single
/// `tokens x dim` sequence.
pub fn transformer_block_forward(
    seq: &Tensor,
    params: &ParamSet,
    prefix: &str,
    heads: usize,
) -> Result<Tensor> {
    if seq.shape().len() != 2 {
        return Err(Error::Shape(format!("expected tokens x dim, got {:?}", seq.shape())));
    }
    let dim = params
        .get(&format!("{prefix}.ln1.g"))
        .ok_or_else(|| Error::Config(format!("missing block {prefix:?}")))?
        .cols();
    if seq.cols() != dim {
        return Err(Error::Shape(format!(
            "block width {dim} does not match input width {}",
            seq.cols()
        )));
    }
    let mut tape = Tape::new();
    let vars = tape.load_params(params);
    let x = tape.constant(seq.clone());
    let y = block(&mut tape, &vars, prefix, x, &[0..seq.rows()], heads)?;
    Ok(tape.value(y).clone())
}
