//! Low-rank adapters and the masked adapted layer.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::transformer::block_forward;

/// Runtime settings for the low-rank branch.
pub struct LoraCtx<'r> {
    pub scaling: f32,
    pub dropout: f32,
    /// Present only in train mode; drives the dropout masks.
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> LoraCtx<'r> {
    pub fn infer(cfg: &ModelConfig) -> LoraCtx<'static> {
        LoraCtx {
            scaling: cfg.lora_scaling(),
            dropout: cfg.lora_dropout,
            rng: None,
        }
    }

    pub fn train(cfg: &ModelConfig, rng: &'r mut ChaCha8Rng) -> LoraCtx<'r> {
        LoraCtx {
            scaling: cfg.lora_scaling(),
            dropout: cfg.lora_dropout,
            rng: Some(rng),
        }
    }

    pub fn reborrow(&mut self) -> LoraCtx<'_> {
        LoraCtx {
            scaling: self.scaling,
            dropout: self.dropout,
            rng: self.rng.as_deref_mut(),
        }
    }
}

/// `x W + scaling * (drop(x) A) B`, with `W: [in x out]`, `A: [in x r]`,
/// `B: [r x out]`.
pub fn lora_linear(tape: &mut Tape, x: Var, w: Var, a: Var, b: Var, ctx: &mut LoraCtx) -> Result<Var> {
    let base = tape.matmul(x, w)?;
    let branch = low_rank_branch(tape, x, a, b, ctx)?;
    tape.add(base, branch)
}

/// The scaled low-rank term alone.
pub fn low_rank_branch(tape: &mut Tape, x: Var, a: Var, b: Var, ctx: &mut LoraCtx) -> Result<Var> {
    let xin = match ctx.rng.as_deref_mut() {
        Some(rng) if ctx.dropout > 0.0 => {
            let (r, c) = tape.dims(x);
            let keep = 1.0 - ctx.dropout;
            let mask: Vec<f32> = (0..r * c)
                .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            tape.mul_const(x, mask)?
        }
        _ => x,
    };
    let down = tape.matmul(xin, a)?;
    let up = tape.matmul(down, b)?;
    Ok(tape.scale(up, ctx.scaling))
}

/// Binary broadcast mask over sequence positions.
#[derive(Clone, Debug, PartialEq)]
pub struct BroadcastMask {
    values: Vec<f32>,
}

impl BroadcastMask {
    pub fn from_positions(n: usize, positions: &[usize]) -> Result<BroadcastMask> {
        let mut values = vec![0.0; n];
        for &p in positions {
            if p >= n {
                return Err(Error::dim("mask", &[n], &[p]));
            }
            values[p] = 1.0;
        }
        Ok(BroadcastMask { values })
    }

    pub fn from_bits(bits: &[bool]) -> BroadcastMask {
        BroadcastMask {
            values: bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// One past the last active position; 0 for an all-zero mask.
    pub fn active_prefix(&self) -> usize {
        self.values.iter().rposition(|v| *v != 0.0).map_or(0, |i| i + 1)
    }
}

/// `frozen + mask * (adapted - frozen)` for one layer.
///
/// The adapted block only runs on the prefix that ends at the last active
/// row: causal attention and row-wise maps make those rows identical to a
/// full-length pass, and every later row is masked out anyway.
pub fn adapted_layer_forward(
    tape: &mut Tape,
    bound: &mut Bound,
    cfg: &ModelConfig,
    layer: usize,
    h: Var,
    mask: &BroadcastMask,
    ctx: &mut LoraCtx,
) -> Result<Var> {
    let (n, _) = tape.dims(h);
    if mask.len() != n {
        return Err(Error::dim("adapted_layer_forward", &[n, 1], &[mask.len(), 1]));
    }
    let frozen = block_forward(tape, bound, cfg, layer, h, None)?;
    let p = mask.active_prefix();
    if p == 0 {
        return Ok(frozen);
    }
    let (fp, adapted) = if p == n {
        (frozen, block_forward(tape, bound, cfg, layer, h, Some(ctx))?)
    } else {
        let hp = tape.slice_rows(h, 0, p)?;
        (
            tape.slice_rows(frozen, 0, p)?,
            block_forward(tape, bound, cfg, layer, hp, Some(ctx))?,
        )
    };
    let w = tape.constant(p, 1, mask.values()[..p].to_vec())?;
    let mixed = tape.blend(fp, adapted, w)?;
    if p == n {
        return Ok(mixed);
    }
    let rest = tape.slice_rows(frozen, p, n - p)?;
    tape.concat_rows(&[mixed, rest])
}
