//! Pre-norm decoder-only backbone.

use crate::adapter::{lora_linear, LoraCtx};
use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::Bound;

/// Token rows plus learned absolute positions `0..n`.
pub fn embed_tokens(tape: &mut Tape, bound: &mut Bound, cfg: &ModelConfig, ids: &[usize]) -> Result<Var> {
    let positions: Vec<usize> = (0..ids.len()).collect();
    embed_at(tape, bound, cfg, ids, &positions)
}

/// Token rows plus positional rows at explicit indices.
pub fn embed_at(
    tape: &mut Tape,
    bound: &mut Bound,
    cfg: &ModelConfig,
    ids: &[usize],
    positions: &[usize],
) -> Result<Var> {
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Vocabulary(format!(
            "token id {bad} >= vocab_size {}",
            cfg.vocab_size
        )));
    }
    if let Some(&p) = positions.iter().max() {
        if p >= cfg.max_seq_len {
            return Err(Error::Capacity {
                len: p + 1,
                max: cfg.max_seq_len,
            });
        }
    }
    if ids.is_empty() {
        return tape.constant(0, cfg.d, Vec::new());
    }
    let tok = bound.var(tape, "base.tok_emb")?;
    let pos = bound.var(tape, "base.pos_emb")?;
    let t = tape.gather_rows(tok, ids)?;
    let p = tape.gather_rows(pos, positions)?;
    tape.add(t, p)
}

fn linear(
    tape: &mut Tape,
    bound: &mut Bound,
    x: Var,
    w: &str,
    site: Option<(usize, &str)>,
    ctx: &mut Option<&mut LoraCtx>,
) -> Result<Var> {
    let wv = bound.var(tape, w)?;
    match (site, ctx.as_deref_mut()) {
        (Some((layer, site)), Some(ctx)) => {
            let a = bound.var(tape, &format!("lora.layer{layer}.{site}.A"))?;
            let b = bound.var(tape, &format!("lora.layer{layer}.{site}.B"))?;
            lora_linear(tape, x, wv, a, b, ctx)
        }
        _ => tape.matmul(x, wv),
    }
}

/// One residual block. With `lora` set, the query, value and both
/// feed-forward projections carry their low-rank adapters.
pub fn block_forward(
    tape: &mut Tape,
    bound: &mut Bound,
    cfg: &ModelConfig,
    layer: usize,
    h: Var,
    mut lora: Option<&mut LoraCtx>,
) -> Result<Var> {
    if layer >= cfg.n_layers {
        return Err(Error::contract(format!("layer {layer} outside 0..{}", cfg.n_layers)));
    }
    let (n, _) = tape.dims(h);
    if n > cfg.max_seq_len {
        return Err(Error::Capacity {
            len: n,
            max: cfg.max_seq_len,
        });
    }
    let p = format!("base.layer{layer}");
    let g1 = bound.var(tape, &format!("{p}.ln1.g"))?;
    let b1 = bound.var(tape, &format!("{p}.ln1.b"))?;
    let x = tape.layer_norm(h, g1, b1)?;
    let q = linear(tape, bound, x, &format!("{p}.attn.q"), Some((layer, "q")), &mut lora)?;
    let k = linear(tape, bound, x, &format!("{p}.attn.k"), None, &mut lora)?;
    let v = linear(tape, bound, x, &format!("{p}.attn.v"), Some((layer, "v")), &mut lora)?;
    let att = tape.causal_attention(q, k, v, cfg.n_heads)?;
    let o = linear(tape, bound, att, &format!("{p}.attn.o"), None, &mut lora)?;
    let h = tape.add(h, o)?;

    let g2 = bound.var(tape, &format!("{p}.ln2.g"))?;
    let b2 = bound.var(tape, &format!("{p}.ln2.b"))?;
    let x = tape.layer_norm(h, g2, b2)?;
    let up = linear(
        tape,
        bound,
        x,
        &format!("{p}.ffn.up"),
        Some((layer, "ffn_up")),
        &mut lora,
    )?;
    let up_b = bound.var(tape, &format!("{p}.ffn.up_b"))?;
    let up = tape.add_row(up, up_b)?;
    let act = tape.gelu(up);
    let down = linear(
        tape,
        bound,
        act,
        &format!("{p}.ffn.down"),
        Some((layer, "ffn_down")),
        &mut lora,
    )?;
    let down_b = bound.var(tape, &format!("{p}.ffn.down_b"))?;
    let down = tape.add_row(down, down_b)?;
    tape.add(h, down)
}

/// Final norm and output projection.
pub fn logits(tape: &mut Tape, bound: &mut Bound, h: Var) -> Result<Var> {
    let g = bound.var(tape, "base.ln_f.g")?;
    let b = bound.var(tape, "base.ln_f.b")?;
    let x = tape.layer_norm(h, g, b)?;
    let w = bound.var(tape, "base.out")?;
    tape.matmul(x, w)
}

/// Plain backbone over token ids, no slots and no adapters.
pub fn base_forward(tape: &mut Tape, bound: &mut Bound, cfg: &ModelConfig, ids: &[usize]) -> Result<Var> {
    if ids.len() > cfg.max_seq_len {
        return Err(Error::Capacity {
            len: ids.len(),
            max: cfg.max_seq_len,
        });
    }
    let mut h = embed_tokens(tape, bound, cfg, ids)?;
    for l in 0..cfg.n_layers {
        h = block_forward(tape, bound, cfg, l, h, None)?;
    }
    logits(tape, bound, h)
}
