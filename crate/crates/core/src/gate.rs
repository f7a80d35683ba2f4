//! Gated recursive refinement of slot rows and the full model forward.

use std::collections::BTreeMap;
use std::fmt;

use crate::adapter::{adapted_layer_forward, BroadcastMask, LoraCtx};
use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::slot::AssembledInput;
use crate::transformer::logits;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Straight-through gates, every step executed, dropout active.
    Train,
    /// Hard gates; stops once every gate reads 0.
    Infer,
}

/// `sigmoid(MLP(H_slots))` for a gated layer; one probability per row.
pub fn gate_probability(
    tape: &mut Tape,
    bound: &mut Bound,
    cfg: &ModelConfig,
    layer: usize,
    h_slots: Var,
) -> Result<Var> {
    if !cfg.gated_layers.contains(&layer) {
        return Err(Error::contract(format!("layer {layer} has no gate")));
    }
    let p = format!("gate.layer{layer}");
    let w1 = bound.var(tape, &format!("{p}.w1"))?;
    let b1 = bound.var(tape, &format!("{p}.b1"))?;
    let w2 = bound.var(tape, &format!("{p}.w2"))?;
    let b2 = bound.var(tape, &format!("{p}.b2"))?;
    let h = tape.matmul(h_slots, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.silu(h);
    let z = tape.matmul(h, w2)?;
    let z = tape.add_row(z, b2)?;
    Ok(tape.sigmoid(z))
}

pub fn hard_gate(g: &[f32]) -> Vec<f32> {
    g.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect()
}

/// `g + stop_gradient(1[g >= 0.5] - g)`: the hard gate forward, the identity
/// backward.
pub fn ste_gate(tape: &mut Tape, g: Var) -> Result<Var> {
    let (r, c) = tape.dims(g);
    let hard = tape.constant(r, c, hard_gate(tape.value(g)))?;
    let diff = tape.sub(hard, g)?;
    let sg = tape.stop_gradient(diff);
    tape.add(g, sg)
}

/// How train-mode gates obtain their `stop_gradient(hard - g)` offsets.
/// `Record` and `Replay` let a finite-difference probe evaluate the exact
/// function whose gradient the straight-through estimator reports.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum SteOffsets {
    #[default]
    Live,
    Record(Vec<Vec<f32>>),
    Replay {
        offsets: Vec<Vec<f32>>,
        next: usize,
    },
}

impl SteOffsets {
    fn gate(&mut self, tape: &mut Tape, g: Var) -> Result<Var> {
        match self {
            SteOffsets::Live => ste_gate(tape, g),
            SteOffsets::Record(log) => {
                let (r, c) = tape.dims(g);
                let off: Vec<f32> = hard_gate(tape.value(g))
                    .iter()
                    .zip(tape.value(g))
                    .map(|(h, v)| h - v)
                    .collect();
                log.push(off.clone());
                let k = tape.constant(r, c, off)?;
                tape.add(g, k)
            }
            SteOffsets::Replay { offsets, next } => {
                let off = offsets
                    .get(*next)
                    .ok_or_else(|| Error::contract("replayed more gate steps than were recorded"))?
                    .clone();
                *next += 1;
                let (r, c) = tape.dims(g);
                let k = tape.constant(r, c, off)?;
                tape.add(g, k)
            }
        }
    }

    /// Switches a finished recording into replay from the start.
    pub fn into_replay(self) -> Result<SteOffsets> {
        match self {
            SteOffsets::Record(offsets) | SteOffsets::Replay { offsets, .. } => {
                Ok(SteOffsets::Replay { offsets, next: 0 })
            }
            SteOffsets::Live => Err(Error::contract("nothing was recorded")),
        }
    }
}

/// Per-layer, per-slot loop counts of one forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateTrace {
    pub max_loops: usize,
    pub layers: BTreeMap<usize, Vec<usize>>,
}

impl GateTrace {
    pub fn new(cfg: &ModelConfig, m: usize) -> GateTrace {
        GateTrace {
            max_loops: cfg.max_loops,
            layers: cfg.gated_layers.iter().map(|&l| (l, vec![1; m])).collect(),
        }
    }

    /// Total gated steps that fired for at least one slot.
    pub fn extra_passes(&self) -> usize {
        self.layers
            .values()
            .map(|c| c.iter().copied().max().unwrap_or(1) - 1)
            .sum()
    }

    pub fn parse(text: &str, max_loops: usize) -> Result<GateTrace> {
        let mut layers = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let bad = || Error::contract(format!("bad trace line `{line}`"));
            let rest = line.trim().strip_prefix("layer=").ok_or_else(bad)?;
            let (l, rest) = rest.split_once(' ').ok_or_else(bad)?;
            let l: usize = l.parse().map_err(|_| bad())?;
            let inner = rest
                .strip_prefix("traj=[")
                .and_then(|r| r.strip_suffix(']'))
                .ok_or_else(bad)?;
            let mut counts = Vec::new();
            if !inner.is_empty() {
                for cell in inner.split(", ") {
                    let c = parse_cell(cell, max_loops).ok_or_else(bad)?;
                    counts.push(c);
                }
            }
            layers.insert(l, counts);
        }
        Ok(GateTrace { max_loops, layers })
    }
}

/// `L` per pass, padded with `0` to `max_loops - 1`, then `.` unless the
/// count hit the maximum.
pub fn render_cell(count: usize, max_loops: usize) -> String {
    let width = max_loops.saturating_sub(1).max(1);
    let mut s = "L".repeat(count);
    while s.len() < width {
        s.push('0');
    }
    if count < max_loops {
        s.push('.');
    }
    s
}

fn parse_cell(cell: &str, max_loops: usize) -> Option<usize> {
    let count = cell.chars().take_while(|&c| c == 'L').count();
    if count == 0 || count > max_loops {
        return None;
    }
    (render_cell(count, max_loops) == cell).then_some(count)
}

impl fmt::Display for GateTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (l, counts) in &self.layers {
            let cells: Vec<String> = counts.iter().map(|&c| render_cell(c, self.max_loops)).collect();
            writeln!(f, "layer={l} traj=[{}]", cells.join(", "))?;
        }
        Ok(())
    }
}

/// Up to `max_loops - 1` gated refinement steps on the slot rows of a
/// post-mandatory state `h`. Non-slot rows of every step are copied from `h`.
#[allow(clippy::too_many_arguments)]
pub fn recursive_refine(
    tape: &mut Tape,
    bound: &mut Bound,
    cfg: &ModelConfig,
    layer: usize,
    h: Var,
    slots: &[usize],
    mode: Mode,
    ctx: &mut LoraCtx,
    counts: &mut [usize],
    offsets: &mut SteOffsets,
) -> Result<Var> {
    if slots.is_empty() {
        return Ok(h);
    }
    let prefix = slots[slots.len() - 1] + 1;
    let mask = BroadcastMask::from_positions(prefix, slots)?;
    let mut cur = h;
    for _ in 1..cfg.max_loops {
        let hs = tape.gather_rows(cur, slots)?;
        let g = gate_probability(tape, bound, cfg, layer, hs)?;
        let hard = hard_gate(tape.value(g));
        if mode == Mode::Infer && hard.iter().all(|v| *v == 0.0) {
            break;
        }
        let gw = match mode {
            Mode::Train => offsets.gate(tape, g)?,
            Mode::Infer => tape.constant(slots.len(), 1, hard.clone())?,
        };
        // slot rows only depend on the prefix that ends at the last slot
        let cp = tape.slice_rows(cur, 0, prefix)?;
        let cand = adapted_layer_forward(tape, bound, cfg, layer, cp, &mask, ctx)?;
        let cand_s = tape.gather_rows(cand, slots)?;
        let next = tape.blend(hs, cand_s, gw)?;
        cur = tape.scatter_rows(h, slots, next)?;
        for (c, fired) in counts.iter_mut().zip(&hard) {
            if *fired == 1.0 {
                *c += 1;
            }
        }
    }
    Ok(cur)
}

/// Knobs for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOpts {
    pub mode: Mode,
    pub gating: bool,
}

impl ForwardOpts {
    pub fn infer(gating: bool) -> Self {
        ForwardOpts {
            mode: Mode::Infer,
            gating,
        }
    }
}

/// Final hidden states and the gate trace.
pub fn hidden_forward(
    tape: &mut Tape,
    bound: &mut Bound,
    cfg: &ModelConfig,
    input: &AssembledInput,
    opts: ForwardOpts,
    ctx: &mut LoraCtx,
) -> Result<(Var, GateTrace)> {
    hidden_forward_with(tape, bound, cfg, input, opts, ctx, &mut SteOffsets::Live)
}

#[allow(clippy::too_many_arguments)]
pub fn hidden_forward_with(
    tape: &mut Tape,
    bound: &mut Bound,
    cfg: &ModelConfig,
    input: &AssembledInput,
    opts: ForwardOpts,
    ctx: &mut LoraCtx,
    offsets: &mut SteOffsets,
) -> Result<(Var, GateTrace)> {
    let n = input.seq.ids.len();
    if n > cfg.max_seq_len {
        return Err(Error::Capacity {
            len: n,
            max: cfg.max_seq_len,
        });
    }
    let slots = &input.seq.slots;
    let mask = BroadcastMask::from_positions(n, slots)?;
    let mut trace = GateTrace::new(cfg, slots.len());
    let mut h = input.h0;
    for l in 0..cfg.n_layers {
        h = adapted_layer_forward(tape, bound, cfg, l, h, &mask, ctx)?;
        if opts.gating && cfg.gated_layers.contains(&l) {
            let counts = trace.layers.get_mut(&l).expect("gated layer has a trace row");
            h = recursive_refine(tape, bound, cfg, l, h, slots, opts.mode, ctx, counts, offsets)?;
        }
    }
    Ok((h, trace))
}

pub fn model_forward(
    tape: &mut Tape,
    bound: &mut Bound,
    cfg: &ModelConfig,
    input: &AssembledInput,
    opts: ForwardOpts,
    ctx: &mut LoraCtx,
) -> Result<(Var, GateTrace)> {
    let (h, trace) = hidden_forward(tape, bound, cfg, input, opts, ctx)?;
    Ok((logits(tape, bound, h)?, trace))
}
