//! End-to-end gradient check of the slot pipeline against finite differences.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::LoraCtx;
use crate::autodiff::{central_differences, compare, GradReport, Tape, Tensor};
use crate::config::{DataConfig, ModelConfig};
use crate::data::{gen_reconstruction_corpus, Example};
use crate::error::{Error, Result};
use crate::eval::target_nll;
use crate::gate::{hidden_forward_with, ForwardOpts, Mode, SteOffsets};
use crate::model::{ArcModel, Variant};
use crate::params::{Bound, Group, ParamStore};
use crate::slot::assemble;
use crate::transformer::logits;

#[derive(Clone, Debug)]
pub struct ModelGradcheck {
    pub report: GradReport,
    /// Checked coordinates per parameter group.
    pub per_group: BTreeMap<String, usize>,
    /// Smallest `|g - 0.5|` over every gate evaluation at the base point.
    pub gate_margin: f32,
}

/// Two gated layers, otherwise the toy defaults.
pub fn gradcheck_config(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        gated_layers: [0, 1].into(),
        seed,
        ..ModelConfig::default()
    }
}

/// Moves adapters, projector and gates off their inert initial values and
/// sharpens the readout so gradients stand well above f32 noise. Gate
/// layers are biased firmly open or closed.
fn perturb_trainables(model: &mut ArcModel, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in names {
        let t = model.params.get_mut(&name)?;
        let shape = t.shape().to_vec();
        let std = match Group::of(&name)? {
            Group::Lora if name.ends_with(".B") => 0.5,
            Group::Projector if name.ends_with("w2") => 0.5,
            Group::Projector if name.ends_with("b2") => 0.2,
            Group::Gate if name.ends_with("w2") => 0.02,
            Group::Base if shape.len() == 2 && shape[0] > 1 => 0.2,
            _ => continue,
        };
        *t = Tensor::randn(&shape, std, &mut rng);
    }
    for (i, l) in model.cfg.gated_layers.clone().into_iter().enumerate() {
        let b = model.params.get_mut(&format!("gate.layer{l}.b2"))?;
        b.data_mut()[0] = if i % 2 == 0 { 2.0 } else { -2.0 };
    }
    Ok(())
}

/// Mean target NLL in f64 with gate offsets taken from `offsets`.
fn loss_with(model: &ArcModel, params: &ParamStore, ex: &Example, offsets: &mut SteOffsets) -> Result<f64> {
    let seq = model.sequence(ex, Variant::Slots { gating: true }, true)?;
    let mut tape = Tape::new();
    let mut bound = Bound::new(params);
    let mut ctx = LoraCtx::infer(&model.cfg);
    let c = model.context(&ex.segments)?;
    let input = assemble(&mut tape, &mut bound, &model.cfg, seq, &c)?;
    let opts = ForwardOpts {
        mode: Mode::Train,
        gating: true,
    };
    let (h, _) = hidden_forward_with(&mut tape, &mut bound, &model.cfg, &input, opts, &mut ctx, offsets)?;
    let lg = logits(&mut tape, &mut bound, h)?;
    let (total, n) = target_nll(tape.value(lg), model.cfg.vocab_size, &input.seq.loss_targets());
    Ok(total / n as f64)
}

/// Compares tape gradients of the train-mode NLL with central differences on
/// `coords` coordinates drawn evenly from projector, adapter and gate
/// parameters. Gate offsets are held at their base-point values, which is
/// the function the straight-through estimator differentiates.
pub fn end_to_end_gradcheck(seed: u64, coords: usize, h: f32, tol: f64) -> Result<ModelGradcheck> {
    let mut model = ArcModel::new(gradcheck_config(seed))?;
    perturb_trainables(&mut model, seed)?;
    model
        .params
        .set_trainable(&[Group::Projector, Group::Lora, Group::Gate])?;
    let ex = gen_reconstruction_corpus(&DataConfig::default(), &model.vocab, 1, seed)?.remove(0);

    // analytic side, recording the straight-through offsets
    let seq = model.sequence(&ex, Variant::Slots { gating: true }, true)?;
    let mut tape = Tape::new();
    let mut bound = Bound::new(&model.params);
    let mut ctx = LoraCtx::infer(&model.cfg);
    let c = model.context(&ex.segments)?;
    let input = assemble(&mut tape, &mut bound, &model.cfg, seq, &c)?;
    let mut rec = SteOffsets::Record(Vec::new());
    let opts = ForwardOpts {
        mode: Mode::Train,
        gating: true,
    };
    let (hid, _) = hidden_forward_with(&mut tape, &mut bound, &model.cfg, &input, opts, &mut ctx, &mut rec)?;
    let lg = logits(&mut tape, &mut bound, hid)?;
    let loss = tape.cross_entropy(lg, &input.seq.loss_targets())?;
    let grads = bound.collect(&tape.backward(loss)?);
    let gate_margin = match &rec {
        SteOffsets::Record(offs) => offs
            .iter()
            .flatten()
            .map(|o| (o.abs() - 0.5).abs())
            .fold(f32::INFINITY, f32::min),
        _ => unreachable!(),
    };
    let replay = rec.into_replay()?;

    // sample coordinates per group
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let groups = [Group::Projector, Group::Lora, Group::Gate];
    let mut picks: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut per_group = BTreeMap::new();
    for (gi, group) in groups.iter().enumerate() {
        let want = coords / groups.len() + usize::from(gi < coords % groups.len());
        let flat: Vec<(String, usize)> = model
            .params
            .iter()
            .filter(|(n, _)| Group::of(n).ok() == Some(*group))
            .flat_map(|(n, t)| (0..t.numel()).map(move |i| (n.to_string(), i)))
            .collect();
        if want > flat.len() {
            return Err(Error::contract("more coordinates requested than exist"));
        }
        for i in sample(&mut rng, flat.len(), want) {
            let (n, j) = &flat[i];
            picks.entry(n.clone()).or_default().push(*j);
        }
        per_group.insert(format!("{group:?}").to_lowercase(), want);
    }

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (name, idx) in &picks {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("no gradient reached `{name}`")))?;
        analytic.extend(idx.iter().map(|&i| g[i] as f64));
        let base = model.params.get(name)?.data().to_vec();
        let fd = central_differences(&base, idx, h, |x| {
            let mut ps = model.params.clone();
            ps.get_mut(name)?.data_mut().copy_from_slice(x);
            let mut off = replay.clone();
            loss_with(&model, &ps, &ex, &mut off)
        })?;
        numeric.extend(fd);
    }
    Ok(ModelGradcheck {
        report: compare(&analytic, &numeric, tol),
        per_group,
        gate_margin,
    })
}
