//! The assembled system: backbone, encoder, projector, adapters and gates.

use std::fmt;
use std::path::Path;

use crate::adapter::LoraCtx;
use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{Config, ModelConfig};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::gate::{model_forward, ForwardOpts, GateTrace};
use crate::params::{init_lora, init_params, random_projector, Bound, ParamStore};
use crate::slot::{assemble, build_sequence, encode_context, CompressedContext, Sequence, SlotFill};
use crate::template::{Template, QA_NAIVE_TEMPLATE};
use crate::transformer::base_forward;
use crate::vocab::Vocab;

/// Last finished training phase, recorded in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Completed {
    Base,
    Stage1,
    Stage2,
    Stage3,
}

impl Completed {
    pub fn as_str(self) -> &'static str {
        match self {
            Completed::Base => "base",
            Completed::Stage1 => "1",
            Completed::Stage2 => "2",
            Completed::Stage3 => "3",
        }
    }

    pub fn parse(s: &str) -> Result<Completed> {
        match s {
            "base" => Ok(Completed::Base),
            "1" => Ok(Completed::Stage1),
            "2" => Ok(Completed::Stage2),
            "3" => Ok(Completed::Stage3),
            _ => Err(Error::Checkpoint(format!("unknown completed_stage `{s}`"))),
        }
    }
}

/// How an example's context reaches the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Compressed slots through adapters (and gates when enabled).
    Slots { gating: bool },
    /// Raw context tokens through the plain backbone.
    RawText,
    /// No context at all, plain backbone.
    Naive,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Slots { gating: true } => write!(f, "slots+gates"),
            Variant::Slots { gating: false } => write!(f, "slots"),
            Variant::RawText => write!(f, "raw"),
            Variant::Naive => write!(f, "naive"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ArcModel {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub completed: Option<Completed>,
}

impl ArcModel {
    pub fn new(cfg: ModelConfig) -> Result<ArcModel> {
        let params = init_params(&cfg)?;
        Ok(ArcModel {
            vocab: Vocab::new(cfg.vocab_size)?,
            cfg,
            params,
            completed: None,
        })
    }

    pub fn template(&self, ex: &Example, variant: Variant) -> Result<Template> {
        let t = match variant {
            Variant::Naive => Template::parse(QA_NAIVE_TEMPLATE)?,
            _ => Template::parse(&ex.template)?.expand(ex.segments.len())?,
        };
        t.check_vocab(&self.vocab)?;
        Ok(t)
    }

    /// Token layout of `ex`; without `target` the sequence stops where the
    /// answer would begin.
    pub fn sequence(&self, ex: &Example, variant: Variant, with_target: bool) -> Result<Sequence> {
        let tpl = self.template(ex, variant)?;
        let fill = match variant {
            Variant::RawText => SlotFill::Raw(&ex.segments),
            _ => SlotFill::Placeholder,
        };
        let target: &[usize] = if with_target { &ex.target } else { &[] };
        build_sequence(&self.vocab, &tpl, fill, &ex.question, target)
    }

    pub fn context(&self, segments: &[Vec<usize>]) -> Result<CompressedContext> {
        encode_context(self.params.get("enc.codebook")?, segments)
    }

    /// Logits over `seq` for the given variant.
    #[allow(clippy::too_many_arguments)]
    pub fn logits_for(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        ex: &Example,
        seq: &Sequence,
        variant: Variant,
        opts_mode: crate::gate::Mode,
        ctx: &mut LoraCtx,
    ) -> Result<(Var, GateTrace)> {
        match variant {
            Variant::Slots { gating } => {
                let c = self.context(&ex.segments)?;
                let input = assemble(tape, bound, &self.cfg, seq.clone(), &c)?;
                let opts = ForwardOpts {
                    mode: opts_mode,
                    gating,
                };
                model_forward(tape, bound, &self.cfg, &input, opts, ctx)
            }
            Variant::RawText | Variant::Naive => {
                let lg = base_forward(tape, bound, &self.cfg, &seq.ids)?;
                Ok((lg, GateTrace::new(&self.cfg, 0)))
            }
        }
    }

    /// Mean target-token NLL of one example.
    pub fn example_loss(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        ex: &Example,
        variant: Variant,
        mode: crate::gate::Mode,
        ctx: &mut LoraCtx,
    ) -> Result<(Var, GateTrace)> {
        let seq = self.sequence(ex, variant, true)?;
        let (lg, trace) = self.logits_for(tape, bound, ex, &seq, variant, mode, ctx)?;
        let loss = tape.cross_entropy(lg, &seq.loss_targets())?;
        Ok((loss, trace))
    }

    /// Sum of target-token NLL and the number of target tokens, in infer mode.
    pub fn example_nll(&self, ex: &Example, variant: Variant) -> Result<(f64, usize)> {
        let seq = self.sequence(ex, variant, true)?;
        let mut tape = Tape::new();
        let mut bound = Bound::new(&self.params);
        let mut ctx = LoraCtx::infer(&self.cfg);
        let (lg, _) = self.logits_for(
            &mut tape,
            &mut bound,
            ex,
            &seq,
            variant,
            crate::gate::Mode::Infer,
            &mut ctx,
        )?;
        Ok(crate::eval::target_nll(
            tape.value(lg),
            self.cfg.vocab_size,
            &seq.loss_targets(),
        ))
    }

    /// Greedy decoding until `<eos>` or `max_new` tokens. The trace belongs
    /// to the first forward pass, which covers every slot.
    pub fn generate(&self, ex: &Example, variant: Variant, max_new: usize) -> Result<(Vec<usize>, GateTrace)> {
        let mut seq = self.sequence(ex, variant, false)?;
        let mut out = Vec::new();
        let mut first_trace = None;
        for _ in 0..max_new {
            if seq.ids.len() >= self.cfg.max_seq_len {
                break;
            }
            let mut tape = Tape::new();
            let mut bound = Bound::new(&self.params);
            let mut ctx = LoraCtx::infer(&self.cfg);
            let (lg, trace) = self.logits_for(
                &mut tape,
                &mut bound,
                ex,
                &seq,
                variant,
                crate::gate::Mode::Infer,
                &mut ctx,
            )?;
            first_trace.get_or_insert(trace);
            let v = self.cfg.vocab_size;
            let last = &tape.value(lg)[(seq.ids.len() - 1) * v..seq.ids.len() * v];
            let next = argmax_generable(&self.vocab, last);
            if next == self.vocab.eos() {
                break;
            }
            out.push(next);
            seq.ids.push(next);
        }
        let trace = first_trace.unwrap_or_else(|| GateTrace::new(&self.cfg, ex.segments.len()));
        Ok((out, trace))
    }

    /// The same backbone with a freshly drawn, untrained projector and
    /// inert adapters: the slots carry no learned signal.
    pub fn random_projector_baseline(&self, seed: u64) -> Result<ArcModel> {
        let mut m = self.clone();
        init_lora(&m.cfg, &mut m.params)?;
        random_projector(&m.cfg, seed, &mut m.params)?;
        Ok(m)
    }

    pub fn to_checkpoint(&self, extra: &[(&str, String)]) -> Checkpoint {
        let mut ck = Checkpoint {
            params: self.params.clone(),
            ..Checkpoint::default()
        };
        let cfg = Config {
            model: self.cfg.clone(),
            ..Config::default()
        };
        for line in cfg.to_text().lines().take(MODEL_KEYS) {
            if let Some((k, v)) = line.split_once(" = ") {
                ck.meta.insert(format!("model.{k}"), v.to_string());
            }
        }
        if let Some(c) = self.completed {
            ck.meta.insert("completed_stage".into(), c.as_str().into());
        }
        for (k, v) in extra {
            ck.meta.insert((*k).to_string(), v.clone());
        }
        for (_, t) in ck.params.iter_mut() {
            t.set_requires_grad(false);
        }
        ck
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<ArcModel> {
        let mut cfg = Config::default();
        for (k, v) in &ck.meta {
            if let Some(key) = k.strip_prefix("model.") {
                cfg.set(key, v)?;
            }
        }
        cfg.model.validate()?;
        let completed = ck
            .meta
            .get("completed_stage")
            .map(|s| Completed::parse(s))
            .transpose()?;
        let fresh = init_params(&cfg.model)?;
        for (name, t) in fresh.iter() {
            let got = ck.params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, config implies {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(ArcModel {
            vocab: Vocab::new(cfg.model.vocab_size)?,
            cfg: cfg.model,
            params: ck.params,
            completed,
        })
    }

    pub fn save(&self, path: &Path, extra: &[(&str, String)]) -> Result<()> {
        self.to_checkpoint(extra).save(path)
    }

    pub fn load(path: &Path) -> Result<ArcModel> {
        ArcModel::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Number of leading `Config::to_text` lines that belong to the model.
const MODEL_KEYS: usize = 14;

/// Greedy choice that never emits the slot placeholder or `<bos>`.
pub fn argmax_generable(vocab: &Vocab, row: &[f32]) -> usize {
    let mut best = vocab.eos();
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if i == vocab.slot() || i == vocab.bos() {
            continue;
        }
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;
    use crate::data::gen_qa_corpus;

    fn small() -> ModelConfig {
        ModelConfig {
            d: 16,
            n_layers: 2,
            n_heads: 2,
            gated_layers: [1].into(),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn checkpoint_round_trip_restores_config_and_stage() {
        let mut m = ArcModel::new(small()).unwrap();
        m.completed = Some(Completed::Stage2);
        let ck = m.to_checkpoint(&[("note", "x".into())]);
        assert_eq!(ck.meta["completed_stage"], "2");
        let back = ArcModel::from_checkpoint(Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.cfg, m.cfg);
        assert_eq!(back.completed, Some(Completed::Stage2));
        assert_eq!(back.params.snapshot(), m.params.snapshot());
    }

    #[test]
    fn generation_stops_and_skips_reserved_ids() {
        let m = ArcModel::new(small()).unwrap();
        let ex = &gen_qa_corpus(&DataConfig::default(), &m.vocab, 1, 1).unwrap()[0];
        for variant in [Variant::Slots { gating: true }, Variant::RawText, Variant::Naive] {
            let (out, _) = m.generate(ex, variant, 3).unwrap();
            assert!(out.len() <= 3);
            assert!(out.iter().all(|&t| t != m.vocab.slot() && t != m.vocab.bos()));
        }
    }
}
