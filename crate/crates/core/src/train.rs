//! Objective, optimizer, schedule and the staged training loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adapter::LoraCtx;
use crate::autodiff::{Tape, Var};
use crate::config::TrainConfig;
use crate::data::{Example, Kind};
use crate::error::{Error, Result};
use crate::gate::Mode;
use crate::model::{ArcModel, Completed, Variant};
use crate::params::{Bound, Group, ParamStore};

/// Worker count from `ARCSLOT_THREADS`, 1 when unset or unparsable.
pub fn thread_count() -> usize {
    std::env::var("ARCSLOT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Runs `f` inside the crate's capped worker pool.
pub fn with_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    let pool = POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(thread_count())
            .build()
            .expect("thread pool")
    });
    pool.install(f)
}

/// Mean NLL over rows that carry a target; other rows contribute nothing.
pub fn nll_loss(tape: &mut Tape, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    One,
    Two,
    Three,
}

impl Stage {
    pub fn from_number(n: u32) -> Result<Stage> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            3 => Ok(Stage::Three),
            _ => Err(Error::Config(format!("stage must be 1, 2 or 3, got {n}"))),
        }
    }

    pub fn number(self) -> u32 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }

    fn prerequisite(self) -> Completed {
        match self {
            Stage::One => Completed::Base,
            Stage::Two => Completed::Stage1,
            Stage::Three => Completed::Stage2,
        }
    }

    fn completes(self) -> Completed {
        match self {
            Stage::One => Completed::Stage1,
            Stage::Two => Completed::Stage2,
            Stage::Three => Completed::Stage3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub stage: Stage,
    pub trainable: Vec<Group>,
    pub gating_enabled: bool,
    pub kind: Kind,
    pub steps: usize,
    pub learning_rate: f32,
    pub warmup_ratio: f32,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub clip_norm: f32,
    pub weight_decay: f32,
    pub log_every: usize,
}

impl StageSpec {
    pub fn new(stage: Stage, t: &TrainConfig) -> StageSpec {
        let (steps, lr) = match stage {
            Stage::One => (t.stage1_steps, t.stage1_learning_rate),
            Stage::Two => (t.stage2_steps, t.stage2_learning_rate),
            Stage::Three => (t.stage3_steps, t.stage3_learning_rate),
        };
        let mut trainable = vec![Group::Projector, Group::Lora];
        if stage == Stage::Three {
            trainable.push(Group::Gate);
        }
        StageSpec {
            stage,
            trainable,
            gating_enabled: stage == Stage::Three,
            kind: if stage == Stage::One {
                Kind::Reconstruction
            } else {
                Kind::Qa
            },
            steps,
            learning_rate: lr,
            warmup_ratio: t.warmup_ratio,
            batch_size: t.batch_size,
            grad_accum: t.grad_accum,
            clip_norm: t.clip_norm,
            weight_decay: t.weight_decay,
            log_every: t.log_every,
        }
    }
}

/// Linear warmup to `peak`, then linear decay to zero at `total`.
pub fn lr_at(step: usize, total: usize, warmup_ratio: f32, peak: f32) -> f32 {
    let warm = (warmup_ratio * total as f32).ceil() as usize;
    if step < warm {
        return peak * (step + 1) as f32 / warm as f32;
    }
    let rest = total.saturating_sub(warm).max(1);
    peak * (total.saturating_sub(step) as f32 / rest as f32).max(0.0)
}

/// Scales every gradient so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(params: &mut ParamStore, max_norm: f32) -> Result<f32> {
    let mut sq = 0.0f64;
    for (_, t) in params.iter() {
        if let Some(g) = t.grad() {
            sq += g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
        }
    }
    let norm = sq.sqrt() as f32;
    if !norm.is_finite() {
        return Err(Error::contract("non-finite gradient norm"));
    }
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad() {
                let scaled: Vec<f32> = g.iter().map(|&x| x * (s - 1.0)).collect();
                t.accumulate_grad(&scaled)?;
            }
        }
    }
    Ok(norm)
}

/// Decoupled-weight-decay Adam with moments for trainable tensors only.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(params: &ParamStore, weight_decay: f32) -> AdamW {
        let moments = params
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(k, t)| (k.to_string(), (vec![0.0; t.numel()], vec![0.0; t.numel()])))
            .collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments,
        }
    }

    pub fn buffer_names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    /// One update from the gradients stored on the tensors.
    pub fn update(&mut self, params: &mut ParamStore, lr: f32) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, (m, v)) in self.moments.iter_mut() {
            let t = params.get_mut(name)?;
            if !t.requires_grad() {
                return Err(Error::contract(format!("optimizer holds frozen tensor `{name}`")));
            }
            let Some(g) = t.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            let w = t.data_mut();
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * w[i]);
            }
        }
        Ok(())
    }
}

/// One logged optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f32,
    pub lr: f32,
    pub grad_norm: f32,
}

/// Everything the inner loop needs besides the model and data.
struct LoopSpec<'a> {
    label: &'a str,
    variant: Variant,
    /// Next-token loss on every position instead of target tokens only.
    all_positions: bool,
    steps: usize,
    learning_rate: f32,
    warmup_ratio: f32,
    batch_size: usize,
    grad_accum: usize,
    clip_norm: f32,
    weight_decay: f32,
    log_every: usize,
}

/// Cycles through `n` indices in a fresh seeded order each epoch.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Sampler {
        let mut s = Sampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        };
        s.next();
        s.pos = 0;
        s
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn example_gradients(
    model: &ArcModel,
    ex: &Example,
    variant: Variant,
    all_positions: bool,
    seed: u64,
    stream: u64,
) -> Result<(f32, BTreeMap<String, Vec<f32>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut ctx = LoraCtx::train(&model.cfg, &mut rng);
    let mut tape = Tape::new();
    let mut bound = Bound::new(&model.params);
    let loss = if all_positions {
        let seq = model.sequence(ex, variant, true)?;
        let (lg, _) = model.logits_for(&mut tape, &mut bound, ex, &seq, variant, Mode::Train, &mut ctx)?;
        let targets: Vec<Option<usize>> = (0..seq.ids.len()).map(|i| seq.ids.get(i + 1).copied()).collect();
        tape.cross_entropy(lg, &targets)?
    } else {
        model
            .example_loss(&mut tape, &mut bound, ex, variant, Mode::Train, &mut ctx)?
            .0
    };
    let value = tape.scalar(loss)?;
    let grads = tape.backward(loss)?;
    Ok((value, bound.collect(&grads)))
}

fn optimize(
    model: &mut ArcModel,
    data: &[Example],
    spec: &LoopSpec,
    seed: u64,
    log: &mut dyn Write,
) -> Result<Vec<StepLog>> {
    if data.is_empty() {
        return Err(Error::contract("training on an empty corpus"));
    }
    if spec.batch_size == 0 || spec.grad_accum == 0 {
        return Err(Error::Config("batch_size and grad_accum must be positive".into()));
    }
    let mut opt = AdamW::new(&model.params, spec.weight_decay);
    let mut sampler = Sampler::new(data.len(), seed);
    let per_step = spec.batch_size * spec.grad_accum;
    let mut history = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let picks: Vec<usize> = (0..per_step).map(|_| sampler.next()).collect();
        let base_stream = (step * per_step) as u64;
        let m: &ArcModel = model;
        let parts = with_pool(|| {
            picks
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    example_gradients(
                        m,
                        &data[i],
                        spec.variant,
                        spec.all_positions,
                        seed,
                        base_stream + j as u64,
                    )
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let inv = 1.0 / per_step as f32;
        let mut loss = 0.0f64;
        for (l, grads) in &parts {
            loss += *l as f64;
            for (name, g) in grads {
                let scaled: Vec<f32> = g.iter().map(|&x| x * inv).collect();
                model.params.get_mut(name)?.accumulate_grad(&scaled)?;
            }
        }
        let loss = (loss / per_step as f64) as f32;
        let grad_norm = clip_global_norm(&mut model.params, spec.clip_norm)?;
        let lr = lr_at(step, spec.steps, spec.warmup_ratio, spec.learning_rate);
        opt.update(&mut model.params, lr)?;
        for (_, t) in model.params.iter_mut() {
            t.zero_grad();
        }
        let entry = StepLog {
            step: step + 1,
            loss,
            lr,
            grad_norm,
        };
        if spec.log_every > 0 && ((step + 1) % spec.log_every == 0 || step + 1 == spec.steps) {
            writeln!(
                log,
                "step={} stage={} loss={:.6} lr={:.8}",
                entry.step, spec.label, loss, lr
            )?;
        }
        history.push(entry);
    }
    for (_, t) in model.params.iter_mut() {
        t.set_requires_grad(false);
    }
    Ok(history)
}

/// Next-token training of the backbone on whole raw-text sequences, prompt
/// included. This is the only phase that updates backbone weights.
pub fn pretrain_base(
    model: &mut ArcModel,
    data: &[Example],
    t: &TrainConfig,
    seed: u64,
    log: &mut dyn Write,
) -> Result<Vec<StepLog>> {
    if model.completed.is_some() {
        return Err(Error::Pipeline("backbone pretraining must run on a fresh model".into()));
    }
    model.params.set_backbone_trainable()?;
    let spec = LoopSpec {
        label: "base",
        variant: Variant::RawText,
        all_positions: true,
        steps: t.base_steps,
        learning_rate: t.base_learning_rate,
        warmup_ratio: t.warmup_ratio,
        batch_size: t.batch_size,
        grad_accum: t.grad_accum,
        clip_norm: t.clip_norm,
        weight_decay: t.weight_decay,
        log_every: t.log_every,
    };
    let hist = optimize(model, data, &spec, seed, log)?;
    model.completed = Some(Completed::Base);
    Ok(hist)
}

/// Runs one stage after checking the model has finished the previous one.
pub fn run_stage(
    spec: &StageSpec,
    model: &mut ArcModel,
    data: &[Example],
    seed: u64,
    log: &mut dyn Write,
) -> Result<Vec<StepLog>> {
    let need = spec.stage.prerequisite();
    match model.completed {
        Some(c) if c == need => {}
        Some(c) => {
            return Err(Error::Pipeline(format!(
                "stage {} needs a `{}` checkpoint, got `{}`",
                spec.stage.number(),
                need.as_str(),
                c.as_str()
            )))
        }
        None => {
            return Err(Error::Pipeline(format!(
                "stage {} needs a `{}` checkpoint",
                spec.stage.number(),
                need.as_str()
            )))
        }
    }
    if let Some(ex) = data.iter().find(|e| e.kind != spec.kind) {
        return Err(Error::Pipeline(format!(
            "stage {} expects {:?} data, got {:?}",
            spec.stage.number(),
            spec.kind,
            ex.kind
        )));
    }
    model.params.set_trainable(&spec.trainable)?;
    let label = spec.stage.number().to_string();
    let lspec = LoopSpec {
        label: &label,
        variant: Variant::Slots {
            gating: spec.gating_enabled,
        },
        all_positions: false,
        steps: spec.steps,
        learning_rate: spec.learning_rate,
        warmup_ratio: spec.warmup_ratio,
        batch_size: spec.batch_size,
        grad_accum: spec.grad_accum,
        clip_norm: spec.clip_norm,
        weight_decay: spec.weight_decay,
        log_every: spec.log_every,
    };
    let hist = optimize(model, data, &lspec, seed, log)?;
    model.completed = Some(spec.stage.completes());
    Ok(hist)
}

/// Mean loss over the first and last `frac` of a history.
pub fn loss_trend(history: &[StepLog], frac: f64) -> Option<(f64, f64)> {
    let k = ((history.len() as f64 * frac).ceil() as usize).max(1);
    if history.len() < 2 * k {
        return None;
    }
    let mean = |s: &[StepLog]| s.iter().map(|h| h.loss as f64).sum::<f64>() / s.len() as f64;
    Some((mean(&history[..k]), mean(&history[history.len() - k..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let peak = 1e-3;
        assert!((lr_at(0, 100, 0.03, peak) - peak / 3.0).abs() < 1e-9);
        assert!((lr_at(2, 100, 0.03, peak) - peak).abs() < 1e-9);
        assert!(lr_at(50, 100, 0.03, peak) < peak);
        assert!(lr_at(60, 100, 0.03, peak) < lr_at(50, 100, 0.03, peak));
        assert_eq!(lr_at(100, 100, 0.03, peak), 0.0);
        assert!((lr_at(0, 10, 0.0, peak) - peak).abs() < 1e-9);
    }

    #[test]
    fn uniform_logits_cost_log_vocab() {
        let mut t = Tape::new();
        let lg = t.variable(3, 32, vec![0.5; 96]).unwrap();
        let l = nll_loss(&mut t, lg, &[None, Some(4), Some(31)]).unwrap();
        assert!((t.scalar(l).unwrap() - 32f32.ln()).abs() < 1e-5);
        assert!(matches!(
            nll_loss(&mut t, lg, &[None, None, None]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn confident_logits_cost_almost_nothing() {
        let mut t = Tape::new();
        let mut v = vec![0.0; 2 * 8];
        v[3] = 30.0;
        v[8 + 5] = 30.0;
        let lg = t.variable(2, 8, v).unwrap();
        let l = nll_loss(&mut t, lg, &[Some(3), Some(5)]).unwrap();
        assert!(t.scalar(l).unwrap() < 1e-3);
    }

    #[test]
    fn prompt_rows_do_not_move_the_loss() {
        let mut t = Tape::new();
        let a: Vec<f32> = (0..24).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut b = a.clone();
        for x in &mut b[..8] {
            *x += 5.0;
        }
        let la = t.variable(3, 8, a).unwrap();
        let lb = t.variable(3, 8, b).unwrap();
        let tg = [None, Some(2), Some(7)];
        let x = nll_loss(&mut t, la, &tg).unwrap();
        let y = nll_loss(&mut t, lb, &tg).unwrap();
        assert_eq!(t.scalar(x).unwrap().to_bits(), t.scalar(y).unwrap().to_bits());
    }

    #[test]
    fn loss_matches_straight_line_log_softmax() {
        let v: Vec<f32> = (0..30).map(|i| ((i * 7 % 11) as f32 - 5.0) * 0.3).collect();
        let tg = [Some(1), None, Some(9)];
        let mut t = Tape::new();
        let lg = t.variable(3, 10, v.clone()).unwrap();
        let l = nll_loss(&mut t, lg, &tg).unwrap();
        let l = t.scalar(l).unwrap() as f64;
        let mut want = 0.0;
        for (i, tt) in [(0usize, 1usize), (2, 9)] {
            let row = &v[i * 10..i * 10 + 10];
            let z: f64 = row.iter().map(|&x| (x as f64).exp()).sum();
            want -= ((row[tt] as f64).exp() / z).ln();
        }
        assert!((l - want / 2.0).abs() < 1e-6);
    }

    #[test]
    fn adamw_moves_only_trainable_tensors() {
        let mut ps = ParamStore::new();
        ps.insert("proj.w1", Tensor::filled(&[1, 2], 1.0)).unwrap();
        ps.insert("gate.layer0.w1", Tensor::filled(&[1, 2], 1.0)).unwrap();
        ps.set_trainable(&[Group::Projector]).unwrap();
        let mut opt = AdamW::new(&ps, 0.0);
        assert_eq!(opt.buffer_names().collect::<Vec<_>>(), ["proj.w1"]);
        ps.get_mut("proj.w1").unwrap().accumulate_grad(&[1.0, -1.0]).unwrap();
        opt.update(&mut ps, 0.1).unwrap();
        let w = ps.get("proj.w1").unwrap().data();
        // first Adam step moves each coordinate by lr against the gradient sign
        assert!((w[0] - 0.9).abs() < 1e-5 && (w[1] - 1.1).abs() < 1e-5);
        assert_eq!(ps.get("gate.layer0.w1").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut ps = ParamStore::new();
        ps.insert("proj.w1", Tensor::zeros(&[1, 2])).unwrap();
        ps.insert("proj.b1", Tensor::zeros(&[1, 1])).unwrap();
        ps.set_trainable(&[Group::Projector]).unwrap();
        ps.get_mut("proj.w1").unwrap().accumulate_grad(&[3.0, 0.0]).unwrap();
        ps.get_mut("proj.b1").unwrap().accumulate_grad(&[4.0]).unwrap();
        let n = clip_global_norm(&mut ps, 1.0).unwrap();
        assert!((n - 5.0).abs() < 1e-6);
        let g1 = ps.get("proj.w1").unwrap().grad().unwrap()[0];
        let g2 = ps.get("proj.b1").unwrap().grad().unwrap()[0];
        assert!(((g1 * g1 + g2 * g2).sqrt() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn stage_specs_follow_the_schedule() {
        let t = TrainConfig::default();
        let s1 = StageSpec::new(Stage::One, &t);
        assert_eq!(s1.trainable, [Group::Projector, Group::Lora]);
        assert!(!s1.gating_enabled);
        assert_eq!(s1.kind, Kind::Reconstruction);
        let s2 = StageSpec::new(Stage::Two, &t);
        assert!(!s2.gating_enabled);
        assert_eq!(s2.kind, Kind::Qa);
        let s3 = StageSpec::new(Stage::Three, &t);
        assert_eq!(s3.trainable, [Group::Projector, Group::Lora, Group::Gate]);
        assert!(s3.gating_enabled);
        assert!(Stage::from_number(4).is_err());
    }

    #[test]
    fn trend_uses_leading_and_trailing_windows() {
        let h: Vec<StepLog> = (0..20)
            .map(|i| StepLog {
                step: i + 1,
                loss: 20.0 - i as f32,
                lr: 0.0,
                grad_norm: 0.0,
            })
            .collect();
        let (a, b) = loss_trend(&h, 0.1).unwrap();
        assert_eq!((a, b), (19.5, 1.5));
        assert!(loss_trend(&h[..1], 0.1).is_none());
    }
}
