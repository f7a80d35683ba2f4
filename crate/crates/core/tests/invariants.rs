use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use arcslot::adapter::{adapted_layer_forward, BroadcastMask, LoraCtx};
use arcslot::autodiff::{Tape, Tensor};
use arcslot::config::{Config, ModelConfig};
use arcslot::data::{gen_qa_corpus, gen_reconstruction_corpus, Example};
use arcslot::eval::{evaluate_qa, perplexity, target_nll};
use arcslot::gate::{gate_probability, model_forward, recursive_refine, ForwardOpts, Mode, SteOffsets};
use arcslot::model::{ArcModel, Completed, Variant};
use arcslot::params::{Bound, Group};
use arcslot::slot::assemble;
use arcslot::train::{loss_trend, nll_loss, pretrain_base, run_stage, Stage, StageSpec};
use arcslot::transformer::block_forward;

fn bits(x: &[f32]) -> Vec<u32> {
    x.iter().map(|v| v.to_bits()).collect()
}

fn small() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        gated_layers: [0, 1].into(),
        ..ModelConfig::default()
    }
}

fn perturbed(cfg: ModelConfig, seed: u64, gate_w2: f32) -> ArcModel {
    let mut m = ArcModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = m.params.names().map(str::to_string).collect();
    for name in names {
        let t = m.params.get_mut(&name).unwrap();
        let shape = t.shape().to_vec();
        let std = match Group::of(&name).unwrap() {
            Group::Lora if name.ends_with(".B") => 0.1,
            Group::Projector if name.ends_with("w2") => 0.1,
            Group::Gate if name.ends_with("w2") => gate_w2,
            Group::Base if shape.len() == 2 && shape[0] > 1 => 0.1,
            _ => continue,
        };
        *t = Tensor::randn(&shape, std, &mut rng);
    }
    m
}

fn forward(model: &ArcModel, ex: &Example, opts: ForwardOpts) -> (Vec<f32>, Vec<Vec<f32>>, usize) {
    let seq = model
        .sequence(ex, Variant::Slots { gating: opts.gating }, true)
        .unwrap();
    let mut tape = Tape::new();
    let mut bound = Bound::new(&model.params);
    let c = model.context(&ex.segments).unwrap();
    let input = assemble(&mut tape, &mut bound, &model.cfg, seq, &c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = match opts.mode {
        Mode::Train => LoraCtx::train(&model.cfg, &mut rng),
        Mode::Infer => LoraCtx::infer(&model.cfg),
    };
    ctx.dropout = 0.0;
    let mut offsets = SteOffsets::Record(Vec::new());
    let (h, trace) =
        arcslot::gate::hidden_forward_with(&mut tape, &mut bound, &model.cfg, &input, opts, &mut ctx, &mut offsets)
            .unwrap();
    let lg = arcslot::transformer::logits(&mut tape, &mut bound, h).unwrap();
    let probs = match offsets {
        SteOffsets::Record(o) => o,
        _ => unreachable!(),
    };
    (tape.value(lg).to_vec(), probs, trace.extra_passes())
}

#[test]
fn mixed_mask_rows_match_two_independent_passes() {
    let m = perturbed(small(), 1, 0.02);
    let cfg = &m.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let n = rng.random_range(2..40);
        let on: Vec<bool> = (0..n).map(|_| rng.random::<f32>() < 0.4).collect();
        let h = Tensor::randn(&[n, cfg.d], 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut bound = Bound::new(&m.params);
        let hv = tape.leaf(&h).unwrap();
        let mut ctx = LoraCtx::infer(cfg);
        // causal: the adapted rows only see the prefix up to the last active row
        let p = on.iter().rposition(|&o| o).map_or(1, |i| i + 1);
        let hp = tape.slice_rows(hv, 0, p).unwrap();
        let frozen = block_forward(&mut tape, &mut bound, cfg, 1, hv, None).unwrap();
        let adapted = block_forward(&mut tape, &mut bound, cfg, 1, hp, Some(&mut ctx)).unwrap();
        let full = block_forward(&mut tape, &mut bound, cfg, 1, hv, Some(&mut ctx)).unwrap();
        let mixed = adapted_layer_forward(
            &mut tape,
            &mut bound,
            cfg,
            1,
            hv,
            &BroadcastMask::from_bits(&on),
            &mut ctx,
        )
        .unwrap();
        let (f, a, u, x) = (
            tape.value(frozen),
            tape.value(adapted),
            tape.value(full),
            tape.value(mixed),
        );
        for (i, &o) in on.iter().enumerate() {
            let r = i * cfg.d..(i + 1) * cfg.d;
            let want = if o { &a[r.clone()] } else { &f[r.clone()] };
            assert_eq!(bits(&x[r.clone()]), bits(want), "row {i}");
            if o {
                for (p, q) in x[r.clone()].iter().zip(&u[r]) {
                    assert!((p - q).abs() <= 1e-5 * (1.0 + q.abs()), "row {i}: {p} vs {q}");
                }
            }
        }
    }
}

#[test]
fn one_open_step_matches_a_straight_line_update() {
    let mut cfg = small();
    cfg.max_loops = 2;
    let mut m = perturbed(cfg, 2, 0.02);
    m.params.get_mut("gate.layer0.b2").unwrap().data_mut()[0] = 40.0;
    let cfg = m.cfg.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 12;
    let slots = [2usize, 5, 6];
    let h = Tensor::randn(&[n, cfg.d], 1.0, &mut rng);
    let mut tape = Tape::new();
    let mut bound = Bound::new(&m.params);
    let hv = tape.leaf(&h).unwrap();
    let mut ctx = LoraCtx::infer(&cfg);
    let mut counts = vec![1; 3];
    let out = recursive_refine(
        &mut tape,
        &mut bound,
        &cfg,
        0,
        hv,
        &slots,
        Mode::Infer,
        &mut ctx,
        &mut counts,
        &mut SteOffsets::Live,
    )
    .unwrap();
    assert_eq!(counts, vec![2, 2, 2]);

    // independent: adapted pass over the causal prefix holding every slot
    let hp = tape.slice_rows(hv, 0, slots[2] + 1).unwrap();
    let cand = block_forward(&mut tape, &mut bound, &cfg, 0, hp, Some(&mut ctx)).unwrap();
    let (o, c) = (tape.value(out), tape.value(cand));
    for i in 0..n {
        let r = i * cfg.d..(i + 1) * cfg.d;
        let want = if slots.contains(&i) {
            &c[r.clone()]
        } else {
            &h.data()[r.clone()]
        };
        assert_eq!(bits(&o[r]), bits(want), "row {i}");
    }
}

#[test]
fn gate_network_is_constant_at_zero_weights_and_equivariant() {
    let mut m = perturbed(small(), 3, 0.5);
    let cfg = m.cfg.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = Tensor::randn(&[5, cfg.d], 2.0, &mut rng);
    let perm = [3usize, 0, 4, 1, 2];
    let mut tape = Tape::new();
    let mut bound = Bound::new(&m.params);
    let hv = tape.leaf(&h).unwrap();
    let g = gate_probability(&mut tape, &mut bound, &cfg, 1, hv).unwrap();
    let hp = tape.gather_rows(hv, &perm).unwrap();
    let gp = gate_probability(&mut tape, &mut bound, &cfg, 1, hp).unwrap();
    let (a, b) = (tape.value(g).to_vec(), tape.value(gp).to_vec());
    assert!(a.iter().all(|&p| p > 0.0 && p < 1.0));
    for (j, &p) in perm.iter().enumerate() {
        assert_eq!(b[j].to_bits(), a[p].to_bits());
    }
    assert!(gate_probability(&mut tape, &mut bound, &cfg, 7, hv).is_err());
    drop(bound);

    *m.params.get_mut("gate.layer1.w2").unwrap() = Tensor::zeros(&[cfg.gate_hidden, 1]);
    let b0 = m.params.get("gate.layer1.b2").unwrap().data()[0];
    let mut tape = Tape::new();
    let mut bound = Bound::new(&m.params);
    let hv = tape.leaf(&h).unwrap();
    let g = gate_probability(&mut tape, &mut bound, &cfg, 1, hv).unwrap();
    let want = 1.0 / (1.0 + (-b0).exp());
    assert!(tape.value(g).iter().all(|&p| (p - want).abs() < 1e-7));
}

#[test]
fn train_and_infer_agree_away_from_the_threshold() {
    let m = perturbed(ModelConfig::default(), 4, 1.0);
    let data = gen_qa_corpus(&Config::default().data, &m.vocab, 30, 4).unwrap();
    let mut compared = 0;
    for ex in &data {
        let (train, offs, _) = forward(
            &m,
            ex,
            ForwardOpts {
                mode: Mode::Train,
                gating: true,
            },
        );
        // offsets are hard - g; |g - 0.5| is their distance from 0.5
        let margin = offs
            .iter()
            .flatten()
            .map(|o| (o.abs() - 0.5).abs())
            .fold(f32::INFINITY, f32::min);
        if margin < 1e-3 {
            continue;
        }
        let (infer, _, _) = forward(&m, ex, ForwardOpts::infer(true));
        assert_eq!(train.len(), infer.len());
        let worst = train
            .iter()
            .zip(&infer)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 1e-4, "max logit gap {worst}");
        compared += 1;
    }
    assert!(compared > 20);
}

#[test]
fn gate_cost_is_bounded_and_counted() {
    let m = perturbed(ModelConfig::default(), 5, 1.0);
    let data = gen_reconstruction_corpus(&Config::default().data, &m.vocab, 10, 5).unwrap();
    for ex in &data {
        let (_, offs, extra) = forward(&m, ex, ForwardOpts::infer(true));
        let (_, trace) = m.generate(ex, Variant::Slots { gating: true }, 1).unwrap();
        assert!(trace
            .layers
            .values()
            .flatten()
            .all(|&c| (1..=m.cfg.max_loops).contains(&c)));
        assert!(extra <= m.cfg.gated_layers.len() * (m.cfg.max_loops - 1) * ex.segments.len());
        assert!(offs.is_empty(), "infer mode records no straight-through offsets");
    }
}

#[test]
fn prompt_logits_never_move_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, v) = (9, 20);
    let targets: Vec<Option<usize>> = (0..n).map(|i| (i >= 5).then(|| rng.random_range(0..v))).collect();
    let base: Vec<f32> = (0..n * v).map(|_| rng.random::<f32>()).collect();
    let mut moved = base.clone();
    for x in &mut moved[..5 * v] {
        *x += rng.random::<f32>() * 50.0 - 25.0;
    }
    let loss = |logits: Vec<f32>| {
        let mut t = Tape::new();
        let lg = t.constant(n, v, logits).unwrap();
        let l = nll_loss(&mut t, lg, &targets).unwrap();
        t.scalar(l).unwrap()
    };
    assert_eq!(loss(base).to_bits(), loss(moved).to_bits());
}

#[test]
fn perplexity_is_exp_of_mean_loss() {
    let m = perturbed(ModelConfig::default(), 7, 0.02);
    let data = gen_reconstruction_corpus(&Config::default().data, &m.vocab, 6, 7).unwrap();
    let ppl = perplexity(&m, &data, Variant::Slots { gating: false }).unwrap();
    let (mut total, mut count) = (0.0f64, 0usize);
    for ex in &data {
        let seq = m.sequence(ex, Variant::Slots { gating: false }, true).unwrap();
        let mut tape = Tape::new();
        let mut bound = Bound::new(&m.params);
        let c = m.context(&ex.segments).unwrap();
        let input = assemble(&mut tape, &mut bound, &m.cfg, seq, &c).unwrap();
        let mut ctx = LoraCtx::infer(&m.cfg);
        let (lg, _) = model_forward(
            &mut tape,
            &mut bound,
            &m.cfg,
            &input,
            ForwardOpts::infer(false),
            &mut ctx,
        )
        .unwrap();
        let targets = input.seq.loss_targets();
        let k = targets.iter().flatten().count();
        let l = nll_loss(&mut tape, lg, &targets).unwrap();
        total += tape.scalar(l).unwrap() as f64 * k as f64;
        count += k;
        let (s, c) = target_nll(tape.value(lg), m.cfg.vocab_size, &targets);
        assert_eq!(c, k);
        assert!((s / c as f64 - tape.scalar(l).unwrap() as f64).abs() < 1e-5);
    }
    let want = (total / count as f64).exp();
    assert!(((ppl - want) / want).abs() < 1e-6, "{ppl} vs {want}");
}

#[test]
fn backbone_memorizes_one_sequence() {
    let mut cfg = Config::default();
    cfg.model.n_layers = 2;
    cfg.model.gated_layers = [0, 1].into();
    cfg.train.base_steps = 250;
    cfg.train.base_learning_rate = 3e-3;
    cfg.train.batch_size = 1;
    cfg.train.log_every = 0;
    let mut m = ArcModel::new(cfg.model.clone()).unwrap();
    let data = gen_reconstruction_corpus(&cfg.data, &m.vocab, 1, 8).unwrap();
    let hist = pretrain_base(&mut m, &data, &cfg.train, 8, &mut std::io::sink()).unwrap();
    let ppl = perplexity(&m, &data, Variant::RawText).unwrap();
    assert!(ppl < 1.01, "ppl {ppl}");
    let (first, last) = loss_trend(&hist, 0.1).unwrap();
    assert!(last < 0.5 * first);
    assert_eq!(m.completed, Some(Completed::Base));
    let mut again = ArcModel::new(cfg.model.clone()).unwrap();
    again.completed = Some(Completed::Base);
    assert!(pretrain_base(&mut again, &data, &cfg.train, 8, &mut std::io::sink()).is_err());
}

#[test]
fn identical_runs_give_identical_loss_curves() {
    let mut cfg = Config {
        model: small(),
        ..Config::default()
    };
    cfg.train.stage1_steps = 6;
    cfg.train.batch_size = 3;
    cfg.train.stage1_learning_rate = 1e-3;
    cfg.train.log_every = 2;
    let run = || {
        let mut m = perturbed(cfg.model.clone(), 9, 0.02);
        m.completed = Some(Completed::Base);
        let data = gen_reconstruction_corpus(&cfg.data, &m.vocab, 5, 9).unwrap();
        let mut log = Vec::new();
        let h = run_stage(&StageSpec::new(Stage::One, &cfg.train), &mut m, &data, 9, &mut log).unwrap();
        (h, String::from_utf8(log).unwrap(), m.params.snapshot())
    };
    let (a, la, pa) = run();
    let (b, lb, pb) = run();
    assert_eq!(a.len(), 6);
    for (x, y) in a.iter().zip(&b) {
        assert!((x.loss - y.loss).abs() <= 1e-6);
    }
    assert_eq!(la, lb);
    assert_eq!(la.lines().count(), 3);
    assert!(la
        .lines()
        .all(|l| l.starts_with("step=") && l.contains(" stage=1 loss=") && l.contains(" lr=")));
    assert_eq!(pa, pb);
}

#[test]
fn stage_two_runs_with_gates_disabled() {
    let cfg = Config::default();
    let spec = StageSpec::new(Stage::Two, &cfg.train);
    assert!(!spec.gating_enabled);
    let mut m = perturbed(ModelConfig::default(), 10, 1.0);
    for l in m.cfg.gated_layers.clone() {
        m.params.get_mut(&format!("gate.layer{l}.b2")).unwrap().data_mut()[0] = 40.0;
    }
    let ex = &gen_qa_corpus(&cfg.data, &m.vocab, 1, 10).unwrap()[0];
    let (_, trace) = m
        .generate(
            ex,
            Variant::Slots {
                gating: spec.gating_enabled,
            },
            1,
        )
        .unwrap();
    assert!(trace.layers.values().flatten().all(|&c| c == 1));
    let (_, open) = m.generate(ex, Variant::Slots { gating: true }, 1).unwrap();
    assert!(open.layers.values().flatten().all(|&c| c == m.cfg.max_loops));
}

#[test]
fn stages_refuse_out_of_order_checkpoints_and_wrong_data() {
    let cfg = Config::default();
    let mut m = ArcModel::new(small()).unwrap();
    let qa = gen_qa_corpus(&cfg.data, &m.vocab, 2, 11).unwrap();
    let rec = gen_reconstruction_corpus(&cfg.data, &m.vocab, 2, 11).unwrap();
    let mut sink = std::io::sink();
    let s1 = StageSpec::new(Stage::One, &cfg.train);
    let s3 = StageSpec::new(Stage::Three, &cfg.train);
    assert!(matches!(
        run_stage(&s1, &mut m, &rec, 0, &mut sink),
        Err(arcslot::Error::Pipeline(_))
    ));
    m.completed = Some(Completed::Base);
    assert!(matches!(
        run_stage(&s3, &mut m, &qa, 0, &mut sink),
        Err(arcslot::Error::Pipeline(_))
    ));
    assert!(matches!(
        run_stage(&s1, &mut m, &qa, 0, &mut sink),
        Err(arcslot::Error::Pipeline(_))
    ));
}

#[test]
fn a_single_slot_learns_to_carry_its_value() {
    let base = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/base.ckpt");
    let mut m = ArcModel::load(&base).unwrap();
    let mut cfg = Config::default();
    cfg.data.qa_pairs = 1;
    cfg.train.stage1_steps = 1;
    cfg.train.stage2_steps = 400;
    cfg.train.stage2_learning_rate = 3e-3;
    cfg.train.log_every = 0;
    let mut sink = std::io::sink();
    let rec = gen_reconstruction_corpus(&cfg.data, &m.vocab, 8, 20).unwrap();
    run_stage(&StageSpec::new(Stage::One, &cfg.train), &mut m, &rec, 20, &mut sink).unwrap();
    let train = gen_qa_corpus(&cfg.data, &m.vocab, 1024, 21).unwrap();
    let held_out = gen_qa_corpus(&cfg.data, &m.vocab, 50, 22).unwrap();
    let before = evaluate_qa(&m, &held_out, Variant::Slots { gating: false })
        .unwrap()
        .accuracy;
    run_stage(&StageSpec::new(Stage::Two, &cfg.train), &mut m, &train, 21, &mut sink).unwrap();
    let after = evaluate_qa(&m, &held_out, Variant::Slots { gating: false })
        .unwrap()
        .accuracy;
    assert!(after >= 0.9 && after > before, "{before} -> {after}");
}
