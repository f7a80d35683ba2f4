//! Command-line front end: `arcslot <verb> [flags]`.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::data::{gen_qa_corpus, gen_reconstruction_corpus, render_example, split_seed, Split};
use crate::diagnostics::end_to_end_gradcheck;
use crate::error::{Error, Result};
use crate::eval::{evaluate_qa, four_way_buckets, gate_stats, perplexity, EvalReport};
use crate::gate::GateTrace;
use crate::model::{ArcModel, Completed, Variant};
use crate::train::{pretrain_base, run_stage, thread_count, Stage, StageSpec};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Parser, Debug)]
#[command(name = "arcslot", version = VERSION, about = "Context slots with gated recursive alignment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write seeded reconstruction and QA corpora as text.
    GenData(Common),
    /// Next-token pretraining of the backbone on raw-text sequences.
    PretrainBase(Common),
    /// Run one adapter training stage.
    Train(Common),
    /// Perplexity, QA metrics, buckets and loop statistics.
    Eval(Common),
    /// Print per-example gate trajectories.
    TraceGates(Common),
    /// Decode contexts back from their slots.
    Reconstruct(Common),
    /// Finite-difference check of the end-to-end gradient.
    Gradcheck(Common),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training stage: 1, 2 or 3.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=3))]
    pub stage: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Input checkpoint.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of examples to generate or evaluate.
    #[arg(long)]
    pub examples: Option<usize>,
    /// Extra `key=value` config overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::from_file(p)?,
            None => Config::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.model.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("--out is required".into()))
    }

    fn ckpt(&self) -> Result<ArcModel> {
        let p = self
            .ckpt
            .as_deref()
            .ok_or_else(|| Error::Config("--ckpt is required".into()))?;
        ArcModel::load(p)
    }
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(c) => gen_data(&c),
        Command::PretrainBase(c) => pretrain(&c),
        Command::Train(c) => train(&c),
        Command::Eval(c) => eval(&c),
        Command::TraceGates(c) => trace_gates(&c),
        Command::Reconstruct(c) => reconstruct(&c),
        Command::Gradcheck(c) => gradcheck(&c),
    }
}

fn write_manifest(dir: &Path, verb: &str, cfg: &Config, extra: &[(&str, String)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut s = String::new();
    let _ = writeln!(s, "version = {VERSION}");
    let _ = writeln!(s, "verb = {verb}");
    for (k, v) in extra {
        let _ = writeln!(s, "{k} = {v}");
    }
    s.push_str(&cfg.to_text());
    fs::write(dir.join("manifest.txt"), s)?;
    Ok(())
}

fn gen_data(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let out = c.out()?;
    let n = c.examples.unwrap_or(cfg.data.train_examples);
    let vocab = crate::vocab::Vocab::new(cfg.model.vocab_size)?;
    let seed = cfg.model.seed;
    write_manifest(out, "gen-data", &cfg, &[("examples", n.to_string())])?;
    let rec = gen_reconstruction_corpus(&cfg.data, &vocab, n, split_seed(seed, Split::Stage1))?;
    let qa = gen_qa_corpus(&cfg.data, &vocab, n, split_seed(seed, Split::Stage2))?;
    for (name, set) in [("reconstruction.txt", rec), ("qa.txt", qa)] {
        let mut w = BufWriter::new(File::create(out.join(name))?);
        for ex in &set {
            writeln!(w, "{}", render_example(&vocab, ex)?)?;
        }
        w.flush()?;
    }
    println!("wrote {n} reconstruction and {n} QA examples to {}", out.display());
    Ok(())
}

/// Raw-text corpus for backbone pretraining: recitation and QA lookup with
/// the background written out in full.
pub fn base_corpus(cfg: &Config, model: &ArcModel, seed: u64) -> Result<Vec<crate::data::Example>> {
    let n = cfg.data.train_examples;
    let mut data = gen_reconstruction_corpus(&cfg.data, &model.vocab, n, split_seed(seed, Split::BaseReconstruction))?;
    data.extend(gen_qa_corpus(
        &cfg.data,
        &model.vocab,
        n,
        split_seed(seed, Split::BaseQa),
    )?);
    Ok(data)
}

/// Training corpus of a stage.
pub fn stage_corpus(cfg: &Config, model: &ArcModel, stage: Stage, seed: u64) -> Result<Vec<crate::data::Example>> {
    let n = cfg.data.train_examples;
    match stage {
        Stage::One => gen_reconstruction_corpus(&cfg.data, &model.vocab, n, split_seed(seed, Split::Stage1)),
        Stage::Two => gen_qa_corpus(&cfg.data, &model.vocab, n, split_seed(seed, Split::Stage2)),
        Stage::Three => gen_qa_corpus(&cfg.data, &model.vocab, n, split_seed(seed, Split::Stage3)),
    }
}

fn pretrain(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let out = c.out()?;
    let seed = cfg.model.seed;
    let mut model = ArcModel::new(cfg.model.clone())?;
    write_manifest(out, "pretrain-base", &cfg, &[("threads", thread_count().to_string())])?;
    let data = base_corpus(&cfg, &model, seed)?;
    let mut log = BufWriter::new(File::create(out.join("metrics.log"))?);
    pretrain_base(&mut model, &data, &cfg.train, seed, &mut log)?;
    log.flush()?;
    let path = out.join("base.ckpt");
    model.save(&path, &[("seed", seed.to_string())])?;
    println!("saved {}", path.display());
    Ok(())
}

fn train(c: &Common) -> Result<()> {
    let stage_n = c.stage.ok_or_else(|| Error::Config("--stage is required".into()))?;
    let stage = Stage::from_number(stage_n)?;
    let cfg = c.config()?;
    let out = c.out()?;
    let Some(ckpt) = &c.ckpt else {
        return Err(Error::Pipeline(format!(
            "stage {stage_n} needs the checkpoint of the previous phase (--ckpt)"
        )));
    };
    let mut model = ArcModel::load(ckpt)?;
    let seed = cfg.model.seed;
    let spec = StageSpec::new(stage, &cfg.train);
    // fail on the prerequisite before any output is written
    let need = match stage {
        Stage::One => Completed::Base,
        Stage::Two => Completed::Stage1,
        Stage::Three => Completed::Stage2,
    };
    if model.completed != Some(need) {
        return Err(Error::Pipeline(format!(
            "stage {stage_n} needs a `{}` checkpoint, {} has `{}`",
            need.as_str(),
            ckpt.display(),
            model.completed.map_or("none", Completed::as_str)
        )));
    }
    write_manifest(
        out,
        "train",
        &cfg,
        &[("stage", stage_n.to_string()), ("ckpt", ckpt.display().to_string())],
    )?;
    let data = stage_corpus(&cfg, &model, stage, seed)?;
    let mut log = BufWriter::new(File::create(out.join("metrics.log"))?);
    run_stage(
        &spec,
        &mut model,
        &data,
        split_seed(seed, Split::Stage1) ^ stage_n as u64,
        &mut log,
    )?;
    log.flush()?;
    let path = out.join(format!("stage{stage_n}.ckpt"));
    model.save(&path, &[("seed", seed.to_string())])?;
    println!("saved {}", path.display());
    Ok(())
}

fn eval_sets(
    cfg: &Config,
    model: &ArcModel,
    n: usize,
) -> Result<(Vec<crate::data::Example>, Vec<crate::data::Example>)> {
    let seed = cfg.model.seed;
    Ok((
        gen_reconstruction_corpus(&cfg.data, &model.vocab, n, split_seed(seed, Split::EvalReconstruction))?,
        gen_qa_corpus(&cfg.data, &model.vocab, n, split_seed(seed, Split::EvalQa))?,
    ))
}

/// Full evaluation of a checkpoint. Slot variants are skipped for a backbone
/// that has not been through Stage I.
pub fn evaluate(model: &ArcModel, cfg: &Config, n: usize) -> Result<EvalReport> {
    let (rec, qa) = eval_sets(cfg, model, n)?;
    let mut r = EvalReport {
        n_examples: n,
        compression_ratio: rec.iter().map(|e| e.source_token_count()).sum::<usize>() as f64
            / rec.iter().map(|e| e.segments.len()).sum::<usize>() as f64,
        ..EvalReport::default()
    };
    r.ppl.insert("base".into(), perplexity(model, &rec, Variant::RawText)?);
    let random = model.random_projector_baseline(split_seed(cfg.model.seed, Split::EvalReconstruction))?;
    r.ppl.insert(
        "random".into(),
        perplexity(&random, &rec, Variant::Slots { gating: false })?,
    );
    let naive = evaluate_qa(model, &qa, Variant::Naive)?;
    let rag = evaluate_qa(model, &qa, Variant::RawText)?;
    for (k, s) in [("naive", &naive), ("rag", &rag)] {
        r.em.insert(k.into(), s.em);
        r.f1.insert(k.into(), s.f1);
        r.accuracy.insert(k.into(), s.accuracy);
    }
    if model.completed.is_some_and(|c| c >= Completed::Stage1) {
        let gating = model.completed == Some(Completed::Stage3);
        let variant = Variant::Slots { gating };
        r.ppl.insert("system".into(), perplexity(model, &rec, variant)?);
        let sys = evaluate_qa(model, &qa, variant)?;
        r.em.insert("system".into(), sys.em);
        r.f1.insert("system".into(), sys.f1);
        r.accuracy.insert("system".into(), sys.accuracy);
        let pairs = |s: &crate::eval::QaSummary| s.results.iter().map(|q| (q.id, q.em == 1.0)).collect::<Vec<_>>();
        r.buckets = Some(four_way_buckets(&pairs(&naive), &pairs(&rag), &pairs(&sys))?);
        let traces: Vec<GateTrace> = sys.results.iter().map(|q| q.trace.clone()).collect();
        r.loops = gate_stats(&traces)?;
    }
    Ok(r)
}

fn eval(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let out = c.out()?;
    let model = c.ckpt()?;
    let n = c.examples.unwrap_or(cfg.data.eval_examples);
    write_manifest(out, "eval", &cfg, &[("examples", n.to_string())])?;
    let report = evaluate(&model, &cfg, n)?;
    report.write(out)?;
    print!("{}", report.summary());
    Ok(())
}

fn trace_gates(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let model = c.ckpt()?;
    let n = c.examples.unwrap_or(8);
    let (_, qa) = eval_sets(&cfg, &model, n)?;
    let gating = model.completed == Some(Completed::Stage3);
    let mut text = String::new();
    for ex in &qa {
        let (_, trace) = model.generate(ex, Variant::Slots { gating }, 1)?;
        text.push_str(&trace.to_string());
    }
    print!("{text}");
    if let Some(out) = &c.out {
        write_manifest(out, "trace-gates", &cfg, &[("examples", n.to_string())])?;
        fs::write(out.join("traces.txt"), &text)?;
    }
    Ok(())
}

fn reconstruct(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let model = c.ckpt()?;
    let n = c.examples.unwrap_or(4);
    let (rec, _) = eval_sets(&cfg, &model, n)?;
    let mut text = String::new();
    for (i, ex) in rec.iter().enumerate() {
        let (out, _) = model.generate(ex, Variant::Slots { gating: false }, ex.target.len() + 1)?;
        let _ = writeln!(text, "[{i}] original      : {}", model.vocab.decode(&ex.target)?);
        let _ = writeln!(text, "[{i}] reconstructed : {}", model.vocab.decode(&out)?);
    }
    print!("{text}");
    if let Some(out) = &c.out {
        write_manifest(out, "reconstruct", &cfg, &[("examples", n.to_string())])?;
        fs::write(out.join("reconstruction.txt"), &text)?;
    }
    Ok(())
}

fn gradcheck(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let coords = c.examples.unwrap_or(64);
    let r = end_to_end_gradcheck(cfg.model.seed, coords, 1e-3, 1e-2)?;
    let groups: Vec<String> = r.per_group.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let line = format!(
        "coords={} ({}) max_rel_error={:.3e} max_abs_error={:.3e} gate_margin={:.3} tol={:.0e} {}",
        r.report.coords_checked,
        groups.join(" "),
        r.report.max_rel_error,
        r.report.max_abs_error,
        r.gate_margin,
        r.report.tol,
        if r.report.passed { "PASS" } else { "FAIL" }
    );
    println!("{line}");
    if let Some(out) = &c.out {
        write_manifest(out, "gradcheck", &cfg, &[("coords", coords.to_string())])?;
        fs::write(out.join("gradcheck.txt"), format!("{line}\n"))?;
    }
    if r.report.passed {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "gradient check failed: {:.3e} > {:.0e}",
            r.report.max_rel_error, r.report.tol
        )))
    }
}
