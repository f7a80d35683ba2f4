//! Model, data and training configuration with a flat `key = value` format.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::vocab::Vocab;

/// Architecture, adapter and gating hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Total vocabulary size, reserved tokens included.
    pub vocab_size: usize,
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub max_seq_len: usize,
    pub d_r: usize,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    pub lora_dropout: f32,
    /// Total adapted passes per gated layer, the mandatory one included.
    pub max_loops: usize,
    pub gated_layers: BTreeSet<usize>,
    pub gate_hidden: usize,
    pub seed: u64,
}

/// Synthetic corpus shape.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub segments_min: usize,
    pub segments_max: usize,
    pub segment_len_min: usize,
    pub segment_len_max: usize,
    /// Key-value pairs per QA example (one pair per segment).
    pub qa_pairs: usize,
    pub qa_two_hop_fraction: f32,
    pub train_examples: usize,
    pub eval_examples: usize,
}

/// Optimizer and schedule settings shared by every stage, plus per-stage
/// step counts and learning rates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_steps: usize,
    pub base_learning_rate: f32,
    pub stage1_steps: usize,
    pub stage1_learning_rate: f32,
    pub stage2_steps: usize,
    pub stage2_learning_rate: f32,
    pub stage3_steps: usize,
    pub stage3_learning_rate: f32,
    pub warmup_ratio: f32,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub clip_norm: f32,
    pub weight_decay: f32,
    pub log_every: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

pub const CONTENT_TOKENS: usize = 64;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: Vocab::reserved_count() + CONTENT_TOKENS,
            d: 64,
            n_layers: 4,
            n_heads: 4,
            ffn_mult: 4,
            max_seq_len: 192,
            d_r: 32,
            lora_rank: 8,
            lora_alpha: 32.0,
            lora_dropout: 0.05,
            max_loops: 3,
            gated_layers: (0..4).collect(),
            gate_hidden: 16,
            seed: 0,
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            segments_min: 3,
            segments_max: 3,
            segment_len_min: 24,
            segment_len_max: 24,
            qa_pairs: 3,
            qa_two_hop_fraction: 0.0,
            train_examples: 4096,
            eval_examples: 200,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_steps: 1500,
            base_learning_rate: 1e-3,
            stage1_steps: 1500,
            stage1_learning_rate: 2e-4,
            stage2_steps: 600,
            stage2_learning_rate: 2e-5,
            stage3_steps: 300,
            stage3_learning_rate: 2e-5,
            warmup_ratio: 0.03,
            batch_size: 8,
            grad_accum: 1,
            clip_norm: 1.0,
            weight_decay: 0.0,
            log_every: 50,
        }
    }
}

impl ModelConfig {
    pub fn ffn_width(&self) -> usize {
        self.ffn_mult * self.d
    }

    pub fn lora_scaling(&self) -> f32 {
        self.lora_alpha / self.lora_rank as f32
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.n_layers == 0 || self.n_heads == 0 || self.ffn_mult == 0 {
            return fail("d, n_layers, n_heads and ffn_mult must be positive".into());
        }
        if !self.d.is_multiple_of(self.n_heads) {
            return fail(format!("n_heads {} does not divide d {}", self.n_heads, self.d));
        }
        if self.max_loops == 0 {
            return fail("max_loops must be at least 1".into());
        }
        if let Some(&l) = self.gated_layers.iter().find(|&&l| l >= self.n_layers) {
            return fail(format!("gated layer {l} outside 0..{}", self.n_layers));
        }
        if self.vocab_size <= Vocab::reserved_count() {
            return fail(format!(
                "vocab_size {} leaves no content tokens after {} reserved",
                self.vocab_size,
                Vocab::reserved_count()
            ));
        }
        if self.d_r == 0 || self.lora_rank == 0 || self.gate_hidden == 0 || self.max_seq_len == 0 {
            return fail("d_r, lora_rank, gate_hidden and max_seq_len must be positive".into());
        }
        if !(self.lora_alpha > 0.0 && self.lora_alpha.is_finite()) {
            return fail("lora_alpha must be positive".into());
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return fail("lora_dropout must lie in [0, 1)".into());
        }
        Ok(())
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let d = &self.data;
        if d.segments_min == 0 || d.segments_min > d.segments_max {
            return Err(Error::Config("need 1 <= segments_min <= segments_max".into()));
        }
        if d.segment_len_min == 0 || d.segment_len_min > d.segment_len_max {
            return Err(Error::Config("need 1 <= segment_len_min <= segment_len_max".into()));
        }
        if d.segment_len_max > self.model.vocab_size - Vocab::reserved_count() {
            return Err(Error::Config(
                "segments draw distinct tokens, so segment_len_max cannot exceed the content vocabulary".into(),
            ));
        }
        if d.qa_pairs == 0 {
            return Err(Error::Config("qa_pairs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&d.qa_two_hop_fraction) {
            return Err(Error::Config("qa_two_hop_fraction must lie in [0, 1]".into()));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.grad_accum == 0 || t.log_every == 0 {
            return Err(Error::Config(
                "batch_size, grad_accum and log_every must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&t.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Parses a config file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Config::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines; `#` starts a comment. Unknown keys are
    /// rejected.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "vocab_size" => m.vocab_size = parse(key, value)?,
            "d" => m.d = parse(key, value)?,
            "n_layers" => m.n_layers = parse(key, value)?,
            "n_heads" => m.n_heads = parse(key, value)?,
            "ffn_mult" => m.ffn_mult = parse(key, value)?,
            "max_seq_len" => m.max_seq_len = parse(key, value)?,
            "d_r" => m.d_r = parse(key, value)?,
            "lora_rank" => m.lora_rank = parse(key, value)?,
            "lora_alpha" => m.lora_alpha = parse(key, value)?,
            "lora_dropout" => m.lora_dropout = parse(key, value)?,
            "max_loops" => m.max_loops = parse(key, value)?,
            "gated_layers" => m.gated_layers = parse_layers(value, m.n_layers)?,
            "gate_hidden" => m.gate_hidden = parse(key, value)?,
            "seed" => m.seed = parse(key, value)?,
            "segments_min" => d.segments_min = parse(key, value)?,
            "segments_max" => d.segments_max = parse(key, value)?,
            "segment_len_min" => d.segment_len_min = parse(key, value)?,
            "segment_len_max" => d.segment_len_max = parse(key, value)?,
            "qa_pairs" => d.qa_pairs = parse(key, value)?,
            "qa_two_hop_fraction" => d.qa_two_hop_fraction = parse(key, value)?,
            "train_examples" => d.train_examples = parse(key, value)?,
            "eval_examples" => d.eval_examples = parse(key, value)?,
            "base_steps" => t.base_steps = parse(key, value)?,
            "base_learning_rate" => t.base_learning_rate = parse(key, value)?,
            "stage1_steps" => t.stage1_steps = parse(key, value)?,
            "stage1_learning_rate" => t.stage1_learning_rate = parse(key, value)?,
            "stage2_steps" => t.stage2_steps = parse(key, value)?,
            "stage2_learning_rate" => t.stage2_learning_rate = parse(key, value)?,
            "stage3_steps" => t.stage3_steps = parse(key, value)?,
            "stage3_learning_rate" => t.stage3_learning_rate = parse(key, value)?,
            "warmup_ratio" => t.warmup_ratio = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "grad_accum" => t.grad_accum = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "log_every" => t.log_every = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key in file syntax; parsing the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let d = &self.data;
        let t = &self.train;
        let layers = if m.gated_layers.is_empty() {
            "none".to_string()
        } else {
            m.gated_layers
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("vocab_size", m.vocab_size.to_string());
        kv("d", m.d.to_string());
        kv("n_layers", m.n_layers.to_string());
        kv("n_heads", m.n_heads.to_string());
        kv("ffn_mult", m.ffn_mult.to_string());
        kv("max_seq_len", m.max_seq_len.to_string());
        kv("d_r", m.d_r.to_string());
        kv("lora_rank", m.lora_rank.to_string());
        kv("lora_alpha", m.lora_alpha.to_string());
        kv("lora_dropout", m.lora_dropout.to_string());
        kv("max_loops", m.max_loops.to_string());
        kv("gated_layers", layers);
        kv("gate_hidden", m.gate_hidden.to_string());
        kv("seed", m.seed.to_string());
        kv("segments_min", d.segments_min.to_string());
        kv("segments_max", d.segments_max.to_string());
        kv("segment_len_min", d.segment_len_min.to_string());
        kv("segment_len_max", d.segment_len_max.to_string());
        kv("qa_pairs", d.qa_pairs.to_string());
        kv("qa_two_hop_fraction", d.qa_two_hop_fraction.to_string());
        kv("train_examples", d.train_examples.to_string());
        kv("eval_examples", d.eval_examples.to_string());
        kv("base_steps", t.base_steps.to_string());
        kv("base_learning_rate", t.base_learning_rate.to_string());
        kv("stage1_steps", t.stage1_steps.to_string());
        kv("stage1_learning_rate", t.stage1_learning_rate.to_string());
        kv("stage2_steps", t.stage2_steps.to_string());
        kv("stage2_learning_rate", t.stage2_learning_rate.to_string());
        kv("stage3_steps", t.stage3_steps.to_string());
        kv("stage3_learning_rate", t.stage3_learning_rate.to_string());
        kv("warmup_ratio", t.warmup_ratio.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("grad_accum", t.grad_accum.to_string());
        kv("clip_norm", t.clip_norm.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("log_every", t.log_every.to_string());
        s
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

/// `all`, `none`, or a comma-separated list of layer indices.
fn parse_layers(value: &str, n_layers: usize) -> Result<BTreeSet<usize>> {
    match value {
        "all" => Ok((0..n_layers).collect()),
        "none" | "" => Ok(BTreeSet::new()),
        list => list
            .split(',')
            .map(|p| parse::<usize>("gated_layers", p.trim()))
            .collect(),
    }
}
