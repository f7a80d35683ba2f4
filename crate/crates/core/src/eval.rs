//! Metrics, gate statistics and report files.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::path::Path;

use rayon::prelude::*;

use crate::data::{Example, Kind};
use crate::error::{Error, Result};
use crate::gate::GateTrace;
use crate::model::{ArcModel, Variant};
use crate::train::with_pool;

/// Lowercase words with punctuation removed and whitespace collapsed.
/// Articles are kept: "a" is an ordinary token here.
pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect::<String>()
        .to_lowercase();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// 1 when the normalized gold answer occurs in the normalized prediction on
/// word boundaries.
pub fn non_strict_em(prediction: &str, gold: &str) -> f64 {
    let p = normalize(prediction);
    let g = normalize(gold);
    let hit = if g.is_empty() {
        p.is_empty()
    } else {
        p.windows(g.len()).any(|w| w == g.as_slice())
    };
    if hit {
        1.0
    } else {
        0.0
    }
}

pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let p = normalize(prediction);
    let g = normalize(gold);
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &g {
        *counts.entry(w).or_default() += 1;
    }
    let mut common = 0usize;
    for w in &p {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Summed NLL over rows with a target, and the number of such rows.
pub fn target_nll(logits: &[f32], vocab: usize, targets: &[Option<usize>]) -> (f64, usize) {
    let mut total = 0.0f64;
    let mut n = 0usize;
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let row = &logits[i * vocab..(i + 1) * vocab];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = max as f64 + row.iter().map(|&x| ((x - max) as f64).exp()).sum::<f64>().ln();
        total += lse - row[t] as f64;
        n += 1;
    }
    (total, n)
}

pub fn perplexity_from(total_nll: f64, tokens: usize) -> Result<f64> {
    if tokens == 0 {
        return Err(Error::contract("perplexity over zero target tokens"));
    }
    Ok((total_nll / tokens as f64).exp())
}

/// Token-weighted perplexity of `variant` over reconstruction examples.
pub fn perplexity(model: &ArcModel, examples: &[Example], variant: Variant) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::contract("perplexity over an empty example set"));
    }
    if examples.iter().any(|e| e.kind != Kind::Reconstruction) {
        return Err(Error::contract("perplexity expects reconstruction examples"));
    }
    let parts: Vec<(f64, usize)> = with_pool(|| {
        examples
            .par_iter()
            .map(|ex| model.example_nll(ex, variant))
            .collect::<Result<Vec<_>>>()
    })?;
    let total: f64 = parts.iter().map(|p| p.0).sum();
    let n: usize = parts.iter().map(|p| p.1).sum();
    perplexity_from(total, n)
}

/// Mean loop count per gated layer over every slot of every trace.
pub fn gate_stats(traces: &[GateTrace]) -> Result<BTreeMap<usize, f64>> {
    let Some(first) = traces.first() else {
        return Ok(BTreeMap::new());
    };
    let mut sums: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for t in traces {
        if t.max_loops != first.max_loops {
            return Err(Error::contract("traces disagree on max_loops"));
        }
        for (l, counts) in &t.layers {
            let e = sums.entry(*l).or_default();
            e.0 += counts.iter().sum::<usize>();
            e.1 += counts.len();
        }
    }
    Ok(sums
        .into_iter()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(l, (s, n))| (l, s as f64 / n as f64))
        .collect())
}

/// One QA prediction.
#[derive(Clone, Debug)]
pub struct QaResult {
    pub id: usize,
    pub prediction: String,
    pub gold: String,
    pub em: f64,
    pub f1: f64,
    /// Generated answer equals the gold answer exactly.
    pub exact: bool,
    pub trace: GateTrace,
}

#[derive(Clone, Debug)]
pub struct QaSummary {
    pub results: Vec<QaResult>,
    pub em: f64,
    pub f1: f64,
    pub accuracy: f64,
}

pub fn evaluate_qa(model: &ArcModel, examples: &[Example], variant: Variant) -> Result<QaSummary> {
    if examples.is_empty() {
        return Err(Error::contract("QA evaluation over an empty example set"));
    }
    let results: Vec<QaResult> = with_pool(|| {
        examples
            .par_iter()
            .enumerate()
            .map(|(id, ex)| {
                let (out, trace) = model.generate(ex, variant, ex.target.len() + 1)?;
                let prediction = model.vocab.decode(&out)?;
                let gold = model.vocab.decode(&ex.target)?;
                Ok(QaResult {
                    id,
                    em: non_strict_em(&prediction, &gold),
                    f1: token_f1(&prediction, &gold),
                    exact: out == ex.target,
                    prediction,
                    gold,
                    trace,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let n = results.len() as f64;
    Ok(QaSummary {
        em: results.iter().map(|r| r.em).sum::<f64>() / n,
        f1: results.iter().map(|r| r.f1).sum::<f64>() / n,
        accuracy: results.iter().filter(|r| r.exact).count() as f64 / n,
        results,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bucket {
    pub n: usize,
    /// System accuracy inside the bucket; 0 for an empty bucket.
    pub accuracy: f64,
}

/// Keyed by `TT`, `TF`, `FT`, `FF`: naive correct, then rag correct.
#[derive(Clone, Debug, PartialEq)]
pub struct Buckets(pub BTreeMap<&'static str, Bucket>);

pub fn four_way_buckets(naive: &[(usize, bool)], rag: &[(usize, bool)], system: &[(usize, bool)]) -> Result<Buckets> {
    if naive.len() != rag.len() || naive.len() != system.len() {
        return Err(Error::contract("result sets differ in length"));
    }
    let mut tally: BTreeMap<&'static str, (usize, usize)> =
        ["TT", "TF", "FT", "FF"].into_iter().map(|k| (k, (0, 0))).collect();
    for ((n, r), s) in naive.iter().zip(rag).zip(system) {
        if n.0 != r.0 || n.0 != s.0 {
            return Err(Error::contract(format!(
                "example ids {} / {} / {} are not aligned",
                n.0, r.0, s.0
            )));
        }
        let key = match (n.1, r.1) {
            (true, true) => "TT",
            (true, false) => "TF",
            (false, true) => "FT",
            (false, false) => "FF",
        };
        let e = tally.get_mut(key).expect("all keys present");
        e.0 += 1;
        e.1 += usize::from(s.1);
    }
    Ok(Buckets(
        tally
            .into_iter()
            .map(|(k, (n, c))| {
                let accuracy = if n == 0 { 0.0 } else { c as f64 / n as f64 };
                (k, Bucket { n, accuracy })
            })
            .collect(),
    ))
}

impl Buckets {
    pub fn label(&self, key: &str) -> Option<String> {
        self.0.get(key).map(|b| format!("{key} (n={})", b.n))
    }
}

impl fmt::Display for Buckets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for key in ["TT", "TF", "FT", "FF"] {
            let b = self.0[key];
            writeln!(f, "{:<12} {:.4}", format!("{key} (n={})", b.n), b.accuracy)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub n_examples: usize,
    pub compression_ratio: f64,
    /// Perplexity per variant name.
    pub ppl: BTreeMap<String, f64>,
    pub em: BTreeMap<String, f64>,
    pub f1: BTreeMap<String, f64>,
    pub accuracy: BTreeMap<String, f64>,
    pub loops: BTreeMap<usize, f64>,
    pub buckets: Option<Buckets>,
}

impl EvalReport {
    /// Flat `key = value` lines.
    pub fn to_flat(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_examples = {}", self.n_examples);
        let _ = writeln!(s, "compression_ratio = {:.4}", self.compression_ratio);
        for (name, map) in [
            ("ppl", &self.ppl),
            ("em", &self.em),
            ("f1", &self.f1),
            ("accuracy", &self.accuracy),
        ] {
            for (k, v) in map {
                let _ = writeln!(s, "{name}.{k} = {v:.6}");
            }
        }
        for (l, v) in &self.loops {
            let _ = writeln!(s, "loops.layer{l} = {v:.6}");
        }
        if let Some(b) = &self.buckets {
            for (k, v) in &b.0 {
                let _ = writeln!(s, "bucket.{k}.n = {}", v.n);
                let _ = writeln!(s, "bucket.{k}.accuracy = {:.6}", v.accuracy);
            }
        }
        s
    }

    /// Human-readable tables.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "examples: {}   compression: x{:.2}",
            self.n_examples, self.compression_ratio
        );
        if !self.ppl.is_empty() {
            let _ = writeln!(s, "\n{:<14} {:>10}", "variant", "ppl");
            for (k, v) in &self.ppl {
                let _ = writeln!(s, "{k:<14} {v:>10.4}");
            }
        }
        if !self.em.is_empty() {
            let _ = writeln!(s, "\n{:<14} {:>8} {:>8} {:>8}", "variant", "em", "f1", "acc");
            for (k, em) in &self.em {
                let f1 = self.f1.get(k).copied().unwrap_or(f64::NAN);
                let acc = self.accuracy.get(k).copied().unwrap_or(f64::NAN);
                let _ = writeln!(s, "{k:<14} {em:>8.4} {f1:>8.4} {acc:>8.4}");
            }
        }
        if !self.loops.is_empty() {
            let _ = writeln!(s, "\n{:<8} {:>10}", "layer", "mean loops");
            for (l, v) in &self.loops {
                let _ = writeln!(s, "{l:<8} {v:>10.4}");
            }
        }
        if let Some(b) = &self.buckets {
            let _ = writeln!(s, "\nbucket       system acc\n{b}");
        }
        s
    }

    /// Writes `report.txt`, `summary.txt`, `loops.tsv` and `ppl.tsv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), self.to_flat())?;
        std::fs::write(dir.join("summary.txt"), self.summary())?;
        let mut loops = String::from("layer\tmean_loops\n");
        for (l, v) in &self.loops {
            let _ = writeln!(loops, "{l}\t{v:.6}");
        }
        std::fs::write(dir.join("loops.tsv"), loops)?;
        let mut ppl = String::from("variant\tppl\n");
        for (k, v) in &self.ppl {
            let _ = writeln!(ppl, "{k}\t{v:.6}");
        }
        std::fs::write(dir.join("ppl.tsv"), ppl)?;
        Ok(())
    }
}
