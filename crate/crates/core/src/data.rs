//! Seeded synthetic corpora: reconstruction and key-value lookup.

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::template::{QA_TEMPLATE, RECONSTRUCTION_TEMPLATES};
use crate::vocab::Vocab;

/// Named corpora of one run; each draws from its own seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    BaseReconstruction,
    BaseQa,
    Stage1,
    Stage2,
    Stage3,
    EvalReconstruction,
    EvalQa,
}

pub fn split_seed(seed: u64, split: Split) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(split as u64 + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Reconstruction,
    Qa,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub kind: Kind,
    pub segments: Vec<Vec<usize>>,
    pub question: Vec<usize>,
    pub target: Vec<usize>,
    /// Unexpanded template text.
    pub template: String,
    /// Two-hop lookups route through a bridge key.
    pub two_hop: bool,
}

impl Example {
    pub fn source_token_count(&self) -> usize {
        self.segments.iter().map(Vec::len).sum()
    }
}

/// `k` distinct content ids from `range`, ascending.
fn sorted_subset(rng: &mut ChaCha8Rng, vocab: &Vocab, range: std::ops::Range<usize>, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = range.collect();
    let (picked, _) = pool.partial_shuffle(rng, k);
    let mut ids: Vec<usize> = picked.iter().map(|&i| vocab.content(i)).collect();
    ids.sort_unstable();
    ids
}

/// Segments are random subsets of the content vocabulary written in
/// ascending order; the target is their concatenation.
pub fn gen_reconstruction_corpus(cfg: &DataConfig, vocab: &Vocab, count: usize, seed: u64) -> Result<Vec<Example>> {
    if count == 0 {
        return Err(Error::contract("corpus size must be positive"));
    }
    let n_content = vocab.content_count();
    if cfg.segment_len_max > n_content {
        return Err(Error::Config("segment_len_max exceeds the content vocabulary".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let m = rng.random_range(cfg.segments_min..=cfg.segments_max);
        let segments: Vec<Vec<usize>> = (0..m)
            .map(|_| {
                let len = rng.random_range(cfg.segment_len_min..=cfg.segment_len_max);
                sorted_subset(&mut rng, vocab, 0..n_content, len)
            })
            .collect();
        let template = RECONSTRUCTION_TEMPLATES[rng.random_range(0..RECONSTRUCTION_TEMPLATES.len())];
        out.push(Example {
            kind: Kind::Reconstruction,
            target: segments.concat(),
            segments,
            question: Vec::new(),
            template: template.to_string(),
            two_hop: false,
        });
    }
    Ok(out)
}

/// Content-id ranges for keys, bridge keys and values.
pub fn qa_ranges(vocab: &Vocab) -> [std::ops::Range<usize>; 3] {
    let n = vocab.content_count();
    let a = n / 3;
    let b = 2 * n / 3;
    [0..a, a..b, b..n]
}

/// One `key value` pair per segment. The question names a key and the target
/// is its value; the remaining pairs are distractors. Two-hop examples chain
/// `key bridge` and `bridge value` across two segments.
pub fn gen_qa_corpus(cfg: &DataConfig, vocab: &Vocab, count: usize, seed: u64) -> Result<Vec<Example>> {
    if count == 0 {
        return Err(Error::contract("corpus size must be positive"));
    }
    let [keys, bridges, values] = qa_ranges(vocab);
    let pairs = cfg.qa_pairs;
    if pairs > keys.len() || pairs > bridges.len() || pairs > values.len() {
        return Err(Error::Config("qa_pairs exceeds the key range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let two_hop = pairs >= 2 && rng.random::<f32>() < cfg.qa_two_hop_fraction;
        let mut k = shuffled(&mut rng, vocab, keys.clone(), pairs);
        let v = shuffled(&mut rng, vocab, values.clone(), pairs);
        let (mut segments, question, target) = if two_hop {
            // pair 0 is the chain; the others are one-hop distractors
            let b = shuffled(&mut rng, vocab, bridges.clone(), 1)[0];
            let mut segs = vec![vec![k[0], b], vec![b, v[0]]];
            for i in 1..pairs - 1 {
                segs.push(vec![k[i], v[i]]);
            }
            (segs, vec![k[0]], vec![v[0]])
        } else {
            k.truncate(pairs);
            let segs: Vec<Vec<usize>> = k.iter().zip(&v).map(|(&a, &b)| vec![a, b]).collect();
            let q = rng.random_range(0..pairs);
            (segs, vec![k[q]], vec![v[q]])
        };
        segments.shuffle(&mut rng);
        out.push(Example {
            kind: Kind::Qa,
            segments,
            question,
            target,
            template: QA_TEMPLATE.to_string(),
            two_hop,
        });
    }
    Ok(out)
}

fn shuffled(rng: &mut ChaCha8Rng, vocab: &Vocab, range: std::ops::Range<usize>, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = range.collect();
    let (picked, _) = pool.partial_shuffle(rng, k);
    picked.iter().map(|&i| vocab.content(i)).collect()
}

/// Text form used by `gen-data`: one example per line,
/// `kind | seg ; seg | question | target | template`.
pub fn render_example(vocab: &Vocab, ex: &Example) -> Result<String> {
    let segs: Result<Vec<String>> = ex.segments.iter().map(|s| vocab.decode(s)).collect();
    let kind = match (ex.kind, ex.two_hop) {
        (Kind::Reconstruction, _) => "reconstruction",
        (Kind::Qa, false) => "qa",
        (Kind::Qa, true) => "qa2",
    };
    Ok(format!(
        "{kind} | {} | {} | {} | {}",
        segs?.join(" ; "),
        vocab.decode(&ex.question)?,
        vocab.decode(&ex.target)?,
        ex.template
    ))
}
