//! Toy context encoder, projector, and assembly of the mixed input sequence.

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::template::{Piece, Template};
use crate::transformer::embed_tokens;
use crate::vocab::Vocab;

/// `m` pooled segment embeddings of width `d_r`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedContext {
    pub e: Tensor,
    pub m: usize,
    pub source_token_count: usize,
}

impl CompressedContext {
    pub fn compression_ratio(&self) -> f64 {
        self.source_token_count as f64 / self.m as f64
    }
}

/// Mean of codebook rows per segment. Ids are summed in sorted order so the
/// result is exactly invariant to token order within a segment.
pub fn encode_context(codebook: &Tensor, segments: &[Vec<usize>]) -> Result<CompressedContext> {
    if segments.is_empty() {
        return Err(Error::Segmentation("context has no segments".into()));
    }
    let (rows, d_r) = codebook.matrix_dims()?;
    let mut data = Vec::with_capacity(segments.len() * d_r);
    let mut total = 0;
    for (j, seg) in segments.iter().enumerate() {
        if seg.is_empty() {
            return Err(Error::Segmentation(format!("segment {j} is empty")));
        }
        let mut ids = seg.clone();
        ids.sort_unstable();
        let mut acc = vec![0.0f32; d_r];
        for &id in &ids {
            if id >= rows {
                return Err(Error::Vocabulary(format!("token id {id} outside codebook of {rows}")));
            }
            for (a, v) in acc.iter_mut().zip(codebook.row(id)) {
                *a += v;
            }
        }
        let inv = 1.0 / ids.len() as f32;
        data.extend(acc.iter().map(|a| a * inv));
        total += seg.len();
    }
    Ok(CompressedContext {
        e: Tensor::new(vec![segments.len(), d_r], data)?,
        m: segments.len(),
        source_token_count: total,
    })
}

/// `silu(E W1 + b1) W2 + b2`, row-wise.
pub fn project(tape: &mut Tape, bound: &mut Bound, ctx: &CompressedContext) -> Result<Var> {
    let e = tape.leaf(&ctx.e)?;
    project_var(tape, bound, e)
}

pub fn project_var(tape: &mut Tape, bound: &mut Bound, e: Var) -> Result<Var> {
    let w1 = bound.var(tape, "proj.w1")?;
    let (d_r, _) = tape.dims(w1);
    let (_, c) = tape.dims(e);
    if c != d_r {
        return Err(Error::dim("project", &[tape.dims(e).0, c], &[d_r]));
    }
    let b1 = bound.var(tape, "proj.b1")?;
    let w2 = bound.var(tape, "proj.w2")?;
    let b2 = bound.var(tape, "proj.b2")?;
    let h = tape.matmul(e, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.silu(h);
    let o = tape.matmul(h, w2)?;
    tape.add_row(o, b2)
}

/// What fills the `[B]` markers of a template.
#[derive(Clone, Copy, Debug)]
pub enum SlotFill<'a> {
    /// One placeholder token per slot.
    Placeholder,
    /// The raw tokens of segment `j` in place of slot `j`.
    Raw(&'a [Vec<usize>]),
}

/// Token sequence with slot and target bookkeeping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub ids: Vec<usize>,
    /// Strictly increasing slot indices into `ids`.
    pub slots: Vec<usize>,
    /// Index of the first target token; equals `ids.len()` when no target.
    pub target_start: usize,
}

impl Sequence {
    /// Next-token targets aligned with `ids`: row `i` predicts `ids[i + 1]`
    /// for target tokens only.
    pub fn loss_targets(&self) -> Vec<Option<usize>> {
        let n = self.ids.len();
        (0..n)
            .map(|i| {
                if i + 1 >= self.target_start && i + 1 < n {
                    Some(self.ids[i + 1])
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn target(&self) -> &[usize] {
        &self.ids[self.target_start..]
    }
}

/// Lays out `<bos>` and the template. A non-empty `target` is followed by
/// `<eos>`; an empty one leaves the sequence open for generation.
pub fn build_sequence(
    vocab: &Vocab,
    template: &Template,
    fill: SlotFill,
    question: &[usize],
    target: &[usize],
) -> Result<Sequence> {
    if let SlotFill::Raw(segs) = fill {
        if segs.len() != template.slot_count() {
            return Err(Error::Template(format!(
                "{} segments for {} placeholders",
                segs.len(),
                template.slot_count()
            )));
        }
    }
    let mut ids = vec![vocab.bos()];
    let mut slots = Vec::new();
    let mut slot_j = 0;
    let mut target_start = None;
    for piece in template.pieces() {
        match piece {
            Piece::Word(w) => ids.push(vocab.id(w)?),
            Piece::Slot => {
                match fill {
                    SlotFill::Placeholder => {
                        slots.push(ids.len());
                        ids.push(vocab.slot());
                    }
                    SlotFill::Raw(segs) => ids.extend_from_slice(&segs[slot_j]),
                }
                slot_j += 1;
            }
            Piece::Question => ids.extend_from_slice(question),
            Piece::Target => {
                target_start = Some(ids.len());
                if !target.is_empty() {
                    ids.extend_from_slice(target);
                    ids.push(vocab.eos());
                }
            }
        }
    }
    let target_start = target_start.ok_or_else(|| Error::Template("missing [T] marker".into()))?;
    Ok(Sequence {
        ids,
        slots,
        target_start,
    })
}

/// A sequence together with its initial hidden states on a tape.
#[derive(Clone, Debug)]
pub struct AssembledInput {
    pub seq: Sequence,
    pub h0: Var,
}

/// Initial states: projected slot rows at slot positions, token embeddings
/// elsewhere.
pub fn assemble(
    tape: &mut Tape,
    bound: &mut Bound,
    cfg: &ModelConfig,
    seq: Sequence,
    ctx: &CompressedContext,
) -> Result<AssembledInput> {
    if seq.slots.len() != ctx.m {
        return Err(Error::Template(format!(
            "template has {} placeholders for {} context slots",
            seq.slots.len(),
            ctx.m
        )));
    }
    if seq.ids.len() > cfg.max_seq_len {
        return Err(Error::Capacity {
            len: seq.ids.len(),
            max: cfg.max_seq_len,
        });
    }
    let emb = embed_tokens(tape, bound, cfg, &seq.ids)?;
    let h0 = if ctx.m == 0 {
        emb
    } else {
        let e_tilde = project(tape, bound, ctx)?;
        tape.scatter_rows(emb, &seq.slots, e_tilde)?
    };
    Ok(AssembledInput { seq, h0 })
}

pub fn codebook(params: &ParamStore) -> Result<&Tensor> {
    params.get("enc.codebook")
}
