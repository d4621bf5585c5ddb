//! Decoder-only language model with tied input/output embeddings.

use vitp_autodiff::{Element, Graph, Tensor, Var};

use crate::block::{Block, LayerNorm, INIT_STD};
use crate::error::{Result, VitpError};
use crate::params::{Bound, Declarer, Init, ParamId, ParamStore};
use crate::tokenizer::EOS;

#[derive(Clone, Debug, PartialEq)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Size of the positional table; also bounds the row count of any sequence.
    pub max_sequence_len: usize,
    /// First text position id; image rows use ids below it.
    pub image_slots: usize,
    pub mlp_ratio: usize,
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VitpError::Config(m));
        if self.heads == 0 || self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return bad(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.depth == 0 {
            return bad("lm depth must be at least 1".into());
        }
        if self.vocab_size <= crate::tokenizer::IMG {
            return bad("vocabulary must hold the special tokens".into());
        }
        if self.image_slots >= self.max_sequence_len {
            return bad(format!(
                "max_sequence_len {} leaves no room after {} image slots",
                self.max_sequence_len, self.image_slots
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be at least 1".into());
        }
        Ok(())
    }

    pub fn max_text_len(&self) -> usize {
        self.max_sequence_len - self.image_slots
    }
}

/// Rows ready for the decoder: embeddings with position terms already added.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceEmbedding<T> {
    pub rows: Tensor<T>,
    pub targets: Vec<Option<usize>>,
    pub positions: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct LanguageDecoder {
    cfg: LmConfig,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln: LayerNorm,
}

impl LanguageDecoder {
    pub fn declare<T: Element>(cfg: &LmConfig, d: &mut Declarer<T>) -> Result<Self> {
        cfg.validate()?;
        let dim = cfg.model_dim;
        let tok = d.param("lm.tok_emb", &[cfg.vocab_size, dim], Init::TruncNormal(INIT_STD))?;
        let pos = d.param("lm.pos_emb", &[cfg.max_sequence_len, dim], Init::TruncNormal(INIT_STD))?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::declare(d, &format!("lm.block{i}"), dim, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<_>>()?;
        let ln = LayerNorm::declare(d, "lm.ln", dim)?;
        Ok(LanguageDecoder {
            cfg: cfg.clone(),
            tok,
            pos,
            blocks,
            ln,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    pub fn token_table(&self) -> ParamId {
        self.tok
    }

    pub fn position_table(&self) -> ParamId {
        self.pos
    }

    pub fn final_norm(&self) -> LayerNorm {
        self.ln
    }

    /// Token embedding plus positional term for a text stream.
    pub fn embed_text<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        ids: &[usize],
        positions: &[usize],
    ) -> Result<Var> {
        let e = g.embedding(p[self.tok], ids)?;
        let pe = g.embedding(p[self.pos], positions)?;
        Ok(g.add(e, pe)?)
    }

    /// Causal decoder over stacked sequences; returns `[rows, V]` logits.
    pub fn forward_rows<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        rows: Var,
        segments: &[usize],
    ) -> Result<Var> {
        if let Some(&len) = segments.iter().max() {
            if len > self.cfg.max_sequence_len {
                return Err(VitpError::SequenceTooLong {
                    len,
                    max: self.cfg.max_sequence_len,
                });
            }
        }
        let mut x = rows;
        for blk in &self.blocks {
            x = blk.forward(g, p, x, segments, true)?;
        }
        let x = self.ln.forward(g, p, x)?;
        Ok(g.matmul_bt(x, p[self.tok])?)
    }

    pub fn forward_logits<T: Element>(
        &self,
        store: &ParamStore<T>,
        seq: &SequenceEmbedding<T>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let rows = g.constant(seq.rows.clone());
        let out = self.forward_rows(&mut g, &p, rows, &[seq.rows.rows()])?;
        Ok(g.value(out).clone())
    }

    /// Greedy decoding from `prefix`; the output includes the `<eos>` if reached.
    pub fn generate_greedy<T: Element>(
        &self,
        store: &ParamStore<T>,
        prefix: &SequenceEmbedding<T>,
        max_new: usize,
    ) -> Result<Vec<usize>> {
        if max_new == 0 {
            return Err(VitpError::Config("max_new must be at least 1".into()));
        }
        let dim = self.cfg.model_dim;
        let mut rows = prefix.rows.data().to_vec();
        let mut next_pos = prefix.positions.last().map_or(self.cfg.image_slots, |&p| p + 1);
        let tok = store.get(self.tok);
        let pos = store.get(self.pos);
        let mut out = Vec::new();
        for _ in 0..max_new {
            let seq = SequenceEmbedding {
                rows: Tensor::from_vec2(rows.len() / dim, dim, rows.clone())?,
                targets: Vec::new(),
                positions: Vec::new(),
            };
            let logits = self.forward_logits(store, &seq)?;
            let last = logits.row(logits.rows() - 1);
            let next = argmax(last);
            out.push(next);
            if next == EOS {
                break;
            }
            if next_pos >= self.cfg.max_sequence_len {
                break;
            }
            rows.extend(tok.row(next).iter().zip(pos.row(next_pos)).map(|(&a, &b)| a + b));
            next_pos += 1;
        }
        Ok(out)
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: Element>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
