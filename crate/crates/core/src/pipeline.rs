//! Vision-language model: projection, positional terms, token dropping,
//! sequence assembly and the instruction-following losses.

use rand::Rng;
use vitp_autodiff::{Element, Graph, Tensor, Var};

use crate::block::Linear;
use crate::decoder::{LanguageDecoder, LmConfig, SequenceEmbedding};
use crate::error::{Result, VitpError};
use crate::image::Image;
use crate::params::{Bound, Declarer, ParamStore};
use crate::rng::{self, Purpose};
use crate::tokenizer::{Vocabulary, BOS, EOS};
use crate::vision::{VisionEncoder, VisualTokens, VitConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedTokens<T> {
    pub tokens: Tensor<T>,
    pub positions: Vec<usize>,
}

/// Two-layer ReLU feed-forward map from encoder width to decoder width.
#[derive(Clone, Debug)]
pub struct Projector {
    fc1: Linear,
    fc2: Linear,
}

impl Projector {
    pub fn declare<T: Element>(d: &mut Declarer<T>, inp: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Projector {
            fc1: Linear::declare(d, "proj.fc1", inp, hidden)?,
            fc2: Linear::declare(d, "proj.fc2", hidden, out)?,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.relu(h)?;
        self.fc2.forward(g, p, h)
    }

    pub fn project<T: Element>(&self, store: &ParamStore<T>, v: &VisualTokens<T>) -> Result<ProjectedTokens<T>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let x = g.constant(v.tokens.clone());
        let y = self.forward(&mut g, &p, x)?;
        Ok(ProjectedTokens {
            tokens: g.value(y).clone(),
            positions: v.positions.clone(),
        })
    }
}

/// `rows[k] + pe_table[position_ids[k]]`.
pub fn add_positional<T: Element>(rows: &Tensor<T>, position_ids: &[usize], pe_table: &Tensor<T>) -> Result<Tensor<T>> {
    if position_ids.len() != rows.rows() {
        return Err(VitpError::Config(format!(
            "{} position ids for {} rows",
            position_ids.len(),
            rows.rows()
        )));
    }
    let mut g = Graph::new();
    let r = g.constant(rows.clone());
    let t = g.constant(pe_table.clone());
    let pe = g.embedding(t, position_ids)?;
    let out = g.add(r, pe)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VrlConfig {
    pub drop_ratio: f64,
    pub enabled: bool,
    /// Root of the per-(step, example) drop streams.
    pub stream: u64,
}

impl VrlConfig {
    pub fn new(drop_ratio: f64, stream: u64) -> Result<Self> {
        let c = VrlConfig {
            drop_ratio,
            enabled: true,
            stream,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn disabled() -> Self {
        VrlConfig {
            drop_ratio: 0.0,
            enabled: false,
            stream: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_ratio) {
            return Err(VitpError::DropRatio(self.drop_ratio));
        }
        Ok(())
    }

    pub fn effective_ratio(&self) -> f64 {
        if self.enabled {
            self.drop_ratio
        } else {
            0.0
        }
    }
}

/// Number of tokens kept out of `n` at drop ratio `r`: `ceil((1 - r) n)`, at least 1.
///
/// A relative slack of 1e-9 absorbs rounding in `(1 - r) * n`, so that for
/// instance `r = 0.7, n = 10` keeps 3 rather than 4.
pub fn kept_count(n: usize, r: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&r) {
        return Err(VitpError::DropRatio(r));
    }
    if n == 0 {
        return Err(VitpError::Config("cannot drop from an empty token set".into()));
    }
    let exact = (1.0 - r) * n as f64;
    let k = (exact - 1e-9 * (n as f64).max(1.0)).ceil() as usize;
    Ok(k.clamp(1, n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DropPlan {
    pub kept: Vec<usize>,
    pub original_len: usize,
    pub ratio: f64,
    /// Raw draw order before sorting.
    pub draws: Vec<usize>,
}

impl DropPlan {
    pub fn identity(n: usize) -> Self {
        DropPlan {
            kept: (0..n).collect(),
            original_len: n,
            ratio: 0.0,
            draws: Vec::new(),
        }
    }

    /// Uniform size-`kept_count(n, r)` subset, kept in original order.
    pub fn draw<R: Rng + ?Sized>(n: usize, r: f64, rng: &mut R) -> Result<Self> {
        let k = kept_count(n, r)?;
        let draws = rand::seq::index::sample(rng, n, k).into_vec();
        let mut kept = draws.clone();
        kept.sort_unstable();
        Ok(DropPlan {
            kept,
            original_len: n,
            ratio: r,
            draws,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.kept.len() == self.original_len
    }
}

pub fn vrl_drop<T: Element>(
    rows: &Tensor<T>,
    position_ids: &[usize],
    cfg: &VrlConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Vec<usize>, DropPlan)> {
    cfg.validate()?;
    let n = rows.rows();
    if position_ids.len() != n {
        return Err(VitpError::Config("position ids do not match rows".into()));
    }
    let plan = DropPlan::draw(n, cfg.effective_ratio(), rng)?;
    let d = rows.cols();
    let data: Vec<T> = plan.kept.iter().flat_map(|&k| rows.row(k).iter().copied()).collect();
    let kept_rows = Tensor::from_vec2(plan.kept.len(), d, data)?;
    let kept_pos = plan.kept.iter().map(|&k| position_ids[k]).collect();
    Ok((kept_rows, kept_pos, plan))
}

/// Token ids of `query <bos> response` with next-token targets on the response.
#[derive(Clone, Debug, PartialEq)]
pub struct TextStream {
    pub ids: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    pub prompt_len: usize,
}

impl TextStream {
    pub fn new(vocab: &Vocabulary, query: &str, response: &str) -> Result<Self> {
        let q = vocab.encode(query)?;
        let r = vocab.encode(response)?;
        Self::from_ids(&q, &r)
    }

    pub fn from_ids(query: &[usize], response: &[usize]) -> Result<Self> {
        if response.is_empty() {
            return Err(VitpError::Degenerate("empty response".into()));
        }
        let mut ids = query.to_vec();
        ids.push(BOS);
        ids.extend_from_slice(response);
        let mut labels = ids[1..].to_vec();
        labels.push(EOS);
        let supervised: Vec<bool> = (0..ids.len()).map(|i| i >= query.len()).collect();
        Self::from_labels(ids, &labels, &supervised, query.len())
    }

    /// Next-token `labels` for every row; only rows flagged in `supervised`
    /// become targets, the rest are ignored whatever their label.
    pub fn from_labels(ids: Vec<usize>, labels: &[usize], supervised: &[bool], prompt_len: usize) -> Result<Self> {
        if labels.len() != ids.len() || supervised.len() != ids.len() {
            return Err(VitpError::Config("labels and mask must match the token stream".into()));
        }
        let targets: Vec<Option<usize>> = labels.iter().zip(supervised).map(|(&l, &s)| s.then_some(l)).collect();
        if targets.iter().all(Option::is_none) {
            return Err(VitpError::Degenerate("no supervised rows".into()));
        }
        Ok(TextStream {
            ids,
            targets,
            prompt_len,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssembledSequence<T> {
    pub rows: Tensor<T>,
    pub targets: Vec<Option<usize>>,
    pub positions: Vec<usize>,
    pub image_rows: usize,
}

impl<T: Element> AssembledSequence<T> {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn into_embedding(self) -> SequenceEmbedding<T> {
        SequenceEmbedding {
            rows: self.rows,
            targets: self.targets,
            positions: self.positions,
        }
    }
}

/// `[image ; text]` with IGNORE targets on every image row.
pub fn assemble<T: Element>(
    img_rows: &Tensor<T>,
    img_pos: &[usize],
    text_rows: Option<&Tensor<T>>,
    text_pos: &[usize],
    text_targets: &[Option<usize>],
) -> Result<AssembledSequence<T>> {
    let text_rows = text_rows.ok_or_else(|| VitpError::Degenerate("empty text stream".into()))?;
    if img_rows.cols() != text_rows.cols() {
        return Err(VitpError::Config("image and text widths differ".into()));
    }
    if text_pos.len() != text_rows.rows() || text_targets.len() != text_rows.rows() || img_pos.len() != img_rows.rows() {
        return Err(VitpError::Config("stream metadata does not match row counts".into()));
    }
    if text_targets.iter().all(Option::is_none) {
        return Err(VitpError::Degenerate("no supervised response rows".into()));
    }
    let mut data = img_rows.data().to_vec();
    data.extend_from_slice(text_rows.data());
    let n = img_rows.rows();
    let mut targets = vec![None; n];
    targets.extend_from_slice(text_targets);
    let mut positions = img_pos.to_vec();
    positions.extend_from_slice(text_pos);
    Ok(AssembledSequence {
        rows: Tensor::from_vec2(n + text_rows.rows(), img_rows.cols(), data)?,
        targets,
        positions,
        image_rows: n,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VlmConfig {
    pub vit: VitConfig,
    pub projector_hidden: usize,
    pub lm: LmConfig,
}

impl VlmConfig {
    pub fn desk(vocab_size: usize) -> Self {
        let vit = VitConfig::default();
        let n = vit.num_tokens();
        VlmConfig {
            vit,
            projector_hidden: 128,
            lm: LmConfig {
                vocab_size,
                model_dim: 64,
                depth: 2,
                heads: 4,
                max_sequence_len: n + 80,
                image_slots: n,
                mlp_ratio: 4,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.lm.validate()?;
        if self.projector_hidden == 0 {
            return Err(VitpError::Config("projector_hidden must be positive".into()));
        }
        if self.lm.image_slots < self.vit.num_tokens() {
            return Err(VitpError::Config(format!(
                "image_slots {} smaller than the {} image tokens",
                self.lm.image_slots,
                self.vit.num_tokens()
            )));
        }
        Ok(())
    }
}

/// An instruction example after tokenization.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedExample {
    pub image: Image,
    pub text: TextStream,
}

#[derive(Clone, Debug)]
pub struct Vlm {
    cfg: VlmConfig,
    pub vit: VisionEncoder,
    pub projector: Projector,
    pub lm: LanguageDecoder,
}

impl Vlm {
    pub fn declare<T: Element>(cfg: &VlmConfig, d: &mut Declarer<T>) -> Result<Self> {
        cfg.validate()?;
        let vit = VisionEncoder::declare(&cfg.vit, d)?;
        let projector = Projector::declare(d, cfg.vit.embed_dim, cfg.projector_hidden, cfg.lm.model_dim)?;
        let lm = LanguageDecoder::declare(&cfg.lm, d)?;
        Ok(Vlm {
            cfg: cfg.clone(),
            vit,
            projector,
            lm,
        })
    }

    /// Fresh parameters drawn from the init stream of `seed`.
    pub fn init<T: Element>(cfg: &VlmConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, Purpose::Init, 0, 0);
        let m = Vlm::declare(cfg, &mut Declarer::create(&mut store, &mut r))?;
        Ok((m, store))
    }

    pub fn attach<T: Element>(cfg: &VlmConfig, store: &mut ParamStore<T>) -> Result<Self> {
        Vlm::declare(cfg, &mut Declarer::attach(store))
    }

    pub fn config(&self) -> &VlmConfig {
        &self.cfg
    }

    pub fn prepare(&self, vocab: &Vocabulary, image: Image, query: &str, response: &str) -> Result<PreparedExample> {
        let text = TextStream::new(vocab, query, response)?;
        if text.len() > self.cfg.lm.max_text_len() {
            return Err(VitpError::SequenceTooLong {
                len: text.len() + self.cfg.lm.image_slots,
                max: self.cfg.lm.max_sequence_len,
            });
        }
        Ok(PreparedExample { image, text })
    }

    /// Drop plans for one step; example `e` uses stream `(vrl.stream, step, e)`.
    pub fn draw_plans(&self, batch: usize, vrl: &VrlConfig, step: u64) -> Result<Vec<DropPlan>> {
        vrl.validate()?;
        let n = self.cfg.vit.num_tokens();
        (0..batch)
            .map(|e| {
                let mut r = rng::stream(vrl.stream, Purpose::Vrl, step, e as u64);
                DropPlan::draw(n, vrl.effective_ratio(), &mut r)
            })
            .collect()
    }

    /// Mean next-token loss over all supervised rows of the batch.
    ///
    /// Runs encode, project, add image positions, keep the rows of each plan,
    /// then appends the text rows and decodes causally.
    pub fn batch_loss<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        batch: &[PreparedExample],
        plans: &[DropPlan],
    ) -> Result<Var> {
        if batch.is_empty() || plans.len() != batch.len() {
            return Err(VitpError::Degenerate("batch and drop plans disagree".into()));
        }
        let n = self.cfg.vit.num_tokens();
        let images: Vec<&Image> = batch.iter().map(|e| &e.image).collect();
        let vis = self.vit.forward(g, p, &images)?;
        let proj = self.projector.forward(g, p, vis)?;
        let img_ids: Vec<usize> = (0..batch.len()).flat_map(|_| 0..n).collect();
        let pe = g.embedding(p[self.lm.position_table()], &img_ids)?;
        let img = g.add(proj, pe)?;

        let mut text_ids = Vec::new();
        let mut text_pos = Vec::new();
        for ex in batch {
            text_ids.extend_from_slice(&ex.text.ids);
            text_pos.extend((0..ex.text.len()).map(|t| self.cfg.lm.image_slots + t));
        }
        if text_pos.iter().any(|&q| q >= self.cfg.lm.max_sequence_len) {
            return Err(VitpError::SequenceTooLong {
                len: text_pos.iter().max().copied().unwrap_or(0) + 1,
                max: self.cfg.lm.max_sequence_len,
            });
        }
        let text = self.lm.embed_text(g, p, &text_ids, &text_pos)?;
        let all = g.concat_rows(&[img, text])?;

        let img_total = batch.len() * n;
        let mut order = Vec::new();
        let mut targets = Vec::new();
        let mut segments = Vec::new();
        let mut text_off = img_total;
        for (b, (ex, plan)) in batch.iter().zip(plans).enumerate() {
            if plan.original_len != n || plan.kept.iter().any(|&k| k >= n) {
                return Err(VitpError::Config("drop plan does not match the image grid".into()));
            }
            if ex.text.targets.iter().all(Option::is_none) {
                return Err(VitpError::Degenerate("example without response".into()));
            }
            order.extend(plan.kept.iter().map(|&k| b * n + k));
            targets.extend(std::iter::repeat_n(None, plan.kept.len()));
            order.extend(text_off..text_off + ex.text.len());
            targets.extend_from_slice(&ex.text.targets);
            text_off += ex.text.len();
            segments.push(plan.kept.len() + ex.text.len());
        }
        let seq = g.gather_rows(all, &order)?;
        let logits = self.lm.forward_rows(g, p, seq, &segments)?;
        Ok(g.cross_entropy(logits, &targets)?)
    }

    pub fn sft_loss<T: Element>(&self, store: &ParamStore<T>, batch: &[PreparedExample]) -> Result<T> {
        let plans = vec![DropPlan::identity(self.cfg.vit.num_tokens()); batch.len()];
        self.loss_with_plans(store, batch, &plans)
    }

    pub fn vrl_loss<T: Element>(
        &self,
        store: &ParamStore<T>,
        batch: &[PreparedExample],
        vrl: &VrlConfig,
        step: u64,
    ) -> Result<T> {
        let plans = self.draw_plans(batch.len(), vrl, step)?;
        self.loss_with_plans(store, batch, &plans)
    }

    pub fn loss_with_plans<T: Element>(
        &self,
        store: &ParamStore<T>,
        batch: &[PreparedExample],
        plans: &[DropPlan],
    ) -> Result<T> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let l = self.batch_loss(&mut g, &p, batch, plans)?;
        Ok(g.value(l).item())
    }

    /// Value-level assembly for one example (no dropping).
    pub fn assemble_example<T: Element>(
        &self,
        store: &ParamStore<T>,
        ex: &PreparedExample,
    ) -> Result<AssembledSequence<T>> {
        let vis = self.vit.encode(store, &ex.image)?;
        let proj = self.projector.project(store, &vis)?;
        let pe_table = store.get(self.lm.position_table());
        let img = add_positional(&proj.tokens, &proj.positions, pe_table)?;
        let text_pos: Vec<usize> = (0..ex.text.len()).map(|t| self.cfg.lm.image_slots + t).collect();
        let text = self.embed_text_value(store, &ex.text.ids, &text_pos)?;
        assemble(&img, &proj.positions, Some(&text), &text_pos, &ex.text.targets)
    }

    pub fn embed_text_value<T: Element>(&self, store: &ParamStore<T>, ids: &[usize], positions: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let v = self.lm.embed_text(&mut g, &p, ids, positions)?;
        Ok(g.value(v).clone())
    }

    /// Greedy answer to `query` about `image`, decoded to text (without `<eos>`).
    pub fn answer<T: Element>(
        &self,
        store: &ParamStore<T>,
        vocab: &Vocabulary,
        image: &Image,
        query: &str,
        max_new: usize,
    ) -> Result<String> {
        let vis = self.vit.encode(store, image)?;
        let proj = self.projector.project(store, &vis)?;
        let img = add_positional(&proj.tokens, &proj.positions, store.get(self.lm.position_table()))?;
        let mut ids = vocab.encode(query)?;
        ids.push(BOS);
        let pos: Vec<usize> = (0..ids.len()).map(|t| self.cfg.lm.image_slots + t).collect();
        let text = self.embed_text_value(store, &ids, &pos)?;
        let mut data = img.data().to_vec();
        data.extend_from_slice(text.data());
        let mut positions = proj.positions.clone();
        positions.extend_from_slice(&pos);
        let prefix = SequenceEmbedding {
            rows: Tensor::from_vec2(positions.len(), img.cols(), data)?,
            targets: Vec::new(),
            positions,
        };
        let mut out = self.lm.generate_greedy(store, &prefix, max_new)?;
        if out.last() == Some(&EOS) {
            out.pop();
        }
        vocab.decode(&out)
    }
}
