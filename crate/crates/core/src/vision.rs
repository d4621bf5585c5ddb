//! ViT backbone.

use vitp_autodiff::{Element, Graph, Tensor, Var};

use crate::block::{Block, LayerNorm, Linear, INIT_STD};
use crate::error::{Result, VitpError};
use crate::image::{patchify, Image};
use crate::params::{Bound, Declarer, Init, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub include_cls: bool,
    pub mlp_ratio: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            include_cls: true,
            mlp_ratio: 4,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VitpError::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.depth == 0 {
            return bad("vit depth must be at least 1".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be at least 1".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch-token count handed downstream (never includes CLS).
    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Encoder output: one row per patch, in grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualTokens<T> {
    pub tokens: Tensor<T>,
    pub positions: Vec<usize>,
    /// Whether a CLS token took part in the encoder (it is never in `tokens`).
    pub cls_used: bool,
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    cfg: VitConfig,
    patch: Linear,
    cls: Option<ParamId>,
    pos: ParamId,
    blocks: Vec<Block>,
    ln: LayerNorm,
}

impl VisionEncoder {
    pub fn declare<T: Element>(cfg: &VitConfig, d: &mut Declarer<T>) -> Result<Self> {
        cfg.validate()?;
        let dim = cfg.embed_dim;
        let patch = Linear::declare(d, "vit.patch", cfg.patch_dim(), dim)?;
        let cls = if cfg.include_cls {
            Some(d.param("vit.cls", &[1, dim], Init::TruncNormal(INIT_STD))?)
        } else {
            None
        };
        let slots = cfg.num_tokens() + usize::from(cfg.include_cls);
        let pos = d.param("vit.pos", &[slots, dim], Init::TruncNormal(INIT_STD))?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::declare(d, &format!("vit.block{i}"), dim, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<_>>()?;
        let ln = LayerNorm::declare(d, "vit.ln", dim)?;
        Ok(VisionEncoder {
            cfg: cfg.clone(),
            patch,
            cls,
            pos,
            blocks,
            ln,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    pub fn patch_weight(&self) -> ParamId {
        self.patch.w
    }

    fn check_images(&self, images: &[&Image]) -> Result<()> {
        if images.is_empty() {
            return Err(VitpError::Image("empty image batch".into()));
        }
        for img in images {
            if img.height() != self.cfg.image_size || img.width() != self.cfg.image_size {
                return Err(VitpError::Image(format!(
                    "expected {0}x{0} image, got {1}x{2}",
                    self.cfg.image_size,
                    img.height(),
                    img.width()
                )));
            }
        }
        Ok(())
    }

    /// Linear patch embedding before any positional term: `[B*N, D]`.
    pub fn patch_embed<T: Element>(&self, g: &mut Graph<T>, p: &Bound, images: &[&Image]) -> Result<Var> {
        self.check_images(images)?;
        let pd = self.cfg.patch_dim();
        let mut flat = Vec::with_capacity(images.len() * self.cfg.num_tokens() * pd);
        for img in images {
            flat.extend(patchify(img, self.cfg.patch_size)?.into_iter().map(|v| T::from_f64_lossy(f64::from(v))));
        }
        let rows = flat.len() / pd;
        let x = g.constant(Tensor::from_vec2(rows, pd, flat)?);
        self.patch.forward(g, p, x)
    }

    /// Encodes a batch of images into `[B*N, D]` patch tokens (CLS removed).
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, images: &[&Image]) -> Result<Var> {
        let b = images.len();
        let n = self.cfg.num_tokens();
        let emb = self.patch_embed(g, p, images)?;
        let (x, seg) = match self.cls {
            Some(cls) => {
                let all = g.concat_rows(&[p[cls], emb])?;
                let order: Vec<usize> = (0..b)
                    .flat_map(|i| std::iter::once(0).chain((0..n).map(move |k| 1 + i * n + k)))
                    .collect();
                (g.gather_rows(all, &order)?, n + 1)
            }
            None => (emb, n),
        };
        let ids: Vec<usize> = (0..b).flat_map(|_| 0..seg).collect();
        let pe = g.embedding(p[self.pos], &ids)?;
        let mut x = g.add(x, pe)?;
        let segments = vec![seg; b];
        for blk in &self.blocks {
            x = blk.forward(g, p, x, &segments, false)?;
        }
        let x = self.ln.forward(g, p, x)?;
        if self.cls.is_some() {
            let keep: Vec<usize> = (0..b)
                .flat_map(|i| (0..n).map(move |k| i * (n + 1) + 1 + k))
                .collect();
            Ok(g.gather_rows(x, &keep)?)
        } else {
            Ok(x)
        }
    }

    pub fn encode<T: Element>(&self, store: &ParamStore<T>, image: &Image) -> Result<VisualTokens<T>> {
        Ok(self.encode_batch(store, &[image])?.remove(0))
    }

    pub fn encode_batch<T: Element>(
        &self,
        store: &ParamStore<T>,
        images: &[&Image],
    ) -> Result<Vec<VisualTokens<T>>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let out = self.forward(&mut g, &p, images)?;
        let v = g.value(out);
        if !v.all_finite() {
            return Err(VitpError::Tensor(vitp_autodiff::TensorError::NonFinite { op: "vit" }));
        }
        let n = self.cfg.num_tokens();
        let d = self.cfg.embed_dim;
        Ok(v.data()
            .chunks(n * d)
            .map(|c| VisualTokens {
                tokens: Tensor::from_vec2(n, d, c.to_vec()).expect("non-empty"),
                positions: (0..n).collect(),
                cls_used: self.cls.is_some(),
            })
            .collect())
    }
}
