//! Checkpoint and backbone files: a magic line, a text manifest
//! (`meta`/`config`/`tensor` lines with byte offsets) and a little-endian blob.

use std::path::Path;

use vitp_autodiff::{DType, Element, Tensor};

use crate::error::{Result, VitpError};
use crate::eval::SegmentationHead;
use crate::params::{Declarer, ParamStore};
use crate::vision::{VisionEncoder, VitConfig};

use super::adamw::OptimizerState;
use super::config::{Preset, RunConfig};

const CKPT_MAGIC: &str = "VITP-CKPT";
const BACKBONE_MAGIC: &str = "VITP-BACKBONE";
const HEAD_MAGIC: &str = "VITP-HEAD";
pub const FORMAT_VERSION: u32 = 1;

struct Container {
    meta: Vec<(String, String)>,
    tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| VitpError::Format(format!("missing meta {key}")))
    }

    fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse()
            .map_err(|_| VitpError::Format(format!("bad meta {key}={v}")))
    }

    fn take_tensor(&mut self, name: &str) -> Result<Tensor<f32>> {
        let i = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| VitpError::Format(format!("missing tensor {name}")))?;
        Ok(self.tensors.remove(i).1)
    }

    fn to_bytes(&self, magic: &str) -> Vec<u8> {
        let mut manifest = String::new();
        for (k, v) in &self.meta {
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        let mut blob = Vec::new();
        for (name, t) in &self.tensors {
            let shape: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
            let offset = blob.len();
            for &v in t.data() {
                v.write_le(&mut blob);
            }
            manifest.push_str(&format!(
                "tensor {name} {} {} {offset} {}\n",
                f32::DTYPE.name(),
                shape.join(","),
                blob.len() - offset
            ));
        }
        let mut out = format!("{magic} v{FORMAT_VERSION}\nmanifest_bytes {}\n", manifest.len()).into_bytes();
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&blob);
        out
    }

    fn from_bytes(bytes: &[u8], magic: &str) -> Result<Self> {
        let bad = |m: &str| VitpError::Format(m.to_string());
        let (line1, rest) = split_line(bytes).ok_or_else(|| bad("truncated header"))?;
        let (m, ver) = line1.split_once(' ').ok_or_else(|| bad("malformed magic line"))?;
        if m != magic {
            return Err(VitpError::Format(format!("expected a {magic} file, found {m:?}")));
        }
        let expected = format!("v{FORMAT_VERSION}");
        if ver != expected {
            return Err(VitpError::Version {
                expected,
                found: ver.to_string(),
            });
        }
        let (line2, rest) = split_line(rest).ok_or_else(|| bad("truncated header"))?;
        let n: usize = line2
            .strip_prefix("manifest_bytes ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed manifest_bytes line"))?;
        if rest.len() < n {
            return Err(bad("manifest extends past end of file"));
        }
        let manifest = std::str::from_utf8(&rest[..n]).map_err(|_| bad("manifest is not UTF-8"))?;
        let blob = &rest[n..];
        let mut meta = Vec::new();
        let mut tensors = Vec::new();
        let mut covered = 0usize;
        for line in manifest.lines() {
            let (kind, body) = line.split_once(' ').ok_or_else(|| bad("malformed manifest line"))?;
            match kind {
                "meta" => {
                    let (k, v) = body.split_once(' ').unwrap_or((body, ""));
                    meta.push((k.to_string(), v.to_string()));
                }
                "tensor" => {
                    let f: Vec<&str> = body.split(' ').collect();
                    if f.len() != 5 {
                        return Err(bad("malformed tensor line"));
                    }
                    if DType::parse(f[1]) != Some(DType::F32) {
                        return Err(VitpError::Format(format!("unsupported dtype {}", f[1])));
                    }
                    let shape: Vec<usize> = f[2]
                        .split(',')
                        .map(|d| d.parse().ok())
                        .collect::<Option<_>>()
                        .ok_or_else(|| bad("malformed shape"))?;
                    let off: usize = f[3].parse().map_err(|_| bad("malformed offset"))?;
                    let len: usize = f[4].parse().map_err(|_| bad("malformed length"))?;
                    let numel: usize = shape.iter().product();
                    if off != covered || len != numel * 4 || off + len > blob.len() {
                        return Err(VitpError::Format(format!("tensor {} has an inconsistent extent", f[0])));
                    }
                    covered += len;
                    let data = blob[off..off + len].chunks_exact(4).map(f32::read_le).collect();
                    tensors.push((f[0].to_string(), Tensor::new(shape, data)?));
                }
                _ => return Err(VitpError::Format(format!("unknown manifest entry {kind:?}"))),
            }
        }
        if covered != blob.len() {
            return Err(bad("blob length does not match the manifest"));
        }
        Ok(Container { meta, tensors })
    }
}

fn split_line(b: &[u8]) -> Option<(&str, &[u8])> {
    let i = b.iter().position(|&c| c == b'\n')?;
    Some((std::str::from_utf8(&b[..i]).ok()?, &b[i + 1..]))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Full training state. Random streams are counter-based, so `(seed, step)`
/// is the complete rng state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub seed: u64,
    pub step: u64,
    pub params: ParamStore<f32>,
    pub opt: OptimizerState<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = vec![
            ("preset".to_string(), self.config.preset.name().to_string()),
            ("seed".to_string(), self.seed.to_string()),
            ("step".to_string(), self.step.to_string()),
            ("opt_step".to_string(), self.opt.step.to_string()),
            ("rng".to_string(), format!("counter seed={} next_step={}", self.seed, self.step + 1)),
        ];
        for line in self.config.to_text().lines() {
            meta.push(("config".to_string(), line.to_string()));
        }
        let mut tensors = Vec::new();
        for (id, name, t) in self.params.iter() {
            tensors.push((format!("param:{name}"), t.clone()));
            tensors.push((format!("adam_m:{name}"), self.opt.m[id.0].clone()));
            tensors.push((format!("adam_v:{name}"), self.opt.v[id.0].clone()));
        }
        Container { meta, tensors }.to_bytes(CKPT_MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Container::from_bytes(bytes, CKPT_MAGIC)?;
        let preset = Preset::parse(c.meta("preset")?)?;
        let text: String = c
            .meta
            .iter()
            .filter(|(k, _)| k == "config")
            .map(|(_, v)| format!("{v}\n"))
            .collect();
        let config = RunConfig::parse(&text, preset)?;
        let seed = c.meta_parse("seed")?;
        let step = c.meta_parse("step")?;
        let opt_step = c.meta_parse("opt_step")?;
        let names: Vec<String> = c
            .tensors
            .iter()
            .filter_map(|(n, _)| n.strip_prefix("param:").map(str::to_string))
            .collect();
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for n in &names {
            params.insert(n, c.take_tensor(&format!("param:{n}"))?)?;
            m.push(c.take_tensor(&format!("adam_m:{n}"))?);
            v.push(c.take_tensor(&format!("adam_v:{n}"))?);
        }
        if let Some((n, _)) = c.tensors.first() {
            return Err(VitpError::Format(format!("unexpected tensor {n}")));
        }
        Ok(Checkpoint {
            config,
            seed,
            step,
            params,
            opt: OptimizerState { m, v, step: opt_step },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Vision-encoder weights plus the config needed to rebuild the encoder.
#[derive(Clone, Debug)]
pub struct BackboneExport {
    pub vit: VitConfig,
    pub params: ParamStore<f32>,
}

impl BackboneExport {
    pub fn from_params(vit: &VitConfig, all: &ParamStore<f32>) -> Result<Self> {
        let params = all.subset("vit.");
        let mut probe = params.clone();
        VisionEncoder::declare(vit, &mut Declarer::attach(&mut probe))?;
        Ok(BackboneExport {
            vit: vit.clone(),
            params,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::from_params(&ckpt.config.model.vit(), &ckpt.params)
    }

    /// The encoder bound to these weights.
    pub fn encoder(&self) -> Result<VisionEncoder> {
        let mut p = self.params.clone();
        VisionEncoder::declare(&self.vit, &mut Declarer::attach(&mut p))
    }

    pub fn cast<T: Element>(&self) -> ParamStore<T> {
        self.params.cast()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let v = &self.vit;
        let meta = [
            ("image_size", v.image_size.to_string()),
            ("patch_size", v.patch_size.to_string()),
            ("embed_dim", v.embed_dim.to_string()),
            ("depth", v.depth.to_string()),
            ("heads", v.heads.to_string()),
            ("include_cls", v.include_cls.to_string()),
            ("mlp_ratio", v.mlp_ratio.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let tensors = self.params.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        Container { meta, tensors }.to_bytes(BACKBONE_MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::from_bytes(bytes, BACKBONE_MAGIC)?;
        let vit = VitConfig {
            image_size: c.meta_parse("image_size")?,
            patch_size: c.meta_parse("patch_size")?,
            embed_dim: c.meta_parse("embed_dim")?,
            depth: c.meta_parse("depth")?,
            heads: c.meta_parse("heads")?,
            include_cls: c.meta_parse("include_cls")?,
            mlp_ratio: c.meta_parse("mlp_ratio")?,
        };
        let mut params = ParamStore::new();
        for (n, t) in c.tensors {
            if !n.starts_with("vit.") {
                return Err(VitpError::Format(format!("non-encoder tensor {n} in backbone")));
            }
            params.insert(&n, t)?;
        }
        let b = BackboneExport { vit, params };
        b.encoder()?;
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// A trained segmentation head and the classes its mIoU counts.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadExport {
    pub head: SegmentationHead,
    pub seen: Vec<bool>,
}

impl HeadExport {
    pub fn to_bytes(&self) -> Vec<u8> {
        let seen: String = self.seen.iter().map(|&s| if s { '1' } else { '0' }).collect();
        let meta = vec![
            ("classes".to_string(), self.head.classes.to_string()),
            ("seen".to_string(), seen),
        ];
        let tensors = vec![("w".to_string(), self.head.w.clone()), ("b".to_string(), self.head.b.clone())];
        Container { meta, tensors }.to_bytes(HEAD_MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Container::from_bytes(bytes, HEAD_MAGIC)?;
        let classes: usize = c.meta_parse("classes")?;
        let seen: Vec<bool> = c.meta("seen")?.chars().map(|ch| ch == '1').collect();
        let w = c.take_tensor("w")?;
        let b = c.take_tensor("b")?;
        if seen.len() != classes || w.shape().len() != 2 || w.shape()[1] != classes || b.shape() != [classes] {
            return Err(VitpError::Format("head shapes disagree with its class count".into()));
        }
        Ok(HeadExport {
            head: SegmentationHead { w, b, classes },
            seen,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
