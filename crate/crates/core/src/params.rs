//! Model configuration, named parameter storage and the checkpoint container.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::corpus::{Token, FRAMES, MAX_PROMPT_LEN, MOTION_DIM};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// How the normaliser scale in the conditioner is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    /// Per-token standard deviation over the feature axis.
    #[default]
    Statistic,
    /// A learned per-feature vector.
    Learned,
}

impl std::str::FromStr for SigmaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "statistic" => Ok(SigmaMode::Statistic),
            "learned" => Ok(SigmaMode::Learned),
            _ => Err(Error::invalid(format!("unknown sigma mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub frames: usize,
    pub motion_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub cond_dim: usize,
    pub sta_tokens: usize,
    /// Attention heads in the conditioner's cross-attention.
    pub sta_heads: usize,
    pub ff_mult: usize,
    pub timesteps: usize,
    /// Sinusoid pairs in the timestep basis.
    pub time_freqs: usize,
    /// Timestep-aware conditioner on; off feeds text features straight through.
    pub sta: bool,
    pub sta_sigma: SigmaMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: FRAMES,
            motion_dim: MOTION_DIM,
            width: 32,
            blocks: 2,
            cond_dim: 32,
            sta_tokens: 8,
            sta_heads: 4,
            ff_mult: 2,
            timesteps: 50,
            time_freqs: 16,
            sta: true,
            sta_sigma: SigmaMode::Statistic,
        }
    }
}

impl ModelConfig {
    /// A reduced model for finite-difference checks.
    pub fn miniature() -> Self {
        ModelConfig {
            frames: 4,
            width: 8,
            blocks: 1,
            cond_dim: 8,
            sta_tokens: 3,
            sta_heads: 2,
            ff_mult: 2,
            timesteps: 10,
            time_freqs: 4,
            ..ModelConfig::default()
        }
    }

    /// Number of condition tokens the denoiser attends to.
    pub fn cond_len(&self) -> usize {
        if self.sta {
            self.sta_tokens
        } else {
            MAX_PROMPT_LEN
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.frames,
            self.motion_dim,
            self.width,
            self.blocks,
            self.cond_dim,
            self.sta_tokens,
            self.sta_heads,
            self.ff_mult,
            self.timesteps,
            self.time_freqs,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if !self.cond_dim.is_multiple_of(self.sta_heads) {
            return Err(Error::invalid(format!(
                "cond_dim {} not divisible by sta_heads {}",
                self.cond_dim, self.sta_heads
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn arch_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Flat name → tensor map. Names are prefixed `text.`, `sta.`, `null.` or `den.`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }

    /// Fresh parameters for `cfg`, drawn from `rng`.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut p = Params::new();
        let mut normal = |name: &str, shape: &[usize], std: f64, p: &mut Params| {
            let t = rng::normal_tensor(rng, shape).map(|v| v * std);
            p.insert(name, t);
        };
        let dc = cfg.cond_dim;
        let w = cfg.width;
        let basis = 2 * cfg.time_freqs;
        let fan = |n: usize| 1.0 / (n as f64).sqrt();

        normal("text.tok", &[Token::VOCAB_SIZE, dc], 1.0, &mut p);
        normal("text.pos", &[MAX_PROMPT_LEN, dc], 0.5, &mut p);
        p.insert("text.ln.g", Tensor::full(&[dc], 1.0));
        p.insert("text.ln.b", Tensor::zeros(&[dc]));
        for m in ["wq", "wk", "wv", "wo"] {
            normal(&format!("text.attn.{m}"), &[dc, dc], fan(dc), &mut p);
        }

        if cfg.sta {
            time_mlp(&mut p, "sta.time", basis, dc, &mut normal);
            normal("sta.tokens", &[cfg.sta_tokens, dc], 1.0, &mut p);
            normal("sta.alpha.w", &[dc, dc], fan(dc), &mut p);
            p.insert("sta.alpha.b", Tensor::zeros(&[dc]));
            p.insert("sta.gamma", Tensor::full(&[dc], 1.0));
            p.insert("sta.beta", Tensor::zeros(&[dc]));
            if cfg.sta_sigma == SigmaMode::Learned {
                p.insert("sta.sigma", Tensor::full(&[dc], 1.0));
            }
            for m in ["wq", "wk", "wv", "wo"] {
                normal(&format!("sta.attn.{m}"), &[dc, dc], fan(dc), &mut p);
            }
        }
        normal("null.tokens", &[cfg.cond_len(), dc], 1.0, &mut p);

        time_mlp(&mut p, "den.time", basis, w, &mut normal);
        normal("den.in.w", &[cfg.motion_dim, w], fan(cfg.motion_dim), &mut p);
        p.insert("den.in.b", Tensor::zeros(&[w]));
        normal("den.pos", &[cfg.frames, w], 0.5, &mut p);
        let hidden = w * cfg.ff_mult;
        for b in 0..cfg.blocks {
            let pre = format!("den.b{b}");
            for ln in ["ln1", "ln2", "ln3"] {
                p.insert(format!("{pre}.{ln}.g"), Tensor::full(&[w], 1.0));
                p.insert(format!("{pre}.{ln}.b"), Tensor::zeros(&[w]));
            }
            for m in ["wq", "wk", "wv", "wo"] {
                normal(&format!("{pre}.sa.{m}"), &[w, w], fan(w), &mut p);
            }
            normal(&format!("{pre}.ca.wq"), &[w, w], fan(w), &mut p);
            normal(&format!("{pre}.ca.wk"), &[dc, w], fan(dc), &mut p);
            normal(&format!("{pre}.ca.wv"), &[dc, w], fan(dc), &mut p);
            normal(&format!("{pre}.ca.wo"), &[w, w], fan(w), &mut p);
            normal(&format!("{pre}.ff.w1"), &[w, hidden], fan(w), &mut p);
            p.insert(format!("{pre}.ff.b1"), Tensor::zeros(&[hidden]));
            normal(&format!("{pre}.ff.w2"), &[hidden, w], fan(hidden), &mut p);
            p.insert(format!("{pre}.ff.b2"), Tensor::zeros(&[w]));
        }
        p.insert("den.lnf.g", Tensor::full(&[w], 1.0));
        p.insert("den.lnf.b", Tensor::zeros(&[w]));
        normal("den.out.w", &[w, cfg.motion_dim], 0.01, &mut p);
        p.insert("den.out.b", Tensor::zeros(&[cfg.motion_dim]));
        Ok(p)
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
            .collect();
        Bound { vars }
    }
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    /// Freshly initialised from the `init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = Params::init(&config, &mut rng::stream(seed, "init"))?;
        Ok(Model { config, params })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.check_arch(&ck.manifest.model)?;
        let model = Model {
            config: ck.manifest.model.clone(),
            params: ck.model_params(),
        };
        let expected = Params::init(&model.config, &mut rng::stream(0, "init"))?;
        for (name, t) in expected.iter() {
            let got = model.params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(model)
    }
}

fn time_mlp(
    p: &mut Params,
    prefix: &str,
    basis: usize,
    out: usize,
    normal: &mut impl FnMut(&str, &[usize], f64, &mut Params),
) {
    normal(&format!("{prefix}.w1"), &[basis, out], 1.0 / (basis as f64).sqrt(), p);
    p.insert(format!("{prefix}.b1"), Tensor::zeros(&[out]));
    normal(&format!("{prefix}.w2"), &[out, out], 1.0 / (out as f64).sqrt(), p);
    p.insert(format!("{prefix}.b2"), Tensor::zeros(&[out]));
}

/// Parameters recorded on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Points `name` at another variable on the same tape.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(v) => {
                *v = var;
                Ok(())
            }
            None => Err(Error::MissingParam(name.to_string())),
        }
    }

    /// Gradients of every bound parameter, zero where none flowed.
    pub fn grads(&self, tape: &Tape) -> Params {
        let mut out = Params::new();
        for (k, &v) in &self.vars {
            let g = tape
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
            out.insert(k.clone(), g);
        }
        out
    }
}

const MAGIC: &[u8; 8] = b"ANTLABCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub arch_hash: String,
    pub model: ModelConfig,
    pub step: u64,
    /// Free-form echo of the run configuration.
    pub config: serde_json::Value,
}

/// Versioned container: magic, version (u32 LE), manifest length (u64 LE),
/// manifest JSON, entry count (u64 LE), then per entry the name length
/// (u32 LE), name, rank (u32 LE), dims (u64 LE each) and the payload as
/// little-endian f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub entries: Params,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, t) in self.entries.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mlen = r.u64()? as usize;
        let manifest: Manifest = serde_json::from_slice(r.take(mlen)?)
            .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let count = r.u64()?;
        let mut entries = Params::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            entries.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { manifest, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Fails unless the checkpoint was written for `cfg`.
    pub fn check_arch(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = cfg.arch_hash();
        if self.manifest.arch_hash != expected {
            return Err(Error::ArchitectureMismatch {
                expected,
                found: self.manifest.arch_hash.clone(),
            });
        }
        Ok(())
    }

    /// Model parameters, i.e. entries outside the optimizer namespace.
    pub fn model_params(&self) -> Params {
        let mut p = Params::new();
        for (k, v) in self.entries.iter() {
            if !k.starts_with("adam.") {
                p.insert(k.clone(), v.clone());
            }
        }
        p
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
