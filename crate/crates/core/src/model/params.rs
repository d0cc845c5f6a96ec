use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::attention::mha_param_shapes;
use crate::docflat::{abd_param_shapes, fba_param_shapes};
use crate::error::{Error, Result};
use crate::rng::{KeyedRng, Purpose};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::{ModelConfig, Variant};

const MAGIC: &[u8; 4] = b"DFLT";
const VERSION: u32 = 1;

/// Name prefixes of the batch-context blocks added on top of a sentence model.
pub const CONTEXT_BLOCKS: [&str; 4] = ["enc.fba.", "dec.fba.", "enc.abd.", "dec.abd."];

fn ln_shapes(prefix: &str, e: usize) -> [(String, Vec<usize>); 2] {
    [
        (format!("{prefix}.g"), vec![e]),
        (format!("{prefix}.b"), vec![e]),
    ]
}

fn ffn_shapes(prefix: &str, e: usize, f: usize) -> [(String, Vec<usize>); 4] {
    [
        (format!("{prefix}.w1"), vec![e, f]),
        (format!("{prefix}.b1"), vec![f]),
        (format!("{prefix}.w2"), vec![f, e]),
        (format!("{prefix}.b2"), vec![e]),
    ]
}

/// Every parameter name and shape of `cfg`, in a stable order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (e, v, f) = (cfg.d_model, cfg.vocab_size, cfg.ffn_dim);
    let mut out = vec![
        ("src_embed".to_string(), vec![v, e]),
        ("tgt_embed".to_string(), vec![v, e]),
        ("out.b".to_string(), vec![v]),
    ];
    for l in 0..cfg.layers {
        out.extend(mha_param_shapes(&format!("enc.{l}.self"), e));
        out.extend(ln_shapes(&format!("enc.{l}.ln1"), e));
        out.extend(ffn_shapes(&format!("enc.{l}.ffn"), e, f));
        out.extend(ln_shapes(&format!("enc.{l}.ln2"), e));
        out.extend(mha_param_shapes(&format!("dec.{l}.self"), e));
        out.extend(ln_shapes(&format!("dec.{l}.ln1"), e));
        out.extend(mha_param_shapes(&format!("dec.{l}.cross"), e));
        out.extend(ln_shapes(&format!("dec.{l}.ln2"), e));
        out.extend(ffn_shapes(&format!("dec.{l}.ffn"), e, f));
        out.extend(ln_shapes(&format!("dec.{l}.ln3"), e));
    }
    if cfg.variant.has_fba() {
        out.extend(fba_param_shapes("enc.fba", e));
        out.extend(fba_param_shapes("dec.fba", e));
    }
    if cfg.variant == Variant::Abd {
        out.extend(abd_param_shapes("enc.abd", e));
        if cfg.abd_decoder {
            out.extend(abd_param_shapes("dec.abd", e));
        }
    }
    out
}

fn name_key(name: &str) -> u64 {
    // FNV-1a: init streams depend on the tensor name only.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Diagonal of the fresh flat-batch query and key maps. Value and output
/// maps start at the identity, so a fresh block mostly copies its input.
pub const FBA_QK_SELF: f64 = 0.7;

/// Fresh value of one named parameter.
pub fn init_tensor<T: Scalar>(
    name: &str,
    shape: &[usize],
    cfg: &ModelConfig,
    seed: u64,
) -> Tensor<T> {
    let mut rng = KeyedRng::new(seed).stream(Purpose::Init, name_key(name));
    if name.ends_with("_embed") {
        let bound = 3f64.sqrt() / (cfg.d_model as f64).sqrt();
        return Tensor::uniform(shape, bound, &mut rng);
    }
    if name.ends_with(".ln1.g")
        || name.ends_with(".ln2.g")
        || name.ends_with(".ln3.g")
        || name.ends_with(".ln.g")
    {
        return Tensor::full(shape, T::one());
    }
    if name.ends_with("psi.b") {
        return Tensor::full(shape, T::lit(cfg.psi_bias_init));
    }
    if let Some(w) = name.rsplit_once(".fba.attn.w_").map(|(_, w)| w) {
        let scale = if w == "q" || w == "k" {
            FBA_QK_SELF
        } else {
            1.0
        };
        let n = shape[1];
        let data = (0..shape[0] * n)
            .map(|i| {
                if i / n == i % n {
                    T::lit(scale)
                } else {
                    T::zero()
                }
            })
            .collect();
        return Tensor::new(shape, data).expect("shape matches data");
    }
    if shape.len() == 2 {
        let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
        return Tensor::uniform(shape, bound, &mut rng);
    }
    Tensor::zeros(shape)
}

/// Named tensors of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let tensors = param_shapes(cfg)
            .into_iter()
            .map(|(n, s)| {
                let t = init_tensor(&n, &s, cfg, seed);
                (n, t)
            })
            .collect();
        Ok(ModelParams { tensors })
    }

    /// Document-level parameters from a sentence-level model: every tensor of
    /// `cfg` is copied from `stage1` by name, except batch-context blocks that
    /// `stage1` lacks, which are freshly initialized.
    pub fn from_stage1(stage1: &ModelParams<T>, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in param_shapes(cfg) {
            let t = match stage1.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => t.clone(),
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None if CONTEXT_BLOCKS.iter().any(|p| name.starts_with(p)) => {
                    init_tensor(&name, &shape, cfg, seed)
                }
                None => {
                    return Err(Error::Checkpoint(format!(
                        "stage-1 checkpoint lacks tensor {name}"
                    )))
                }
            };
            tensors.insert(name, t);
        }
        Ok(ModelParams { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.cast()))
                .collect(),
        }
    }

    /// Checks that names and shapes are exactly those of `cfg`.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = param_shapes(cfg);
        if expected.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors present, {} expected for {}",
                self.tensors.len(),
                expected.len(),
                cfg.variant
            )));
        }
        for (name, shape) in expected {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Checkpoint bytes: magic, version, config text, then per-tensor records
    /// with `f32` little-endian data.
    pub fn to_bytes(&self, cfg: &ModelConfig) -> Vec<u8> {
        let mut out = Vec::new();
        let put = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
        out.extend_from_slice(MAGIC);
        put(&mut out, VERSION);
        let text = cfg.to_text();
        put(&mut out, text.len() as u32);
        out.extend_from_slice(text.as_bytes());
        put(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put(&mut out, t.rank() as u32);
            for &d in t.shape() {
                put(&mut out, d as u32);
            }
            for &x in t.data() {
                out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(ModelConfig, Self)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
        let cfg = ModelConfig::from_text(text)?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            if tensors
                .insert(name.clone(), Tensor::new(&shape, data)?)
                .is_some()
            {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        let params = ModelParams { tensors };
        params.check_against(&cfg)?;
        Ok((cfg, params))
    }

    pub fn save(&self, cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes(cfg))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(ModelConfig, Self)> {
        let path = path.as_ref();
        let bytes =
            fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
