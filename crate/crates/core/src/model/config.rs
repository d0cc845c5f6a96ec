use std::fmt;
use std::str::FromStr;

use crate::attention::AttentionScale;
use crate::docflat::{GateMode, DEFAULT_GAMMA};
use crate::error::{Error, Result};

/// Model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Sent2Sent,
    Doc2Doc,
    DocFlatC,
    DocFlatD,
    DocFlatI,
    Abd,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Sent2Sent,
        Variant::Doc2Doc,
        Variant::DocFlatC,
        Variant::DocFlatD,
        Variant::DocFlatI,
        Variant::Abd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sent2Sent => "sent2sent",
            Variant::Doc2Doc => "doc2doc",
            Variant::DocFlatC => "docflat_c",
            Variant::DocFlatD => "docflat_d",
            Variant::DocFlatI => "docflat_i",
            Variant::Abd => "abd",
        }
    }

    /// Gate mode of the flat-batch block, `None` when the variant has none.
    pub fn gate_mode(self) -> Option<GateMode> {
        match self {
            Variant::DocFlatC => Some(GateMode::Continuous),
            Variant::DocFlatD => Some(GateMode::Discrete),
            Variant::DocFlatI => Some(GateMode::Identity),
            _ => None,
        }
    }

    pub fn has_fba(self) -> bool {
        self.gate_mode().is_some()
    }

    /// Whether the variant sees other instances of its batch.
    pub fn uses_batch_context(self) -> bool {
        self.has_fba() || self == Variant::Abd
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

/// Which target tokens the training loss counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossScope {
    CurrentOnly,
    FullPseudoDoc,
}

impl LossScope {
    fn name(self) -> &'static str {
        match self {
            LossScope::CurrentOnly => "current_only",
            LossScope::FullPseudoDoc => "full_pseudo_doc",
        }
    }
}

impl FromStr for LossScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "current_only" => Ok(LossScope::CurrentOnly),
            "full_pseudo_doc" => Ok(LossScope::FullPseudoDoc),
            _ => Err(Error::Config(format!("unknown loss scope '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub c_minus: usize,
    pub gamma: f64,
    pub loss_scope: LossScope,
    pub label_smoothing: f64,
    /// Joint vocabulary size.
    pub vocab_size: usize,
    pub attention_scale: AttentionScale,
    /// Final flat-batch layer norm also covers context positions.
    pub normalize_context: bool,
    pub doc_boundary_mask: bool,
    /// Also place the pooled block on the decoder side.
    pub abd_decoder: bool,
    /// Initial gate bias of fresh flat-batch blocks.
    pub psi_bias_init: f64,
}

impl ModelConfig {
    /// Toy-scale defaults for `variant`.
    pub fn new(variant: Variant, vocab_size: usize) -> Self {
        ModelConfig {
            variant,
            layers: 2,
            d_model: 32,
            heads: 4,
            ffn_dim: 64,
            dropout: 0.3,
            c_minus: if variant == Variant::Sent2Sent { 0 } else { 3 },
            gamma: DEFAULT_GAMMA,
            loss_scope: if variant == Variant::Doc2Doc {
                LossScope::FullPseudoDoc
            } else {
                LossScope::CurrentOnly
            },
            label_smoothing: 0.1,
            vocab_size,
            attention_scale: AttentionScale::PerHead,
            normalize_context: true,
            doc_boundary_mask: false,
            abd_decoder: false,
            psi_bias_init: -0.5,
        }
    }

    /// Same hyper-parameters under another variant, with that variant's
    /// loss scope. Switching to `sent2sent` drops the context.
    pub fn with_variant(&self, variant: Variant) -> Self {
        let fresh = ModelConfig::new(variant, self.vocab_size);
        ModelConfig {
            variant,
            c_minus: if variant == Variant::Sent2Sent {
                0
            } else {
                self.c_minus
            },
            loss_scope: fresh.loss_scope,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.layers == 0 || self.ffn_dim == 0 {
            return bad("layers and ffn_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} outside (0, 1)", self.gamma));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            ));
        }
        if self.variant == Variant::Sent2Sent && self.c_minus != 0 {
            return bad("sent2sent requires c_minus = 0".into());
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        Ok(())
    }

    /// Flat `key = value` lines.
    pub fn to_text(&self) -> String {
        let scale = match self.attention_scale {
            AttentionScale::PerHead => "per_head",
            AttentionScale::Model => "model",
        };
        let lines = [
            ("variant", self.variant.name().to_string()),
            ("layers", self.layers.to_string()),
            ("d_model", self.d_model.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("dropout", self.dropout.to_string()),
            ("c_minus", self.c_minus.to_string()),
            ("gamma", self.gamma.to_string()),
            ("loss_scope", self.loss_scope.name().to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("attention_scale", scale.to_string()),
            ("normalize_context", self.normalize_context.to_string()),
            ("doc_boundary_mask", self.doc_boundary_mask.to_string()),
            ("abd_decoder", self.abd_decoder.to_string()),
            ("psi_bias_init", self.psi_bias_init.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies one setting. Returns `false` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn p<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
        }
        match key {
            "variant" => self.variant = value.parse()?,
            "layers" => self.layers = p(key, value)?,
            "d_model" => self.d_model = p(key, value)?,
            "heads" => self.heads = p(key, value)?,
            "ffn_dim" => self.ffn_dim = p(key, value)?,
            "dropout" => self.dropout = p(key, value)?,
            "c_minus" => self.c_minus = p(key, value)?,
            "gamma" => self.gamma = p(key, value)?,
            "loss_scope" => self.loss_scope = value.parse()?,
            "label_smoothing" => self.label_smoothing = p(key, value)?,
            "vocab_size" => self.vocab_size = p(key, value)?,
            "attention_scale" => {
                self.attention_scale = match value {
                    "per_head" => AttentionScale::PerHead,
                    "model" => AttentionScale::Model,
                    _ => return Err(Error::Config(format!("bad value '{value}' for {key}"))),
                }
            }
            "normalize_context" => self.normalize_context = p(key, value)?,
            "doc_boundary_mask" => self.doc_boundary_mask = p(key, value)?,
            "abd_decoder" => self.abd_decoder = p(key, value)?,
            "psi_bias_init" => self.psi_bias_init = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_key_values(text)?;
        let variant = pairs
            .iter()
            .find(|(k, _)| k == "variant")
            .ok_or_else(|| Error::Config("missing 'variant'".into()))?
            .1
            .parse()?;
        let mut cfg = ModelConfig::new(variant, 1);
        for (k, v) in &pairs {
            if !cfg.set(k, v)? {
                return Err(Error::Config(format!("unknown model key '{k}'")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses flat `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
