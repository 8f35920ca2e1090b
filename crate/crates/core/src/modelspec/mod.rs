//! Model specification files.
//!
//! A model is described by a plain-text key-value document that selects
//! atomic building blocks (network type, normalization, activation, position
//! embedding, attention head counts) instead of naming a model family.
//! Serving a new model means editing such a file, not adding code.
//!
//! Format: top-level `key = value` lines, then optional `network_structure:`
//! and `generation_config:` sections whose keys are indented. `#` starts a
//! comment. See `parse_spec` for the accepted keys.

mod tokenizer;

pub use tokenizer::{TokenizerAlgo, Vocab};

use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Native,
    Safetensors,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetworkType {
    DecoderOnly,
    EncoderOnly,
    EncoderDecoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Rms,
    Std,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActKind {
    Silu,
    Relu,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosKind {
    Rope,
    Sinusoidal,
    Empty,
}

/// One `pattern -> canonical` rewrite rule; `{i}` captures a layer index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingRule {
    pub pattern: String,
    pub canonical: String,
}

/// Default sampling settings carried by the spec file; every field optional,
/// command-line flags win over them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationConfig {
    pub strategy: Option<String>,
    pub top_k: Option<usize>,
    pub top_p: Option<f32>,
    pub temperature: Option<f32>,
    pub alpha: Option<f32>,
    pub tfs_z: Option<f32>,
    pub mirostat_tau: Option<f32>,
    pub mirostat_eta: Option<f32>,
    pub t_random: Option<usize>,
    pub seed: Option<u64>,
    pub max_new_tokens: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub model_file_format: FileFormat,
    pub tokenizer_file: String,
    pub merges_file: Option<String>,
    pub tokenization_algorithm: TokenizerAlgo,
    pub network_type: NetworkType,
    pub normalization_function: NormKind,
    pub activation_function: ActKind,
    pub position_embedding: PosKind,
    pub decoder_heads: usize,
    pub decoder_kv_heads: usize,
    pub layers: usize,
    /// Encoder stack depth; required for encoder_decoder, may be zero there.
    pub encoder_layers: Option<usize>,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    /// Q/K weight column layout: 1 = head-contiguous (canonical),
    /// 2 = split-half per head, converted to canonical at load.
    pub qk_column_order: u32,
    /// 1 = checkpoint stores one fused QKV tensor per layer, split at load.
    pub qkv_format: Option<u32>,
    pub tensor_name_prefix: String,
    pub tensor_name_mapping: Vec<MappingRule>,
    pub generation: GenerationConfig,
}

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("unsupported building block: {key} = {value}")]
    UnsupportedBlock { key: String, value: String },
    #[error("line {line}: invalid value for `{key}`: {value}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("missing required key `{0}`")]
    MissingKey(String),
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("no tensor name mapping rule matches `{0}`")]
    UnmappedTensor(String),
}

/// A single invariant violation found by `validate_spec`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

const TOP_KEYS: &[&str] = &[
    "model_file_format",
    "tokenizer_file",
    "merges_file",
    "tokenization_algorithm",
];
const NET_KEYS: &[&str] = &[
    "type",
    "normalization_function",
    "activation_function",
    "position_embedding",
    "decoder_heads",
    "decoder_kv_heads",
    "layers",
    "encoder_layers",
    "hidden_dim",
    "ffn_dim",
    "vocab_size",
    "max_context",
    "qk_column_order",
    "qkv_format",
    "tensor_name_prefix",
    "tensor_name_mapping",
];
const GEN_KEYS: &[&str] = &[
    "strategy",
    "top_k",
    "top_p",
    "temperature",
    "alpha",
    "tfs_z",
    "mirostat_tau",
    "mirostat_eta",
    "t_random",
    "seed",
    "max_new_tokens",
];

#[derive(PartialEq, Clone, Copy)]
enum Section {
    Top,
    Network,
    Generation,
}

/// Parse a model specification document.
pub fn parse_spec(text: &str) -> Result<ModelSpec, SpecError> {
    let mut top: BTreeMap<String, (usize, String)> = BTreeMap::new();
    let mut net: BTreeMap<String, (usize, String)> = BTreeMap::new();
    let mut gen: BTreeMap<String, (usize, String)> = BTreeMap::new();
    let mut mappings: Vec<MappingRule> = Vec::new();
    let mut section = Section::Top;

    for (ix, raw) in text.lines().enumerate() {
        let line = ix + 1;
        let stripped = raw.split_once('#').map_or(raw, |(a, _)| a);
        let trimmed = stripped.trim();
        if trimmed.is_empty() {
            continue;
        }
        let indented = stripped.starts_with(' ') || stripped.starts_with('\t');
        if !indented {
            section = Section::Top;
        }
        if trimmed == "network_structure:" {
            section = Section::Network;
            continue;
        }
        if trimmed == "generation_config:" {
            section = Section::Generation;
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or(SpecError::Syntax {
            line,
            text: trimmed.to_string(),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();

        match section {
            Section::Top => {
                if !TOP_KEYS.contains(&key.as_str()) {
                    return Err(SpecError::UnknownKey { line, key });
                }
                if top.insert(key.clone(), (line, value)).is_some() {
                    return Err(SpecError::DuplicateKey { line, key });
                }
            }
            Section::Network => {
                if !NET_KEYS.contains(&key.as_str()) {
                    return Err(SpecError::UnknownKey { line, key });
                }
                if key == "tensor_name_mapping" {
                    let (pat, canon) =
                        value.split_once("->").ok_or_else(|| SpecError::BadValue {
                            line,
                            key: key.clone(),
                            value: value.clone(),
                        })?;
                    mappings.push(MappingRule {
                        pattern: pat.trim().to_string(),
                        canonical: canon.trim().to_string(),
                    });
                    continue;
                }
                if net.insert(key.clone(), (line, value)).is_some() {
                    return Err(SpecError::DuplicateKey { line, key });
                }
            }
            Section::Generation => {
                if !GEN_KEYS.contains(&key.as_str()) {
                    return Err(SpecError::UnknownKey { line, key });
                }
                if gen.insert(key.clone(), (line, value)).is_some() {
                    return Err(SpecError::DuplicateKey { line, key });
                }
            }
        }
    }

    let require = |map: &BTreeMap<String, (usize, String)>, key: &str| {
        map.get(key)
            .cloned()
            .ok_or_else(|| SpecError::MissingKey(key.to_string()))
    };
    let parse_usize = |key: &str, (line, v): (usize, String)| {
        v.parse::<usize>().map_err(|_| SpecError::BadValue {
            line,
            key: key.to_string(),
            value: v,
        })
    };
    let parse_u32 = |key: &str, (line, v): (usize, String)| {
        v.parse::<u32>().map_err(|_| SpecError::BadValue {
            line,
            key: key.to_string(),
            value: v,
        })
    };

    let (_, fmt_v) = require(&top, "model_file_format")?;
    let model_file_format = match fmt_v.as_str() {
        "native" => FileFormat::Native,
        "safetensors" => FileFormat::Safetensors,
        _ => {
            return Err(SpecError::UnsupportedBlock {
                key: "model_file_format".into(),
                value: fmt_v,
            })
        }
    };
    let (_, tokenizer_file) = require(&top, "tokenizer_file")?;
    let merges_file = top.get("merges_file").map(|(_, v)| v.clone());
    let (_, algo_v) = require(&top, "tokenization_algorithm")?;
    let tokenization_algorithm = match algo_v.as_str() {
        "bpe" => TokenizerAlgo::Bpe,
        "char" => TokenizerAlgo::Char,
        _ => {
            return Err(SpecError::UnsupportedBlock {
                key: "tokenization_algorithm".into(),
                value: algo_v,
            })
        }
    };

    let (_, type_v) = require(&net, "type")?;
    let network_type = match type_v.as_str() {
        "decoder_only" => NetworkType::DecoderOnly,
        "encoder_only" => NetworkType::EncoderOnly,
        "encoder_decoder" => NetworkType::EncoderDecoder,
        _ => {
            return Err(SpecError::UnsupportedBlock {
                key: "type".into(),
                value: type_v,
            })
        }
    };
    let (_, norm_v) = require(&net, "normalization_function")?;
    let normalization_function = match norm_v.as_str() {
        "rms" => NormKind::Rms,
        "std" => NormKind::Std,
        _ => {
            return Err(SpecError::UnsupportedBlock {
                key: "normalization_function".into(),
                value: norm_v,
            })
        }
    };
    let (_, act_v) = require(&net, "activation_function")?;
    let activation_function = match act_v.as_str() {
        "silu" => ActKind::Silu,
        "relu" => ActKind::Relu,
        "gelu" => ActKind::Gelu,
        _ => {
            return Err(SpecError::UnsupportedBlock {
                key: "activation_function".into(),
                value: act_v,
            })
        }
    };
    let (_, pos_v) = require(&net, "position_embedding")?;
    let position_embedding = match pos_v.as_str() {
        "rope" => PosKind::Rope,
        "sinusoidal" => PosKind::Sinusoidal,
        "empty" => PosKind::Empty,
        _ => {
            return Err(SpecError::UnsupportedBlock {
                key: "position_embedding".into(),
                value: pos_v,
            })
        }
    };

    let spec = ModelSpec {
        model_file_format,
        tokenizer_file,
        merges_file,
        tokenization_algorithm,
        network_type,
        normalization_function,
        activation_function,
        position_embedding,
        decoder_heads: parse_usize("decoder_heads", require(&net, "decoder_heads")?)?,
        decoder_kv_heads: parse_usize("decoder_kv_heads", require(&net, "decoder_kv_heads")?)?,
        layers: parse_usize("layers", require(&net, "layers")?)?,
        encoder_layers: net
            .get("encoder_layers")
            .cloned()
            .map(|v| parse_usize("encoder_layers", v))
            .transpose()?,
        hidden_dim: parse_usize("hidden_dim", require(&net, "hidden_dim")?)?,
        ffn_dim: parse_usize("ffn_dim", require(&net, "ffn_dim")?)?,
        vocab_size: parse_usize("vocab_size", require(&net, "vocab_size")?)?,
        max_context: parse_usize("max_context", require(&net, "max_context")?)?,
        qk_column_order: net
            .get("qk_column_order")
            .cloned()
            .map(|v| parse_u32("qk_column_order", v))
            .transpose()?
            .unwrap_or(1),
        qkv_format: net
            .get("qkv_format")
            .cloned()
            .map(|v| parse_u32("qkv_format", v))
            .transpose()?,
        tensor_name_prefix: net
            .get("tensor_name_prefix")
            .map(|(_, v)| v.clone())
            .unwrap_or_default(),
        tensor_name_mapping: mappings,
        generation: parse_generation(&gen)?,
    };
    Ok(spec)
}

fn parse_generation(
    gen: &BTreeMap<String, (usize, String)>,
) -> Result<GenerationConfig, SpecError> {
    let mut out = GenerationConfig::default();
    for (key, (line, value)) in gen {
        let bad = || SpecError::BadValue {
            line: *line,
            key: key.clone(),
            value: value.clone(),
        };
        match key.as_str() {
            "strategy" => out.strategy = Some(value.clone()),
            "top_k" => out.top_k = Some(value.parse().map_err(|_| bad())?),
            "top_p" => out.top_p = Some(value.parse().map_err(|_| bad())?),
            "temperature" => out.temperature = Some(value.parse().map_err(|_| bad())?),
            "alpha" => out.alpha = Some(value.parse().map_err(|_| bad())?),
            "tfs_z" => out.tfs_z = Some(value.parse().map_err(|_| bad())?),
            "mirostat_tau" => out.mirostat_tau = Some(value.parse().map_err(|_| bad())?),
            "mirostat_eta" => out.mirostat_eta = Some(value.parse().map_err(|_| bad())?),
            "t_random" => out.t_random = Some(value.parse().map_err(|_| bad())?),
            "seed" => out.seed = Some(value.parse().map_err(|_| bad())?),
            "max_new_tokens" => out.max_new_tokens = Some(value.parse().map_err(|_| bad())?),
            _ => unreachable!("key list checked by caller"),
        }
    }
    Ok(out)
}

/// Render a spec back to the document format; `parse_spec` round-trips it.
pub fn print_spec(spec: &ModelSpec) -> String {
    let mut out = String::new();
    let fmt = match spec.model_file_format {
        FileFormat::Native => "native",
        FileFormat::Safetensors => "safetensors",
    };
    out.push_str(&format!("model_file_format = {fmt}\n"));
    out.push_str(&format!("tokenizer_file = {}\n", spec.tokenizer_file));
    if let Some(m) = &spec.merges_file {
        out.push_str(&format!("merges_file = {m}\n"));
    }
    let algo = match spec.tokenization_algorithm {
        TokenizerAlgo::Bpe => "bpe",
        TokenizerAlgo::Char => "char",
    };
    out.push_str(&format!("tokenization_algorithm = {algo}\n"));
    out.push_str("network_structure:\n");
    let ty = match spec.network_type {
        NetworkType::DecoderOnly => "decoder_only",
        NetworkType::EncoderOnly => "encoder_only",
        NetworkType::EncoderDecoder => "encoder_decoder",
    };
    out.push_str(&format!("  type = {ty}\n"));
    let norm = match spec.normalization_function {
        NormKind::Rms => "rms",
        NormKind::Std => "std",
    };
    out.push_str(&format!("  normalization_function = {norm}\n"));
    let act = match spec.activation_function {
        ActKind::Silu => "silu",
        ActKind::Relu => "relu",
        ActKind::Gelu => "gelu",
    };
    out.push_str(&format!("  activation_function = {act}\n"));
    let pos = match spec.position_embedding {
        PosKind::Rope => "rope",
        PosKind::Sinusoidal => "sinusoidal",
        PosKind::Empty => "empty",
    };
    out.push_str(&format!("  position_embedding = {pos}\n"));
    out.push_str(&format!("  decoder_heads = {}\n", spec.decoder_heads));
    out.push_str(&format!("  decoder_kv_heads = {}\n", spec.decoder_kv_heads));
    out.push_str(&format!("  layers = {}\n", spec.layers));
    if let Some(e) = spec.encoder_layers {
        out.push_str(&format!("  encoder_layers = {e}\n"));
    }
    out.push_str(&format!("  hidden_dim = {}\n", spec.hidden_dim));
    out.push_str(&format!("  ffn_dim = {}\n", spec.ffn_dim));
    out.push_str(&format!("  vocab_size = {}\n", spec.vocab_size));
    out.push_str(&format!("  max_context = {}\n", spec.max_context));
    out.push_str(&format!("  qk_column_order = {}\n", spec.qk_column_order));
    if let Some(q) = spec.qkv_format {
        out.push_str(&format!("  qkv_format = {q}\n"));
    }
    if !spec.tensor_name_prefix.is_empty() {
        out.push_str(&format!(
            "  tensor_name_prefix = {}\n",
            spec.tensor_name_prefix
        ));
    }
    for rule in &spec.tensor_name_mapping {
        out.push_str(&format!(
            "  tensor_name_mapping = {} -> {}\n",
            rule.pattern, rule.canonical
        ));
    }
    let g = &spec.generation;
    if *g != GenerationConfig::default() {
        out.push_str("generation_config:\n");
        if let Some(v) = &g.strategy {
            out.push_str(&format!("  strategy = {v}\n"));
        }
        if let Some(v) = g.top_k {
            out.push_str(&format!("  top_k = {v}\n"));
        }
        if let Some(v) = g.top_p {
            out.push_str(&format!("  top_p = {v}\n"));
        }
        if let Some(v) = g.temperature {
            out.push_str(&format!("  temperature = {v}\n"));
        }
        if let Some(v) = g.alpha {
            out.push_str(&format!("  alpha = {v}\n"));
        }
        if let Some(v) = g.tfs_z {
            out.push_str(&format!("  tfs_z = {v}\n"));
        }
        if let Some(v) = g.mirostat_tau {
            out.push_str(&format!("  mirostat_tau = {v}\n"));
        }
        if let Some(v) = g.mirostat_eta {
            out.push_str(&format!("  mirostat_eta = {v}\n"));
        }
        if let Some(v) = g.t_random {
            out.push_str(&format!("  t_random = {v}\n"));
        }
        if let Some(v) = g.seed {
            out.push_str(&format!("  seed = {v}\n"));
        }
        if let Some(v) = g.max_new_tokens {
            out.push_str(&format!("  max_new_tokens = {v}\n"));
        }
    }
    out
}

/// Check every structural invariant; an empty list means the spec is usable.
pub fn validate_spec(spec: &ModelSpec) -> Vec<Violation> {
    let mut v = Vec::new();
    let mut push = |field: &str, rule: &str| {
        v.push(Violation {
            field: field.to_string(),
            rule: rule.to_string(),
        })
    };
    for (field, value) in [
        ("decoder_heads", spec.decoder_heads),
        ("decoder_kv_heads", spec.decoder_kv_heads),
        ("layers", spec.layers),
        ("hidden_dim", spec.hidden_dim),
        ("ffn_dim", spec.ffn_dim),
        ("vocab_size", spec.vocab_size),
        ("max_context", spec.max_context),
    ] {
        if value == 0 {
            push(field, "must be positive");
        }
    }
    if spec.decoder_kv_heads > spec.decoder_heads {
        push("decoder_kv_heads", "must not exceed decoder_heads");
    }
    if spec.decoder_kv_heads > 0
        && spec.decoder_heads > 0
        && !spec.decoder_heads.is_multiple_of(spec.decoder_kv_heads)
    {
        push("decoder_kv_heads", "kv_heads must divide heads");
    }
    if spec.decoder_heads > 0 && !spec.hidden_dim.is_multiple_of(spec.decoder_heads) {
        push("hidden_dim", "must be divisible by decoder_heads");
    }
    if spec.position_embedding == PosKind::Rope
        && spec.decoder_heads > 0
        && spec.hidden_dim.is_multiple_of(spec.decoder_heads)
        && !(spec.hidden_dim / spec.decoder_heads).is_multiple_of(2)
    {
        push("position_embedding", "rope requires an even per-head dim");
    }
    if spec.network_type == NetworkType::EncoderDecoder && spec.encoder_layers.is_none() {
        push(
            "encoder_layers",
            "encoder_decoder specs must name both encoder and decoder layer counts",
        );
    }
    if spec.network_type != NetworkType::EncoderDecoder && spec.encoder_layers.is_some() {
        push("encoder_layers", "only valid for encoder_decoder specs");
    }
    if !(spec.qk_column_order == 1 || spec.qk_column_order == 2) {
        push("qk_column_order", "must be 1 or 2");
    }
    if let Some(q) = spec.qkv_format {
        if q != 1 {
            push("qkv_format", "only fused format 1 is understood");
        }
    }
    v
}

/// Map an external tensor name to its canonical name: strip the configured
/// prefix, then apply the first matching rewrite rule. An empty rule table
/// is the identity mapping.
pub fn resolve_tensor_name(spec: &ModelSpec, external: &str) -> Result<String, SpecError> {
    let name = external
        .strip_prefix(spec.tensor_name_prefix.as_str())
        .unwrap_or(external);
    if spec.tensor_name_mapping.is_empty() {
        return Ok(name.to_string());
    }
    for rule in &spec.tensor_name_mapping {
        if let Some(resolved) = apply_rule(rule, name) {
            return Ok(resolved);
        }
    }
    Err(SpecError::UnmappedTensor(external.to_string()))
}

fn apply_rule(rule: &MappingRule, name: &str) -> Option<String> {
    match rule.pattern.split_once("{i}") {
        None => (rule.pattern == name).then(|| rule.canonical.clone()),
        Some((pre, post)) => {
            let middle = name.strip_prefix(pre)?.strip_suffix(post)?;
            if middle.is_empty() || !middle.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            Some(rule.canonical.replacen("{i}", middle, 1))
        }
    }
}
