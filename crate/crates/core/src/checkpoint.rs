//! Checkpoint loading: a native binary container, a safetensors subset, and
//! seeded random checkpoints for end-to-end runs without real weights.
//!
//! The native container is a sequence of self-delimiting tensor sections:
//! name length (u16) + name bytes, scheme id (u8), block size (u16), dim
//! count (u8) + dims (u32 each), block count (u32), then the payload. All
//! integers little-endian. Scheme ids: 0 = raw f32, 1 = raw f16, 2..=8 =
//! q8, q6, q5, q4, q3h, q3, q2 block codecs. Raw sections carry
//! `product(dims)` values and use block size / block count 0.

use crate::modelspec::{ModelSpec, NetworkType, NormKind, SpecError};
use crate::quant::{QuantBlock, QuantError, QuantScheme, SchemeKind};
use crate::tensor::{TensorError, WeightMatrix, WeightStorage};
use half::f16;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at byte {offset}: {what}")]
    Parse { offset: usize, what: String },
    #[error("unsupported dtype `{0}` (only F16/F32)")]
    UnsupportedDtype(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has dims {got:?}, expected {want:?}")]
    DimMismatch {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Original storage dtype of a dense tensor; values are upcast to f32 at
/// load, the tag is kept so writers can reproduce the source bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenseDtype {
    F32,
    F16,
}

#[derive(Debug, Clone)]
pub enum TensorData {
    Dense {
        values: Vec<f32>,
        dtype: DenseDtype,
    },
    Quant {
        scheme: QuantScheme,
        blocks: Vec<QuantBlock>,
    },
}

#[derive(Debug, Clone)]
pub struct TensorEntry {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl TensorEntry {
    pub fn dense(dims: Vec<usize>, values: Vec<f32>) -> TensorEntry {
        TensorEntry {
            dims,
            data: TensorData::Dense {
                values,
                dtype: DenseDtype::F32,
            },
        }
    }

    pub fn elem_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Materialize as f32 regardless of storage.
    pub fn to_f32(&self) -> Result<Vec<f32>, CheckpointError> {
        match &self.data {
            TensorData::Dense { values, .. } => Ok(values.clone()),
            TensorData::Quant { blocks, .. } => {
                let mut out = Vec::with_capacity(self.elem_count());
                for b in blocks {
                    out.extend(crate::quant::dequantize_block(b)?);
                }
                Ok(out)
            }
        }
    }

    /// View a 2-D (or 1-D, treated as one row) tensor as a weight matrix.
    pub fn to_weight_matrix(&self) -> Result<WeightMatrix, CheckpointError> {
        let (rows, cols) = match self.dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => {
                return Err(CheckpointError::Integrity(format!(
                    "cannot view dims {other:?} as a matrix"
                )))
            }
        };
        match &self.data {
            TensorData::Dense { values, .. } => {
                Ok(WeightMatrix::from_f32(rows, cols, values.clone())?)
            }
            TensorData::Quant { blocks, .. } => Ok(WeightMatrix {
                rows,
                cols,
                storage: WeightStorage::Quantized(blocks.clone()),
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, TensorEntry>,
    pub spec_fingerprint: u64,
}

impl Checkpoint {
    pub fn new(spec: &ModelSpec) -> Checkpoint {
        Checkpoint {
            tensors: BTreeMap::new(),
            spec_fingerprint: spec_fingerprint(spec),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&TensorEntry, CheckpointError> {
        self.tensors
            .get(name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    /// Check that every tensor the spec's graph needs is present with the
    /// right dims. Returns the names of extra tensors as warnings.
    pub fn validate(&self, spec: &ModelSpec) -> Result<Vec<String>, CheckpointError> {
        let required = required_tensors(spec);
        for (name, dims) in &required {
            let entry = self.tensor(name)?;
            if &entry.dims != dims {
                return Err(CheckpointError::DimMismatch {
                    name: name.clone(),
                    got: entry.dims.clone(),
                    want: dims.clone(),
                });
            }
        }
        let needed: std::collections::BTreeSet<&str> =
            required.iter().map(|(n, _)| n.as_str()).collect();
        Ok(self
            .tensors
            .keys()
            .filter(|k| !needed.contains(k.as_str()))
            .cloned()
            .collect())
    }
}

/// Stable fingerprint of the printed spec document.
pub fn spec_fingerprint(spec: &ModelSpec) -> u64 {
    fnv1a64(crate::modelspec::print_spec(spec).as_bytes())
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Every tensor the forward graph needs, with canonical names and dims.
pub fn required_tensors(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    let h = spec.hidden_dim;
    let kv_dim = head_dim(spec) * spec.decoder_kv_heads;
    let mut out = vec![("embed.weight".to_string(), vec![spec.vocab_size, h])];
    let norm_tensors = |out: &mut Vec<(String, Vec<usize>)>, base: &str| {
        out.push((format!("{base}.gain"), vec![h]));
        if spec.normalization_function == NormKind::Std {
            out.push((format!("{base}.bias"), vec![h]));
        }
    };
    let attn_tensors = |out: &mut Vec<(String, Vec<usize>)>, base: &str| {
        out.push((format!("{base}.q.weight"), vec![h, h]));
        out.push((format!("{base}.k.weight"), vec![h, kv_dim]));
        out.push((format!("{base}.v.weight"), vec![h, kv_dim]));
        out.push((format!("{base}.o.weight"), vec![h, h]));
    };
    let stack = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, layers: usize, cross: bool| {
        for i in 0..layers {
            norm_tensors(out, &format!("{prefix}layers.{i}.attn_norm"));
            attn_tensors(out, &format!("{prefix}layers.{i}.attn"));
            if cross {
                norm_tensors(out, &format!("{prefix}layers.{i}.cross_norm"));
                attn_tensors(out, &format!("{prefix}layers.{i}.cross"));
            }
            norm_tensors(out, &format!("{prefix}layers.{i}.ffn_norm"));
            out.push((
                format!("{prefix}layers.{i}.ffn.up.weight"),
                vec![h, spec.ffn_dim],
            ));
            out.push((
                format!("{prefix}layers.{i}.ffn.down.weight"),
                vec![spec.ffn_dim, h],
            ));
        }
    };
    match spec.network_type {
        NetworkType::DecoderOnly => {
            stack(&mut out, "", spec.layers, false);
            norm_tensors(&mut out, "output_norm");
            out.push(("output.weight".to_string(), vec![h, spec.vocab_size]));
        }
        NetworkType::EncoderOnly => {
            stack(&mut out, "enc.", spec.layers, false);
            norm_tensors(&mut out, "enc.output_norm");
        }
        NetworkType::EncoderDecoder => {
            stack(&mut out, "enc.", spec.encoder_layers.unwrap_or(0), false);
            norm_tensors(&mut out, "enc.output_norm");
            stack(&mut out, "", spec.layers, true);
            norm_tensors(&mut out, "output_norm");
            out.push(("output.weight".to_string(), vec![h, spec.vocab_size]));
        }
    }
    out
}

pub fn head_dim(spec: &ModelSpec) -> usize {
    spec.hidden_dim / spec.decoder_heads
}

/// Deterministic random checkpoint: every tensor is Gaussian with scale
/// `1/sqrt(hidden_dim)`, seeded per tensor name so iteration order and
/// partial loads cannot change the values.
pub fn random_checkpoint(spec: &ModelSpec, seed: u64) -> Checkpoint {
    let mut ckpt = Checkpoint::new(spec);
    let scale = 1.0 / (spec.hidden_dim as f64).sqrt();
    let normal = Normal::new(0.0, scale).expect("positive std dev");
    for (name, dims) in required_tensors(spec) {
        let tensor_seed = fnv1a64(name.as_bytes()) ^ seed.wrapping_mul(0x9E3779B97F4A7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(tensor_seed);
        let n: usize = dims.iter().product();
        let values: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
        ckpt.tensors.insert(name, TensorEntry::dense(dims, values));
    }
    ckpt
}

// ---------------------------------------------------------------------------
// Native container
// ---------------------------------------------------------------------------

fn scheme_id(data: &TensorData) -> u8 {
    match data {
        TensorData::Dense {
            dtype: DenseDtype::F32,
            ..
        } => 0,
        TensorData::Dense {
            dtype: DenseDtype::F16,
            ..
        } => 1,
        TensorData::Quant { scheme, .. } => match scheme.kind {
            SchemeKind::Fp16 => 1,
            SchemeKind::Q8 => 2,
            SchemeKind::Q6 => 3,
            SchemeKind::Q5 => 4,
            SchemeKind::Q4 => 5,
            SchemeKind::Q3H => 6,
            SchemeKind::Q3 => 7,
            SchemeKind::Q2 => 8,
        },
    }
}

fn kind_from_id(id: u8) -> Option<SchemeKind> {
    match id {
        2 => Some(SchemeKind::Q8),
        3 => Some(SchemeKind::Q6),
        4 => Some(SchemeKind::Q5),
        5 => Some(SchemeKind::Q4),
        6 => Some(SchemeKind::Q3H),
        7 => Some(SchemeKind::Q3),
        8 => Some(SchemeKind::Q2),
        _ => None,
    }
}

/// Row/column view of a tensor for block layout: trailing axis is the row
/// length, everything before it is flattened into rows.
fn matrix_view(dims: &[usize]) -> (usize, usize) {
    match dims {
        [] => (0, 0),
        [n] => (1, *n),
        more => (
            more[..more.len() - 1].iter().product(),
            more[more.len() - 1],
        ),
    }
}

/// Lengths of the blocks covering one row of `cols` weights.
fn row_block_lens(cols: usize, block_size: usize) -> Vec<usize> {
    let mut lens = Vec::new();
    let mut left = cols;
    while left > 0 {
        let take = left.min(block_size);
        lens.push(take);
        left -= take;
    }
    lens
}

pub fn write_native(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut file = std::fs::File::create(path)?;
    let mut buf = Vec::new();
    for (name, entry) in &ckpt.tensors {
        buf.clear();
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(scheme_id(&entry.data));
        match &entry.data {
            TensorData::Dense { values, dtype } => {
                buf.extend_from_slice(&0u16.to_le_bytes()); // block size
                buf.push(entry.dims.len() as u8);
                for &d in &entry.dims {
                    buf.extend_from_slice(&(d as u32).to_le_bytes());
                }
                buf.extend_from_slice(&0u32.to_le_bytes()); // block count
                match dtype {
                    DenseDtype::F32 => {
                        for v in values {
                            buf.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                    DenseDtype::F16 => {
                        for v in values {
                            buf.extend_from_slice(&f16::from_f32(*v).to_bits().to_le_bytes());
                        }
                    }
                }
            }
            TensorData::Quant { scheme, blocks } => {
                buf.extend_from_slice(&(scheme.block_size as u16).to_le_bytes());
                buf.push(entry.dims.len() as u8);
                for &d in &entry.dims {
                    buf.extend_from_slice(&(d as u32).to_le_bytes());
                }
                buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
                for b in blocks {
                    buf.extend_from_slice(&b.to_bytes());
                }
            }
        }
        file.write_all(&buf)?;
    }
    Ok(())
}

pub fn load_native(path: &Path, spec: &ModelSpec) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path)?;
    let mut ckpt = Checkpoint::new(spec);
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *pos + n > bytes.len() {
            return Err(CheckpointError::Integrity(format!(
                "truncated file: need {n} bytes at offset {pos}",
                pos = *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    while pos < bytes.len() {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec()).map_err(|_| {
            CheckpointError::Parse {
                offset: pos,
                what: "tensor name is not UTF-8".into(),
            }
        })?;
        let id = take(&mut pos, 1)?[0];
        let block_size = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let dim_count = take(&mut pos, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(dim_count);
        for _ in 0..dim_count {
            dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let block_count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let elems: usize = dims.iter().product();

        let data = if id <= 1 {
            if block_count != 0 || block_size != 0 {
                return Err(CheckpointError::Integrity(format!(
                    "raw tensor `{name}` declares blocks"
                )));
            }
            let width = if id == 0 { 4 } else { 2 };
            let payload = take(&mut pos, elems * width)?;
            let values: Vec<f32> = if id == 0 {
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            } else {
                payload
                    .chunks_exact(2)
                    .map(|c| f16::from_bits(u16::from_le_bytes(c.try_into().unwrap())).to_f32())
                    .collect()
            };
            TensorData::Dense {
                values,
                dtype: if id == 0 {
                    DenseDtype::F32
                } else {
                    DenseDtype::F16
                },
            }
        } else {
            let kind = kind_from_id(id).ok_or_else(|| CheckpointError::Parse {
                offset: pos,
                what: format!("unknown scheme id {id} for tensor `{name}`"),
            })?;
            let scheme = QuantScheme::new(kind, block_size)?;
            let (rows, cols) = matrix_view(&dims);
            let lens = row_block_lens(cols, block_size);
            if lens.len() * rows != block_count {
                return Err(CheckpointError::Integrity(format!(
                    "tensor `{name}`: {block_count} blocks cannot tile {rows}x{cols} with block size {block_size}"
                )));
            }
            let mut blocks = Vec::with_capacity(block_count);
            for _ in 0..rows {
                for &len in &lens {
                    let nbytes = scheme.block_bytes(len);
                    let raw = take(&mut pos, nbytes)?;
                    blocks.push(QuantBlock::from_bytes(scheme, len, raw)?);
                }
            }
            TensorData::Quant { scheme, blocks }
        };
        ckpt.tensors.insert(name, TensorEntry { dims, data });
    }
    Ok(ckpt)
}

// ---------------------------------------------------------------------------
// Safetensors subset
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct StEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: (usize, usize),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Skip tensors no mapping rule covers instead of failing.
    pub skip_unmapped: bool,
}

pub fn load_safetensors(path: &Path, spec: &ModelSpec) -> Result<Checkpoint, CheckpointError> {
    load_safetensors_with(path, spec, LoadOptions::default())
}

pub fn load_safetensors_with(
    path: &Path,
    spec: &ModelSpec,
    opts: LoadOptions,
) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 {
        return Err(CheckpointError::Parse {
            offset: 0,
            what: "file shorter than the 8-byte header length".into(),
        });
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if 8 + header_len > bytes.len() {
        return Err(CheckpointError::Parse {
            offset: 8,
            what: format!(
                "header length {header_len} exceeds file size {}",
                bytes.len()
            ),
        });
    }
    let header: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(&bytes[8..8 + header_len]).map_err(|e| CheckpointError::Parse {
            offset: 8,
            what: format!("metadata is not valid JSON: {e}"),
        })?;
    let data = &bytes[8 + header_len..];

    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut ckpt = Checkpoint::new(spec);
    let mut raw: BTreeMap<String, TensorEntry> = BTreeMap::new();
    for (name, value) in &header {
        if name == "__metadata__" {
            continue;
        }
        let entry: StEntry =
            serde_json::from_value(value.clone()).map_err(|e| CheckpointError::Parse {
                offset: 8,
                what: format!("tensor `{name}`: {e}"),
            })?;
        let (start, end) = entry.data_offsets;
        if start > end || end > data.len() {
            return Err(CheckpointError::Integrity(format!(
                "tensor `{name}` offsets {start}..{end} out of range 0..{}",
                data.len()
            )));
        }
        let elems: usize = entry.shape.iter().product();
        let payload = &data[start..end];
        let values: Vec<f32> = match entry.dtype.as_str() {
            "F32" => {
                if payload.len() != elems * 4 {
                    return Err(CheckpointError::Integrity(format!(
                        "tensor `{name}` payload is {} bytes, shape needs {}",
                        payload.len(),
                        elems * 4
                    )));
                }
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
            "F16" => {
                if payload.len() != elems * 2 {
                    return Err(CheckpointError::Integrity(format!(
                        "tensor `{name}` payload is {} bytes, shape needs {}",
                        payload.len(),
                        elems * 2
                    )));
                }
                payload
                    .chunks_exact(2)
                    .map(|c| f16::from_bits(u16::from_le_bytes(c.try_into().unwrap())).to_f32())
                    .collect()
            }
            other => return Err(CheckpointError::UnsupportedDtype(other.to_string())),
        };
        spans.push((start, end));
        let canonical = match crate::modelspec::resolve_tensor_name(spec, name) {
            Ok(c) => c,
            Err(SpecError::UnmappedTensor(_)) if opts.skip_unmapped => continue,
            Err(e) => return Err(e.into()),
        };
        raw.insert(
            canonical,
            TensorEntry {
                dims: entry.shape,
                data: TensorData::Dense {
                    values,
                    dtype: if entry.dtype == "F16" {
                        DenseDtype::F16
                    } else {
                        DenseDtype::F32
                    },
                },
            },
        );
    }
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[0].1 > pair[1].0 {
            return Err(CheckpointError::Integrity(format!(
                "overlapping data offsets: {:?} and {:?}",
                pair[0], pair[1]
            )));
        }
    }
    ckpt.tensors = normalize_external(raw, spec)?;
    Ok(ckpt)
}

/// Serialize dense tensors in safetensors layout: sorted names, minimal
/// JSON header, payloads packed in name order.
pub fn write_safetensors(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut payloads: Vec<(&String, Vec<u8>, &TensorEntry)> = Vec::new();
    for (name, entry) in &ckpt.tensors {
        let TensorData::Dense { values, dtype } = &entry.data else {
            return Err(CheckpointError::Integrity(format!(
                "tensor `{name}` is quantized; only the native container holds quantized data"
            )));
        };
        let mut bytes = Vec::new();
        match dtype {
            DenseDtype::F32 => {
                for v in values {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            DenseDtype::F16 => {
                for v in values {
                    bytes.extend_from_slice(&f16::from_f32(*v).to_bits().to_le_bytes());
                }
            }
        }
        payloads.push((name, bytes, entry));
    }
    let mut header = String::from("{");
    let mut offset = 0usize;
    for (i, (name, bytes, entry)) in payloads.iter().enumerate() {
        if i > 0 {
            header.push(',');
        }
        let dtype = match &entry.data {
            TensorData::Dense {
                dtype: DenseDtype::F16,
                ..
            } => "F16",
            _ => "F32",
        };
        let shape = entry
            .dims
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        header.push_str(&format!(
            "\"{name}\":{{\"dtype\":\"{dtype}\",\"shape\":[{shape}],\"data_offsets\":[{},{}]}}",
            offset,
            offset + bytes.len()
        ));
        offset += bytes.len();
    }
    header.push('}');
    let mut file = std::fs::File::create(path)?;
    file.write_all(&(header.len() as u64).to_le_bytes())?;
    file.write_all(header.as_bytes())?;
    for (_, bytes, _) in &payloads {
        file.write_all(bytes)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Load-time normalization of external checkpoints
// ---------------------------------------------------------------------------

/// Bring externally-stored tensors into canonical form: split fused QKV
/// tensors, convert split-half Q/K column order, and mean-pool K/V heads
/// down to the spec'd group count when the checkpoint stores all H heads.
fn normalize_external(
    mut tensors: BTreeMap<String, TensorEntry>,
    spec: &ModelSpec,
) -> Result<BTreeMap<String, TensorEntry>, CheckpointError> {
    let h = spec.hidden_dim;
    let hd = head_dim(spec);
    let kv_dim = hd * spec.decoder_kv_heads;

    if spec.qkv_format == Some(1) {
        let fused: Vec<String> = tensors
            .keys()
            .filter(|k| k.ends_with(".attn.qkv.weight") || k.ends_with(".cross.qkv.weight"))
            .cloned()
            .collect();
        for name in fused {
            let entry = tensors.remove(&name).unwrap();
            let base = name.trim_end_matches(".qkv.weight");
            let TensorData::Dense { values, dtype } = entry.data else {
                return Err(CheckpointError::Integrity(format!(
                    "fused tensor `{name}` must be dense"
                )));
            };
            let [rows, cols] = entry.dims[..] else {
                return Err(CheckpointError::DimMismatch {
                    name,
                    got: entry.dims,
                    want: vec![h, 0],
                });
            };
            let kv_cols = (cols - h) / 2;
            if rows != h || h + 2 * kv_cols != cols {
                return Err(CheckpointError::DimMismatch {
                    name,
                    got: vec![rows, cols],
                    want: vec![h, h + 2 * kv_dim],
                });
            }
            let mut q = Vec::with_capacity(rows * h);
            let mut k = Vec::with_capacity(rows * kv_cols);
            let mut v = Vec::with_capacity(rows * kv_cols);
            for r in 0..rows {
                let row = &values[r * cols..(r + 1) * cols];
                q.extend_from_slice(&row[..h]);
                k.extend_from_slice(&row[h..h + kv_cols]);
                v.extend_from_slice(&row[h + kv_cols..]);
            }
            for (suffix, cols2, data) in [(".q", h, q), (".k", kv_cols, k), (".v", kv_cols, v)] {
                tensors.insert(
                    format!("{base}{suffix}.weight"),
                    TensorEntry {
                        dims: vec![rows, cols2],
                        data: TensorData::Dense {
                            values: data,
                            dtype,
                        },
                    },
                );
            }
        }
    }

    if spec.qk_column_order == 2 {
        let targets: Vec<String> = tensors
            .keys()
            .filter(|k| k.ends_with(".attn.q.weight") || k.ends_with(".attn.k.weight"))
            .cloned()
            .collect();
        for name in targets {
            let entry = tensors.get_mut(&name).unwrap();
            let cols = *entry.dims.last().unwrap();
            if let TensorData::Dense { values, .. } = &mut entry.data {
                *values = split_half_to_interleaved(values, cols, hd);
            }
        }
    }

    // Pool K/V columns from H heads down to G groups where needed.
    if spec.decoder_kv_heads < spec.decoder_heads {
        let targets: Vec<String> = tensors
            .keys()
            .filter(|k| {
                (k.ends_with(".k.weight") || k.ends_with(".v.weight"))
                    && tensors[*k].dims.last() == Some(&h)
            })
            .cloned()
            .collect();
        for name in targets {
            let entry = tensors.remove(&name).unwrap();
            let TensorData::Dense { values, dtype } = entry.data else {
                return Err(CheckpointError::Integrity(format!(
                    "cannot pool quantized tensor `{name}`"
                )));
            };
            let rows = entry.dims[0];
            let pooled = pool_head_columns(
                &values,
                rows,
                h,
                hd,
                spec.decoder_heads,
                spec.decoder_kv_heads,
            );
            tensors.insert(
                name,
                TensorEntry {
                    dims: vec![rows, kv_dim],
                    data: TensorData::Dense {
                        values: pooled,
                        dtype,
                    },
                },
            );
        }
    }

    Ok(tensors)
}

/// Convert per-head `[first halves | second halves]` column layout into the
/// canonical interleaved-pair layout used by the rope implementation.
fn split_half_to_interleaved(values: &[f32], cols: usize, head_dim: usize) -> Vec<f32> {
    let rows = values.len() / cols;
    let heads = cols / head_dim;
    let mut out = vec![0.0f32; values.len()];
    for r in 0..rows {
        for head in 0..heads {
            for j in 0..head_dim {
                let canonical = if j < head_dim / 2 {
                    2 * j
                } else {
                    2 * (j - head_dim / 2) + 1
                };
                out[r * cols + head * head_dim + canonical] =
                    values[r * cols + head * head_dim + j];
            }
        }
    }
    out
}

/// Mean-pool the column blocks of `heads` heads into `groups` group heads.
fn pool_head_columns(
    values: &[f32],
    rows: usize,
    cols: usize,
    head_dim: usize,
    heads: usize,
    groups: usize,
) -> Vec<f32> {
    let per_group = heads / groups;
    let out_cols = groups * head_dim;
    let mut out = vec![0.0f32; rows * out_cols];
    for r in 0..rows {
        for g in 0..groups {
            for j in 0..head_dim {
                let mut acc = 0.0f32;
                for m in 0..per_group {
                    let head = g * per_group + m;
                    acc += values[r * cols + head * head_dim + j];
                }
                out[r * out_cols + g * head_dim + j] = acc / per_group as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelspec::parse_spec;

    fn tiny_spec() -> ModelSpec {
        parse_spec(
            "\
model_file_format = native
tokenizer_file = vocab.txt
tokenization_algorithm = char
network_structure:
  type = decoder_only
  normalization_function = rms
  activation_function = silu
  position_embedding = rope
  decoder_heads = 4
  decoder_kv_heads = 2
  layers = 2
  hidden_dim = 16
  ffn_dim = 32
  vocab_size = 40
  max_context = 32
",
        )
        .unwrap()
    }

    #[test]
    fn random_checkpoint_is_deterministic_and_complete() {
        let spec = tiny_spec();
        let a = random_checkpoint(&spec, 7);
        let b = random_checkpoint(&spec, 7);
        assert_eq!(a.tensors.len(), b.tensors.len());
        for (name, ta) in &a.tensors {
            let tb = &b.tensors[name];
            assert_eq!(ta.to_f32().unwrap(), tb.to_f32().unwrap(), "{name}");
        }
        let c = random_checkpoint(&spec, 8);
        let embed_a = a.tensor("embed.weight").unwrap().to_f32().unwrap();
        let embed_c = c.tensor("embed.weight").unwrap().to_f32().unwrap();
        assert_ne!(embed_a, embed_c);
        assert!(a.validate(&spec).unwrap().is_empty());
    }

    #[test]
    fn native_roundtrip_dense_and_quantized() {
        let spec = tiny_spec();
        let mut ckpt = random_checkpoint(&spec, 3);
        // Quantize one matrix into the checkpoint.
        let entry = ckpt.tensor("layers.0.ffn.up.weight").unwrap().clone();
        let values = entry.to_f32().unwrap();
        let scheme = QuantScheme::new(SchemeKind::Q3H, 32).unwrap();
        let wm = WeightMatrix::quantize(entry.dims[0], entry.dims[1], &values, scheme).unwrap();
        let WeightStorage::Quantized(blocks) = wm.storage else {
            unreachable!()
        };
        ckpt.tensors.insert(
            "layers.0.ffn.up.weight".into(),
            TensorEntry {
                dims: entry.dims.clone(),
                data: TensorData::Quant { scheme, blocks },
            },
        );
        let in_memory = ckpt
            .tensor("layers.0.ffn.up.weight")
            .unwrap()
            .to_f32()
            .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.iknt");
        write_native(&path, &ckpt).unwrap();
        let loaded = load_native(&path, &spec).unwrap();
        assert_eq!(loaded.tensors.len(), ckpt.tensors.len());
        let reloaded = loaded
            .tensor("layers.0.ffn.up.weight")
            .unwrap()
            .to_f32()
            .unwrap();
        // save -> load -> dequantize must match the in-memory path bit for bit
        assert_eq!(reloaded, in_memory);
        let embed = loaded.tensor("embed.weight").unwrap().to_f32().unwrap();
        assert_eq!(
            embed,
            ckpt.tensor("embed.weight").unwrap().to_f32().unwrap()
        );
    }

    #[test]
    fn native_truncated_file_errors() {
        let spec = tiny_spec();
        let ckpt = random_checkpoint(&spec, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.iknt");
        write_native(&path, &ckpt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            load_native(&path, &spec),
            Err(CheckpointError::Integrity(_))
        ));
    }

    #[test]
    fn safetensors_single_tensor() {
        let mut spec = tiny_spec();
        spec.tensor_name_prefix = String::new();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        let header = r#"{"x":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header.as_bytes());
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        let ckpt = load_safetensors(&path, &spec).unwrap();
        let x = ckpt.tensor("x").unwrap();
        assert_eq!(x.dims, vec![2, 2]);
        assert_eq!(x.to_f32().unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn safetensors_header_too_long_errors() {
        let spec = tiny_spec();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        let mut bytes = (1u64 << 30).to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_safetensors(&path, &spec),
            Err(CheckpointError::Parse { offset: 8, .. })
        ));
    }

    #[test]
    fn safetensors_unsupported_dtype_and_overlap() {
        let mut spec = tiny_spec();
        spec.tensor_name_prefix = String::new();
        let dir = tempfile::tempdir().unwrap();

        let path = dir.path().join("bf16.safetensors");
        let header = r#"{"x":{"dtype":"BF16","shape":[2],"data_offsets":[0,4]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&[0u8; 4]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_safetensors(&path, &spec),
            Err(CheckpointError::UnsupportedDtype(_))
        ));

        let path = dir.path().join("overlap.safetensors");
        let header = concat!(
            r#"{"x":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"#,
            r#""y":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#
        );
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&[0u8; 12]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_safetensors(&path, &spec),
            Err(CheckpointError::Integrity(_))
        ));
    }

    #[test]
    fn safetensors_write_is_stable_after_one_roundtrip() {
        let spec = tiny_spec();
        let ckpt = random_checkpoint(&spec, 5);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.safetensors");
        let p2 = dir.path().join("b.safetensors");
        write_safetensors(&p1, &ckpt).unwrap();
        let mut reload_spec = spec.clone();
        reload_spec.tensor_name_prefix = String::new();
        let loaded = load_safetensors(&p1, &reload_spec).unwrap();
        write_safetensors(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn kv_head_pooling_matches_group_means() {
        let mut spec = tiny_spec();
        spec.qk_column_order = 1;
        // Build a checkpoint that stores all 4 heads for k/v (cols = hidden).
        let h = spec.hidden_dim;
        let hd = head_dim(&spec);
        let mut raw = BTreeMap::new();
        let values: Vec<f32> = (0..h * h).map(|i| i as f32).collect();
        raw.insert(
            "layers.0.attn.k.weight".to_string(),
            TensorEntry::dense(vec![h, h], values.clone()),
        );
        let out = normalize_external(raw, &spec).unwrap();
        let pooled = out["layers.0.attn.k.weight"].to_f32().unwrap();
        assert_eq!(out["layers.0.attn.k.weight"].dims, vec![h, hd * 2]);
        // Group 0 pools heads 0,1; check one element by hand.
        let expect = (values[0] + values[hd]) / 2.0;
        assert_eq!(pooled[0], expect);
    }

    #[test]
    fn split_half_layout_converts_to_interleaved() {
        // One row, one head of dim 4: [a b c d] in split-half layout means
        // pairs (a,c) and (b,d) in interleaved layout.
        let out = split_half_to_interleaved(&[1.0, 2.0, 3.0, 4.0], 4, 4);
        assert_eq!(out, vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn fused_qkv_splits() {
        let mut spec = tiny_spec();
        spec.qkv_format = Some(1);
        spec.qk_column_order = 1;
        spec.decoder_kv_heads = 4; // no pooling, kv_dim == hidden
        let h = spec.hidden_dim;
        let cols = 3 * h;
        let values: Vec<f32> = (0..h * cols).map(|i| i as f32).collect();
        let mut raw = BTreeMap::new();
        raw.insert(
            "layers.0.attn.qkv.weight".to_string(),
            TensorEntry::dense(vec![h, cols], values.clone()),
        );
        let out = normalize_external(raw, &spec).unwrap();
        assert!(out.contains_key("layers.0.attn.q.weight"));
        assert!(out.contains_key("layers.0.attn.k.weight"));
        assert!(out.contains_key("layers.0.attn.v.weight"));
        let q = out["layers.0.attn.q.weight"].to_f32().unwrap();
        assert_eq!(q[..h], values[..h]);
        let k = out["layers.0.attn.k.weight"].to_f32().unwrap();
        assert_eq!(k[..h], values[h..2 * h]);
    }

    #[test]
    fn validate_reports_missing_and_mismatched() {
        let spec = tiny_spec();
        let mut ckpt = random_checkpoint(&spec, 1);
        ckpt.tensors.remove("output.weight");
        assert!(matches!(
            ckpt.validate(&spec),
            Err(CheckpointError::MissingTensor(_))
        ));
        let mut ckpt = random_checkpoint(&spec, 1);
        ckpt.tensors.insert(
            "embed.weight".into(),
            TensorEntry::dense(vec![2, 2], vec![0.0; 4]),
        );
        assert!(matches!(
            ckpt.validate(&spec),
            Err(CheckpointError::DimMismatch { .. })
        ));
        let mut ckpt = random_checkpoint(&spec, 1);
        ckpt.tensors
            .insert("leftover".into(), TensorEntry::dense(vec![1], vec![0.0]));
        assert_eq!(ckpt.validate(&spec).unwrap(), vec!["leftover".to_string()]);
    }
}
