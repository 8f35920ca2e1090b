//! Transformer forward pass assembled from the atomic building blocks a
//! model spec selects: normalization, activation, position embedding, and
//! multi-head / grouped-query attention, over per-slot KV caches.
//!
//! Decoder slots are independent: a batched `forward_step` computes exactly
//! what per-slot sequential steps would, bit for bit, which is what makes
//! dynamic batching transparent to each query.

use crate::checkpoint::{head_dim, Checkpoint, CheckpointError};
use crate::modelspec::{ActKind, ModelSpec, NetworkType, NormKind, PosKind};
use crate::tensor::{matvec, softmax_in_place, Tensor, TensorError, WeightMatrix};
use rayon::prelude::*;
use thiserror::Error;

const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown slot {0}")]
    UnknownSlot(usize),
    #[error("slot {0} appears twice in one batch")]
    DuplicateSlot(usize),
    #[error("no free slot (capacity {0})")]
    NoFreeSlot(usize),
    #[error("context overflow: slot holds {len} of max {max} positions")]
    ContextOverflow { len: usize, max: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Head layout of an attention stack: `heads` query heads reading
/// `kv_heads` key/value heads, contiguous groups of `heads / kv_heads`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionConfig {
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl AttentionConfig {
    pub fn new(
        heads: usize,
        kv_heads: usize,
        head_dim: usize,
    ) -> Result<AttentionConfig, EngineError> {
        if heads == 0 || kv_heads == 0 || head_dim == 0 {
            return Err(EngineError::Config("head counts must be positive".into()));
        }
        if !heads.is_multiple_of(kv_heads) {
            return Err(EngineError::Config(format!(
                "kv_heads {kv_heads} must divide heads {heads}"
            )));
        }
        Ok(AttentionConfig {
            heads,
            kv_heads,
            head_dim,
        })
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    fn group_of(&self, head: usize) -> usize {
        head / (self.heads / self.kv_heads)
    }
}

// ---------------------------------------------------------------------------
// Atomic blocks
// ---------------------------------------------------------------------------

/// RMS or standard layer normalization with epsilon 1e-5.
pub fn normalize(
    v: &[f32],
    kind: NormKind,
    gain: &[f32],
    bias: Option<&[f32]>,
) -> Result<Vec<f32>, EngineError> {
    if gain.len() != v.len() {
        return Err(EngineError::Dim(format!(
            "norm gain has {} entries for a {}-dim vector",
            gain.len(),
            v.len()
        )));
    }
    if let Some(b) = bias {
        if b.len() != v.len() {
            return Err(EngineError::Dim("norm bias length mismatch".into()));
        }
    }
    // f64 accumulation keeps constant vectors exactly centered under std.
    let n = v.len() as f64;
    match kind {
        NormKind::Rms => {
            let ms = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>() / n;
            let inv = 1.0 / (ms + NORM_EPS as f64).sqrt();
            Ok(v.iter()
                .zip(gain)
                .map(|(&x, &g)| (x as f64 * inv * g as f64) as f32)
                .collect())
        }
        NormKind::Std => {
            let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
            let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + NORM_EPS as f64).sqrt();
            Ok(v.iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = (x as f64 - mean) * inv * gain[i] as f64;
                    (y + bias.map_or(0.0, |b| b[i] as f64)) as f32
                })
                .collect())
        }
    }
}

/// Elementwise activation; gelu uses the exact Gaussian CDF form.
pub fn activate(v: &mut [f32], kind: ActKind) {
    match kind {
        ActKind::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
        ActKind::Silu => v.iter_mut().for_each(|x| *x /= 1.0 + (-*x).exp()),
        ActKind::Gelu => v.iter_mut().for_each(|x| {
            let xf = *x as f64;
            *x = (0.5 * xf * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2))) as f32;
        }),
    }
}

/// Rotate consecutive pairs of each head by position-dependent angles
/// `theta_i = 10000^(-2i/head_dim)`; identity at position 0.
pub fn rope_in_place(vecs: &mut [f32], head_dim: usize, pos: usize) {
    debug_assert!(head_dim.is_multiple_of(2));
    for head in vecs.chunks_exact_mut(head_dim) {
        for i in 0..head_dim / 2 {
            let theta = (pos as f64) * 10000f64.powf(-2.0 * i as f64 / head_dim as f64);
            let (sin, cos) = theta.sin_cos();
            let (a, b) = (head[2 * i] as f64, head[2 * i + 1] as f64);
            head[2 * i] = (a * cos - b * sin) as f32;
            head[2 * i + 1] = (a * sin + b * cos) as f32;
        }
    }
}

/// Position-encode per-head query/key vectors. Only rope acts here;
/// sinusoidal encoding is added to the hidden state before layer 1 and
/// `empty` is the identity.
pub fn position_encode(vecs: &mut [f32], head_dim: usize, pos: usize, kind: PosKind) {
    if kind == PosKind::Rope {
        rope_in_place(vecs, head_dim, pos);
    }
}

/// The standard sin/cos position table row for one position.
pub fn sinusoidal_encoding(pos: usize, dim: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; dim];
    for i in 0..dim / 2 {
        let theta = (pos as f64) / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = theta.sin() as f32;
        out[2 * i + 1] = theta.cos() as f32;
    }
    if dim % 2 == 1 {
        let i = dim / 2;
        out[dim - 1] = ((pos as f64) / 10000f64.powf(2.0 * i as f64 / dim as f64)).sin() as f32;
    }
    out
}

/// Build grouped K or V heads by mean-pooling contiguous groups of the
/// original heads. With `groups == heads.len()` this is the identity.
pub fn gqa_from_mha(heads: &[&[f32]], groups: usize) -> Result<Vec<Vec<f32>>, EngineError> {
    if groups == 0 || !heads.len().is_multiple_of(groups) {
        return Err(EngineError::Config(format!(
            "{} heads cannot form {} groups",
            heads.len(),
            groups
        )));
    }
    let per_group = heads.len() / groups;
    let dim = heads[0].len();
    let mut out = Vec::with_capacity(groups);
    for g in 0..groups {
        let mut pooled = vec![0.0f32; dim];
        for m in 0..per_group {
            for (p, x) in pooled.iter_mut().zip(heads[g * per_group + m]) {
                *p += x;
            }
        }
        pooled.iter_mut().for_each(|p| *p /= per_group as f32);
        out.push(pooled);
    }
    Ok(out)
}

/// One step of scaled dot-product attention for all query heads against a
/// cached key/value sequence, concatenated and projected by `wo`.
///
/// `keys` and `vals` are `len x kv_dim` row-major; query head `i` reads
/// kv group `i / (heads/kv_heads)`.
pub fn attention_step(
    q: &[f32],
    keys: &[f32],
    vals: &[f32],
    cfg: &AttentionConfig,
    wo: &WeightMatrix,
) -> Result<Vec<f32>, EngineError> {
    if q.len() != cfg.heads * cfg.head_dim {
        return Err(EngineError::Dim(format!(
            "query has {} values, config wants {}",
            q.len(),
            cfg.heads * cfg.head_dim
        )));
    }
    let context = attention_context(q, keys, vals, cfg, 0, cfg.heads)?;
    Ok(matvec(&context, wo)?)
}

/// Per-head attention contexts for heads `[head_offset, head_offset +
/// head_count)` of the global head layout; `q` holds exactly those heads'
/// queries. Sharded execution runs disjoint head ranges per device.
pub(crate) fn attention_context(
    q: &[f32],
    keys: &[f32],
    vals: &[f32],
    cfg: &AttentionConfig,
    head_offset: usize,
    head_count: usize,
) -> Result<Vec<f32>, EngineError> {
    let kv_dim = cfg.kv_dim();
    if keys.len() != vals.len() || !keys.len().is_multiple_of(kv_dim) {
        return Err(EngineError::Dim("cache layout mismatch".into()));
    }
    if q.len() != head_count * cfg.head_dim {
        return Err(EngineError::Dim("query slice length mismatch".into()));
    }
    let len = keys.len() / kv_dim;
    let scale = 1.0 / (cfg.head_dim as f32).sqrt();
    let mut context = vec![0.0f32; head_count * cfg.head_dim];
    let mut scores = vec![0.0f32; len];
    for local in 0..head_count {
        let group = cfg.group_of(head_offset + local);
        let qh = &q[local * cfg.head_dim..(local + 1) * cfg.head_dim];
        for (p, s) in scores.iter_mut().enumerate() {
            let kh = &keys[p * kv_dim + group * cfg.head_dim..][..cfg.head_dim];
            let mut dot = 0.0f32;
            for (a, b) in qh.iter().zip(kh) {
                dot += a * b;
            }
            *s = dot * scale;
        }
        softmax_in_place(&mut scores);
        let ctx = &mut context[local * cfg.head_dim..(local + 1) * cfg.head_dim];
        for (p, &w) in scores.iter().enumerate() {
            let vh = &vals[p * kv_dim + group * cfg.head_dim..][..cfg.head_dim];
            for (c, x) in ctx.iter_mut().zip(vh) {
                *c += w * x;
            }
        }
    }
    Ok(context)
}

// ---------------------------------------------------------------------------
// Model weights arranged for the forward pass
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct NormWeights {
    pub(crate) gain: Vec<f32>,
    pub(crate) bias: Option<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub(crate) struct AttnWeights {
    pub(crate) q: WeightMatrix,
    pub(crate) k: WeightMatrix,
    pub(crate) v: WeightMatrix,
    pub(crate) o: WeightMatrix,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerWeights {
    pub(crate) attn_norm: NormWeights,
    pub(crate) attn: AttnWeights,
    pub(crate) cross_norm: Option<NormWeights>,
    pub(crate) cross: Option<AttnWeights>,
    pub(crate) ffn_norm: NormWeights,
    pub(crate) up: WeightMatrix,
    pub(crate) down: WeightMatrix,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    cfg: AttentionConfig,
    embed: Vec<f32>,
    dec_layers: Vec<LayerWeights>,
    enc_layers: Vec<LayerWeights>,
    output_norm: Option<NormWeights>,
    enc_output_norm: Option<NormWeights>,
    output: Option<WeightMatrix>,
}

impl Model {
    pub fn from_checkpoint(spec: &ModelSpec, ckpt: &Checkpoint) -> Result<Model, EngineError> {
        let violations = crate::modelspec::validate_spec(spec);
        if !violations.is_empty() {
            return Err(EngineError::Config(format!(
                "spec invalid: {}",
                violations
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join("; ")
            )));
        }
        ckpt.validate(spec)?;
        let cfg = AttentionConfig::new(spec.decoder_heads, spec.decoder_kv_heads, head_dim(spec))?;
        let norm = |base: &str| -> Result<NormWeights, EngineError> {
            let gain = ckpt.tensor(&format!("{base}.gain"))?.to_f32()?;
            let bias = if spec.normalization_function == NormKind::Std {
                Some(ckpt.tensor(&format!("{base}.bias"))?.to_f32()?)
            } else {
                None
            };
            Ok(NormWeights { gain, bias })
        };
        let attn = |base: &str| -> Result<AttnWeights, EngineError> {
            Ok(AttnWeights {
                q: ckpt
                    .tensor(&format!("{base}.q.weight"))?
                    .to_weight_matrix()?,
                k: ckpt
                    .tensor(&format!("{base}.k.weight"))?
                    .to_weight_matrix()?,
                v: ckpt
                    .tensor(&format!("{base}.v.weight"))?
                    .to_weight_matrix()?,
                o: ckpt
                    .tensor(&format!("{base}.o.weight"))?
                    .to_weight_matrix()?,
            })
        };
        let stack =
            |prefix: &str, layers: usize, cross: bool| -> Result<Vec<LayerWeights>, EngineError> {
                (0..layers)
                    .map(|i| {
                        Ok(LayerWeights {
                            attn_norm: norm(&format!("{prefix}layers.{i}.attn_norm"))?,
                            attn: attn(&format!("{prefix}layers.{i}.attn"))?,
                            cross_norm: cross
                                .then(|| norm(&format!("{prefix}layers.{i}.cross_norm")))
                                .transpose()?,
                            cross: cross
                                .then(|| attn(&format!("{prefix}layers.{i}.cross")))
                                .transpose()?,
                            ffn_norm: norm(&format!("{prefix}layers.{i}.ffn_norm"))?,
                            up: ckpt
                                .tensor(&format!("{prefix}layers.{i}.ffn.up.weight"))?
                                .to_weight_matrix()?,
                            down: ckpt
                                .tensor(&format!("{prefix}layers.{i}.ffn.down.weight"))?
                                .to_weight_matrix()?,
                        })
                    })
                    .collect()
            };
        let embed = ckpt.tensor("embed.weight")?.to_f32()?;
        let model = match spec.network_type {
            NetworkType::DecoderOnly => Model {
                spec: spec.clone(),
                cfg,
                embed,
                dec_layers: stack("", spec.layers, false)?,
                enc_layers: Vec::new(),
                output_norm: Some(norm("output_norm")?),
                enc_output_norm: None,
                output: Some(ckpt.tensor("output.weight")?.to_weight_matrix()?),
            },
            NetworkType::EncoderOnly => Model {
                spec: spec.clone(),
                cfg,
                embed,
                dec_layers: Vec::new(),
                enc_layers: stack("enc.", spec.layers, false)?,
                output_norm: None,
                enc_output_norm: Some(norm("enc.output_norm")?),
                output: None,
            },
            NetworkType::EncoderDecoder => Model {
                spec: spec.clone(),
                cfg,
                embed,
                dec_layers: stack("", spec.layers, true)?,
                enc_layers: stack("enc.", spec.encoder_layers.unwrap_or(0), false)?,
                output_norm: Some(norm("output_norm")?),
                enc_output_norm: Some(norm("enc.output_norm")?),
                output: Some(ckpt.tensor("output.weight")?.to_weight_matrix()?),
            },
        };
        Ok(model)
    }

    pub fn attention_config(&self) -> AttentionConfig {
        self.cfg
    }

    pub(crate) fn dec_layers(&self) -> &[LayerWeights] {
        &self.dec_layers
    }

    pub(crate) fn output_parts(&self) -> (&NormWeights, &WeightMatrix) {
        (
            self.output_norm.as_ref().expect("decoder output norm"),
            self.output.as_ref().expect("decoder lm head"),
        )
    }

    pub(crate) fn embed_token(&self, token: u32, pos: usize) -> Result<Vec<f32>, EngineError> {
        let h = self.spec.hidden_dim;
        let ix = token as usize;
        if ix >= self.spec.vocab_size {
            return Err(EngineError::Config(format!(
                "token id {token} outside vocab of {}",
                self.spec.vocab_size
            )));
        }
        let mut x = self.embed[ix * h..(ix + 1) * h].to_vec();
        if self.spec.position_embedding == PosKind::Sinusoidal {
            for (a, b) in x.iter_mut().zip(sinusoidal_encoding(pos, h)) {
                *a += b;
            }
        }
        Ok(x)
    }

    pub(crate) fn apply_norm(&self, v: &[f32], w: &NormWeights) -> Result<Vec<f32>, EngineError> {
        normalize(
            v,
            self.spec.normalization_function,
            &w.gain,
            w.bias.as_deref(),
        )
    }

    fn ffn(&self, x: &[f32], layer: &LayerWeights) -> Result<Vec<f32>, EngineError> {
        let normed = self.apply_norm(x, &layer.ffn_norm)?;
        let mut up = matvec(&normed, &layer.up)?;
        activate(&mut up, self.spec.activation_function);
        Ok(matvec(&up, &layer.down)?)
    }

    /// One decode step for one slot: append this token's K/V, attend over
    /// the slot history, and return next-token logits.
    fn decode_one(&self, slot: &mut SlotState, token: u32) -> Result<Vec<f32>, EngineError> {
        let pos = slot.len;
        if pos >= self.spec.max_context {
            return Err(EngineError::ContextOverflow {
                len: pos,
                max: self.spec.max_context,
            });
        }
        let mut x = self.embed_token(token, pos)?;
        for (l, layer) in self.dec_layers.iter().enumerate() {
            let normed = self.apply_norm(&x, &layer.attn_norm)?;
            let mut q = matvec(&normed, &layer.attn.q)?;
            let mut k = matvec(&normed, &layer.attn.k)?;
            let v = matvec(&normed, &layer.attn.v)?;
            position_encode(&mut q, self.cfg.head_dim, pos, self.spec.position_embedding);
            position_encode(&mut k, self.cfg.head_dim, pos, self.spec.position_embedding);
            slot.layers[l].keys.extend_from_slice(&k);
            slot.layers[l].vals.extend_from_slice(&v);
            let attn_out = attention_step(
                &q,
                &slot.layers[l].keys,
                &slot.layers[l].vals,
                &self.cfg,
                &layer.attn.o,
            )?;
            for (a, b) in x.iter_mut().zip(&attn_out) {
                *a += b;
            }
            if let (Some(cross_norm), Some(cross)) = (&layer.cross_norm, &layer.cross) {
                let memory = slot.cross.as_ref().ok_or_else(|| {
                    EngineError::Config("slot has no encoder memory bound".into())
                })?;
                let normed = self.apply_norm(&x, cross_norm)?;
                let q = matvec(&normed, &cross.q)?;
                let out = attention_step(
                    &q,
                    &memory.layers[l].keys,
                    &memory.layers[l].vals,
                    &self.cfg,
                    &cross.o,
                )?;
                for (a, b) in x.iter_mut().zip(&out) {
                    *a += b;
                }
            }
            let ffn_out = self.ffn(&x, layer)?;
            for (a, b) in x.iter_mut().zip(&ffn_out) {
                *a += b;
            }
        }
        slot.len += 1;
        let normed = self.apply_norm(
            &x,
            self.output_norm
                .as_ref()
                .expect("decoder models carry an output norm"),
        )?;
        Ok(matvec(
            &normed,
            self.output
                .as_ref()
                .expect("decoder models carry an lm head"),
        )?)
    }

    /// Bidirectional stack over a whole sequence; returns `[seq, hidden]`.
    pub fn encode(&self, tokens: &[u32]) -> Result<Tensor, EngineError> {
        if self.spec.network_type == NetworkType::DecoderOnly {
            return Err(EngineError::Config(
                "decoder_only models have no encoder".into(),
            ));
        }
        if tokens.len() > self.spec.max_context {
            return Err(EngineError::ContextOverflow {
                len: tokens.len(),
                max: self.spec.max_context,
            });
        }
        let h = self.spec.hidden_dim;
        let kv_dim = self.cfg.kv_dim();
        let mut rows: Vec<Vec<f32>> = tokens
            .iter()
            .enumerate()
            .map(|(pos, &t)| self.embed_token(t, pos))
            .collect::<Result<_, _>>()?;
        for layer in &self.enc_layers {
            // Project and position-encode all rows first, then attend with
            // every position visible to every other (non-causal).
            let mut keys = vec![0.0f32; rows.len() * kv_dim];
            let mut vals = vec![0.0f32; rows.len() * kv_dim];
            let mut queries = Vec::with_capacity(rows.len());
            for (pos, row) in rows.iter().enumerate() {
                let normed = self.apply_norm(row, &layer.attn_norm)?;
                let mut q = matvec(&normed, &layer.attn.q)?;
                let mut k = matvec(&normed, &layer.attn.k)?;
                let v = matvec(&normed, &layer.attn.v)?;
                position_encode(&mut q, self.cfg.head_dim, pos, self.spec.position_embedding);
                position_encode(&mut k, self.cfg.head_dim, pos, self.spec.position_embedding);
                keys[pos * kv_dim..(pos + 1) * kv_dim].copy_from_slice(&k);
                vals[pos * kv_dim..(pos + 1) * kv_dim].copy_from_slice(&v);
                queries.push(q);
            }
            for (pos, q) in queries.iter().enumerate() {
                let out = attention_step(q, &keys, &vals, &self.cfg, &layer.attn.o)?;
                for (a, b) in rows[pos].iter_mut().zip(&out) {
                    *a += b;
                }
            }
            for row in rows.iter_mut() {
                let ffn_out = self.ffn(row, layer)?;
                for (a, b) in row.iter_mut().zip(&ffn_out) {
                    *a += b;
                }
            }
        }
        let mut flat = Vec::with_capacity(rows.len() * h);
        for row in &rows {
            let normed = self.apply_norm(
                row,
                self.enc_output_norm
                    .as_ref()
                    .expect("encoder models carry an encoder output norm"),
            )?;
            flat.extend(normed);
        }
        Ok(Tensor::new(vec![tokens.len(), h], flat)?)
    }
}

// ---------------------------------------------------------------------------
// Engine: slots, caches, batched decode
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
struct LayerKv {
    keys: Vec<f32>,
    vals: Vec<f32>,
}

#[derive(Debug, Clone)]
struct CrossMemory {
    layers: Vec<LayerKv>,
}

#[derive(Debug, Clone)]
struct SlotState {
    len: usize,
    layers: Vec<LayerKv>,
    cross: Option<CrossMemory>,
}

/// Opaque handle to a KV-cache slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SlotId(pub usize);

#[derive(Debug, Clone)]
pub struct Engine {
    model: Model,
    slots: Vec<Option<SlotState>>,
}

impl Engine {
    pub fn new(model: Model, capacity: usize) -> Engine {
        Engine {
            model,
            slots: vec![None; capacity],
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.model.spec
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn alloc_slot(&mut self) -> Result<SlotId, EngineError> {
        let layers = self.model.dec_layers.len();
        for (i, slot) in self.slots.iter_mut().enumerate() {
            if slot.is_none() {
                *slot = Some(SlotState {
                    len: 0,
                    layers: vec![LayerKv::default(); layers],
                    cross: None,
                });
                return Ok(SlotId(i));
            }
        }
        Err(EngineError::NoFreeSlot(self.slots.len()))
    }

    pub fn free_slot(&mut self, id: SlotId) {
        if let Some(slot) = self.slots.get_mut(id.0) {
            *slot = None;
        }
    }

    pub fn slot_len(&self, id: SlotId) -> Result<usize, EngineError> {
        Ok(self.slot(id)?.len)
    }

    /// Roll a slot back to `len` positions, dropping newer cache entries.
    pub fn truncate_slot(&mut self, id: SlotId, len: usize) -> Result<(), EngineError> {
        let kv_dim = self.model.cfg.kv_dim();
        let slot = self.slot_mut(id)?;
        if len > slot.len {
            return Err(EngineError::Config(format!(
                "cannot grow slot from {} to {len} by truncation",
                slot.len
            )));
        }
        for layer in &mut slot.layers {
            layer.keys.truncate(len * kv_dim);
            layer.vals.truncate(len * kv_dim);
        }
        slot.len = len;
        Ok(())
    }

    /// Attach encoder output as cross-attention memory: the per-layer cross
    /// K/V are projected once here and reused every decode step.
    pub fn bind_encoder_memory(&mut self, id: SlotId, memory: &Tensor) -> Result<(), EngineError> {
        let seq = memory.dims()[0];
        let mut layers = Vec::with_capacity(self.model.dec_layers.len());
        for layer in &self.model.dec_layers {
            let cross = layer
                .cross
                .as_ref()
                .ok_or_else(|| EngineError::Config("model has no cross-attention".into()))?;
            let mut kv = LayerKv::default();
            for p in 0..seq {
                kv.keys.extend(matvec(memory.row(p), &cross.k)?);
                kv.vals.extend(matvec(memory.row(p), &cross.v)?);
            }
            layers.push(kv);
        }
        self.slot_mut(id)?.cross = Some(CrossMemory { layers });
        Ok(())
    }

    fn slot(&self, id: SlotId) -> Result<&SlotState, EngineError> {
        self.slots
            .get(id.0)
            .and_then(Option::as_ref)
            .ok_or(EngineError::UnknownSlot(id.0))
    }

    fn slot_mut(&mut self, id: SlotId) -> Result<&mut SlotState, EngineError> {
        self.slots
            .get_mut(id.0)
            .and_then(Option::as_mut)
            .ok_or(EngineError::UnknownSlot(id.0))
    }

    /// One decode step for a batch of slots; returns logits per entry in
    /// batch order. Slots are independent, so the batched result equals
    /// per-slot sequential calls bit for bit.
    pub fn forward_step(&mut self, batch: &[(SlotId, u32)]) -> Result<Vec<Vec<f32>>, EngineError> {
        let mut seen = std::collections::HashSet::with_capacity(batch.len());
        for &(id, _) in batch {
            if !seen.insert(id.0) {
                return Err(EngineError::DuplicateSlot(id.0));
            }
            if self.slots.get(id.0).and_then(Option::as_ref).is_none() {
                return Err(EngineError::UnknownSlot(id.0));
            }
        }
        // Take each slot's state out so the jobs own disjoint data.
        let mut jobs: Vec<(usize, SlotState, u32)> = Vec::with_capacity(batch.len());
        for &(id, token) in batch {
            let state = self.slots[id.0].take().expect("validated above");
            jobs.push((id.0, state, token));
        }
        let model = &self.model;
        let results: Vec<Result<Vec<f32>, EngineError>> = jobs
            .par_iter_mut()
            .map(|(_, state, token)| model.decode_one(state, *token))
            .collect();
        for (ix, state, _) in jobs {
            self.slots[ix] = Some(state);
        }
        results.into_iter().collect()
    }

    /// Feed a whole prompt into a slot; returns the logits after its last
    /// token (the distribution for the first generated token).
    pub fn prefill(&mut self, id: SlotId, tokens: &[u32]) -> Result<Vec<f32>, EngineError> {
        if tokens.is_empty() {
            return Err(EngineError::Config("prompt must be non-empty".into()));
        }
        let mut last = Vec::new();
        for &t in tokens {
            last = self.forward_step(&[(id, t)])?.pop().unwrap();
        }
        Ok(last)
    }

    pub fn encode(&self, tokens: &[u32]) -> Result<Tensor, EngineError> {
        self.model.encode(tokens)
    }
}
