//! Multi-device partition planning and simulation.
//!
//! Three strategies split a model across devices: layer-wise (pipeline
//! stages own layer ranges), tensor-wise (every layer's heads and FFN
//! columns split across a group), and hybrid (a stages x groups grid of
//! both). The simulator executes a plan shard by shard in-process and must
//! reproduce single-device logits; the cost model ranks the strategies the
//! way real hardware does without claiming real timings.

use crate::engine::{attention_context, EngineError, Model};
use crate::modelspec::{NetworkType, PosKind};
use crate::tensor::matvec;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionStrategy {
    LayerWise,
    TensorWise,
    Hybrid,
}

impl PartitionStrategy {
    pub fn parse(name: &str) -> Option<PartitionStrategy> {
        match name {
            "layer_wise" | "layer-wise" => Some(PartitionStrategy::LayerWise),
            "tensor_wise" | "tensor-wise" => Some(PartitionStrategy::TensorWise),
            "hybrid" => Some(PartitionStrategy::Hybrid),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PartitionStrategy::LayerWise => "layer-wise",
            PartitionStrategy::TensorWise => "tensor-wise",
            PartitionStrategy::Hybrid => "hybrid",
        }
    }
}

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("{heads} heads cannot split into {groups} equal groups")]
    IndivisibleHeads { heads: usize, groups: usize },
    #[error("{layers} layers cannot fill {stages} pipeline stages")]
    TooFewLayers { layers: usize, stages: usize },
    #[error("grid {stages}x{groups} does not cover {devices} devices")]
    GridMismatch {
        devices: usize,
        stages: usize,
        groups: usize,
    },
    #[error("hybrid partitioning needs an explicit stages x groups grid")]
    MissingGrid,
    #[error("plan does not fit the model: {0}")]
    ModelMismatch(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// One device's share: 1-based inclusive layer and head ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub device: usize,
    pub layer_range: (usize, usize),
    pub head_range: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct PartitionPlan {
    pub strategy: PartitionStrategy,
    pub assignments: Vec<Assignment>,
    pub pipeline_stages: usize,
    pub tensor_groups: usize,
    pub layers: usize,
    pub heads: usize,
}

/// Analytic cost parameters, in abstract time units per token.
#[derive(Debug, Clone, Copy)]
pub struct CostModel {
    /// Full-layer compute on one device; a group of g devices shares it.
    pub t_layer_compute: f64,
    /// Cost of one tensor-parallel merge per extra participant.
    pub t_merge: f64,
    /// Hand-off between adjacent pipeline stages.
    pub t_hop: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            t_layer_compute: 16.0,
            t_merge: 1.0,
            t_hop: 0.0,
        }
    }
}

/// Contiguous balanced ranges, remainder to the earlier chunks; 1-based
/// inclusive bounds.
fn balanced_ranges(total: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = total / parts;
    let extra = total % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 1usize;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        out.push((start, start + len - 1));
        start += len;
    }
    out
}

pub fn plan(
    strategy: PartitionStrategy,
    layers: usize,
    heads: usize,
    devices: usize,
    grid: Option<(usize, usize)>,
) -> Result<PartitionPlan, PartitionError> {
    let (stages, groups) = match strategy {
        PartitionStrategy::LayerWise => (devices, 1),
        PartitionStrategy::TensorWise => (1, devices),
        PartitionStrategy::Hybrid => grid.ok_or(PartitionError::MissingGrid)?,
    };
    if stages * groups != devices {
        return Err(PartitionError::GridMismatch {
            devices,
            stages,
            groups,
        });
    }
    if layers < stages {
        return Err(PartitionError::TooFewLayers { layers, stages });
    }
    if !heads.is_multiple_of(groups) {
        return Err(PartitionError::IndivisibleHeads { heads, groups });
    }
    let layer_ranges = balanced_ranges(layers, stages);
    let head_ranges = balanced_ranges(heads, groups);
    let mut assignments = Vec::with_capacity(devices);
    for (stage, &layer_range) in layer_ranges.iter().enumerate() {
        for (group, &head_range) in head_ranges.iter().enumerate() {
            assignments.push(Assignment {
                device: stage * groups + group,
                layer_range,
                head_range,
            });
        }
    }
    Ok(PartitionPlan {
        strategy,
        assignments,
        pipeline_stages: stages,
        tensor_groups: groups,
        layers,
        heads,
    })
}

/// Render the per-device assignment table.
pub fn plan_table(plan: &PartitionPlan) -> String {
    let mut out = String::new();
    for a in &plan.assignments {
        out.push_str(&format!(
            "Device-{}: Layers: [{}, {}], Heads: [{}, {}]\n",
            a.device, a.layer_range.0, a.layer_range.1, a.head_range.0, a.head_range.1
        ));
    }
    out
}

/// Per-token latency, decode speed, and stream throughput under the cost
/// model. Throughput counts concurrent streams filling the pipeline, so it
/// saturates at `pipeline_stages` streams.
pub fn estimate(
    plan: &PartitionPlan,
    cost: &CostModel,
    batch_size: usize,
    layers: usize,
) -> (f64, f64) {
    let stages = plan.pipeline_stages as f64;
    let groups = plan.tensor_groups as f64;
    let compute = layers as f64 * cost.t_layer_compute / groups;
    let merges = if plan.tensor_groups > 1 {
        2.0 * layers as f64 * cost.t_merge * (groups - 1.0)
    } else {
        0.0
    };
    let hops = (stages - 1.0) * cost.t_hop;
    let latency = compute + merges + hops;
    let decode_speed = 1.0 / latency;
    let occupancy = (batch_size.max(1) as f64).min(stages);
    (decode_speed * occupancy, decode_speed)
}

/// Execute a plan shard by shard over a full prompt and return the logits
/// after the last token. Tensor groups each compute their head slice of
/// attention and their column/row slice of the FFN; the partial outputs
/// are summed at the two per-layer merge points. Stage boundaries do not
/// change the math, only the cost model.
pub fn simulate_forward(
    plan: &PartitionPlan,
    model: &Model,
    inputs: &[u32],
) -> Result<Vec<f32>, PartitionError> {
    let spec = &model.spec;
    if spec.network_type != NetworkType::DecoderOnly {
        return Err(PartitionError::ModelMismatch(
            "the simulator drives decoder_only models".into(),
        ));
    }
    if plan.layers != spec.layers || plan.heads != spec.decoder_heads {
        return Err(PartitionError::ModelMismatch(format!(
            "plan is for {} layers / {} heads, model has {} / {}",
            plan.layers, plan.heads, spec.layers, spec.decoder_heads
        )));
    }
    if inputs.is_empty() {
        return Err(PartitionError::ModelMismatch("empty input".into()));
    }
    let cfg = model.attention_config();
    let hd = cfg.head_dim;
    let head_ranges: Vec<(usize, usize)> = plan
        .assignments
        .iter()
        .filter(|a| a.device < plan.tensor_groups)
        .map(|a| a.head_range)
        .collect();

    // Pre-slice every device's weights once, per layer.
    struct GroupShard {
        head_lo: usize, // 0-based
        head_count: usize,
        q: crate::tensor::WeightMatrix,
        o_rows: crate::tensor::WeightMatrix,
        up_cols: crate::tensor::WeightMatrix,
        down_rows: crate::tensor::WeightMatrix,
        ffn_lo: usize,
        ffn_hi: usize,
    }
    let ffn_ranges = balanced_ranges(spec.ffn_dim, plan.tensor_groups);
    let mut shards: Vec<Vec<GroupShard>> = Vec::with_capacity(spec.layers);
    for layer in model.dec_layers() {
        let mut per_group = Vec::with_capacity(plan.tensor_groups);
        for (g, &(h_lo, h_hi)) in head_ranges.iter().enumerate() {
            let (lo, hi) = (h_lo - 1, h_hi); // to 0-based column bounds
            let (f_lo, f_hi) = (ffn_ranges[g].0 - 1, ffn_ranges[g].1);
            per_group.push(GroupShard {
                head_lo: lo,
                head_count: hi - lo,
                q: layer.attn.q.slice_cols(lo * hd, hi * hd)?,
                o_rows: layer.attn.o.slice_rows(lo * hd, hi * hd)?,
                up_cols: layer.up.slice_cols(f_lo, f_hi)?,
                down_rows: layer.down.slice_rows(f_lo, f_hi)?,
                ffn_lo: f_lo,
                ffn_hi: f_hi,
            });
        }
        shards.push(per_group);
    }

    let mut keys: Vec<Vec<f32>> = vec![Vec::new(); spec.layers];
    let mut vals: Vec<Vec<f32>> = vec![Vec::new(); spec.layers];
    let mut logits = Vec::new();
    for (pos, &token) in inputs.iter().enumerate() {
        let mut x = model.embed_token(token, pos)?;
        for (l, layer) in model.dec_layers().iter().enumerate() {
            // --- attention sub-layer ---
            let normed = model.apply_norm(&x, &layer.attn_norm)?;
            // K/V are shared inputs: computed once, replicated to devices.
            let mut k = matvec(&normed, &layer.attn.k)?;
            let v = matvec(&normed, &layer.attn.v)?;
            if spec.position_embedding == PosKind::Rope {
                crate::engine::rope_in_place(&mut k, hd, pos);
            }
            keys[l].extend_from_slice(&k);
            vals[l].extend_from_slice(&v);
            // Each group computes its query-head slice; merge by summing
            // the partial output projections.
            let mut merged = vec![0.0f32; x.len()];
            for shard in &shards[l] {
                let mut q = matvec(&normed, &shard.q)?;
                if spec.position_embedding == PosKind::Rope {
                    crate::engine::rope_in_place(&mut q, hd, pos);
                }
                let ctx = attention_context(
                    &q,
                    &keys[l],
                    &vals[l],
                    &cfg,
                    shard.head_lo,
                    shard.head_count,
                )?;
                let partial = matvec(&ctx, &shard.o_rows)?;
                for (m, p) in merged.iter_mut().zip(&partial) {
                    *m += p;
                }
            }
            for (a, b) in x.iter_mut().zip(&merged) {
                *a += b;
            }
            // --- FFN sub-layer: column-split up, row-split down ---
            let normed = model.apply_norm(&x, &layer.ffn_norm)?;
            let mut merged = vec![0.0f32; x.len()];
            for shard in &shards[l] {
                if shard.ffn_lo >= shard.ffn_hi {
                    continue;
                }
                let mut up = matvec(&normed, &shard.up_cols)?;
                crate::engine::activate(&mut up, spec.activation_function);
                let partial = matvec(&up, &shard.down_rows)?;
                for (m, p) in merged.iter_mut().zip(&partial) {
                    *m += p;
                }
            }
            for (a, b) in x.iter_mut().zip(&merged) {
                *a += b;
            }
        }
        let (output_norm, lm_head) = model.output_parts();
        let normed = model.apply_norm(&x, output_norm)?;
        logits = matvec(&normed, lm_head)?;
    }
    Ok(logits)
}
