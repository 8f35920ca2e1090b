//! # inferkit
//!
//! A desk-scale, CPU-only, configuration-driven transformer inference
//! engine. Models are described by a plain-text specification file that
//! selects atomic building blocks (network type, normalization, activation,
//! position embedding, attention head layout); serving a new model means
//! editing that file, not adding code.
//!
//! The crate is organized around its subsystems:
//! - `quant`: block-wise weight codecs for 2..8 bits plus the pair-packed
//!   3.5-bit scheme, with bit-exact serialization.
//! - `tensor`: dense f32 tensors and matmul against f32 / f16 / quantized
//!   weights with dequant-on-the-fly.
//! - `modelspec`: the spec-file parser, validator, tensor-name resolution,
//!   and a byte-fallback BPE tokenizer.
//! - `checkpoint`: a native tensor container, a safetensors subset, and
//!   seeded random checkpoints.
//! - `engine`: the forward pass (decoder-only, encoder-only,
//!   encoder-decoder) with grouped-query attention and per-slot KV caches.
//! - `sampler`: the decoding-strategy suite (greedy, top-k, top-p,
//!   temperature, FSD, randomized FSD, typical, mirostat, min-p, TFS).
//! - `batcher`: dynamic batching with mid-decode admission.
//! - `partition`: layer/tensor/hybrid partition planning, a sharded
//!   execution simulator, and an analytic cost model.
//! - `speculative`: speculative sampling with strict and relaxed
//!   acceptance plus the speedup estimator.

pub mod batcher;
pub mod checkpoint;
pub mod engine;
pub mod modelspec;
pub mod partition;
pub mod quant;
pub mod sampler;
pub mod speculative;
pub mod tensor;

pub use batcher::{QueryId, QueryPool};
pub use checkpoint::{random_checkpoint, Checkpoint};
pub use engine::{Engine, Model, SlotId};
pub use modelspec::{parse_spec, validate_spec, ModelSpec, Vocab};
pub use quant::{QuantBlock, QuantScheme, SchemeKind};
pub use sampler::{SamplerPolicy, Strategy};
pub use speculative::{SpecConfig, TokenDistribution};
pub use tensor::{Tensor, WeightMatrix};
