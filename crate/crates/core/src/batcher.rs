//! Dynamic batching: a query pool that admits new requests into an
//! in-flight decode batch instead of waiting for the batch to complete.
//!
//! The two-function interface is `add_query` (queue a prompt) and `infer`
//! (one decode step over the whole pool). A query admitted at step T emits
//! its first token at step T; static batching would hold it until every
//! running query finished.

use crate::engine::{Engine, EngineError, SlotId};
use crate::sampler::{choose, SamplerPolicy, SamplerState};
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

pub const DEFAULT_CAPACITY: usize = 8;

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("prompt must be non-empty")]
    EmptyPrompt,
    #[error("prompt of {len} tokens does not fit max context {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QueryId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Queued,
    Prefill,
    Decoding,
    Finished,
}

#[derive(Debug)]
pub struct QueryState {
    pub id: QueryId,
    pub prompt: Vec<u32>,
    pub generated: Vec<u32>,
    pub slot: Option<SlotId>,
    pub phase: Phase,
    pub policy: SamplerPolicy,
    pub max_new_tokens: usize,
    sampler: SamplerState,
}

/// FIFO admission queue plus the active set, bounded by `capacity`.
#[derive(Debug)]
pub struct QueryPool {
    capacity: usize,
    max_context: usize,
    eos: Option<u32>,
    next_id: u64,
    queued: VecDeque<QueryState>,
    active: Vec<QueryState>,
    finished: BTreeMap<QueryId, QueryState>,
}

impl QueryPool {
    pub fn new(max_context: usize, eos: Option<u32>) -> QueryPool {
        QueryPool::with_capacity(DEFAULT_CAPACITY, max_context, eos)
    }

    pub fn with_capacity(capacity: usize, max_context: usize, eos: Option<u32>) -> QueryPool {
        QueryPool {
            capacity,
            max_context,
            eos,
            next_id: 1,
            queued: VecDeque::new(),
            active: Vec::new(),
            finished: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.queued.is_empty() && self.active.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    pub fn queued_count(&self) -> usize {
        self.queued.len()
    }

    /// Queue a prompt; it joins the running batch at the next `infer` with
    /// free capacity. Ids are unique and increase monotonically.
    pub fn add_query(
        &mut self,
        prompt: Vec<u32>,
        policy: SamplerPolicy,
        max_new_tokens: usize,
        vocab: usize,
    ) -> Result<QueryId, BatchError> {
        if prompt.is_empty() {
            return Err(BatchError::EmptyPrompt);
        }
        if prompt.len() >= self.max_context {
            return Err(BatchError::PromptTooLong {
                len: prompt.len(),
                max: self.max_context,
            });
        }
        let id = QueryId(self.next_id);
        self.next_id += 1;
        // Seed the rng stream by query id so co-tenants never perturb a
        // query's draws.
        let sampler = SamplerState::new(&policy, vocab, id.0);
        self.queued.push_back(QueryState {
            id,
            prompt,
            generated: Vec::new(),
            slot: None,
            phase: Phase::Queued,
            policy,
            max_new_tokens,
            sampler,
        });
        Ok(id)
    }

    /// One inference step over the pool: admit queued queries up to
    /// capacity, prefill the new ones, run one decode step for every active
    /// query in a single batch, sample with each query's own policy, and
    /// retire finished queries. Returns (id, token) per active query.
    pub fn infer(&mut self, engine: &mut Engine) -> Result<Vec<(QueryId, u32)>, BatchError> {
        // FIFO admission into free slots.
        while self.active.len() < self.capacity && !self.queued.is_empty() {
            let mut q = self.queued.pop_front().unwrap();
            q.slot = Some(engine.alloc_slot()?);
            q.phase = Phase::Prefill;
            self.active.push(q);
        }
        if self.active.is_empty() {
            return Ok(Vec::new());
        }

        // Newly admitted queries consume their whole prompt now; all but
        // the final prompt token are fed ahead of the shared batch step.
        for q in self.active.iter_mut().filter(|q| q.phase == Phase::Prefill) {
            let slot = q.slot.unwrap();
            for &t in &q.prompt[..q.prompt.len() - 1] {
                engine.forward_step(&[(slot, t)])?;
            }
            for &t in &q.prompt {
                q.sampler.observe(t);
            }
        }

        // One shared decode step: the new queries feed their last prompt
        // token, running queries feed their last generated token.
        let batch: Vec<(SlotId, u32)> = self
            .active
            .iter()
            .map(|q| {
                let token = match q.phase {
                    Phase::Prefill => *q.prompt.last().unwrap(),
                    _ => *q.generated.last().unwrap(),
                };
                (q.slot.unwrap(), token)
            })
            .collect();
        let logits = engine.forward_step(&batch)?;

        let mut emissions = Vec::with_capacity(self.active.len());
        for (q, logit) in self.active.iter_mut().zip(&logits) {
            let token = choose(&q.policy, &mut q.sampler, logit);
            q.generated.push(token);
            q.sampler.observe(token);
            q.phase = Phase::Decoding;
            emissions.push((q.id, token));

            let hit_eos = self.eos == Some(token);
            let hit_budget = q.generated.len() >= q.max_new_tokens;
            let hit_context = q.prompt.len() + q.generated.len() >= self.max_context;
            if hit_eos || hit_budget || hit_context {
                q.phase = Phase::Finished;
            }
        }
        // Retire finished queries and release their slots.
        let mut still_active = Vec::with_capacity(self.active.len());
        for q in self.active.drain(..) {
            if q.phase == Phase::Finished {
                engine.free_slot(q.slot.unwrap());
                self.finished.insert(q.id, q);
            } else {
                still_active.push(q);
            }
        }
        self.active = still_active;
        Ok(emissions)
    }

    /// Run `infer` until the pool drains; returns every completed output.
    pub fn drain(
        &mut self,
        engine: &mut Engine,
    ) -> Result<BTreeMap<QueryId, Vec<u32>>, BatchError> {
        while !self.is_empty() {
            self.infer(engine)?;
        }
        Ok(self.take_outputs())
    }

    /// Outputs of all finished queries, clearing the finished store.
    pub fn take_outputs(&mut self) -> BTreeMap<QueryId, Vec<u32>> {
        std::mem::take(&mut self.finished)
            .into_iter()
            .map(|(id, q)| (id, q.generated))
            .collect()
    }
}

/// First-token step per query under static batching: a batch runs to
/// completion (the longest member's length) before the next one forms.
/// `arrivals` holds (arrival step, generation length), 1-based steps.
pub fn static_first_token_steps(arrivals: &[(usize, usize)]) -> Vec<usize> {
    let mut first = vec![0usize; arrivals.len()];
    let mut remaining: Vec<usize> = (0..arrivals.len()).collect();
    let mut t = 1usize;
    while !remaining.is_empty() {
        let ready: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&i| arrivals[i].0 <= t)
            .collect();
        if ready.is_empty() {
            t = remaining.iter().map(|&i| arrivals[i].0).min().unwrap();
            continue;
        }
        let batch_len = ready.iter().map(|&i| arrivals[i].1).max().unwrap();
        for &i in &ready {
            first[i] = t;
        }
        remaining.retain(|i| !ready.contains(i));
        t += batch_len;
    }
    first
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::random_checkpoint;
    use crate::engine::Model;
    use crate::modelspec::parse_spec;
    use crate::sampler::Strategy;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_engine(seed: u64) -> Engine {
        let spec = parse_spec(
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
  hidden_dim = 32
  ffn_dim = 48
  vocab_size = 50
  max_context = 40
",
        )
        .unwrap();
        let ckpt = random_checkpoint(&spec, seed);
        Engine::new(Model::from_checkpoint(&spec, &ckpt).unwrap(), 8)
    }

    fn greedy() -> SamplerPolicy {
        SamplerPolicy {
            strategy: Strategy::Greedy,
            ..Default::default()
        }
    }

    /// Reference: decode one prompt alone on a fresh engine.
    fn standalone_decode(seed: u64, prompt: &[u32], max_new: usize) -> Vec<u32> {
        let mut engine = test_engine(seed);
        let slot = engine.alloc_slot().unwrap();
        let policy = greedy();
        let mut state = SamplerState::new(&policy, engine.spec().vocab_size, 1);
        let mut logits = engine.prefill(slot, prompt).unwrap();
        for &t in prompt {
            state.observe(t);
        }
        let mut out = Vec::new();
        for _ in 0..max_new {
            let token = choose(&policy, &mut state, &logits);
            out.push(token);
            state.observe(token);
            if prompt.len() + out.len() >= engine.spec().max_context {
                break;
            }
            logits = engine
                .forward_step(&[(slot, token)])
                .unwrap()
                .pop()
                .unwrap();
        }
        out
    }

    #[test]
    fn empty_pool_infers_nothing() {
        let mut engine = test_engine(1);
        let mut pool = QueryPool::new(engine.spec().max_context, None);
        assert!(pool.infer(&mut engine).unwrap().is_empty());
        assert!(pool.drain(&mut engine).unwrap().is_empty());
    }

    #[test]
    fn add_query_validates_prompt() {
        let mut pool = QueryPool::new(8, None);
        assert!(matches!(
            pool.add_query(vec![], greedy(), 4, 50),
            Err(BatchError::EmptyPrompt)
        ));
        assert!(matches!(
            pool.add_query(vec![0; 8], greedy(), 4, 50),
            Err(BatchError::PromptTooLong { .. })
        ));
        let a = pool.add_query(vec![1], greedy(), 4, 50).unwrap();
        let b = pool.add_query(vec![2], greedy(), 4, 50).unwrap();
        assert!(b.0 > a.0);
    }

    #[test]
    fn single_query_first_token_arrives_on_admission_step() {
        let mut engine = test_engine(2);
        let mut pool = QueryPool::new(engine.spec().max_context, None);
        let id = pool.add_query(vec![3, 5], greedy(), 3, 50).unwrap();
        let out = pool.infer(&mut engine).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, id);
    }

    #[test]
    fn capacity_queues_and_admits_fifo() {
        let mut engine = test_engine(3);
        let mut pool = QueryPool::with_capacity(2, engine.spec().max_context, None);
        let ids: Vec<QueryId> = (0..4)
            .map(|i| pool.add_query(vec![i as u32 + 1], greedy(), 2, 50).unwrap())
            .collect();
        let step1 = pool.infer(&mut engine).unwrap();
        assert_eq!(
            step1.iter().map(|(id, _)| *id).collect::<Vec<_>>(),
            vec![ids[0], ids[1]]
        );
        assert_eq!(pool.queued_count(), 2);
        // first two finish on step 2 (budget 2), opening both slots
        pool.infer(&mut engine).unwrap();
        let step3 = pool.infer(&mut engine).unwrap();
        assert_eq!(
            step3.iter().map(|(id, _)| *id).collect::<Vec<_>>(),
            vec![ids[2], ids[3]]
        );
        pool.infer(&mut engine).unwrap();
        assert!(pool.is_empty());
        // every query produced its 2 tokens: liveness under FIFO
        let outputs = pool.take_outputs();
        assert_eq!(outputs.len(), 4);
        assert!(outputs.values().all(|o| o.len() == 2));
    }

    #[test]
    fn mid_decode_arrival_emits_first_token_same_step() {
        let mut engine = test_engine(4);
        let mut pool = QueryPool::new(engine.spec().max_context, None);
        let s1 = pool.add_query(vec![7, 8], greedy(), 4, 50).unwrap();
        let s2 = pool.add_query(vec![9], greedy(), 3, 50).unwrap();

        let t1 = pool.infer(&mut engine).unwrap();
        assert_eq!(t1.iter().map(|e| e.0).collect::<Vec<_>>(), vec![s1, s2]);
        let t2 = pool.infer(&mut engine).unwrap();
        assert_eq!(t2.iter().map(|e| e.0).collect::<Vec<_>>(), vec![s1, s2]);
        // S3 arrives at T3 and is decoded immediately alongside S1, S2.
        let s3 = pool.add_query(vec![11, 12], greedy(), 2, 50).unwrap();
        let t3 = pool.infer(&mut engine).unwrap();
        assert_eq!(t3.iter().map(|e| e.0).collect::<Vec<_>>(), vec![s1, s2, s3]);
        // S2 finished at T3 (budget 3); S1 and S3 continue.
        let t4 = pool.infer(&mut engine).unwrap();
        assert_eq!(t4.iter().map(|e| e.0).collect::<Vec<_>>(), vec![s1, s3]);
        pool.infer(&mut engine).unwrap();
        assert!(pool.is_empty());

        // Static batching would only start S3 at step 5, two steps later.
        let static_first = static_first_token_steps(&[(1, 4), (1, 3), (3, 2)]);
        assert_eq!(static_first, vec![1, 1, 5]);
        assert_eq!(static_first[2] - 3, 2);
    }

    #[test]
    fn dynamic_batching_preserves_each_query_output() {
        let seed = 5;
        let mut engine = test_engine(seed);
        let mut pool = QueryPool::new(engine.spec().max_context, None);
        let prompts: Vec<Vec<u32>> = vec![vec![3, 1, 4], vec![15, 9], vec![2, 6, 5, 3]];
        let arrivals = [1usize, 1, 2];
        let mut ids = Vec::new();
        for step in 1..=8 {
            for (i, prompt) in prompts.iter().enumerate() {
                if arrivals[i] == step {
                    ids.push(pool.add_query(prompt.clone(), greedy(), 4, 50).unwrap());
                }
            }
            pool.infer(&mut engine).unwrap();
            if pool.is_empty() && step >= 2 {
                break;
            }
        }
        let outputs = pool.take_outputs();
        for (i, prompt) in prompts.iter().enumerate() {
            let expect = standalone_decode(seed, prompt, 4);
            assert_eq!(outputs[&ids[i]], expect, "query {i} diverged");
        }
    }

    #[test]
    fn drain_matches_sequential_decodes() {
        let seed = 6;
        let mut engine = test_engine(seed);
        let mut pool = QueryPool::new(engine.spec().max_context, None);
        let a = pool.add_query(vec![10, 20], greedy(), 5, 50).unwrap();
        let b = pool.add_query(vec![30, 31, 32], greedy(), 5, 50).unwrap();
        let outputs = pool.drain(&mut engine).unwrap();
        assert_eq!(outputs[&a], standalone_decode(seed, &[10, 20], 5));
        assert_eq!(outputs[&b], standalone_decode(seed, &[30, 31, 32], 5));
    }

    #[test]
    fn randomized_arrivals_keep_isolation() {
        let mut meta_rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..10 {
            let seed = 100 + trial;
            let mut engine = test_engine(seed);
            let mut pool = QueryPool::new(engine.spec().max_context, None);
            let n = meta_rng.gen_range(1..=5);
            let prompts: Vec<Vec<u32>> = (0..n)
                .map(|_| {
                    (0..meta_rng.gen_range(1..=4))
                        .map(|_| meta_rng.gen_range(0..50u32))
                        .collect()
                })
                .collect();
            let arrivals: Vec<usize> = (0..n).map(|_| meta_rng.gen_range(1..=4usize)).collect();
            let mut ids: BTreeMap<usize, QueryId> = BTreeMap::new();
            for step in 1..=30 {
                for i in 0..n {
                    if arrivals[i] == step {
                        ids.insert(
                            i,
                            pool.add_query(prompts[i].clone(), greedy(), 3, 50).unwrap(),
                        );
                    }
                }
                pool.infer(&mut engine).unwrap();
                if pool.is_empty() && step > *arrivals.iter().max().unwrap() {
                    break;
                }
            }
            let outputs = pool.take_outputs();
            for i in 0..n {
                let expect = standalone_decode(seed, &prompts[i], 3);
                assert_eq!(outputs[&ids[&i]], expect, "trial {trial} query {i}");
            }
        }
    }

    #[test]
    fn eos_finishes_early() {
        let mut engine = test_engine(7);
        // Use whatever greedy emits first as the eos to force a 1-token run.
        let probe = standalone_decode(7, &[4, 2], 1)[0];
        let mut pool = QueryPool::new(engine.spec().max_context, Some(probe));
        let id = pool.add_query(vec![4, 2], greedy(), 10, 50).unwrap();
        pool.infer(&mut engine).unwrap();
        assert!(pool.is_empty());
        assert_eq!(pool.take_outputs()[&id], vec![probe]);
    }

    #[test]
    fn static_schedule_math() {
        // one lone query starts immediately
        assert_eq!(static_first_token_steps(&[(1, 5)]), vec![1]);
        // a query arriving mid-batch waits for completion
        assert_eq!(static_first_token_steps(&[(1, 3), (2, 2)]), vec![1, 4]);
        // arrival into an idle system starts at its arrival step
        assert_eq!(static_first_token_steps(&[(1, 2), (7, 2)]), vec![1, 7]);
    }
}
