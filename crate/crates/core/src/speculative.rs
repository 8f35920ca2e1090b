//! Speculative sampling: a cheap draft model proposes `K` tokens ahead, the
//! target model accepts each with probability `min(1, target/draft)` and
//! resamples the first rejection from the positive residual
//! `(target - draft)_+`. One full accept/reject step reproduces the target
//! distribution exactly; the relaxed mode trades that exactness for a
//! higher acceptance rate by also accepting any draft token inside the
//! target's top-k / top-p pool.

use crate::engine::{Engine, EngineError, SlotId};
use crate::sampler::{top_k_set, top_p_set, AntiLm};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpeculativeError {
    #[error("prefix must be non-empty")]
    EmptyPrefix,
    #[error("target length {n} does not exceed prefix length {prefix}")]
    NothingToGenerate { n: usize, prefix: usize },
    #[error("draft and target vocabularies disagree: {draft} vs {target}")]
    VocabMismatch { draft: usize, target: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Anything that yields a normalized next-token distribution for a prefix.
/// Both the serving model and the draft implement this.
pub trait TokenDistribution {
    fn vocab_size(&self) -> usize;
    fn next_dist(&mut self, prefix: &[u32]) -> Result<Vec<f64>, SpeculativeError>;
}

/// N-gram draft over the running prefix, with add-0.5 smoothing.
#[derive(Debug, Clone)]
pub struct NGramDraft {
    order: usize,
    vocab: usize,
}

impl NGramDraft {
    pub fn new(order: usize, vocab: usize) -> NGramDraft {
        NGramDraft { order, vocab }
    }
}

impl TokenDistribution for NGramDraft {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_dist(&mut self, prefix: &[u32]) -> Result<Vec<f64>, SpeculativeError> {
        let mut lm = AntiLm::new(self.order, self.vocab);
        for &t in prefix {
            lm.observe(t);
        }
        Ok(lm.probs().iter().map(|&p| p as f64).collect())
    }
}

/// Engine-backed distribution with prefix caching: the KV slot is rolled
/// back to the longest shared prefix between calls, so repeated evaluation
/// over growing-and-shrinking speculative prefixes stays cheap.
pub struct EngineDist {
    engine: Engine,
    slot: SlotId,
    fed: Vec<u32>,
}

impl EngineDist {
    pub fn new(mut engine: Engine) -> Result<EngineDist, SpeculativeError> {
        let slot = engine.alloc_slot()?;
        Ok(EngineDist {
            engine,
            slot,
            fed: Vec::new(),
        })
    }
}

impl TokenDistribution for EngineDist {
    fn vocab_size(&self) -> usize {
        self.engine.spec().vocab_size
    }

    fn next_dist(&mut self, prefix: &[u32]) -> Result<Vec<f64>, SpeculativeError> {
        if prefix.is_empty() {
            return Err(SpeculativeError::EmptyPrefix);
        }
        // Cache must hold prefix[..n-1]; the last token is fed to get logits.
        let cached = &prefix[..prefix.len() - 1];
        let lcp = self
            .fed
            .iter()
            .zip(cached)
            .take_while(|(a, b)| a == b)
            .count();
        self.engine.truncate_slot(self.slot, lcp)?;
        self.fed.truncate(lcp);
        for &t in &cached[lcp..] {
            self.engine.forward_step(&[(self.slot, t)])?;
            self.fed.push(t);
        }
        let logits = self
            .engine
            .forward_step(&[(self.slot, *prefix.last().unwrap())])?
            .pop()
            .unwrap();
        self.fed.push(*prefix.last().unwrap());
        // Softmax in f64: the acceptance math wants exact distributions.
        let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(exps.iter().map(|e| e / total).collect())
    }
}

/// How a draft token gets accepted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Acceptance {
    /// `a < min(1, target/draft)`, residual resample on rejection.
    Strict,
    /// Accept outright when the token is in the target's top-k pool,
    /// otherwise fall through to the strict rule.
    TopK(usize),
    /// Same with a top-p pool.
    TopP(f32),
}

#[derive(Debug, Clone)]
pub struct SpecConfig {
    /// Lookahead steps K >= 1.
    pub lookahead: usize,
    pub acceptance: Acceptance,
    pub rng_seed: u64,
}

impl Default for SpecConfig {
    fn default() -> Self {
        SpecConfig {
            lookahead: 3,
            acceptance: Acceptance::Strict,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AcceptanceStats {
    /// Draft tokens examined by the accept rule.
    pub proposed: usize,
    pub accepted: usize,
    /// Extra tokens sampled after a fully accepted window.
    pub bonus: usize,
    pub iterations: usize,
}

impl AcceptanceStats {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AcceptOutcome {
    Accepted,
    Rejected { replacement: u32 },
}

/// `min(1, target/draft)` for the drafted token; a zero draft probability
/// cannot be proposed by sampling, so it counts as certain acceptance.
pub fn acceptance_threshold(target: &[f64], draft: &[f64], token: u32) -> f64 {
    let t = target[token as usize];
    let d = draft[token as usize];
    if d <= 0.0 {
        1.0
    } else {
        (t / d).min(1.0)
    }
}

/// Normalized positive residual `(target - draft)_+`, or `None` when the
/// distributions coincide and nothing is left to resample.
pub fn residual_dist(target: &[f64], draft: &[f64]) -> Option<Vec<f64>> {
    let raw: Vec<f64> = target
        .iter()
        .zip(draft)
        .map(|(&t, &d)| (t - d).max(0.0))
        .collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return None;
    }
    Some(raw.iter().map(|x| x / total).collect())
}

/// Inverse-CDF draw over ascending token ids.
pub fn sample_dist(dist: &[f64], rng: &mut ChaCha8Rng) -> u32 {
    let u = rng.gen::<f64>();
    let mut cum = 0.0f64;
    for (i, &p) in dist.iter().enumerate() {
        cum += p;
        if u < cum {
            return i as u32;
        }
    }
    (dist.len() - 1) as u32
}

/// Draw K draft tokens autoregressively, keeping each step's distribution
/// for the accept phase.
pub fn propose(
    draft: &mut dyn TokenDistribution,
    prefix: &[u32],
    lookahead: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<u32>, Vec<Vec<f64>>), SpeculativeError> {
    if prefix.is_empty() {
        return Err(SpeculativeError::EmptyPrefix);
    }
    let mut tokens = Vec::with_capacity(lookahead);
    let mut dists = Vec::with_capacity(lookahead);
    let mut context = prefix.to_vec();
    for _ in 0..lookahead {
        let dist = draft.next_dist(&context)?;
        let tok = sample_dist(&dist, rng);
        tokens.push(tok);
        context.push(tok);
        dists.push(dist);
    }
    Ok((tokens, dists))
}

/// Decide one draft token. The relaxed pool test consumes no uniform draw
/// when it passes; the strict rule consumes one, plus the residual draw on
/// rejection.
pub fn accept_step(
    target: &[f64],
    draft: &[f64],
    token: u32,
    acceptance: Acceptance,
    rng: &mut ChaCha8Rng,
) -> AcceptOutcome {
    match acceptance {
        Acceptance::TopK(k) => {
            let probs: Vec<f32> = target.iter().map(|&p| p as f32).collect();
            if top_k_set(&probs, k).contains(&(token as usize)) {
                return AcceptOutcome::Accepted;
            }
        }
        Acceptance::TopP(p) => {
            let probs: Vec<f32> = target.iter().map(|&p| p as f32).collect();
            if top_p_set(&probs, p).contains(&(token as usize)) {
                return AcceptOutcome::Accepted;
            }
        }
        Acceptance::Strict => {}
    }
    let a = rng.gen::<f64>();
    if a < acceptance_threshold(target, draft, token) {
        return AcceptOutcome::Accepted;
    }
    match residual_dist(target, draft) {
        Some(res) => AcceptOutcome::Rejected {
            replacement: sample_dist(&res, rng),
        },
        // target == draft at a rejected token cannot happen in strict
        // mode, but the relaxed mode can get here; accept the draft.
        None => AcceptOutcome::Accepted,
    }
}

/// Run the full speculative loop until `n_total` tokens exist (prefix
/// included), returning the generated suffix and acceptance statistics.
pub fn speculative_generate(
    target: &mut dyn TokenDistribution,
    draft: &mut dyn TokenDistribution,
    prefix: &[u32],
    n_total: usize,
    cfg: &SpecConfig,
) -> Result<(Vec<u32>, AcceptanceStats), SpeculativeError> {
    if prefix.is_empty() {
        return Err(SpeculativeError::EmptyPrefix);
    }
    if n_total <= prefix.len() {
        return Err(SpeculativeError::NothingToGenerate {
            n: n_total,
            prefix: prefix.len(),
        });
    }
    if draft.vocab_size() != target.vocab_size() {
        return Err(SpeculativeError::VocabMismatch {
            draft: draft.vocab_size(),
            target: target.vocab_size(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut sequence = prefix.to_vec();
    let mut stats = AcceptanceStats::default();
    let k = cfg.lookahead.max(1);

    while sequence.len() < n_total {
        stats.iterations += 1;
        let (draft_tokens, draft_dists) = propose(draft, &sequence, k, &mut rng)?;
        // Target distributions for the K draft positions plus the bonus
        // position, evaluated in one pass over the drafted suffix.
        let mut target_dists = Vec::with_capacity(k + 1);
        let mut context = sequence.clone();
        for &tok in &draft_tokens {
            target_dists.push(target.next_dist(&context)?);
            context.push(tok);
        }
        target_dists.push(target.next_dist(&context)?);
        let mut all_accepted = true;
        for t in 0..k {
            if sequence.len() >= n_total {
                all_accepted = false;
                break;
            }
            stats.proposed += 1;
            match accept_step(
                &target_dists[t],
                &draft_dists[t],
                draft_tokens[t],
                cfg.acceptance,
                &mut rng,
            ) {
                AcceptOutcome::Accepted => {
                    stats.accepted += 1;
                    sequence.push(draft_tokens[t]);
                }
                AcceptOutcome::Rejected { replacement } => {
                    sequence.push(replacement);
                    all_accepted = false;
                    break;
                }
            }
        }
        if all_accepted && sequence.len() < n_total {
            sequence.push(sample_dist(&target_dists[k], &mut rng));
            stats.bonus += 1;
        }
    }
    Ok((sequence[prefix.len()..].to_vec(), stats))
}

/// Expected generation time of the loop: `N / (r (K+1)) * (t_draft K +
/// t_target)`. Zero acceptance never finishes, reported as infinity.
pub fn estimate_speedup(r: f64, k: usize, t_draft: f64, t_target: f64, n: usize) -> f64 {
    if r <= 0.0 {
        return f64::INFINITY;
    }
    n as f64 / (r * (k as f64 + 1.0)) * (t_draft * k as f64 + t_target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::random_checkpoint;
    use crate::engine::Model;
    use crate::modelspec::parse_spec;

    /// Fixed-table distribution: ignores the prefix.
    struct FixedDist(Vec<f64>);

    impl TokenDistribution for FixedDist {
        fn vocab_size(&self) -> usize {
            self.0.len()
        }
        fn next_dist(&mut self, _prefix: &[u32]) -> Result<Vec<f64>, SpeculativeError> {
            Ok(self.0.clone())
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_engine(seed: u64) -> Engine {
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
  hidden_dim = 16
  ffn_dim = 24
  vocab_size = 16
  max_context = 64
",
        )
        .unwrap();
        let ckpt = random_checkpoint(&spec, seed);
        Engine::new(Model::from_checkpoint(&spec, &ckpt).unwrap(), 1)
    }

    #[test]
    fn propose_shapes_and_determinism() {
        let mut draft = NGramDraft::new(2, 8);
        let (t1, d1) = propose(&mut draft, &[1, 2, 3], 1, &mut rng(5)).unwrap();
        assert_eq!(t1.len(), 1);
        assert_eq!(d1.len(), 1);
        let (t2, _) = propose(&mut draft, &[1, 2, 3], 1, &mut rng(5)).unwrap();
        assert_eq!(t1, t2);
        // a deterministic chain: prob 1 tokens walk the unique path
        let mut chain = FixedDist(vec![0.0, 1.0, 0.0]);
        let (toks, _) = propose(&mut chain, &[0], 4, &mut rng(1)).unwrap();
        assert_eq!(toks, vec![1, 1, 1, 1]);
    }

    #[test]
    fn identical_distributions_always_accept() {
        let target = [0.25f64, 0.25, 0.3, 0.2];
        let mut r = rng(3);
        for tok in 0..4u32 {
            assert_eq!(acceptance_threshold(&target, &target, tok), 1.0);
            assert_eq!(
                accept_step(&target, &target, tok, Acceptance::Strict, &mut r),
                AcceptOutcome::Accepted
            );
        }
    }

    #[test]
    fn impossible_draft_token_always_rejects_to_target() {
        // draft proposes token 0, which the target never emits
        let target = [0.0f64, 0.6, 0.4];
        let draft = [1.0f64, 0.0, 0.0];
        assert_eq!(acceptance_threshold(&target, &draft, 0), 0.0);
        let res = residual_dist(&target, &draft).unwrap();
        assert_eq!(res, target.to_vec());
        let mut r = rng(4);
        for _ in 0..50 {
            match accept_step(&target, &draft, 0, Acceptance::Strict, &mut r) {
                AcceptOutcome::Rejected { replacement } => {
                    assert!(replacement == 1 || replacement == 2)
                }
                AcceptOutcome::Accepted => panic!("must reject a zero-probability token"),
            }
        }
    }

    /// Exact enumeration with the uniform draw integrated analytically:
    /// one strict step reproduces the target distribution to machine
    /// precision for every (target, draft) pair.
    #[test]
    fn strict_step_reproduces_target_exactly() {
        let mut r = rng(12);
        for _ in 0..200 {
            let raw_t: Vec<f64> = (0..5).map(|_| r.gen_range(0.0..1.0)).collect();
            let raw_d: Vec<f64> = (0..5).map(|_| r.gen_range(0.01..1.0)).collect();
            let st: f64 = raw_t.iter().sum();
            let sd: f64 = raw_d.iter().sum();
            let target: Vec<f64> = raw_t.iter().map(|x| x / st).collect();
            let draft: Vec<f64> = raw_d.iter().map(|x| x / sd).collect();

            let mut out = [0.0f64; 5];
            let mut reject_mass = 0.0f64;
            for x in 0..5usize {
                let c = acceptance_threshold(&target, &draft, x as u32);
                out[x] += draft[x] * c;
                reject_mass += draft[x] * (1.0 - c);
            }
            if let Some(res) = residual_dist(&target, &draft) {
                for (o, q) in out.iter_mut().zip(&res) {
                    *o += reject_mass * q;
                }
            }
            for (o, t) in out.iter().zip(&target) {
                assert!((o - t).abs() < 1e-12, "{o} vs {t}");
            }
        }
    }

    #[test]
    fn monte_carlo_step_matches_target() {
        let target = [0.35f64, 0.05, 0.2, 0.25, 0.15];
        let draft = [0.2f64, 0.3, 0.1, 0.15, 0.25];
        let mut r = rng(7);
        let trials = 100_000;
        let mut counts = [0u32; 5];
        for _ in 0..trials {
            let tok = sample_dist(&draft, &mut r);
            let out = match accept_step(&target, &draft, tok, Acceptance::Strict, &mut r) {
                AcceptOutcome::Accepted => tok,
                AcceptOutcome::Rejected { replacement } => replacement,
            };
            counts[out as usize] += 1;
        }
        let tv: f64 = target
            .iter()
            .zip(&counts)
            .map(|(&t, &c)| (t - c as f64 / trials as f64).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.02, "total variation {tv}");
    }

    #[test]
    fn relaxed_acceptance_raises_rate() {
        let prefix = [1u32, 2, 3];
        let run = |acceptance: Acceptance| {
            let mut target = EngineDist::new(tiny_engine(61)).unwrap();
            let mut draft = NGramDraft::new(2, 16);
            let cfg = SpecConfig {
                lookahead: 3,
                acceptance,
                rng_seed: 5,
            };
            speculative_generate(&mut target, &mut draft, &prefix, 40, &cfg)
                .unwrap()
                .1
        };
        let strict = run(Acceptance::Strict);
        let relaxed = run(Acceptance::TopK(8));
        assert!(
            relaxed.rate() >= strict.rate(),
            "relaxed {} < strict {}",
            relaxed.rate(),
            strict.rate()
        );
    }

    #[test]
    fn draft_equals_target_accepts_everything() {
        let engine = tiny_engine(77);
        let mut target = EngineDist::new(engine.clone()).unwrap();
        let mut draft = EngineDist::new(engine).unwrap();
        let prefix = [3u32, 5];
        let cfg = SpecConfig {
            lookahead: 2,
            acceptance: Acceptance::Strict,
            rng_seed: 9,
        };
        let (tokens, stats) =
            speculative_generate(&mut target, &mut draft, &prefix, 14, &cfg).unwrap();
        assert_eq!(stats.rate(), 1.0);
        assert_eq!(tokens.len(), 12);
        // every iteration lands K accepted plus one bonus token
        assert_eq!(stats.bonus, stats.iterations);
        assert_eq!(stats.accepted, stats.iterations * 2);
    }

    #[test]
    fn disjoint_support_rejects_everything() {
        let mut target = FixedDist(vec![0.5, 0.5, 0.0, 0.0]);
        let mut draft = FixedDist(vec![0.0, 0.0, 0.5, 0.5]);
        let cfg = SpecConfig {
            lookahead: 3,
            acceptance: Acceptance::Strict,
            rng_seed: 2,
        };
        let (tokens, stats) = speculative_generate(&mut target, &mut draft, &[0], 9, &cfg).unwrap();
        assert_eq!(stats.rate(), 0.0);
        assert_eq!(stats.bonus, 0);
        // every iteration emits exactly one residual-sampled token
        assert_eq!(tokens.len(), stats.iterations);
        assert!(tokens.iter().all(|&t| t <= 1));
    }

    #[test]
    fn speedup_formula_edges() {
        assert_eq!(estimate_speedup(1.0, 1, 0.0, 2.0, 10), 10.0);
        assert_eq!(estimate_speedup(1.0, 1, 2.0, 2.0, 10), 20.0);
        assert!(estimate_speedup(0.0, 4, 1.0, 2.0, 10).is_infinite());
    }

    #[test]
    fn speedup_formula_tracks_loop_simulation() {
        // brute-force expected cost of the loop under iid acceptance
        let (t_draft, t_target, n) = (0.2f64, 1.0f64, 400usize);
        let mut r = rng(31);
        for &rate in &[0.9f64, 0.95, 1.0] {
            for k in 1..=3usize {
                let mut total_cost = 0.0;
                let runs = 400;
                for _ in 0..runs {
                    let mut produced = 0usize;
                    while produced < n {
                        total_cost += t_draft * k as f64 + t_target;
                        let mut advance = 1; // replacement or bonus
                        for _ in 0..k {
                            if r.gen::<f64>() < rate {
                                advance += 1;
                            } else {
                                advance -= 1; // replacement already counted
                                advance += 1;
                                break;
                            }
                        }
                        produced += advance;
                    }
                }
                let simulated = total_cost / runs as f64;
                let estimated = estimate_speedup(rate, k, t_draft, t_target, n);
                let rel = (estimated - simulated).abs() / simulated;
                assert!(
                    rel < 0.10,
                    "r={rate} K={k}: estimate {estimated:.1} vs sim {simulated:.1} ({rel:.3})"
                );
            }
        }
    }

    #[test]
    fn first_token_marginal_matches_target() {
        let engine = tiny_engine(83);
        let mut target = EngineDist::new(engine).unwrap();
        let prefix = [2u32, 9, 4];
        let exact = target.next_dist(&prefix).unwrap();
        let vocab = exact.len();
        let mut counts = vec![0u32; vocab];
        let runs = 50_000;
        for trial in 0..runs {
            let mut draft = NGramDraft::new(2, vocab);
            let cfg = SpecConfig {
                lookahead: 2,
                acceptance: Acceptance::Strict,
                rng_seed: trial as u64,
            };
            let (tokens, _) =
                speculative_generate(&mut target, &mut draft, &prefix, prefix.len() + 1, &cfg)
                    .unwrap();
            counts[tokens[0] as usize] += 1;
        }
        let tv: f64 = exact
            .iter()
            .zip(&counts)
            .map(|(&p, &c)| (p - c as f64 / runs as f64).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.03, "total variation {tv}");
    }
}
