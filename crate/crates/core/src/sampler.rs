//! Decoding strategies, built as candidate-set selection over a probability
//! vector plus a shared final sampling stage.
//!
//! Deterministic tie-breaking: the lower token id wins everywhere. All
//! entropy and surprise values use natural logarithms.

use crate::tensor::softmax;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    TopK,
    TopP,
    Temperature,
    Fsd,
    FsdRandom,
    Typical,
    Mirostat,
    MinP,
    Tfs,
}

impl Strategy {
    pub fn parse(name: &str) -> Result<Strategy, SamplerError> {
        Ok(match name {
            "greedy" => Strategy::Greedy,
            "top_k" => Strategy::TopK,
            "top_p" => Strategy::TopP,
            "temperature" => Strategy::Temperature,
            "fsd" => Strategy::Fsd,
            "fsd_random" => Strategy::FsdRandom,
            "typical" => Strategy::Typical,
            "mirostat" => Strategy::Mirostat,
            "min_p" => Strategy::MinP,
            "tfs" => Strategy::Tfs,
            other => return Err(SamplerError::UnknownStrategy(other.to_string())),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::TopK => "top_k",
            Strategy::TopP => "top_p",
            Strategy::Temperature => "temperature",
            Strategy::Fsd => "fsd",
            Strategy::FsdRandom => "fsd_random",
            Strategy::Typical => "typical",
            Strategy::Mirostat => "mirostat",
            Strategy::MinP => "min_p",
            Strategy::Tfs => "tfs",
        }
    }
}

/// Strategy tag plus every hyperparameter the suite uses; strategies read
/// only the fields they care about.
#[derive(Debug, Clone)]
pub struct SamplerPolicy {
    pub strategy: Strategy,
    pub k: usize,
    pub p: f32,
    pub temperature: f32,
    /// FSD anti-LM mix, also the min-p threshold factor.
    pub alpha: f32,
    pub tfs_z: f32,
    pub target_surprise: f32,
    pub learning_rate: f32,
    /// Randomized FSD samples for the first `t_random` steps.
    pub t_random: usize,
    pub antilm_order: usize,
    pub rng_seed: u64,
}

impl Default for SamplerPolicy {
    fn default() -> Self {
        SamplerPolicy {
            strategy: Strategy::Greedy,
            k: 40,
            p: 0.9,
            temperature: 1.0,
            alpha: 0.5,
            tfs_z: 0.95,
            target_surprise: 3.0,
            learning_rate: 0.1,
            t_random: 0,
            antilm_order: 2,
            rng_seed: 0,
        }
    }
}

impl SamplerPolicy {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.k == 0 {
            return Err(SamplerError::InvalidPolicy("k must be >= 1".into()));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(SamplerError::InvalidPolicy("p must be in (0, 1]".into()));
        }
        if self.temperature <= 0.0 {
            return Err(SamplerError::InvalidPolicy(
                "temperature must be > 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(SamplerError::InvalidPolicy(
                "alpha must be in [0, 1]".into(),
            ));
        }
        if !(self.tfs_z > 0.0 && self.tfs_z <= 1.0) {
            return Err(SamplerError::InvalidPolicy(
                "tfs_z must be in (0, 1]".into(),
            ));
        }
        if self.target_surprise <= 0.0 {
            return Err(SamplerError::InvalidPolicy(
                "target_surprise must be > 0".into(),
            ));
        }
        if self.antilm_order < 1 {
            return Err(SamplerError::InvalidPolicy(
                "antilm_order must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Anti-LM: an n-gram model over the running prefix
// ---------------------------------------------------------------------------

/// N-gram counts over the tokens seen so far, with add-0.5 smoothing.
/// Updated incrementally as the prefix grows.
#[derive(Debug, Clone)]
pub struct AntiLm {
    order: usize,
    vocab: usize,
    window: Vec<u32>,
    counts: HashMap<Vec<u32>, HashMap<u32, u32>>,
}

impl AntiLm {
    pub fn new(order: usize, vocab: usize) -> AntiLm {
        AntiLm {
            order: order.max(1),
            vocab,
            window: Vec::new(),
            counts: HashMap::new(),
        }
    }

    /// Record the transition (current context -> token) and slide the window.
    pub fn observe(&mut self, token: u32) {
        if self.window.len() == self.order - 1 {
            *self
                .counts
                .entry(self.window.clone())
                .or_default()
                .entry(token)
                .or_insert(0) += 1;
        }
        self.window.push(token);
        if self.window.len() > self.order - 1 {
            self.window.remove(0);
        }
    }

    /// Smoothed next-token distribution given the current context.
    pub fn probs(&self) -> Vec<f32> {
        let empty = HashMap::new();
        let ctx = self.counts.get(&self.window).unwrap_or(&empty);
        let total: u32 = ctx.values().sum();
        let denom = total as f64 + 0.5 * self.vocab as f64;
        (0..self.vocab as u32)
            .map(|y| ((ctx.get(&y).copied().unwrap_or(0) as f64 + 0.5) / denom) as f32)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Candidate-set stages (all return ascending token ids, never empty)
// ---------------------------------------------------------------------------

/// Ids sorted by probability descending, ties by lower id.
fn by_prob_desc(probs: &[f32]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..probs.len()).collect();
    ids.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    ids
}

pub fn top_k_set(probs: &[f32], k: usize) -> Vec<usize> {
    let k = k.max(1).min(probs.len());
    let mut ids: Vec<usize> = by_prob_desc(probs).into_iter().take(k).collect();
    ids.sort_unstable();
    ids
}

/// Smallest prefix of the descending-sorted ids with cumulative mass >= p.
pub fn top_p_set(probs: &[f32], p: f32) -> Vec<usize> {
    let sorted = by_prob_desc(probs);
    let mut ids = Vec::new();
    let mut cum = 0.0f64;
    for id in sorted {
        if !ids.is_empty() && (cum >= p as f64 || probs[id] == 0.0) {
            break;
        }
        ids.push(id);
        cum += probs[id] as f64;
    }
    ids.sort_unstable();
    ids
}

/// Keep ids with probability >= alpha * max(probs).
pub fn min_p_set(probs: &[f32], alpha: f32) -> Vec<usize> {
    let max = probs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let threshold = alpha * max;
    let mut ids: Vec<usize> = (0..probs.len())
        .filter(|&i| probs[i] >= threshold)
        .collect();
    if ids.is_empty() {
        ids = top_k_set(probs, 1);
    }
    ids
}

/// Locally typical set: rank by |H + ln p| ascending, take the smallest
/// prefix covering mass p.
pub fn typical_set(probs: &[f32], p: f32) -> Vec<usize> {
    let entropy: f64 = probs
        .iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| -(q as f64) * (q as f64).ln())
        .sum();
    let mut ids: Vec<usize> = (0..probs.len()).collect();
    let score = |i: usize| -> f64 {
        let q = probs[i] as f64;
        if q > 0.0 {
            (entropy + q.ln()).abs()
        } else {
            f64::INFINITY
        }
    };
    ids.sort_by(|&a, &b| score(a).partial_cmp(&score(b)).unwrap().then(a.cmp(&b)));
    let mut out = Vec::new();
    let mut cum = 0.0f64;
    for id in ids {
        if !out.is_empty() && cum >= p as f64 {
            break;
        }
        out.push(id);
        cum += probs[id] as f64;
    }
    out.sort_unstable();
    out
}

/// Tail-free set: truncate where the cumulative normalized second
/// derivative of the sorted probability curve reaches z. Vocabularies too
/// small for a second difference, or z >= 1, keep everything.
pub fn tfs_set(probs: &[f32], z: f32) -> Vec<usize> {
    let n = probs.len();
    if n < 3 || z >= 1.0 - 1e-9 {
        let mut all: Vec<usize> = (0..n).collect();
        all.sort_unstable();
        return all;
    }
    let sorted = by_prob_desc(probs);
    let mut weights: Vec<f64> = sorted
        .windows(3)
        .map(|w| (probs[w[0]] as f64 - 2.0 * probs[w[1]] as f64 + probs[w[2]] as f64).abs())
        .collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        let mut all: Vec<usize> = (0..n).collect();
        all.sort_unstable();
        return all;
    }
    weights.iter_mut().for_each(|w| *w /= total);
    let mut cum = 0.0f64;
    let mut keep = n;
    for m in 1..=n {
        if m <= weights.len() {
            cum += weights[m - 1];
        }
        if cum >= z as f64 - 1e-9 {
            keep = m;
            break;
        }
    }
    let mut ids: Vec<usize> = sorted.into_iter().take(keep.max(1)).collect();
    ids.sort_unstable();
    ids
}

/// Softmax of logits / tau.
pub fn temperature_scale(logits: &[f32], tau: f32) -> Vec<f32> {
    let scaled: Vec<f32> = logits.iter().map(|l| l / tau).collect();
    softmax(&scaled)
}

/// FSD score stage: restrict to the LM's top-k, then pick the argmax of
/// `(1 - alpha) * lm - alpha * anti`, ties to the lower id. Deterministic.
pub fn fsd_score(lm_probs: &[f32], anti_probs: &[f32], alpha: f32, k: usize) -> usize {
    let pool = top_k_set(lm_probs, k);
    let mut best = pool[0];
    let mut best_score = f64::NEG_INFINITY;
    for &id in &pool {
        let score =
            (1.0 - alpha as f64) * lm_probs[id] as f64 - alpha as f64 * anti_probs[id] as f64;
        if score > best_score {
            best = id;
            best_score = score;
        }
    }
    best
}

/// Randomized FSD: during the first `t_random` steps, sample from the
/// non-negative-shifted FSD scores over the top-k pool; afterwards fall
/// back to deterministic FSD. `step` is 1-based.
pub fn fsd_random(
    lm_probs: &[f32],
    anti_probs: &[f32],
    alpha: f32,
    k: usize,
    step: usize,
    t_random: usize,
    rng: &mut ChaCha8Rng,
) -> usize {
    if step > t_random {
        return fsd_score(lm_probs, anti_probs, alpha, k);
    }
    let pool = top_k_set(lm_probs, k);
    let scores: Vec<f64> = pool
        .iter()
        .map(|&id| {
            (1.0 - alpha as f64) * lm_probs[id] as f64 - alpha as f64 * anti_probs[id] as f64
        })
        .collect();
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = scores.iter().map(|s| s - min).collect();
    let total: f64 = shifted.iter().sum();
    if total <= 0.0 {
        // All scores equal: uniform over the pool.
        let u = rng.gen::<f64>();
        return pool[((u * pool.len() as f64) as usize).min(pool.len() - 1)];
    }
    let u = rng.gen::<f64>() * total;
    let mut cum = 0.0;
    for (i, w) in shifted.iter().enumerate() {
        cum += w;
        if u < cum {
            return pool[i];
        }
    }
    *pool.last().unwrap()
}

/// Mirostat v1 controller state.
#[derive(Debug, Clone)]
pub struct MirostatState {
    pub mu: f32,
    pub target_surprise: f32,
    pub learning_rate: f32,
}

impl MirostatState {
    pub fn new(target_surprise: f32, learning_rate: f32) -> MirostatState {
        MirostatState {
            mu: 2.0 * target_surprise,
            target_surprise,
            learning_rate,
        }
    }
}

/// One Mirostat step: estimate the Zipf exponent from the top of the sorted
/// distribution, derive k, sample from the top-k, then move mu toward the
/// surprise target. Returns the token and its observed surprise.
pub fn mirostat_step(
    logits: &[f32],
    state: &mut MirostatState,
    rng: &mut ChaCha8Rng,
) -> (usize, f64) {
    let probs = softmax(logits);
    let sorted = by_prob_desc(&probs);
    let m = sorted.len().min(100);
    // Least-squares fit of log(p_i / p_{i+1}) against log((i+2)/(i+1)).
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for i in 0..m.saturating_sub(1) {
        let p0 = probs[sorted[i]] as f64;
        let p1 = probs[sorted[i + 1]] as f64;
        if p1 <= 0.0 {
            break;
        }
        let t = ((i + 2) as f64 / (i + 1) as f64).ln();
        let b = (p0 / p1).ln();
        num += t * b;
        den += t * t;
    }
    let s_hat = if den > 0.0 { num / den } else { 1.0 };
    let n = probs.len() as f64;
    let eps = s_hat - 1.0;
    let k = if eps > 1e-6 {
        let raw = (eps * (state.mu as f64).exp() / (1.0 - n.powf(-eps))).powf(1.0 / s_hat);
        if raw.is_finite() {
            (raw.round() as usize).clamp(1, probs.len())
        } else {
            probs.len()
        }
    } else {
        // Flat or non-Zipf head: fall back to the full vocabulary.
        probs.len()
    };
    let pool = top_k_set(&probs, k);
    let token = sample_from_set(&probs, &pool, rng, false);
    let p = probs[token] as f64;
    let surprise = if p > 0.0 { -p.ln() } else { state.mu as f64 };
    state.mu -= state.learning_rate * (surprise - state.target_surprise as f64) as f32;
    (token, surprise)
}

/// Shared final stage: renormalize over the candidate ids and draw by
/// inverse CDF (ascending id order); greedy picks the argmax instead.
pub fn sample_from_set(probs: &[f32], ids: &[usize], rng: &mut ChaCha8Rng, greedy: bool) -> usize {
    debug_assert!(!ids.is_empty());
    if greedy || ids.len() == 1 {
        let mut best = ids[0];
        for &id in ids {
            if probs[id] > probs[best] {
                best = id;
            }
        }
        return best;
    }
    let total: f64 = ids.iter().map(|&i| probs[i] as f64).sum();
    if total <= 0.0 {
        let u = rng.gen::<f64>();
        return ids[((u * ids.len() as f64) as usize).min(ids.len() - 1)];
    }
    let u = rng.gen::<f64>() * total;
    let mut cum = 0.0f64;
    for &id in ids {
        cum += probs[id] as f64;
        if u < cum {
            return id;
        }
    }
    *ids.last().unwrap()
}

// ---------------------------------------------------------------------------
// Per-query sampling state and the strategy dispatcher
// ---------------------------------------------------------------------------

/// Mutable per-query state: the rng stream, the anti-LM over the prefix,
/// the mirostat controller, and the 1-based step counter.
#[derive(Debug, Clone)]
pub struct SamplerState {
    rng: ChaCha8Rng,
    antilm: Option<AntiLm>,
    mirostat: Option<MirostatState>,
    step: usize,
}

impl SamplerState {
    /// Build state for one query; `stream` separates co-tenant queries so
    /// batching never perturbs anyone's draws.
    pub fn new(policy: &SamplerPolicy, vocab: usize, stream: u64) -> SamplerState {
        let mut rng = ChaCha8Rng::seed_from_u64(policy.rng_seed);
        rng.set_stream(stream);
        let antilm = matches!(policy.strategy, Strategy::Fsd | Strategy::FsdRandom)
            .then(|| AntiLm::new(policy.antilm_order, vocab));
        let mirostat = (policy.strategy == Strategy::Mirostat)
            .then(|| MirostatState::new(policy.target_surprise, policy.learning_rate));
        SamplerState {
            rng,
            antilm,
            mirostat,
            step: 0,
        }
    }

    /// Feed a prefix token (prompt or generated) into prefix-tracking state.
    pub fn observe(&mut self, token: u32) {
        if let Some(lm) = &mut self.antilm {
            lm.observe(token);
        }
    }

    pub fn mirostat_mu(&self) -> Option<f32> {
        self.mirostat.as_ref().map(|m| m.mu)
    }
}

/// Choose the next token from logits under the policy.
pub fn choose(policy: &SamplerPolicy, state: &mut SamplerState, logits: &[f32]) -> u32 {
    state.step += 1;
    let token = match policy.strategy {
        Strategy::Greedy => {
            let probs = softmax(logits);
            let all: Vec<usize> = (0..probs.len()).collect();
            sample_from_set(&probs, &all, &mut state.rng, true)
        }
        Strategy::TopK => {
            let probs = softmax(logits);
            let ids = top_k_set(&probs, policy.k);
            sample_from_set(&probs, &ids, &mut state.rng, false)
        }
        Strategy::TopP => {
            let probs = softmax(logits);
            let ids = top_p_set(&probs, policy.p);
            sample_from_set(&probs, &ids, &mut state.rng, false)
        }
        Strategy::Temperature => {
            let probs = temperature_scale(logits, policy.temperature);
            let all: Vec<usize> = (0..probs.len()).collect();
            sample_from_set(&probs, &all, &mut state.rng, false)
        }
        Strategy::MinP => {
            let probs = softmax(logits);
            let ids = min_p_set(&probs, policy.alpha);
            sample_from_set(&probs, &ids, &mut state.rng, false)
        }
        Strategy::Typical => {
            let probs = softmax(logits);
            let ids = typical_set(&probs, policy.p);
            sample_from_set(&probs, &ids, &mut state.rng, false)
        }
        Strategy::Tfs => {
            let probs = softmax(logits);
            let ids = tfs_set(&probs, policy.tfs_z);
            sample_from_set(&probs, &ids, &mut state.rng, false)
        }
        Strategy::Mirostat => {
            let m = state
                .mirostat
                .as_mut()
                .expect("mirostat state initialized with the policy");
            mirostat_step(logits, m, &mut state.rng).0
        }
        Strategy::Fsd => {
            let probs = softmax(logits);
            let anti = state
                .antilm
                .as_ref()
                .expect("anti-LM initialized with the policy")
                .probs();
            fsd_score(&probs, &anti, policy.alpha, policy.k)
        }
        Strategy::FsdRandom => {
            let probs = softmax(logits);
            let anti = state
                .antilm
                .as_ref()
                .expect("anti-LM initialized with the policy")
                .probs();
            fsd_random(
                &probs,
                &anti,
                policy.alpha,
                policy.k,
                state.step,
                policy.t_random,
                &mut state.rng,
            )
        }
    };
    token as u32
}
