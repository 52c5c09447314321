//! Contextual-penalty softmax, truncation rules, and position-keyed draws.
//!
//! Every draw for absolute position `p` consumes the same uniform deviate,
//! derived from `(seed, p)` by a counter-based generator. A speculative
//! branch that reaches position `p` with the same prefix therefore samples
//! exactly the token autoregressive decoding would.

use std::collections::{HashMap, VecDeque};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::TokenId;

/// Truncation applied after the penalized softmax.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    /// Smallest probability-sorted prefix with mass `>= p`.
    TopP(f64),
    /// Tokens with probability `>= p_base * p_max`.
    MinP(f64),
    /// Tokens with probability `>= min(ε, √ε · exp(−entropy))`.
    Eta(f64),
}

impl Truncation {
    pub fn parameter(&self) -> f64 {
        match *self {
            Self::TopP(v) | Self::MinP(v) | Self::Eta(v) => v,
        }
    }
}

/// How the penalty treats negative logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// `l / (t·θ)` for every penalized token, whatever its sign.
    #[default]
    Divide,
    /// Divide positive logits, multiply negative ones (CTRL style).
    SignAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    /// Penalty value θ; `1.0` switches the penalty off.
    pub theta: f64,
    /// Number of most recent tokens the penalty applies to.
    pub window: usize,
    pub truncation: Truncation,
    pub seed: u64,
    #[serde(default)]
    pub penalty_mode: PenaltyMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            theta: 1.2,
            window: 1024,
            truncation: Truncation::MinP(0.1),
            seed: 0,
            penalty_mode: PenaltyMode::Divide,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if !(self.theta >= 1.0 && self.theta.is_finite()) {
            return Err(format!("penalty must be at least 1.0, got {}", self.theta));
        }
        let p = self.truncation.parameter();
        if !(p > 0.0 && p <= 1.0) {
            return Err(format!("truncation parameter must be in (0, 1], got {p}"));
        }
        Ok(())
    }
}

/// Membership test for the penalized token set.
pub trait TokenSet {
    fn contains(&self, token: TokenId) -> bool;
}

/// The most recent `W` tokens and their multiset counts.
#[derive(Debug, Clone, Default)]
pub struct PenaltyWindow {
    capacity: usize,
    ring: VecDeque<TokenId>,
    counts: HashMap<TokenId, u32>,
}

impl PenaltyWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            ring: VecDeque::with_capacity(capacity),
            counts: HashMap::new(),
        }
    }

    /// Window over the tail of `tokens`.
    pub fn from_history(capacity: usize, tokens: &[TokenId]) -> Self {
        let mut w = Self::new(capacity);
        for &t in &tokens[tokens.len().saturating_sub(capacity)..] {
            w.push(t);
        }
        w
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn push(&mut self, token: TokenId) {
        if self.capacity == 0 {
            return;
        }
        if self.ring.len() == self.capacity {
            let old = self.ring.pop_front().expect("full ring");
            if let Some(c) = self.counts.get_mut(&old) {
                *c -= 1;
                if *c == 0 {
                    self.counts.remove(&old);
                }
            }
        }
        self.ring.push_back(token);
        *self.counts.entry(token).or_insert(0) += 1;
    }

    pub fn extend(&mut self, tokens: &[TokenId]) {
        for &t in tokens {
            self.push(t);
        }
    }

    /// The window as it would look after pushing `suffix`, without copying.
    pub fn extended<'a>(&'a self, suffix: &'a [TokenId]) -> WindowView<'a> {
        WindowView { base: self, suffix }
    }

    pub fn members(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.counts.keys().copied()
    }
}

impl TokenSet for PenaltyWindow {
    fn contains(&self, token: TokenId) -> bool {
        self.counts.contains_key(&token)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WindowView<'a> {
    base: &'a PenaltyWindow,
    suffix: &'a [TokenId],
}

impl TokenSet for WindowView<'_> {
    fn contains(&self, token: TokenId) -> bool {
        let cap = self.base.capacity;
        let suffix = &self.suffix[self.suffix.len().saturating_sub(cap)..];
        if suffix.contains(&token) {
            return true;
        }
        let Some(&count) = self.base.counts.get(&token) else {
            return false;
        };
        let dropped = (self.base.ring.len() + suffix.len()).saturating_sub(cap);
        let gone = self
            .base
            .ring
            .iter()
            .take(dropped)
            .filter(|&&t| t == token)
            .count() as u32;
        count > gone
    }
}

/// Probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Highest-probability token, lowest id on ties.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best as TokenId
    }

    /// Token ids sorted by decreasing probability, lowest id first on ties.
    pub fn ranked(&self) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = (0..self.0.len() as TokenId).collect();
        ids.sort_by(|&a, &b| self.0[b as usize].total_cmp(&self.0[a as usize]));
        ids
    }

    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    fn renormalized(mut self) -> Self {
        let total: f64 = self.0.iter().sum();
        for p in &mut self.0 {
            *p /= total;
        }
        self
    }
}

/// `p_i = exp(l_i / (t·I_i)) / Σ_j exp(l_j / (t·I_j))` with `I_i = θ` for
/// tokens in the window and `1` otherwise.
pub fn penalized_probs(logits: &[f32], window: &impl TokenSet, config: &SamplerConfig) -> ProbDist {
    let t = config.temperature;
    let theta = config.theta;
    let scaled: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let l = l as f64;
            if theta == 1.0 || !window.contains(i as TokenId) {
                return l / t;
            }
            match config.penalty_mode {
                PenaltyMode::Divide => l / (t * theta),
                PenaltyMode::SignAware if l < 0.0 => l * theta / t,
                PenaltyMode::SignAware => l / (t * theta),
            }
        })
        .collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&z| (z - max).exp()).collect();
    ProbDist(exps).renormalized()
}

/// Applies a truncation rule and renormalizes. The argmax always survives.
pub fn truncate(dist: ProbDist, rule: Truncation) -> ProbDist {
    let probs = dist.probs();
    let keep: Vec<bool> = match rule {
        Truncation::TopP(p) => {
            let mut keep = vec![false; probs.len()];
            let mut mass = 0.0;
            for id in dist.ranked() {
                keep[id as usize] = true;
                mass += probs[id as usize];
                if mass >= p {
                    break;
                }
            }
            keep
        }
        Truncation::MinP(base) => {
            let max = probs.iter().copied().fold(0.0, f64::max);
            let threshold = base * max;
            probs.iter().map(|&q| q >= threshold).collect()
        }
        Truncation::Eta(eps) => {
            let eta = eps.min(eps.sqrt() * (-dist.entropy()).exp());
            let mut keep: Vec<bool> = probs.iter().map(|&q| q >= eta).collect();
            keep[dist.argmax() as usize] = true;
            keep
        }
    };
    let kept = probs
        .iter()
        .zip(keep)
        .map(|(&q, k)| if k { q } else { 0.0 })
        .collect();
    ProbDist(kept).renormalized()
}

/// Uniform deviate in `[0, 1)` owned by absolute position `pos`.
pub fn position_deviate(seed: u64, pos: usize) -> f64 {
    keyed_deviate(seed, 0, pos as u64)
}

/// Uniform deviate from an independent counter stream.
pub fn keyed_deviate(seed: u64, stream: u64, counter: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(counter as u128 * 2);
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Inverse-CDF draw for a given deviate.
pub fn sample_with_deviate(dist: &ProbDist, u: f64) -> TokenId {
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in dist.probs().iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        last = i;
        if u < cum {
            return i as TokenId;
        }
    }
    last as TokenId
}

pub fn sample_at(dist: &ProbDist, pos: usize, seed: u64) -> TokenId {
    sample_with_deviate(dist, position_deviate(seed, pos))
}

/// Penalize, truncate and draw the token for absolute position `pos`.
pub fn sample_token(
    logits: &[f32],
    window: &impl TokenSet,
    config: &SamplerConfig,
    pos: usize,
) -> TokenId {
    let dist = truncate(penalized_probs(logits, window, config), config.truncation);
    sample_at(&dist, pos, config.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(theta: f64) -> SamplerConfig {
        SamplerConfig {
            temperature: 1.0,
            theta,
            window: 8,
            truncation: Truncation::TopP(1.0),
            seed: 0,
            penalty_mode: PenaltyMode::Divide,
        }
    }

    #[test]
    fn plain_softmax_without_penalty() {
        let d = penalized_probs(&[0.0, 3f32.ln()], &PenaltyWindow::new(4), &cfg(1.0));
        assert!((d.probs()[0] - 0.25).abs() < 1e-7);
        assert!((d.probs()[1] - 0.75).abs() < 1e-7);
    }

    #[test]
    fn penalty_divides_window_logits() {
        let mut w = PenaltyWindow::new(4);
        w.push(0);
        let d = penalized_probs(&[2.4, 2.4], &w, &cfg(1.2));
        let a = (2.4f32 as f64 / 1.2).exp();
        let b = (2.4f32 as f64).exp();
        assert!((d.probs()[0] - a / (a + b)).abs() < 1e-12);
    }

    #[test]
    fn empty_window_is_neutral() {
        let logits = [0.3, -1.2, 2.0, 0.0];
        let empty = PenaltyWindow::new(4);
        assert_eq!(
            penalized_probs(&logits, &empty, &cfg(1.7)),
            penalized_probs(&logits, &empty, &cfg(1.0))
        );
    }

    #[test]
    fn sign_aware_mode_suppresses_negative_logits() {
        let mut w = PenaltyWindow::new(4);
        w.push(0);
        let mut c = cfg(2.0);
        let plain = penalized_probs(&[-1.0, 0.0], &w, &c);
        c.penalty_mode = PenaltyMode::SignAware;
        let aware = penalized_probs(&[-1.0, 0.0], &w, &c);
        assert!(plain.probs()[0] > aware.probs()[0]);
    }

    #[test]
    fn top_p_one_is_identity() {
        let d = ProbDist::new(vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(truncate(d.clone(), Truncation::TopP(1.0)), d);
    }

    #[test]
    fn min_p_threshold() {
        let d = ProbDist::new(vec![0.5, 0.06, 0.44]);
        let t = truncate(d.clone(), Truncation::MinP(0.1));
        assert_eq!(t, d);
        let t = truncate(d, Truncation::MinP(0.2));
        assert_eq!(t.probs()[1], 0.0);
    }

    #[test]
    fn top_p_on_uniform_keeps_two() {
        let d = ProbDist::new(vec![0.25; 4]);
        let t = truncate(d, Truncation::TopP(0.5));
        assert_eq!(t.probs(), &[0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn eta_drops_tail() {
        let d = ProbDist::new(vec![0.9, 0.0999, 0.0001]);
        let t = truncate(d, Truncation::Eta(0.01));
        assert_eq!(t.probs()[2], 0.0);
        assert!(t.probs()[1] > 0.0);
    }

    #[test]
    fn inverse_cdf_boundaries() {
        let d = ProbDist::new(vec![0.3, 0.7]);
        assert_eq!(sample_with_deviate(&d, 0.29), 0);
        assert_eq!(sample_with_deviate(&d, 0.31), 1);
    }

    #[test]
    fn point_mass_is_always_drawn() {
        let mut p = vec![0.0; 10];
        p[7] = 1.0;
        let d = ProbDist::new(p);
        for seed in 0..20 {
            assert_eq!(sample_at(&d, 3, seed), 7);
        }
    }

    #[test]
    fn deviates_are_keyed() {
        assert_eq!(position_deviate(5, 100), position_deviate(5, 100));
        assert_ne!(position_deviate(5, 100), position_deviate(5, 101));
        assert_ne!(position_deviate(5, 100), position_deviate(6, 100));
        assert_ne!(keyed_deviate(5, 1, 100), position_deviate(5, 100));
    }

    #[test]
    fn window_forgets_after_capacity() {
        let mut w = PenaltyWindow::new(3);
        w.extend(&[1, 2, 3]);
        assert!(w.contains(1));
        w.push(4);
        assert!(!w.contains(1));
        assert!(w.contains(2));
    }

    #[test]
    fn extended_view_matches_materialized_window() {
        let history = [5, 1, 5, 2, 3, 1, 4];
        let w = PenaltyWindow::from_history(4, &history);
        for suffix in [&[][..], &[9], &[5, 9], &[7, 7, 7], &[6, 6, 6, 6, 6]] {
            let mut full = w.clone();
            full.extend(suffix);
            let view = w.extended(suffix);
            for t in 0..10 {
                assert_eq!(
                    view.contains(t),
                    full.contains(t),
                    "token {t} suffix {suffix:?}"
                );
            }
        }
    }
}
