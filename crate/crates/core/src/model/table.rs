//! Table-driven oracle backend.
//!
//! Next-token logits are a pure function of the last `order` tokens: either
//! an explicitly programmed entry or a deterministic fallback. The draft
//! heads are programmable too, which lets engine tests force full
//! acceptance, total rejection, or anything in between.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ForwardOutput, ForwardRequest, HiddenState, LanguageModel, LogitBundle, ModelConfig};
use crate::kvcache::{CacheView, KvEntry};
use crate::{Error, Result, TokenId};

/// Logit given to tokens outside a point mass.
const FLOOR: f32 = -1.0e4;

/// Logits for contexts without a table entry.
#[derive(Debug, Clone, PartialEq)]
pub enum Fallback {
    /// Point mass on `(last + 1) mod vocab`.
    Successor,
    /// Gaussian logits with standard deviation `scale`, seeded by the context.
    Seeded { seed: u64, scale: f32 },
}

/// What the draft heads report when a request asks for them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DraftBehavior {
    /// `l_0` is the true distribution; `l_i` is a point mass on the `i`-th
    /// token of the greedy continuation.
    Echo,
    /// Every draft logit is a point mass one token off the greedy
    /// continuation, so no draft is ever accepted under point-mass tables.
    Disagree,
    /// `l_0` is the true distribution; `l_1 … l_γ` are flat.
    Blind,
}

#[derive(Debug, Clone)]
pub struct TableLm {
    config: ModelConfig,
    order: usize,
    table: HashMap<Vec<TokenId>, Vec<f32>>,
    fallback: Fallback,
    draft: DraftBehavior,
}

impl TableLm {
    /// `order` is the number of trailing tokens the table is keyed on.
    pub fn new(vocab_size: usize, gamma: usize, order: usize, fallback: Fallback) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("table order must be positive".into()));
        }
        let config = ModelConfig {
            vocab_size,
            num_layers: 1,
            hidden_dim: 1,
            num_heads: 1,
            num_kv_heads: 1,
            gamma,
            max_positions: usize::MAX,
            init_seed: 0,
        };
        config.validate()?;
        Ok(Self {
            config,
            order,
            table: HashMap::new(),
            fallback,
            draft: DraftBehavior::Echo,
        })
    }

    pub fn with_draft(mut self, draft: DraftBehavior) -> Self {
        self.draft = draft;
        self
    }

    pub fn with_max_positions(mut self, max_positions: usize) -> Self {
        self.config.max_positions = max_positions;
        self
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Programs the logits for an exact context of length `order`.
    pub fn set_logits(&mut self, context: &[TokenId], logits: Vec<f32>) -> Result<()> {
        if context.len() != self.order || logits.len() != self.config.vocab_size {
            return Err(Error::DimensionMismatch(format!(
                "context of {} tokens and {} logits for order {} over {} tokens",
                context.len(),
                logits.len(),
                self.order,
                self.config.vocab_size
            )));
        }
        self.table.insert(context.to_vec(), logits);
        Ok(())
    }

    pub fn set_next(&mut self, context: &[TokenId], next: TokenId) -> Result<()> {
        let logits = point_mass(self.config.vocab_size, next);
        self.set_logits(context, logits)
    }

    /// Makes `phrase` deterministic: every context inside it continues with
    /// the phrase's next token.
    pub fn insert_phrase(&mut self, phrase: &[TokenId]) -> Result<()> {
        for end in self.order..phrase.len() {
            self.set_next(&phrase[end - self.order..end], phrase[end])?;
        }
        Ok(())
    }

    /// Next-token logits for `context` (only the last `order` tokens count).
    pub fn logits(&self, context: &[TokenId]) -> Vec<f32> {
        let key = &context[context.len().saturating_sub(self.order)..];
        if let Some(l) = self.table.get(key) {
            return l.clone();
        }
        let last = key.last().copied().unwrap_or(0);
        match &self.fallback {
            Fallback::Successor => point_mass(
                self.config.vocab_size,
                (last + 1) % self.config.vocab_size as u32,
            ),
            Fallback::Seeded { seed, scale } => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(*seed, key));
                let normal = Normal::new(0.0f32, *scale).expect("finite scale");
                (0..self.config.vocab_size)
                    .map(|_| normal.sample(&mut rng))
                    .collect()
            }
        }
    }

    fn greedy(&self, context: &[TokenId]) -> TokenId {
        argmax(&self.logits(context))
    }

    fn bundle(&self, context: &[TokenId], draft: bool) -> LogitBundle {
        let l0 = self.logits(context);
        if !draft {
            return LogitBundle::new(vec![l0]);
        }
        let vocab = self.config.vocab_size as u32;
        let mut chain = Vec::with_capacity(self.config.gamma + 1);
        let mut ctx = context.to_vec();
        let mut next = argmax(&l0);
        chain.push(next);
        for _ in 0..self.config.gamma {
            ctx.push(next);
            next = self.greedy(&ctx);
            chain.push(next);
        }
        let logits = match self.draft {
            DraftBehavior::Echo => std::iter::once(l0)
                .chain(chain[1..].iter().map(|&t| point_mass(vocab as usize, t)))
                .collect(),
            DraftBehavior::Disagree => chain
                .iter()
                .map(|&t| point_mass(vocab as usize, (t + 1) % vocab))
                .collect(),
            DraftBehavior::Blind => std::iter::once(l0)
                .chain((0..self.config.gamma).map(|_| vec![0.0; vocab as usize]))
                .collect(),
        };
        LogitBundle::new(logits)
    }
}

impl LanguageModel for TableLm {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward(&self, request: &ForwardRequest, cache: &CacheView<'_>) -> Result<ForwardOutput> {
        request.check(&self.config)?;
        let n = request.tokens.len();
        let history = self.order.saturating_sub(1);
        let mut out = ForwardOutput {
            bundles: Vec::with_capacity(n),
            hidden: Vec::with_capacity(n),
            entries: Vec::with_capacity(n),
            queries: Vec::with_capacity(n),
        };
        for t in 0..n {
            let pos = request.positions[t];
            let mut ctx: Vec<(usize, TokenId)> = cache
                .latest_before(0, pos, history)
                .into_iter()
                .map(|e| (e.origin_pos, e.value[0] as TokenId))
                .collect();
            ctx.extend(
                (0..t)
                    .filter(|&j| request.visible(t, j) && request.positions[j] < pos)
                    .map(|j| (request.positions[j], request.tokens[j])),
            );
            ctx.sort_by_key(|&(p, _)| p);
            let skip = ctx.len().saturating_sub(history);
            let mut context: Vec<TokenId> = ctx[skip..].iter().map(|&(_, tok)| tok).collect();
            context.push(request.tokens[t]);

            let tok = request.tokens[t];
            let key = pseudo_key(tok, pos);
            out.bundles.push(self.bundle(&context, request.draft_heads));
            out.hidden.push(HiddenState::new(vec![tok as f32])?);
            out.entries.push(vec![KvEntry {
                key: vec![key],
                key_at_origin: vec![key],
                value: vec![tok as f32],
                origin_pos: pos,
            }]);
            out.queries.push(vec![vec![1.0]]);
        }
        Ok(out)
    }
}

pub(crate) fn point_mass(vocab: usize, token: TokenId) -> Vec<f32> {
    let mut l = vec![FLOOR; vocab];
    l[token as usize] = 0.0;
    l
}

fn argmax(logits: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

fn mix(seed: u64, tokens: &[TokenId]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tokens {
        h = splitmix(h ^ t as u64);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stand-in key so importance scores vary across positions.
fn pseudo_key(token: TokenId, pos: usize) -> f32 {
    let h = splitmix(((pos as u64) << 32) ^ token as u64);
    (h >> 40) as f32 / (1u64 << 24) as f32 * 2.0 - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvcache::FullCache;

    #[test]
    fn programmed_next_token_is_argmax() {
        let mut lm = TableLm::new(16, 3, 1, Fallback::Successor).unwrap();
        lm.set_next(&[4], 11).unwrap();
        let out = lm
            .forward(
                &ForwardRequest::sequential(vec![4], 0),
                &CacheView::empty(1),
            )
            .unwrap();
        assert_eq!(argmax(out.bundles[0].target()), 11);
    }

    #[test]
    fn echo_heads_follow_greedy_chain() {
        let lm = TableLm::new(16, 3, 1, Fallback::Successor).unwrap();
        let out = lm
            .forward(
                &ForwardRequest::sequential(vec![5], 0).with_draft_heads(),
                &CacheView::empty(1),
            )
            .unwrap();
        let b = &out.bundles[0];
        let heads: Vec<TokenId> = b.iter().map(argmax).collect();
        assert_eq!(heads, vec![6, 7, 8, 9]);
    }

    #[test]
    fn disagree_heads_are_off_by_one() {
        let lm = TableLm::new(16, 2, 1, Fallback::Successor)
            .unwrap()
            .with_draft(DraftBehavior::Disagree);
        let out = lm
            .forward(
                &ForwardRequest::sequential(vec![5], 0).with_draft_heads(),
                &CacheView::empty(1),
            )
            .unwrap();
        let heads: Vec<TokenId> = out.bundles[0].iter().map(argmax).collect();
        assert_eq!(heads, vec![7, 8, 9]);
    }

    #[test]
    fn higher_order_context_reads_cache() {
        let mut lm = TableLm::new(16, 0, 2, Fallback::Successor).unwrap();
        lm.set_next(&[3, 7], 1).unwrap();
        let mut cache = FullCache::new(1);
        let first = lm
            .forward(&ForwardRequest::sequential(vec![3], 0), &cache.view())
            .unwrap();
        cache.push(first.entries[0].clone()).unwrap();
        let out = lm
            .forward(&ForwardRequest::sequential(vec![7], 1), &cache.view())
            .unwrap();
        assert_eq!(argmax(out.bundles[0].target()), 1);
    }

    #[test]
    fn seeded_fallback_is_deterministic() {
        let lm = TableLm::new(
            32,
            0,
            2,
            Fallback::Seeded {
                seed: 5,
                scale: 2.0,
            },
        )
        .unwrap();
        assert_eq!(lm.logits(&[1, 2]), lm.logits(&[9, 1, 2]));
        assert_ne!(lm.logits(&[1, 2]), lm.logits(&[2, 1]));
    }
}
