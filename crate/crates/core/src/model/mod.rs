//! Language-model backends.
//!
//! A backend turns a batch of tokens (optionally linked by a tree mask) plus
//! a read-only cache view into one [`LogitBundle`] per token and the KV
//! entries those tokens would add to the cache. Appending is left to the
//! caller, so a forward pass never touches existing entries.

mod heads;
pub mod io;
mod table;
pub mod tensor;
mod tiny;

pub use heads::{draft_heads, DraftHeads};
pub use table::{DraftBehavior, Fallback, TableLm};
pub use tiny::{LayerWeights, TinyTransformer, TinyWeights};

use crate::kvcache::{CacheView, KvEntry};
use crate::{Error, Result, TokenId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    /// Equal to `num_heads` for MHA, a proper divisor for GQA.
    pub num_kv_heads: usize,
    /// Number of residual draft heads on top of the LM head.
    pub gamma: usize,
    pub max_positions: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 4,
            num_kv_heads: 4,
            gamma: 3,
            max_positions: 16_384,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.num_heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::Config(format!(
                "num_heads {} is not a multiple of num_kv_heads {}",
                self.num_heads, self.num_kv_heads
            )));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not a multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.num_kv_heads * self.head_dim()
    }

    /// Query heads sharing one KV head.
    pub fn group_size(&self) -> usize {
        self.num_heads / self.num_kv_heads
    }
}

/// Final-layer hidden representation `h_0` (and the chained `h_i`).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState(Vec<f32>);

impl HiddenState {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::DimensionMismatch(
                "hidden state has non-finite entries".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }
}

/// Logits `l_0 … l_γ` for one input token. `l_0` comes from the LM head and
/// predicts the next position; `l_i` predicts `i` positions further.
///
/// Bundles produced without draft heads hold `l_0` only.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBundle {
    logits: Vec<Vec<f32>>,
}

impl LogitBundle {
    pub fn new(logits: Vec<Vec<f32>>) -> Self {
        debug_assert!(!logits.is_empty());
        Self { logits }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn target(&self) -> &[f32] {
        &self.logits[0]
    }

    pub fn head(&self, i: usize) -> &[f32] {
        &self.logits[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.logits.iter().map(Vec::as_slice)
    }
}

/// Dense boolean matrix over the tokens of one request: `get(i, j)` is true
/// when token `i` may attend to token `j`. Cache entries are always visible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn causal(n: usize) -> Self {
        let mut m = Self::new(n, n);
        for i in 0..n {
            for j in 0..=i {
                m.set(i, j, true);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.cols + j] = v;
    }
}

#[derive(Debug, Clone)]
pub struct ForwardRequest {
    pub tokens: Vec<TokenId>,
    /// Absolute position of each token.
    pub positions: Vec<usize>,
    /// Square mask over `tokens`; `None` means causal.
    pub mask: Option<AttentionMask>,
    /// Also evaluate the draft heads (`l_1 … l_γ`).
    pub draft_heads: bool,
}

impl ForwardRequest {
    /// Consecutive tokens starting at `start`, causally masked.
    pub fn sequential(tokens: Vec<TokenId>, start: usize) -> Self {
        let positions = (start..start + tokens.len()).collect();
        Self {
            tokens,
            positions,
            mask: None,
            draft_heads: false,
        }
    }

    pub fn with_draft_heads(mut self) -> Self {
        self.draft_heads = true;
        self
    }

    pub(crate) fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Config("forward request has no tokens".into()));
        }
        if self.positions.len() != self.tokens.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} positions for {} tokens",
                self.positions.len(),
                self.tokens.len()
            )));
        }
        if let Some(&pos) = self.positions.iter().find(|&&p| p >= config.max_positions) {
            return Err(Error::PositionOverflow {
                pos,
                max: config.max_positions,
            });
        }
        if let Some(&t) = self
            .tokens
            .iter()
            .find(|&&t| t as usize >= config.vocab_size)
        {
            return Err(Error::DimensionMismatch(format!(
                "token {t} outside vocabulary of {}",
                config.vocab_size
            )));
        }
        if let Some(mask) = &self.mask {
            let n = self.tokens.len();
            if mask.rows() != n || mask.cols() != n {
                return Err(Error::MaskShapeMismatch {
                    rows: mask.rows(),
                    cols: mask.cols(),
                    expected: n,
                });
            }
        }
        Ok(())
    }

    pub(crate) fn visible(&self, i: usize, j: usize) -> bool {
        match &self.mask {
            Some(m) => m.get(i, j),
            None => j <= i,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub bundles: Vec<LogitBundle>,
    pub hidden: Vec<HiddenState>,
    /// `entries[token][layer]`.
    pub entries: Vec<Vec<KvEntry>>,
    /// `queries[token][layer]`: pre-rotation query vectors, all heads
    /// concatenated. Feeds the importance score.
    pub queries: Vec<Vec<Vec<f32>>>,
}

pub trait LanguageModel: Send + Sync {
    fn config(&self) -> &ModelConfig;

    fn forward(&self, request: &ForwardRequest, cache: &CacheView<'_>) -> Result<ForwardOutput>;
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn config(&self) -> &ModelConfig {
        (**self).config()
    }

    fn forward(&self, request: &ForwardRequest, cache: &CacheView<'_>) -> Result<ForwardOutput> {
        (**self).forward(request, cache)
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for Box<M> {
    fn config(&self) -> &ModelConfig {
        (**self).config()
    }

    fn forward(&self, request: &ForwardRequest, cache: &CacheView<'_>) -> Result<ForwardOutput> {
        (**self).forward(request, cache)
    }
}
