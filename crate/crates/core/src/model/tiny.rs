//! A small pre-norm transformer with rotary attention, grouped KV heads, a
//! SiLU MLP, an LM head tied to the embedding, and residual draft heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{axpy, dot, rms_norm, silu, Matrix};
use super::{
    draft_heads, DraftHeads, ForwardOutput, ForwardRequest, HiddenState, LanguageModel,
    LogitBundle, ModelConfig,
};
use crate::kvcache::{CacheView, KvEntry};
use crate::{Error, Result};

const ROPE_BASE: f64 = 10_000.0;
const MLP_RATIO: usize = 4;
/// Output projections start larger than the residual stream so a token's
/// own embedding does not dominate the tied LM head.
const BLOCK_OUT_SCALE: f32 = 8.0;
/// Initial final-norm gain; keeps next-token entropy moderate.
const FINAL_GAIN: f32 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Vec<f32>,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyWeights {
    /// `vocab × hidden`; doubles as the LM head.
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// `γ` square matrices, chained residually.
    pub draft_heads: Vec<Matrix>,
}

impl TinyWeights {
    /// Seeded initialization. Each tensor draws from its own ChaCha stream
    /// so adding a tensor never perturbs the others.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let kv = config.kv_dim();
        let ffn = MLP_RATIO * h;
        let mut stream = 0u64;
        let mut draw = |rows: usize, cols: usize, std: f32| {
            stream += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
            rng.set_stream(stream);
            let normal = Normal::new(0.0f32, std).expect("positive std");
            let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            Matrix::from_vec(rows, cols, data).expect("shape matches")
        };
        let fan = |n: usize| 1.0 / (n as f32).sqrt();

        let embedding = draw(config.vocab_size, h, 1.0);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; h],
                wq: draw(h, h, fan(h)),
                wk: draw(kv, h, fan(h)),
                wv: draw(kv, h, fan(h)),
                wo: draw(h, h, BLOCK_OUT_SCALE * fan(h)),
                mlp_norm: vec![1.0; h],
                w_up: draw(ffn, h, fan(h)),
                w_down: draw(h, ffn, BLOCK_OUT_SCALE * fan(ffn)),
            })
            .collect();
        let draft_heads = (0..config.gamma).map(|_| draw(h, h, fan(h))).collect();
        Ok(Self {
            embedding,
            layers,
            final_norm: vec![FINAL_GAIN; h],
            draft_heads,
        })
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let h = config.hidden_dim;
        let kv = config.kv_dim();
        let ffn = MLP_RATIO * h;
        let shape = |name: &str, m: &Matrix, rows: usize, cols: usize| -> Result<()> {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
            Ok(())
        };
        let width = |name: &str, v: &[f32], n: usize| -> Result<()> {
            if v.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{name} has {} entries, expected {n}",
                    v.len()
                )));
            }
            Ok(())
        };
        shape("embedding", &self.embedding, config.vocab_size, h)?;
        width("final_norm", &self.final_norm, h)?;
        if self.layers.len() != config.num_layers {
            return Err(Error::DimensionMismatch(format!(
                "{} layers, expected {}",
                self.layers.len(),
                config.num_layers
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            width(&format!("layer {i} attn_norm"), &l.attn_norm, h)?;
            width(&format!("layer {i} mlp_norm"), &l.mlp_norm, h)?;
            shape(&format!("layer {i} wq"), &l.wq, h, h)?;
            shape(&format!("layer {i} wk"), &l.wk, kv, h)?;
            shape(&format!("layer {i} wv"), &l.wv, kv, h)?;
            shape(&format!("layer {i} wo"), &l.wo, h, h)?;
            shape(&format!("layer {i} w_up"), &l.w_up, ffn, h)?;
            shape(&format!("layer {i} w_down"), &l.w_down, h, ffn)?;
        }
        if self.draft_heads.len() != config.gamma {
            return Err(Error::DimensionMismatch(format!(
                "{} draft heads, expected gamma = {}",
                self.draft_heads.len(),
                config.gamma
            )));
        }
        for (i, f) in self.draft_heads.iter().enumerate() {
            shape(&format!("draft head {}", i + 1), f, h, h)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TinyTransformer {
    config: ModelConfig,
    weights: TinyWeights,
    /// `cos[pos * half + i]`, `sin[...]` for the rotary pairs.
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl TinyTransformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let weights = TinyWeights::init(&config)?;
        Self::from_weights(config, weights)
    }

    pub fn from_weights(config: ModelConfig, weights: TinyWeights) -> Result<Self> {
        config.validate()?;
        if !config.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rotary encoding needs an even head_dim, got {}",
                config.head_dim()
            )));
        }
        weights.check(&config)?;
        let half = config.head_dim() / 2;
        let mut cos = Vec::with_capacity(config.max_positions * half);
        let mut sin = Vec::with_capacity(config.max_positions * half);
        for pos in 0..config.max_positions {
            for i in 0..half {
                let freq = ROPE_BASE.powf(-(2.0 * i as f64) / config.head_dim() as f64);
                let angle = pos as f64 * freq;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Ok(Self {
            config,
            weights,
            cos,
            sin,
        })
    }

    pub fn weights(&self) -> &TinyWeights {
        &self.weights
    }

    /// Rotates every head of `x` in place to position `pos`.
    fn rotate(&self, x: &mut [f32], pos: usize) {
        let hd = self.config.head_dim();
        let half = hd / 2;
        let cos = &self.cos[pos * half..(pos + 1) * half];
        let sin = &self.sin[pos * half..(pos + 1) * half];
        for head in x.chunks_mut(hd) {
            for i in 0..half {
                let (a, b) = (head[i], head[i + half]);
                head[i] = a * cos[i] - b * sin[i];
                head[i + half] = a * sin[i] + b * cos[i];
            }
        }
    }

    fn rotated(&self, x: &[f32], pos: usize) -> Vec<f32> {
        let mut out = x.to_vec();
        self.rotate(&mut out, pos);
        out
    }

    pub fn lm_head(&self, h: &HiddenState) -> Vec<f32> {
        self.weights.embedding.matvec(h.values())
    }
}

impl LanguageModel for TinyTransformer {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward(&self, request: &ForwardRequest, cache: &CacheView<'_>) -> Result<ForwardOutput> {
        let cfg = &self.config;
        request.check(cfg)?;
        if cache.num_layers() != cfg.num_layers {
            return Err(Error::DimensionMismatch(format!(
                "cache has {} layers, model has {}",
                cache.num_layers(),
                cfg.num_layers
            )));
        }
        for &p in &request.positions {
            let q = cache.query_position(p);
            if q >= cfg.max_positions {
                return Err(Error::PositionOverflow {
                    pos: q,
                    max: cfg.max_positions,
                });
            }
        }

        let n = request.tokens.len();
        let hd = cfg.head_dim();
        let heads = cfg.num_heads;
        let group = cfg.group_size();
        let scale = 1.0 / (hd as f32).sqrt();

        let mut xs: Vec<Vec<f32>> = request
            .tokens
            .iter()
            .map(|&t| self.weights.embedding.row(t as usize).to_vec())
            .collect();
        let mut entries: Vec<Vec<KvEntry>> = vec![Vec::with_capacity(cfg.num_layers); n];
        let mut queries: Vec<Vec<Vec<f32>>> = vec![Vec::with_capacity(cfg.num_layers); n];

        for (l, lw) in self.weights.layers.iter().enumerate() {
            let cached = cache.entries(l);
            let origin = cache.keeps_origin_positions();
            let rotated_cache: Vec<Vec<f32>> = if origin {
                Vec::new()
            } else {
                cached
                    .iter()
                    .enumerate()
                    .map(|(i, e)| self.rotated(&e.key, cache.key_position(l, i)))
                    .collect()
            };
            let cache_key = |i: usize| -> &[f32] {
                if origin {
                    &cached[i].key_at_origin
                } else {
                    &rotated_cache[i]
                }
            };

            let mut qs = Vec::with_capacity(n);
            let mut new_keys = Vec::with_capacity(n);
            let mut new_values = Vec::with_capacity(n);
            for t in 0..n {
                let normed = rms_norm(&xs[t], &lw.attn_norm);
                let q = lw.wq.matvec(&normed);
                let k = lw.wk.matvec(&normed);
                let v = lw.wv.matvec(&normed);
                let pos = cache.query_position(request.positions[t]);
                queries[t].push(q.clone());
                qs.push(self.rotated(&q, pos));
                new_keys.push(self.rotated(&k, pos));
                entries[t].push(KvEntry {
                    key_at_origin: self.rotated(&k, request.positions[t]),
                    key: k,
                    value: v.clone(),
                    origin_pos: request.positions[t],
                });
                new_values.push(v);
            }

            // Rows share every cached key and value, so the cache is walked
            // once per head with all rows inside. Each row still accumulates
            // in cache-then-visible order.
            let visible: Vec<Vec<usize>> = (0..n)
                .map(|t| (0..n).filter(|&j| request.visible(t, j)).collect())
                .collect();
            let mut attn = vec![vec![0.0f32; cfg.hidden_dim]; n];
            let mut scores = vec![Vec::<f32>::new(); n];
            for h in 0..heads {
                let kvh = h / group;
                let qh = h * hd..(h + 1) * hd;
                let ks = kvh * hd..(kvh + 1) * hd;
                for (t, s) in scores.iter_mut().enumerate() {
                    s.clear();
                    s.reserve(cached.len() + visible[t].len());
                }
                for i in 0..cached.len() {
                    let key = &cache_key(i)[ks.clone()];
                    for t in 0..n {
                        scores[t].push(dot(&qs[t][qh.clone()], key) * scale);
                    }
                }
                for t in 0..n {
                    let s = &mut scores[t];
                    for &j in &visible[t] {
                        s.push(dot(&qs[t][qh.clone()], &new_keys[j][ks.clone()]) * scale);
                    }
                    let max = s.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut denom = 0.0f32;
                    for x in s.iter_mut() {
                        *x = (*x - max).exp();
                        denom += *x;
                    }
                    for x in s.iter_mut() {
                        *x /= denom;
                    }
                }
                for (i, e) in cached.iter().enumerate() {
                    let value = &e.value[ks.clone()];
                    for t in 0..n {
                        axpy(&mut attn[t][qh.clone()], scores[t][i], value);
                    }
                }
                for t in 0..n {
                    let out = &mut attn[t][qh.clone()];
                    for (vi, &j) in visible[t].iter().enumerate() {
                        axpy(
                            out,
                            scores[t][cached.len() + vi],
                            &new_values[j][ks.clone()],
                        );
                    }
                }
            }

            for t in 0..n {
                let proj = lw.wo.matvec(&attn[t]);
                for (x, p) in xs[t].iter_mut().zip(proj) {
                    *x += p;
                }
                let normed = rms_norm(&xs[t], &lw.mlp_norm);
                let up: Vec<f32> = lw.w_up.matvec(&normed).into_iter().map(silu).collect();
                let down = lw.w_down.matvec(&up);
                for (x, d) in xs[t].iter_mut().zip(down) {
                    *x += d;
                }
            }
        }

        let mut bundles = Vec::with_capacity(n);
        let mut hidden = Vec::with_capacity(n);
        for x in &xs {
            let h0 = HiddenState::new(rms_norm(x, &self.weights.final_norm))?;
            let bundle = if request.draft_heads {
                draft_heads(
                    &h0,
                    DraftHeads {
                        heads: &self.weights.draft_heads,
                        lm_head: &self.weights.embedding,
                    },
                )?
            } else {
                LogitBundle::new(vec![self.lm_head(&h0)])
            };
            bundles.push(bundle);
            hidden.push(h0);
        }
        Ok(ForwardOutput {
            bundles,
            hidden,
            entries,
            queries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvcache::FullCache;
    use crate::model::AttentionMask;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            hidden_dim: 16,
            num_heads: 4,
            num_kv_heads: 2,
            max_positions: 64,
            init_seed: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let a = TinyTransformer::new(small()).unwrap();
        let b = TinyTransformer::new(small()).unwrap();
        let req = ForwardRequest::sequential(vec![1, 5, 9, 2], 0).with_draft_heads();
        let empty = CacheView::empty(2);
        let oa = a.forward(&req, &empty).unwrap();
        let ob = b.forward(&req, &empty).unwrap();
        assert_eq!(oa.bundles, ob.bundles);
        assert_eq!(oa.bundles[0].len(), 4);
    }

    #[test]
    fn position_overflow_is_rejected() {
        let m = TinyTransformer::new(small()).unwrap();
        let req = ForwardRequest::sequential(vec![1], 64);
        assert!(matches!(
            m.forward(&req, &CacheView::empty(2)),
            Err(Error::PositionOverflow { pos: 64, max: 64 })
        ));
    }

    #[test]
    fn mask_shape_is_checked() {
        let m = TinyTransformer::new(small()).unwrap();
        let mut req = ForwardRequest::sequential(vec![1, 2], 0);
        req.mask = Some(AttentionMask::causal(3));
        assert!(matches!(
            m.forward(&req, &CacheView::empty(2)),
            Err(Error::MaskShapeMismatch { .. })
        ));
    }

    #[test]
    fn cached_decode_is_bit_identical_to_batch() {
        let m = TinyTransformer::new(small()).unwrap();
        let tokens = vec![3, 1, 4, 1, 5, 9];
        let batch = m
            .forward(
                &ForwardRequest::sequential(tokens.clone(), 0),
                &CacheView::empty(2),
            )
            .unwrap();
        let mut cache = FullCache::new(2);
        for (p, &t) in tokens.iter().enumerate() {
            let out = m
                .forward(&ForwardRequest::sequential(vec![t], p), &cache.view())
                .unwrap();
            assert_eq!(out.bundles[0], batch.bundles[p]);
            for e in out.entries {
                cache.push(e).unwrap();
            }
        }
    }
}
