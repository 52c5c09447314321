use super::tensor::Matrix;
use super::{HiddenState, LogitBundle};
use crate::{Error, Result};

/// Residual draft heads `f_1 … f_γ` and the shared LM head `g`.
#[derive(Debug, Clone, Copy)]
pub struct DraftHeads<'a> {
    pub heads: &'a [Matrix],
    pub lm_head: &'a Matrix,
}

/// Chains the heads residually: `h_i = f_i(h_{i-1}) + h_{i-1}` and
/// `l_i = g(h_i)`, with `l_0 = g(h_0)`.
pub fn draft_heads(h0: &HiddenState, weights: DraftHeads<'_>) -> Result<LogitBundle> {
    let dim = h0.values().len();
    if weights.lm_head.cols() != dim {
        return Err(Error::DimensionMismatch(format!(
            "LM head expects {} inputs, hidden state has {dim}",
            weights.lm_head.cols()
        )));
    }
    for (i, f) in weights.heads.iter().enumerate() {
        if f.rows() != dim || f.cols() != dim {
            return Err(Error::DimensionMismatch(format!(
                "draft head {} is {}x{}, expected {dim}x{dim}",
                i + 1,
                f.rows(),
                f.cols()
            )));
        }
    }

    let mut logits = Vec::with_capacity(weights.heads.len() + 1);
    logits.push(weights.lm_head.matvec(h0.values()));
    let mut h = h0.values().to_vec();
    for f in weights.heads {
        let delta = f.matvec(&h);
        for (x, d) in h.iter_mut().zip(delta) {
            *x += d;
        }
        logits.push(weights.lm_head.matvec(&h));
    }
    Ok(LogitBundle::new(logits))
}
