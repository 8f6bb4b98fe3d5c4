//! Decoder-only language model conditioned on a single pooled image token.

pub mod config;
mod forward;
mod grad;
mod params;

pub use config::{Init, ModelConfig, N_SPECIALS};
pub use forward::{forward, gelu, project_image, project_image_with, Activation, Logits};
pub use grad::{loss_and_grad, loss_only, LossGrad, Row};
pub use params::{init_model, shape_manifest, ParameterSet, Scalar, Tensor, INIT_STD};

use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

/// Log-softmax of one logit row, evaluated in f64.
pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x.f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x.f64() - lse).collect()
}

/// `log p(ids[t] | ids[..t])` for `t = 1..len`.
pub fn token_logprobs<T: Scalar>(
    p: &ParameterSet<T>,
    ids: &[TokenId],
    feature: Option<&[T]>,
) -> Result<Vec<f64>> {
    let logits = forward(p, ids, feature)?;
    Ok((1..ids.len())
        .map(|t| log_softmax(logits.row(t - 1))[ids[t] as usize])
        .collect())
}

/// Number of leading BOS/IMG tokens, which are conditioning rather than targets.
pub fn prefix_len(config: &ModelConfig, ids: &[TokenId]) -> usize {
    ids.iter()
        .take_while(|&&id| id == config.bos_token_id || id == config.img_token_id)
        .count()
}

/// Sum of log-probabilities of every token after the BOS/IMG prefix. No length normalization.
pub fn sentence_logprob<T: Scalar>(
    p: &ParameterSet<T>,
    ids: &[TokenId],
    feature: Option<&[T]>,
) -> Result<f64> {
    if ids.len() < 2 {
        return Err(Error::InvalidArgument(
            "scoring needs at least two tokens".into(),
        ));
    }
    let start = prefix_len(&p.config, ids).max(1);
    if start >= ids.len() {
        return Err(Error::InvalidArgument("no tokens to score after the prefix".into()));
    }
    let lp = token_logprobs(p, ids, feature)?;
    Ok(lp[start - 1..].iter().sum())
}
