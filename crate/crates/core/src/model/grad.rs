//! Masked next-token cross-entropy and its gradient over a batch of rows.
//!
//! Rows are processed in fixed chunks of [`ROWS_PER_CHUNK`] on the rayon pool;
//! chunk results are reduced in row order, so results do not depend on the
//! number of threads.

use rayon::prelude::*;

use super::forward::{backward, forward_trace};
use super::params::{ParameterSet, Scalar};
use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

pub const ROWS_PER_CHUNK: usize = 4;

/// One unpadded training sequence. `mask[t]` marks `ids[t]` as a target.
#[derive(Debug, Clone, Copy)]
pub struct Row<'a, T> {
    pub ids: &'a [TokenId],
    pub mask: &'a [bool],
    pub feature: Option<&'a [T]>,
}

impl<T> Row<'_, T> {
    fn n_targets(&self) -> usize {
        self.mask.iter().skip(1).filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    /// Mean negative log-likelihood over all targets in the batch.
    pub loss: f64,
    pub n_targets: usize,
    pub grads: ParameterSet<T>,
}

fn total_targets<T>(rows: &[Row<'_, T>]) -> Result<usize> {
    for (i, r) in rows.iter().enumerate() {
        if r.ids.len() != r.mask.len() {
            return Err(Error::InvalidArgument(format!(
                "row {i}: {} ids but {} mask entries",
                r.ids.len(),
                r.mask.len()
            )));
        }
    }
    let n: usize = rows.iter().map(Row::n_targets).sum();
    if n == 0 {
        return Err(Error::InvalidArgument("batch has no target positions".into()));
    }
    Ok(n)
}

// Returns the summed NLL of the row; accumulates `weight`-scaled gradients.
fn row_pass<T: Scalar>(
    p: &ParameterSet<T>,
    row: &Row<'_, T>,
    weight: T,
    grads: Option<&mut ParameterSet<T>>,
) -> Result<f64> {
    let trace = forward_trace(p, row.ids, row.feature)?;
    let v = p.config.vocab_size;
    let n = row.ids.len();
    let mut nll = 0.0;
    let mut dlogits = grads.is_some().then(|| vec![T::zero(); n * v]);
    for t in 1..n {
        if !row.mask[t] {
            continue;
        }
        let target = row.ids[t] as usize;
        let logits = &trace.logits[(t - 1) * v..t * v];
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for &z in logits {
            sum += (z - max).exp();
        }
        nll -= (logits[target] - max).f64() - sum.f64().ln();
        if let Some(dl) = dlogits.as_mut() {
            let drow = &mut dl[(t - 1) * v..t * v];
            for (o, &z) in drow.iter_mut().zip(logits) {
                *o = weight * (z - max).exp() / sum;
            }
            drow[target] -= weight;
        }
    }
    if let (Some(g), Some(dl)) = (grads, dlogits) {
        backward(p, &trace, &dl, g);
    }
    Ok(nll)
}

pub fn loss_and_grad<T: Scalar>(p: &ParameterSet<T>, rows: &[Row<'_, T>]) -> Result<LossGrad<T>> {
    let n_targets = total_targets(rows)?;
    let weight = T::of(1.0 / n_targets as f64);
    let parts: Vec<Result<(f64, ParameterSet<T>)>> = rows
        .par_chunks(ROWS_PER_CHUNK)
        .map(|chunk| {
            let mut g = p.zeros_like();
            let mut nll = 0.0;
            for row in chunk {
                nll += row_pass(p, row, weight, Some(&mut g))?;
            }
            Ok((nll, g))
        })
        .collect();
    let mut grads = p.zeros_like();
    let mut nll = 0.0;
    for part in parts {
        let (l, g) = part?;
        nll += l;
        grads.add_scaled(&g, T::one());
    }
    Ok(LossGrad {
        loss: nll / n_targets as f64,
        n_targets,
        grads,
    })
}

/// Mean masked NLL without gradients.
pub fn loss_only<T: Scalar>(p: &ParameterSet<T>, rows: &[Row<'_, T>]) -> Result<f64> {
    let n_targets = total_targets(rows)?;
    let parts: Vec<Result<f64>> = rows
        .par_chunks(ROWS_PER_CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|row| row_pass(p, row, T::zero(), None))
                .sum::<Result<f64>>()
        })
        .collect();
    let mut nll = 0.0;
    for part in parts {
        nll += part?;
    }
    Ok(nll / n_targets as f64)
}
