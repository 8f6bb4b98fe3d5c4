use crate::error::{Error, Result};
use crate::model::{log_softmax, Scalar};

/// Mean over masked-in positions of `-log softmax(logits[t])[targets[t]]`.
/// `logits` is `[targets.len(), vocab]` row-major.
pub fn cross_entropy_loss<T: Scalar>(
    logits: &[T],
    vocab: usize,
    targets: &[u32],
    mask: &[bool],
) -> Result<f64> {
    if vocab == 0 || logits.len() != targets.len() * vocab || mask.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "shape mismatch: {} logits, {} targets, {} mask entries, vocab {vocab}",
            logits.len(),
            targets.len(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (t, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if target as usize >= vocab {
            return Err(Error::InvalidArgument(format!("target {target} outside vocabulary")));
        }
        total -= log_softmax(&logits[t * vocab..(t + 1) * vocab])[target as usize];
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("every position is masked out".into()));
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let v = 30_000;
        let loss = cross_entropy_loss(&vec![0.0f32; 2 * v], v, &[5, 7], &[true, true]).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-9);
        assert!((loss - 10.3090).abs() < 1e-4);
    }

    #[test]
    fn large_margin_gives_zero_loss() {
        let mut logits = vec![0.0f64; 3 * 4];
        let targets = [1u32, 3, 0];
        for (t, &y) in targets.iter().enumerate() {
            logits[t * 4 + y as usize] = 1e4;
        }
        let loss = cross_entropy_loss(&logits, 4, &targets, &[true; 3]).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn matches_hand_softmax() {
        // Row 0: [1,2,3] target 2; row 1: [0,0,1] target 0.
        let logits = [1.0, 2.0, 3.0, 0.0, 0.0, 1.0f64];
        let lse0 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        let lse1 = (2.0 + 1f64.exp()).ln();
        let expected = ((lse0 - 3.0) + (lse1 - 0.0)) / 2.0;
        let loss = cross_entropy_loss(&logits, 3, &[2, 0], &[true, true]).unwrap();
        assert!((loss - expected).abs() < 1e-9);
        // Masking the second row leaves only the first term.
        let loss = cross_entropy_loss(&logits, 3, &[2, 0], &[true, false]).unwrap();
        assert!((loss - (lse0 - 3.0)).abs() < 1e-9);
    }

    #[test]
    fn rejects_fully_masked() {
        assert!(cross_entropy_loss(&[0.0f32; 6], 3, &[0, 1], &[false, false]).is_err());
        assert!(cross_entropy_loss(&[0.0f32; 5], 3, &[0, 1], &[true, true]).is_err());
    }
}
