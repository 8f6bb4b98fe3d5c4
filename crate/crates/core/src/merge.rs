//! Weighted linear interpolation of two checkpoints that share architecture,
//! initialization and tokenizer.
//!
//! Every element is `alpha·llm + (1 − alpha)·vlm`, accumulated in `f64`. The
//! value is evaluated as `y + w·(x − y)`, where `x` is the parent with the
//! smaller weight `w ≤ ½` and the two weights are formed so they sum to one
//! exactly. This makes the endpoints, idempotence on identical parents and the
//! swap symmetry `merge(a, b, α) = merge(b, a, 1 − α)` hold bit-exactly, and
//! keeps every result inside the interval spanned by its two inputs.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::{
    load_checkpoint, read_manifest, write_checkpoint, CheckpointMeta, MergeInfo, Modality, ParentRef,
};
use crate::error::{Error, Result};
use crate::model::{ParameterSet, Scalar, Tensor};

/// Checks that two parameter sets have identical tensor names and shapes.
pub fn validate_shapes<T: Scalar>(a: &ParameterSet<T>, b: &ParameterSet<T>) -> Result<()> {
    if let Some(name) = a.names().find(|n| b.get(n).is_none()) {
        return Err(Error::Incompatible(format!("tensor `{name}` missing from the second model")));
    }
    if let Some(name) = b.names().find(|n| a.get(n).is_none()) {
        return Err(Error::Incompatible(format!("tensor `{name}` missing from the first model")));
    }
    for (name, ta) in a.iter() {
        let tb = b.get(name).expect("name sets checked");
        if ta.shape != tb.shape {
            return Err(Error::Incompatible(format!(
                "tensor `{name}` has shape {:?} vs {:?}",
                ta.shape, tb.shape
            )));
        }
    }
    Ok(())
}

/// Checks tensor names, shapes and tokenizer hashes.
pub fn validate_compatibility<T: Scalar>(
    a: (&ParameterSet<T>, &CheckpointMeta),
    b: (&ParameterSet<T>, &CheckpointMeta),
) -> Result<()> {
    validate_shapes(a.0, b.0)?;
    if a.1.tokenizer_hash != b.1.tokenizer_hash {
        return Err(Error::Incompatible(format!(
            "tokenizer_hash {} vs {}",
            a.1.tokenizer_hash, b.1.tokenizer_hash
        )));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Weights `(w_a, w_b)` with `w_a + w_b == 1` exactly; the smaller one is
/// derived from the larger, so swapping the parents and passing `1 − α`
/// reproduces the same pair.
fn weights(alpha: f64) -> (f64, f64) {
    if alpha >= 0.5 {
        (alpha, 1.0 - alpha)
    } else {
        let wb = 1.0 - alpha;
        (1.0 - wb, wb)
    }
}

#[inline]
fn lerp(a: f64, b: f64, wa: f64, wb: f64) -> f64 {
    if wa == wb {
        0.5 * a + 0.5 * b
    } else if wa < wb {
        b + wa * (a - b)
    } else {
        a + wb * (b - a)
    }
}

fn merge_tensor<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, wa: f64, wb: f64) -> Tensor<T> {
    Tensor {
        shape: a.shape.clone(),
        data: a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| T::of(lerp(x.f64(), y.f64(), wa, wb)))
            .collect(),
    }
}

/// Elementwise `alpha·llm + (1 − alpha)·vlm`; the config is taken from `llm`.
pub fn merge_params<T: Scalar>(
    llm: &ParameterSet<T>,
    vlm: &ParameterSet<T>,
    alpha: f64,
) -> Result<ParameterSet<T>> {
    check_alpha(alpha)?;
    validate_shapes(llm, vlm)?;
    let (wa, wb) = weights(alpha);
    let pairs: Vec<(&str, &Tensor<T>)> = llm.iter().collect();
    let merged: Vec<(String, Tensor<T>)> = pairs
        .par_iter()
        .map(|&(name, ta)| {
            let tb = vlm.get(name).expect("validated");
            (name.to_string(), merge_tensor(ta, tb, wa, wb))
        })
        .collect();
    let out = ParameterSet::from_tensors(llm.config.clone(), merged)?;
    if let Some(name) = out.first_non_finite() {
        return Err(Error::NonFinite(format!("merged tensor `{name}`")));
    }
    Ok(out)
}

/// Merges two checkpoints and produces merged metadata.
pub fn merge<T: Scalar>(
    llm: (&ParameterSet<T>, &CheckpointMeta, ParentRef),
    vlm: (&ParameterSet<T>, &CheckpointMeta, ParentRef),
    alpha: f64,
) -> Result<(ParameterSet<T>, CheckpointMeta)> {
    check_alpha(alpha)?;
    validate_compatibility((llm.0, llm.1), (vlm.0, vlm.1))?;
    let params = merge_params(llm.0, vlm.0, alpha)?;
    let meta = CheckpointMeta {
        words_seen: vlm.1.words_seen,
        modality: Modality::Merged,
        seed: llm.1.seed,
        tokenizer_hash: llm.1.tokenizer_hash.clone(),
        merge_info: Some(MergeInfo {
            alpha,
            parent_llm: llm.2,
            parent_vlm: vlm.2,
        }),
    };
    Ok((params, meta))
}

/// Output directory name for one merge weight.
pub fn merged_dir_name(alpha: f64) -> String {
    format!("merged_a{alpha}")
}

fn parent_ref(path: &Path) -> Result<ParentRef> {
    Ok(ParentRef {
        path: path.display().to_string(),
        weights_sha256: read_manifest(path)?.weights_sha256,
    })
}

/// Writes one merged checkpoint per alpha under `out_dir`. On failure, any
/// outputs written by this call are removed.
pub fn merge_sweep(
    alphas: &[f64],
    llm_path: &Path,
    vlm_path: &Path,
    out_dir: &Path,
    overwrite: bool,
) -> Result<Vec<PathBuf>> {
    if alphas.is_empty() {
        return Err(Error::InvalidArgument("no merge weights given".into()));
    }
    let mut names = Vec::with_capacity(alphas.len());
    for &a in alphas {
        check_alpha(a)?;
        let name = merged_dir_name(a);
        if names.contains(&name) {
            return Err(Error::InvalidArgument(format!("duplicate output name `{name}`")));
        }
        names.push(name);
    }
    let (llm, llm_meta) = load_checkpoint(llm_path)?;
    let (vlm, vlm_meta) = load_checkpoint(vlm_path)?;
    validate_compatibility((&llm, &llm_meta), (&vlm, &vlm_meta))?;
    let (llm_ref, vlm_ref) = (parent_ref(llm_path)?, parent_ref(vlm_path)?);
    if !overwrite {
        if let Some(existing) = names.iter().map(|n| out_dir.join(n)).find(|p| p.exists()) {
            return Err(Error::AlreadyExists(existing));
        }
    }

    let mut written = Vec::new();
    for (&alpha, name) in alphas.iter().zip(&names) {
        let dir = out_dir.join(name);
        let result = merge(
            (&llm, &llm_meta, llm_ref.clone()),
            (&vlm, &vlm_meta, vlm_ref.clone()),
            alpha,
        )
        .and_then(|(p, m)| write_checkpoint(&p, &m, None, &dir, overwrite));
        if let Err(e) = result {
            for d in &written {
                let _ = fs::remove_dir_all(d);
            }
            return Err(e);
        }
        written.push(dir);
    }
    Ok(written)
}
