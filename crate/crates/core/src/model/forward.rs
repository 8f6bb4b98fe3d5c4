//! Forward pass with an activation trace, and the matching reverse pass.
//!
//! All matrices are row-major; activations are `[positions, width]`.

use super::config::*;
use super::params::{ParameterSet, Scalar};
use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

// out[m×n] = a[m×k] · b[k×n]
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// out[m×k] = a[m×n] · b[k×n]ᵀ
fn matmul_bt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + j] = s;
        }
    }
    out
}

// out[k×n] += a[m×k]ᵀ · b[m×n]
fn acc_at_b<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Exact (erf-based) GeLU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

fn rms_norm<T: Scalar>(x: &[T], g: &[T], d: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); rows];
    let eps = T::of(eps);
    let dn = T::of(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = xr.iter().fold(T::zero(), |s, &v| s + v * v) / dn;
        let ri = T::one() / (ms + eps).sqrt();
        inv[r] = ri;
        for ((o, &v), &gv) in y[r * d..(r + 1) * d].iter_mut().zip(xr).zip(g) {
            *o = v * ri * gv;
        }
    }
    (y, inv)
}

fn rms_norm_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    inv: &[T],
    g: &[T],
    d: usize,
    dg: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); x.len()];
    let dn = T::of(d as f64);
    for (r, &ri) in inv.iter().enumerate() {
        let span = r * d..(r + 1) * d;
        let (dyr, xr) = (&dy[span.clone()], &x[span.clone()]);
        let mut dot = T::zero();
        for i in 0..d {
            let xhat = xr[i] * ri;
            dg[i] += dyr[i] * xhat;
            dot += dyr[i] * g[i] * xhat;
        }
        dot /= dn;
        for (i, o) in dx[span].iter_mut().enumerate() {
            let xhat = xr[i] * ri;
            *o = ri * (dyr[i] * g[i] - xhat * dot);
        }
    }
    dx
}

/// Rotary tables: `[positions, head_dim / 2]` cosines and sines.
fn rope_tables<T: Scalar>(n: usize, head_dim: usize, theta: f64) -> (Vec<T>, Vec<T>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(n * half);
    let mut sin = Vec::with_capacity(n * half);
    for pos in 0..n {
        for i in 0..half {
            let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            cos.push(T::of(angle.cos()));
            sin.push(T::of(angle.sin()));
        }
    }
    (cos, sin)
}

/// Rotates each head's halves in place; `inverse` applies the transpose rotation.
fn apply_rope<T: Scalar>(
    x: &mut [T],
    n: usize,
    d: usize,
    head_dim: usize,
    cos: &[T],
    sin: &[T],
    inverse: bool,
) {
    let half = head_dim / 2;
    for t in 0..n {
        for h in 0..d / head_dim {
            let base = t * d + h * head_dim;
            for i in 0..half {
                let (c, mut s) = (cos[t * half + i], sin[t * half + i]);
                if inverse {
                    s = -s;
                }
                let (a, b) = (x[base + i], x[base + i + half]);
                x[base + i] = a * c - b * s;
                x[base + i + half] = a * s + b * c;
            }
        }
    }
}

/// Projector nonlinearity. `Identity` exists for linearity tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

struct ProjTrace<T> {
    feature: Vec<T>,
    z1: Vec<T>,
    g1: Vec<T>,
}

fn projector<T: Scalar>(
    p: &ParameterSet<T>,
    feature: &[T],
    act: Activation,
) -> Result<(Vec<T>, ProjTrace<T>)> {
    let cfg = &p.config;
    if feature.len() != cfg.feat_dim {
        return Err(Error::InvalidArgument(format!(
            "image feature has length {}, expected {}",
            feature.len(),
            cfg.feat_dim
        )));
    }
    if feature.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("image feature".into()));
    }
    let d = cfg.d_model;
    let mut z1 = matmul(feature, p.at(PROJ_W1), 1, cfg.feat_dim, d);
    add_into(&mut z1, p.at(PROJ_B1));
    let g1: Vec<T> = match act {
        Activation::Gelu => z1.iter().map(|&z| gelu(z)).collect(),
        Activation::Identity => z1.clone(),
    };
    let mut out = matmul(&g1, p.at(PROJ_W2), 1, d, d);
    add_into(&mut out, p.at(PROJ_B2));
    Ok((
        out,
        ProjTrace {
            feature: feature.to_vec(),
            z1,
            g1,
        },
    ))
}

/// Maps a pooled image feature into the embedding space:
/// `W2ᵀ·gelu(W1ᵀ·feature + b1) + b2`.
pub fn project_image<T: Scalar>(p: &ParameterSet<T>, feature: &[T]) -> Result<Vec<T>> {
    project_image_with(p, feature, Activation::Gelu)
}

#[doc(hidden)]
pub fn project_image_with<T: Scalar>(
    p: &ParameterSet<T>,
    feature: &[T],
    act: Activation,
) -> Result<Vec<T>> {
    projector(p, feature, act).map(|(out, _)| out)
}

struct LayerTrace<T> {
    x: Vec<T>,
    inv1: Vec<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<Vec<T>>,
    o: Vec<T>,
    x_mid: Vec<T>,
    inv2: Vec<T>,
    h2: Vec<T>,
    a: Vec<T>,
    b: Vec<T>,
    u: Vec<T>,
}

pub(crate) struct Trace<T> {
    ids: Vec<TokenId>,
    img_pos: Option<usize>,
    proj: Option<ProjTrace<T>>,
    layers: Vec<LayerTrace<T>>,
    x_final: Vec<T>,
    inv_final: Vec<T>,
    h_final: Vec<T>,
    pub(crate) logits: Vec<T>,
}

/// Next-token logits, `[positions, vocab]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub positions: usize,
    pub vocab: usize,
    pub data: Vec<T>,
}

impl<T> Logits<T> {
    pub fn row(&self, t: usize) -> &[T] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }
}

fn validate_input<T: Scalar>(
    p: &ParameterSet<T>,
    ids: &[TokenId],
    feature: Option<&[T]>,
) -> Result<Option<usize>> {
    let cfg = &p.config;
    if ids.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if ids.len() > cfg.max_len {
        return Err(Error::InvalidArgument(format!(
            "sequence of {} tokens exceeds max_len {}",
            ids.len(),
            cfg.max_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let mut img = ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id == cfg.img_token_id)
        .map(|(i, _)| i);
    let img_pos = img.next();
    if img.next().is_some() {
        return Err(Error::InvalidArgument(
            "sequence contains more than one image token".into(),
        ));
    }
    if img_pos.is_some() && feature.is_none() {
        return Err(Error::InvalidArgument(
            "sequence has an image token but no image feature was given".into(),
        ));
    }
    Ok(img_pos)
}

pub(crate) fn forward_trace<T: Scalar>(
    p: &ParameterSet<T>,
    ids: &[TokenId],
    feature: Option<&[T]>,
) -> Result<Trace<T>> {
    let img_pos = validate_input(p, ids, feature)?;
    let cfg = &p.config;
    let (n, d, ff, v) = (ids.len(), cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let hd = cfg.head_dim();
    let n_heads = cfg.n_heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());

    let embed = p.at(EMBED);
    let mut x = vec![T::zero(); n * d];
    for (t, &id) in ids.iter().enumerate() {
        let id = id as usize;
        x[t * d..(t + 1) * d].copy_from_slice(&embed[id * d..(id + 1) * d]);
    }
    let mut proj = None;
    if let (Some(pos), Some(f)) = (img_pos, feature) {
        let (out, tr) = projector(p, f, Activation::Gelu)?;
        x[pos * d..(pos + 1) * d].copy_from_slice(&out);
        proj = Some(tr);
    }

    let (cos, sin) = rope_tables::<T>(n, hd, cfg.rope_theta);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let w = |slot| p.at(layer_index(l, slot));
        let (h1, inv1) = rms_norm(&x, w(ATTN_NORM), d, cfg.norm_eps);
        let mut q = matmul(&h1, w(WQ), n, d, d);
        let mut k = matmul(&h1, w(WK), n, d, d);
        let vv = matmul(&h1, w(WV), n, d, d);
        apply_rope(&mut q, n, d, hd, &cos, &sin, false);
        apply_rope(&mut k, n, d, hd, &cos, &sin, false);

        let mut o = vec![T::zero(); n * d];
        let mut probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let off = h * hd;
            let mut pm = vec![T::zero(); n * n];
            for t in 0..n {
                let qt = &q[t * d + off..t * d + off + hd];
                let row = &mut pm[t * n..t * n + t + 1];
                let mut max = T::neg_infinity();
                for (u, s) in row.iter_mut().enumerate() {
                    let ku = &k[u * d + off..u * d + off + hd];
                    let mut dot = T::zero();
                    for (&a, &b) in qt.iter().zip(ku) {
                        dot += a * b;
                    }
                    *s = dot * scale;
                    max = max.max(*s);
                }
                let mut sum = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s /= sum;
                }
                let ot = &mut o[t * d + off..t * d + off + hd];
                for (u, &pw) in row.iter().enumerate() {
                    let vu = &vv[u * d + off..u * d + off + hd];
                    for (oi, &vi) in ot.iter_mut().zip(vu) {
                        *oi += pw * vi;
                    }
                }
            }
            probs.push(pm);
        }

        let mut x_mid = matmul(&o, w(WO), n, d, d);
        add_into(&mut x_mid, &x);
        let (h2, inv2) = rms_norm(&x_mid, w(FFN_NORM), d, cfg.norm_eps);
        let a = matmul(&h2, w(W_GATE), n, d, ff);
        let b = matmul(&h2, w(W_UP), n, d, ff);
        let u: Vec<T> = a.iter().zip(&b).map(|(&ai, &bi)| silu(ai) * bi).collect();
        let mut x_out = matmul(&u, w(W_DOWN), n, ff, d);
        add_into(&mut x_out, &x_mid);

        layers.push(LayerTrace {
            x: std::mem::replace(&mut x, x_out),
            inv1,
            h1,
            q,
            k,
            v: vv,
            probs,
            o,
            x_mid,
            inv2,
            h2,
            a,
            b,
            u,
        });
    }

    let (h_final, inv_final) = rms_norm(&x, p.at(final_norm_index(cfg)), d, cfg.norm_eps);
    let logits = matmul(&h_final, p.at(lm_head_index(cfg)), n, d, v);
    Ok(Trace {
        ids: ids.to_vec(),
        img_pos,
        proj,
        layers,
        x_final: x,
        inv_final,
        h_final,
        logits,
    })
}

/// Logits for every position; row `t` predicts token `t + 1`.
pub fn forward<T: Scalar>(
    p: &ParameterSet<T>,
    ids: &[TokenId],
    feature: Option<&[T]>,
) -> Result<Logits<T>> {
    let trace = forward_trace(p, ids, feature)?;
    Ok(Logits {
        positions: ids.len(),
        vocab: p.config.vocab_size,
        data: trace.logits,
    })
}

/// Accumulates into `grads` the gradient of `Σ dlogits · logits` through the trace.
pub(crate) fn backward<T: Scalar>(
    p: &ParameterSet<T>,
    trace: &Trace<T>,
    dlogits: &[T],
    grads: &mut ParameterSet<T>,
) {
    let cfg = &p.config;
    let (n, d, ff, v) = (trace.ids.len(), cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let hd = cfg.head_dim();
    let scale = T::of(1.0 / (hd as f64).sqrt());

    let head = lm_head_index(cfg);
    acc_at_b(&trace.h_final, dlogits, n, d, v, grads.at_mut(head));
    let dh = matmul_bt(dlogits, p.at(head), n, v, d);
    let fnorm = final_norm_index(cfg);
    let mut dx = rms_norm_backward(
        &dh,
        &trace.x_final,
        &trace.inv_final,
        p.at(fnorm),
        d,
        grads.at_mut(fnorm),
    );

    let (cos, sin) = rope_tables::<T>(n, hd, cfg.rope_theta);
    for (l, lt) in trace.layers.iter().enumerate().rev() {
        let idx = |slot| layer_index(l, slot);

        // Feed-forward block.
        acc_at_b(&lt.u, &dx, n, ff, d, grads.at_mut(idx(W_DOWN)));
        let du = matmul_bt(&dx, p.at(idx(W_DOWN)), n, d, ff);
        let mut da = vec![T::zero(); n * ff];
        let mut db = vec![T::zero(); n * ff];
        for i in 0..n * ff {
            da[i] = du[i] * lt.b[i] * silu_grad(lt.a[i]);
            db[i] = du[i] * silu(lt.a[i]);
        }
        acc_at_b(&lt.h2, &da, n, d, ff, grads.at_mut(idx(W_GATE)));
        acc_at_b(&lt.h2, &db, n, d, ff, grads.at_mut(idx(W_UP)));
        let mut dh2 = matmul_bt(&da, p.at(idx(W_GATE)), n, ff, d);
        add_into(&mut dh2, &matmul_bt(&db, p.at(idx(W_UP)), n, ff, d));
        let dmid = rms_norm_backward(
            &dh2,
            &lt.x_mid,
            &lt.inv2,
            p.at(idx(FFN_NORM)),
            d,
            grads.at_mut(idx(FFN_NORM)),
        );
        add_into(&mut dx, &dmid);

        // Attention block.
        acc_at_b(&lt.o, &dx, n, d, d, grads.at_mut(idx(WO)));
        let d_o = matmul_bt(&dx, p.at(idx(WO)), n, d, d);
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        for (h, pm) in lt.probs.iter().enumerate() {
            let off = h * hd;
            for t in 0..n {
                let dot_t = &d_o[t * d + off..t * d + off + hd];
                let prow = &pm[t * n..t * n + t + 1];
                let mut dp = vec![T::zero(); t + 1];
                for (u, dpu) in dp.iter_mut().enumerate() {
                    let vu = &lt.v[u * d + off..u * d + off + hd];
                    let mut s = T::zero();
                    for (&a, &b) in dot_t.iter().zip(vu) {
                        s += a * b;
                    }
                    *dpu = s;
                    let dvu = &mut dv[u * d + off..u * d + off + hd];
                    for (o, &g) in dvu.iter_mut().zip(dot_t) {
                        *o += prow[u] * g;
                    }
                }
                let mut inner = T::zero();
                for (&pw, &g) in prow.iter().zip(&dp) {
                    inner += pw * g;
                }
                for u in 0..=t {
                    let ds = prow[u] * (dp[u] - inner) * scale;
                    for i in 0..hd {
                        dq[t * d + off + i] += ds * lt.k[u * d + off + i];
                        dk[u * d + off + i] += ds * lt.q[t * d + off + i];
                    }
                }
            }
        }
        apply_rope(&mut dq, n, d, hd, &cos, &sin, true);
        apply_rope(&mut dk, n, d, hd, &cos, &sin, true);
        acc_at_b(&lt.h1, &dq, n, d, d, grads.at_mut(idx(WQ)));
        acc_at_b(&lt.h1, &dk, n, d, d, grads.at_mut(idx(WK)));
        acc_at_b(&lt.h1, &dv, n, d, d, grads.at_mut(idx(WV)));
        let mut dh1 = matmul_bt(&dq, p.at(idx(WQ)), n, d, d);
        add_into(&mut dh1, &matmul_bt(&dk, p.at(idx(WK)), n, d, d));
        add_into(&mut dh1, &matmul_bt(&dv, p.at(idx(WV)), n, d, d));
        let dres = rms_norm_backward(
            &dh1,
            &lt.x,
            &lt.inv1,
            p.at(idx(ATTN_NORM)),
            d,
            grads.at_mut(idx(ATTN_NORM)),
        );
        add_into(&mut dx, &dres);
    }

    for (t, &id) in trace.ids.iter().enumerate() {
        if Some(t) == trace.img_pos {
            continue;
        }
        let id = id as usize;
        add_into(
            &mut grads.at_mut(EMBED)[id * d..(id + 1) * d],
            &dx[t * d..(t + 1) * d],
        );
    }
    if let (Some(pos), Some(pt)) = (trace.img_pos, &trace.proj) {
        let dp = &dx[pos * d..(pos + 1) * d];
        add_into(grads.at_mut(PROJ_B2), dp);
        acc_at_b(&pt.g1, dp, 1, d, d, grads.at_mut(PROJ_W2));
        let dg1 = matmul_bt(dp, p.at(PROJ_W2), 1, d, d);
        let dz1: Vec<T> = dg1
            .iter()
            .zip(&pt.z1)
            .map(|(&g, &z)| g * gelu_grad(z))
            .collect();
        add_into(grads.at_mut(PROJ_B1), &dz1);
        acc_at_b(&pt.feature, &dz1, 1, cfg.feat_dim, d, grads.at_mut(PROJ_W1));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        // Φ(1) = 0.841344746068543
        assert!((gelu(1.0f64) - 0.841344746068543).abs() < 1e-12);
        assert!((gelu(-1.0f64) + 0.158655253931457).abs() < 1e-12);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.0, 0.7, 3.0f64] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn rope_inverse_round_trips() {
        let (cos, sin) = rope_tables::<f64>(5, 4, 10_000.0);
        let orig: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut x = orig.clone();
        apply_rope(&mut x, 5, 8, 4, &cos, &sin, false);
        assert_ne!(x, orig);
        apply_rope(&mut x, 5, 8, 4, &cos, &sin, true);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn matmul_helpers_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|i| (i as f64) - 4.0).collect(); // 3×4
        let c = matmul(&a, &b, 2, 3, 4);
        assert_eq!(c[0], 0.0 * -4.0 + 1.0 * 0.0 + 2.0 * 4.0);
        // bᵀ stored as 4×3
        let bt: Vec<f64> = (0..12).map(|i| b[(i % 3) * 4 + i / 3]).collect();
        assert_eq!(matmul_bt(&a, &bt, 2, 3, 4), c);
        let mut acc = vec![0.0; 12];
        // aᵀ·c where a is 2×3 and c 2×4 -> 3×4
        acc_at_b(&a, &c, 2, 3, 4, &mut acc);
        assert_eq!(acc[0], a[0] * c[0] + a[3] * c[4]);
    }
}
