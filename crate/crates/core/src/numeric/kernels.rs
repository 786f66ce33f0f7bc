//! Plain-slice kernels shared by the recorded graph operations and the
//! unrecorded helpers used by diagnostics.

/// Norm below which a vector is treated as zero by [`cosine`].
pub const COSINE_EPS: f64 = 1e-12;

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    softmax_into(v, &mut out);
    out
}

pub(crate) fn softmax_into(v: &[f64], out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    max + total.ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

/// Cosine similarity with the zero-vector guard: if either norm is below
/// [`COSINE_EPS`] the result is 0, otherwise the denominator is
/// `max(|u||v|, COSINE_EPS)` and the result is clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    cosine_parts(u, v).0
}

/// Returns `(cos, unclamped cos, |u|, |v|, denominator)`; a zero denominator
/// flags the guarded case.
pub(crate) fn cosine_parts(u: &[f64], v: &[f64]) -> (f64, f64, f64, f64, f64) {
    let nu = super::tensor::dot(u, u).sqrt();
    let nv = super::tensor::dot(v, v).sqrt();
    if nu < COSINE_EPS || nv < COSINE_EPS {
        return (0.0, 0.0, nu, nv, 0.0);
    }
    let den = (nu * nv).max(COSINE_EPS);
    let raw = super::tensor::dot(u, v) / den;
    (raw.clamp(-1.0, 1.0), raw, nu, nv, den)
}

/// Accumulates `g · ∂cos/∂u` and `g · ∂cos/∂v` into `du`, `dv`.
pub(crate) fn cosine_backward(u: &[f64], v: &[f64], g: f64, du: &mut [f64], dv: &mut [f64]) {
    let (_, raw, nu, nv, den) = cosine_parts(u, v);
    if den == 0.0 {
        return;
    }
    if nu * nv >= COSINE_EPS {
        let cu = raw / (nu * nu);
        let cv = raw / (nv * nv);
        for i in 0..u.len() {
            du[i] += g * (v[i] / den - cu * u[i]);
            dv[i] += g * (u[i] / den - cv * v[i]);
        }
    } else {
        for i in 0..u.len() {
            du[i] += g * v[i] / den;
            dv[i] += g * u[i] / den;
        }
    }
}

/// Indices of the `k` largest keys, ordered by descending key; ties go to the
/// lower index.
pub fn top_k(keys: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0; 4]), vec![0.25; 4]);
        let p = softmax(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        let c = softmax(&[7.5; 5]);
        assert!(c.iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_shift_invariance_is_bitwise() {
        // Exactly representable shift: max-subtraction sees identical offsets.
        let v = [0.25, -1.5, 2.5, 0.0];
        let shifted: Vec<f64> = v.iter().map(|x| x + 4.0).collect();
        assert_eq!(softmax(&v), softmax(&shifted));
        let s = softmax(&[0.3, -1.2, 2.5, 0.0]);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine(&[3.0, -4.0], &[3.0, -4.0]) - 1.0).abs() < 1e-15);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn swish_examples() {
        assert_eq!(swish(0.0), 0.0);
        let expected = 1.0 / (1.0 + (-1f64).exp());
        assert!((swish(1.0) - expected).abs() < 1e-15);
        assert!((swish(1.0) - 0.7311).abs() < 1e-4);
        assert!((swish(40.0) / 40.0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn top_k_ties_go_low() {
        assert_eq!(top_k(&[1.0, 1.0, 1.0, 1.0], 2), vec![0, 1]);
        assert_eq!(top_k(&[0.1, 0.5, 0.5, 0.9], 3), vec![3, 1, 2]);
    }
}
