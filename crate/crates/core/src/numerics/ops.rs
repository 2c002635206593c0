//! Forward kernels shared by the autodiff tape and by gradient-free callers.

use crate::error::{Error, Result};

use super::Tensor;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`. When `trans_a` is set, `a` is stored
/// as `k x m`; likewise for `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the debug assertions above pin every buffer to the extents the
    // strides address; matrixmultiply reads a and b and writes c within them.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::shape(
            "matmul",
            format!("expected 2-d operands, got {:?} x {:?}", a.shape(), b.shape()),
        ));
    };
    if k != k2 {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new(&[m, n], out)
}

/// Normalizes each row of a `[rows, d]` buffer to zero mean and unit
/// (population) variance. Returns the output and the per-row `1/std`.
pub(crate) fn layer_norm_rows(x: &[f32], d: usize, eps: f32) -> (Vec<f32>, Vec<f32>) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let rs = 1.0 / (var + eps).sqrt();
        for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        inv_std.push(rs);
    }
    (out, inv_std)
}

pub fn layer_norm(x: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.last_dim();
    if d == 0 || x.shape().is_empty() {
        return Err(Error::shape("layer_norm", "normalized axis has size 0"));
    }
    let (out, _) = layer_norm_rows(x.data(), d, eps);
    Tensor::new(x.shape(), out)
}

pub(crate) fn softmax_rows(x: &[f32], d: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for (orow, row) in out.chunks_mut(d).zip(x.chunks(d)) {
        softmax_into(row, orow);
    }
    out
}

fn softmax_into(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let d = x.last_dim();
    if d == 0 {
        return Err(Error::shape("softmax", "reduced axis has size 0"));
    }
    x.check_finite("softmax input")?;
    Tensor::new(x.shape(), softmax_rows(x.data(), d))
}

/// Multi-head attention `softmax(q k^T / sqrt(dh)) v` over `[heads, len, dh]` tensors.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let &[h, l, dh] = q.shape() else {
        return Err(Error::shape("attention", format!("q has shape {:?}", q.shape())));
    };
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = vec![0.0; h * l * dh];
    let mut logits = vec![0.0; l * l];
    let mut probs = vec![0.0; l * l];
    for head in 0..h {
        let base = head * l * dh;
        let qh = &q.data()[base..base + l * dh];
        let kh = &k.data()[base..base + l * dh];
        let vh = &v.data()[base..base + l * dh];
        gemm(l, dh, l, qh, false, kh, true, &mut logits, false);
        logits.iter_mut().for_each(|s| *s *= scale);
        for (orow, row) in probs.chunks_mut(l).zip(logits.chunks(l)) {
            softmax_into(row, orow);
        }
        gemm(l, l, dh, &probs, false, vh, false, &mut out[base..base + l * dh], false);
    }
    Tensor::new(&[h, l, dh], out)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let inner = GELU_C * (x + 0.044_715 * x * x * x);
    let th = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        assert_eq!(matmul(&eye, &a).unwrap().data(), a.data());
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(matmul(&a, &z).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_hand_expansion() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 2], &[5., 6., 7., 8.]);
        // 1*5+2*7, 1*6+2*8, 3*5+4*7, 3*6+4*8
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn gemm_transposes_match_naive() {
        let a: Vec<f32> = (0..6).map(|v| v as f32 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f32> = (0..12).map(|v| (v as f32).sin()).collect(); // 3x4
        let mut naive = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                for p in 0..3 {
                    naive[i * 4 + j] += a[i * 3 + p] * b[p * 4 + j];
                }
            }
        }
        // a^T stored as 3x2, b^T stored as 4x3
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for p in 0..3 {
                at[p * 2 + i] = a[i * 3 + p];
            }
        }
        let mut bt = vec![0.0; 12];
        for p in 0..3 {
            for j in 0..4 {
                bt[j * 3 + p] = b[p * 4 + j];
            }
        }
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &at, true, &bt, true, &mut c, false);
        for (x, y) in c.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let c = layer_norm(&t(&[1, 4], &[5., 5., 5., 5.]), 1e-5).unwrap();
        assert_eq!(c.data(), &[0.0; 4]);
        let n = layer_norm(&t(&[1, 2], &[1., -1.]), 0.0).unwrap();
        assert_eq!(n.data(), &[1.0, -1.0]);
        let s = layer_norm(&t(&[1, 2], &[0., 2.]), 0.0).unwrap();
        assert_eq!(s.data(), &[-1.0, 1.0]);
        assert!(layer_norm(&Tensor::zeros(&[3, 0]), 1e-5).is_err());
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&t(&[2], &[0., 0.])).unwrap().data(), &[0.5, 0.5]);
        for c in [-50.0f32, 0.0, 3.5, 80.0] {
            let s = softmax(&t(&[4], &[c; 4])).unwrap();
            assert_eq!(s.data(), &[0.25; 4]);
        }
        let s = softmax(&t(&[2], &[1f32.ln(), 3f32.ln()])).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-6);
        assert!((s.data()[1] - 0.75).abs() < 1e-6);
        assert!(matches!(softmax(&t(&[2], &[f32::NAN, 0.0])), Err(Error::NonFinite(_))));
    }

    // index loops on purpose: this is the oracle
    #[allow(clippy::needless_range_loop)]
    fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f32> {
        let (h, l, dh) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        let at = |x: &Tensor, a, b, c| x.data()[(a * l + b) * dh + c];
        let mut out = vec![0.0; h * l * dh];
        for head in 0..h {
            for i in 0..l {
                let mut w = vec![0.0f64; l];
                for j in 0..l {
                    let mut s = 0.0f64;
                    for c in 0..dh {
                        s += f64::from(at(q, head, i, c)) * f64::from(at(k, head, j, c));
                    }
                    w[j] = s / (dh as f64).sqrt();
                }
                let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = w.iter().map(|s| (s - m).exp()).sum();
                for c in 0..dh {
                    let mut acc = 0.0f64;
                    for j in 0..l {
                        acc += (w[j] - m).exp() / z * f64::from(at(v, head, j, c));
                    }
                    out[(head * l + i) * dh + c] = acc as f32;
                }
            }
        }
        out
    }

    #[test]
    fn attention_single_token_returns_v() {
        let q = t(&[2, 1, 3], &[0.3, -1.0, 2.0, 4.0, 0.1, 0.2]);
        let v = t(&[2, 1, 3], &[1., 2., 3., 4., 5., 6.]);
        let out = scaled_dot_attention(&q, &q, &v).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn attention_zero_queries_average_values() {
        let q = Tensor::zeros(&[1, 3, 2]);
        let k = t(&[1, 3, 2], &[1., 2., -3., 0.5, 7., 1.]);
        let v = t(&[1, 3, 2], &[1., 0., 2., 3., 3., 6.]);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for row in out.data().chunks(2) {
            assert!((row[0] - 2.0).abs() < 1e-6 && (row[1] - 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_two_tokens_matches_loop_oracle() {
        let q = t(&[1, 2, 2], &[0.5, -0.2, 1.0, 0.3]);
        let k = t(&[1, 2, 2], &[0.1, 0.9, -0.7, 0.4]);
        let v = t(&[1, 2, 2], &[1.0, 2.0, -1.0, 0.5]);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for (a, b) in out.data().iter().zip(naive_attention(&q, &k, &v)) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(scaled_dot_attention(&q, &Tensor::zeros(&[1, 3, 2]), &v).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(xs in proptest::collection::vec(-60.0f32..60.0, 1..40)) {
            let d = xs.len();
            let s = softmax(&Tensor::new(&[d], xs).unwrap()).unwrap();
            let total: f32 = s.data().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
            prop_assert!(s.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn layer_norm_moments(xs in proptest::collection::vec(-10.0f32..10.0, 2..64)) {
            let spread = xs.iter().cloned().fold(f32::MIN, f32::max) - xs.iter().cloned().fold(f32::MAX, f32::min);
            prop_assume!(spread > 1e-2);
            let d = xs.len();
            let y = layer_norm(&Tensor::new(&[1, d], xs).unwrap(), 1e-6).unwrap();
            let mean = y.data().iter().sum::<f32>() / d as f32;
            let var = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            prop_assert!(mean.abs() <= 1e-5);
            prop_assert!((var - 1.0).abs() <= 1e-3);
        }

        #[test]
        fn attention_matches_oracle(vals in proptest::collection::vec(-1.0f32..1.0, 3 * 2 * 4 * 3)) {
            let n = 2 * 4 * 3;
            let q = Tensor::new(&[2, 4, 3], vals[..n].to_vec()).unwrap();
            let k = Tensor::new(&[2, 4, 3], vals[n..2 * n].to_vec()).unwrap();
            let v = Tensor::new(&[2, 4, 3], vals[2 * n..].to_vec()).unwrap();
            let out = scaled_dot_attention(&q, &k, &v).unwrap();
            for (a, b) in out.data().iter().zip(naive_attention(&q, &k, &v)) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }
    }
}
