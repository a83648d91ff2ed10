//! Pure forward kernels shared by the tape ops and their backward rules.
//!
//! Every reduction accumulates left-to-right in row-major order; matmul sums
//! over the inner dimension in ascending index order. This keeps results
//! bit-identical across runs.

use super::{sc, Scalar};

/// C[m,n] = A[m,k] @ B[k,n], ikj loop order, ascending-k accumulation.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
    out
}

pub fn transpose<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Elementwise binary op where `b` tiles over `a` (suffix broadcast).
pub fn zip_broadcast<S: Scalar>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    let k = b.len();
    a.iter()
        .enumerate()
        .map(|(i, &av)| f(av, b[i % k]))
        .collect()
}

/// Sum `d` (length tiles*k) over its leading tiles, producing length k.
pub fn reduce_to_suffix<S: Scalar>(d: &[S], k: usize) -> Vec<S> {
    let mut out = vec![S::zero(); k];
    for (i, &v) in d.iter().enumerate() {
        out[i % k] = out[i % k] + v;
    }
    out
}

pub fn relu<S: Scalar>(x: &[S]) -> Vec<S> {
    x.iter().map(|&v| v.max(S::zero())).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<S: Scalar>(x: &[S]) -> Vec<S> {
    let c = sc::<S>(GELU_C);
    let k = sc::<S>(GELU_K);
    let half = sc::<S>(0.5);
    x.iter()
        .map(|&v| {
            let u = c * (v + k * v * v * v);
            half * v * (S::one() + u.tanh())
        })
        .collect()
}

/// Derivative of the tanh-approximated GELU.
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = sc::<S>(GELU_C);
    let k = sc::<S>(GELU_K);
    let half = sc::<S>(0.5);
    let three = sc::<S>(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * k * x * x)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mx = row[0];
        for &v in &row[1..] {
            mx = mx.max(v);
        }
        let mut sum = S::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            out[r * cols + j] = e;
            sum = sum + e;
        }
        for j in 0..cols {
            out[r * cols + j] = out[r * cols + j] / sum;
        }
    }
    out
}

/// Row-wise log-softmax (max-subtracted).
pub fn log_softmax_rows<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mx = row[0];
        for &v in &row[1..] {
            mx = mx.max(v);
        }
        let mut sum = S::zero();
        for &v in row.iter() {
            sum = sum + (v - mx).exp();
        }
        let lse = mx + sum.ln();
        for (j, &v) in row.iter().enumerate() {
            out[r * cols + j] = v - lse;
        }
    }
    out
}

/// Row statistics used by layer normalization: (mean, inv_std) with biased
/// variance and epsilon inside the square root.
pub fn row_norm_stats<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let n = sc::<S>(row.len() as f64);
    let mut mean = S::zero();
    for &v in row {
        mean = mean + v;
    }
    mean = mean / n;
    let mut var = S::zero();
    for &v in row {
        let d = v - mean;
        var = var + d * d;
    }
    var = var / n;
    (mean, (var + eps).sqrt().recip())
}

pub fn layer_norm_rows<S: Scalar>(
    x: &[S],
    gamma: &[S],
    beta: &[S],
    rows: usize,
    cols: usize,
    eps: S,
) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let (mean, inv_std) = row_norm_stats(row, eps);
        for j in 0..cols {
            out[r * cols + j] = (row[j] - mean) * inv_std * gamma[j] + beta[j];
        }
    }
    out
}

pub fn l2_norm_row<S: Scalar>(row: &[S]) -> S {
    let mut s = S::zero();
    for &v in row {
        s = s + v * v;
    }
    s.sqrt()
}

/// Row-wise x / max(||x||, eps).
pub fn l2_normalize_rows<S: Scalar>(x: &[S], rows: usize, cols: usize, eps: S) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let inv = l2_norm_row(row).max(eps).recip();
        for j in 0..cols {
            out[r * cols + j] = row[j] * inv;
        }
    }
    out
}

pub fn sum_all<S: Scalar>(x: &[S]) -> S {
    let mut s = S::zero();
    for &v in x {
        s = s + v;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_is_bitexact() {
        let a: Vec<f32> = (0..12).map(|i| 0.37 * i as f32 + 0.11).collect();
        let eye: Vec<f32> = (0..16)
            .map(|i| if i % 5 == 0 { 1.0 } else { 0.0 })
            .collect();
        let out = matmul(&a, &eye, 3, 4, 4);
        for (x, y) in a.iter().zip(out.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn softmax_uniform_on_constant_rows() {
        let out = softmax_rows(&[0.0f32, 0.0, 0.0], 1, 3);
        for v in out {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn layer_norm_zero_on_constant_row() {
        let x = [5.0f32; 4];
        let gamma = [1.0f32; 4];
        let beta = [0.0f32; 4];
        let out = layer_norm_rows(&x, &gamma, &beta, 1, 4, 1e-5);
        for v in out {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn transpose_involution() {
        let x: Vec<f32> = (0..6).map(|i| i as f32).collect();
        let back = transpose(&transpose(&x, 2, 3), 3, 2);
        assert_eq!(x, back);
    }
}
