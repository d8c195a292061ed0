//! Loop-based reference implementations shared by the integration tests.
//! Nothing here calls into the library beyond converting tensors.

#![allow(dead_code)]

use daefusion_core::numerics::Tensor;
use daefusion_core::{DualStrategy, ModelConfig};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let (r, c) = t.dims2().expect("matrix");
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn to_tensor(m: &Mat) -> Tensor<f64> {
    let cols = m[0].len();
    Tensor::new(vec![m.len(), cols], m.iter().flatten().copied().collect()).expect("finite")
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(ra, rb)| {
            assert_eq!(ra.len(), rb.len());
            ra.iter().zip(rb).map(|(x, y)| (x - y).abs())
        })
        .fold(0.0, f64::max)
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            c[i][j] = s;
        }
    }
    c
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn softmax_rows(a: &Mat) -> Mat {
    a.iter().map(|r| softmax(r)).collect()
}

pub fn softmax_cols(a: &Mat) -> Mat {
    transpose(&softmax_rows(&transpose(a)))
}

/// `softmax(Q K^T / sqrt(d_k)) V`, one query at a time.
pub fn standard_attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let dk = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> =
                k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt()).collect();
            let w = softmax(&scores);
            (0..v[0].len()).map(|c| (0..v.len()).map(|j| w[j] * v[j][c]).sum()).collect()
        })
        .collect()
}

/// The `n x n` matrix `rho_q(Q) rho_k(K)^T`, formed explicitly.
pub fn efficient_mixing(q: &Mat, k: &Mat) -> Mat {
    matmul(&softmax_rows(q), &transpose(&softmax_cols(k)))
}

/// Efficient attention by materializing the mixing matrix first.
pub fn efficient_attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    matmul(&efficient_mixing(q, k), v)
}

pub fn l2_normalize_cols(a: &Mat, eps: f64) -> Mat {
    let norms: Vec<f64> =
        (0..a[0].len()).map(|c| a.iter().map(|r| r[c] * r[c]).sum::<f64>().sqrt().max(eps)).collect();
    a.iter().map(|r| r.iter().zip(&norms).map(|(x, n)| x / n).collect()).collect()
}

/// `V softmax_col(K^T Q / tau)` with token-axis l2 normalization.
pub fn transpose_attention(q: &Mat, k: &Mat, v: &Mat, tau: f64) -> Mat {
    let (qn, kn) = (l2_normalize_cols(q, 1e-12), l2_normalize_cols(k, 1e-12));
    let d = q[0].len();
    let mut cov = vec![vec![0.0; d]; d];
    for a in 0..d {
        for b in 0..d {
            cov[a][b] = (0..q.len()).map(|i| kn[i][a] * qn[i][b]).sum::<f64>() / tau;
        }
    }
    matmul(v, &softmax_cols(&cov))
}

/// Eq. 10 as printed, evaluated left to right: `(rho_v(V) rho_k(K^T)) Q`.
pub fn scca_as_printed(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    // rho_k over tokens: every row of K^T sums to one
    let kt = softmax_rows(&transpose(k));
    matmul(&matmul(&softmax_rows(v), &kt), q)
}

/// Full cross attention with projections: `x1` decoder, `x2` skip.
pub fn scca_full(x1: &Mat, x2: &Mat, fc_w: &Mat, fc_b: &[f64], wq: &Mat, wk: &Mat, wv: &Mat) -> Mat {
    let mut x1p = matmul(x1, fc_w);
    for row in &mut x1p {
        for (x, b) in row.iter_mut().zip(fc_b) {
            *x += b;
        }
    }
    let attended = scca_as_printed(&matmul(x2, wq), &matmul(&x1p, wk), &matmul(&x1p, wv));
    attended.iter().zip(x2).map(|(a, b)| a.iter().chain(b).copied().collect()).collect()
}

pub fn layer_norm_row(x: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
}

/// Independent symbolic parameter count of the U-shaped model.
pub mod count {
    use super::*;

    pub fn ln(d: usize) -> usize {
        2 * d
    }

    pub fn linear(i: usize, o: usize, bias: bool) -> usize {
        i * o + if bias { o } else { 0 }
    }

    pub fn mix_ffn(i: usize, h: usize, o: usize) -> usize {
        linear(i, h, true) + 9 * h + h + linear(h, o, true)
    }

    pub fn efficient(d: usize) -> usize {
        2 * d * (d / 2) + d * d
    }

    pub fn transpose_attn(d: usize) -> usize {
        3 * d * d + 1
    }

    pub fn block(d: usize, e: usize, s: DualStrategy) -> usize {
        let base = efficient(d) + transpose_attn(d) + 2 * ln(d) + 2 * mix_ffn(d, e * d, d);
        base + match s {
            DualStrategy::Sequential | DualStrategy::SimpleAdditive => 0,
            DualStrategy::ComplexAdditive => 2 * ln(d) + 2 * mix_ffn(d, e * d, d),
            DualStrategy::Concatenation => 3 * ln(d) + mix_ffn(2 * d, 2 * e * d, d),
        }
    }

    pub fn scca_stage(d: usize) -> usize {
        linear(d, d, true) + 3 * d * d + linear(2 * d, d, true)
    }

    pub fn model(c: &ModelConfig) -> usize {
        let d = &c.embed_dims;
        let blocks = |w: usize| c.blocks_per_stage * block(w, c.expansion_ratio, c.strategy);
        let mut total = linear(49 * c.in_channels, d[0], true) + ln(d[0]);
        for s in 0..3 {
            if s > 0 {
                total += ln(4 * d[s - 1]) + linear(4 * d[s - 1], 2 * d[s - 1], false);
            }
            total += blocks(d[s]);
        }
        for level in 0..3 {
            if level < 2 && level < c.skip_connections {
                total += scca_stage(d[level]);
            }
            let f = if level == 0 { 4 } else { 2 };
            total += blocks(d[level]) + linear(d[level], f * d[level], false) + ln(d[level] / f);
        }
        total + linear(d[0] / 4, c.num_classes, true)
    }
}
