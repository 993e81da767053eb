#![allow(dead_code)]

use swarmpipe::model::{BlockParams, Matrix};

/// Straightforward f64 transformer block over a full causal sequence, written
/// from the architecture description rather than the library kernels.
pub fn block_f64(p: &BlockParams, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = p.hidden_dim();
    let hd = d / p.n_heads;
    let n = x.len();
    let ln = |v: &[f64], g: &[f32], b: &[f32]| -> Vec<f64> {
        let mean = v.iter().sum::<f64>() / d as f64;
        let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        (0..d).map(|i| (v[i] - mean) * inv * g[i] as f64 + b[i] as f64).collect()
    };
    let mm = |v: &[f64], w: &Matrix| -> Vec<f64> {
        (0..w.cols)
            .map(|j| (0..w.rows).map(|i| v[i] * w.get(i, j) as f64).sum())
            .collect()
    };
    let h: Vec<Vec<f64>> = x.iter().map(|r| ln(r, &p.ln1_gain, &p.ln1_bias)).collect();
    let q: Vec<Vec<f64>> = h.iter().map(|r| mm(r, &p.wq)).collect();
    let k: Vec<Vec<f64>> = h.iter().map(|r| mm(r, &p.wk)).collect();
    let v: Vec<Vec<f64>> = h.iter().map(|r| mm(r, &p.wv)).collect();
    let mut out = Vec::with_capacity(n);
    for r in 0..n {
        let mut attn = vec![0.0; d];
        for head in 0..p.n_heads {
            let cols = head * hd..(head + 1) * hd;
            let s: Vec<f64> = (0..=r)
                .map(|j| cols.clone().map(|c| q[r][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|a| (a - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, ej) in e.iter().enumerate() {
                for c in cols.clone() {
                    attn[c] += ej / z * v[j][c];
                }
            }
        }
        let proj = mm(&attn, &p.wo);
        let x2: Vec<f64> = (0..d).map(|i| x[r][i] + proj[i]).collect();
        let h2 = ln(&x2, &p.ln2_gain, &p.ln2_bias);
        let c = (2.0 / std::f64::consts::PI).sqrt();
        let mid: Vec<f64> = mm(&h2, &p.w1)
            .into_iter()
            .map(|a| 0.5 * a * (1.0 + (c * (a + 0.044715 * a * a * a)).tanh()))
            .collect();
        let mlp = mm(&mid, &p.w2);
        out.push((0..d).map(|i| x2[i] + mlp[i]).collect());
    }
    out
}

pub fn blocks_f64(ps: &[BlockParams], x: &Matrix) -> Vec<Vec<f64>> {
    let mut h: Vec<Vec<f64>> = (0..x.rows)
        .map(|r| x.row(r).iter().map(|&a| a as f64).collect())
        .collect();
    for p in ps {
        h = block_f64(p, &h);
    }
    h
}

/// Central finite-difference gradient of `sum(dy * f(x))` with respect to `x`.
pub fn finite_difference_grad(ps: &[BlockParams], x: &Matrix, dy: &Matrix, eps: f64) -> Vec<f64> {
    let objective = |xs: &[Vec<f64>]| -> f64 {
        let mut h = xs.to_vec();
        for p in ps {
            h = block_f64(p, &h);
        }
        h.iter()
            .enumerate()
            .map(|(r, row)| row.iter().zip(dy.row(r)).map(|(a, &g)| a * g as f64).sum::<f64>())
            .sum()
    };
    let base: Vec<Vec<f64>> = (0..x.rows)
        .map(|r| x.row(r).iter().map(|&a| a as f64).collect())
        .collect();
    let mut grad = Vec::with_capacity(x.rows * x.cols);
    for r in 0..x.rows {
        for c in 0..x.cols {
            let mut plus = base.clone();
            plus[r][c] += eps;
            let mut minus = base.clone();
            minus[r][c] -= eps;
            grad.push((objective(&plus) - objective(&minus)) / (2.0 * eps));
        }
    }
    grad
}

/// `‖a − b‖ / ‖b‖`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}
