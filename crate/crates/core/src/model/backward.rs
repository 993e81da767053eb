use super::tensor::{dot, gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_in_place, Matrix};
use super::{BlockParams, HiddenStates, ModelError};

/// Forward intermediates of a full causal pass, kept for backprop.
struct Tape {
    ln1: Vec<(f32, f32)>,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Attention probabilities per row and head, `probs[r][head]` of length `r + 1`.
    probs: Vec<Vec<Vec<f32>>>,
    x2: Matrix,
    ln2: Vec<(f32, f32)>,
    pre_gelu: Matrix,
}

fn record(params: &BlockParams, x: &Matrix) -> Tape {
    let n = x.rows;
    let d = params.hidden_dim();
    let n_heads = params.n_heads;
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut h = vec![0.0f32; d];
    let mut q = Matrix::zeros(n, d);
    let mut k = Matrix::zeros(n, d);
    let mut v = Matrix::zeros(n, d);
    let mut ln1 = Vec::with_capacity(n);
    for r in 0..n {
        ln1.push(layer_norm(x.row(r), &params.ln1_gain, &params.ln1_bias, &mut h));
        params.wq.vec_mul(&h, q.row_mut(r));
        params.wk.vec_mul(&h, k.row_mut(r));
        params.wv.vec_mul(&h, v.row_mut(r));
    }
    let mut probs = Vec::with_capacity(n);
    let mut x2 = Matrix::zeros(n, d);
    let mut ln2 = Vec::with_capacity(n);
    let mut pre_gelu = Matrix::zeros(n, 4 * d);
    let mut attn = vec![0.0f32; d];
    let mut proj = vec![0.0f32; d];
    for r in 0..n {
        let mut row_probs = Vec::with_capacity(n_heads);
        for head in 0..n_heads {
            let hs = head * hd..(head + 1) * hd;
            let mut s: Vec<f32> = (0..=r)
                .map(|j| dot(&q.row(r)[hs.clone()], &k.row(j)[hs.clone()]) * scale)
                .collect();
            softmax_in_place(&mut s);
            let acc = &mut attn[hs.clone()];
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (j, &p) in s.iter().enumerate() {
                for (a, &vv) in acc.iter_mut().zip(&v.row(j)[hs.clone()]) {
                    *a += p * vv;
                }
            }
            row_probs.push(s);
        }
        probs.push(row_probs);
        params.wo.vec_mul(&attn, &mut proj);
        for ((o, &xv), &p) in x2.row_mut(r).iter_mut().zip(x.row(r)).zip(&proj) {
            *o = xv + p;
        }
        ln2.push(layer_norm(x2.row(r), &params.ln2_gain, &params.ln2_bias, &mut h));
        params.w1.vec_mul(&h, pre_gelu.row_mut(r));
    }
    Tape {
        ln1,
        q,
        k,
        v,
        probs,
        x2,
        ln2,
        pre_gelu,
    }
}

/// Gradient of a block's outputs with respect to its inputs for a full
/// causal sequence. Parameters are only read.
pub fn block_backward(
    params: &BlockParams,
    recorded_inputs: &HiddenStates,
    grad_out: &HiddenStates,
) -> Result<HiddenStates, ModelError> {
    let d = params.hidden_dim();
    let x = &recorded_inputs.data;
    let dy = &grad_out.data;
    if x.cols != d || dy.cols != d || x.rows != dy.rows || x.rows == 0 {
        return Err(ModelError::Shape(format!(
            "backward expects matching [n × {d}] inputs and grads, got [{} × {}] and [{} × {}]",
            x.rows, x.cols, dy.rows, dy.cols
        )));
    }
    let n = x.rows;
    let n_heads = params.n_heads;
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let tape = record(params, x);

    // MLP branch: y = x2 + W2 gelu(W1 LN2(x2)).
    let mut dx2 = dy.clone();
    let mut du = vec![0.0f32; 4 * d];
    let mut dh = vec![0.0f32; d];
    for r in 0..n {
        params.w2.vec_mul_transposed(dy.row(r), &mut du);
        for (g, &z) in du.iter_mut().zip(tape.pre_gelu.row(r)) {
            *g *= gelu_grad(z);
        }
        params.w1.vec_mul_transposed(&du, &mut dh);
        let (mean, inv_std) = tape.ln2[r];
        layer_norm_backward(tape.x2.row(r), &params.ln2_gain, mean, inv_std, &dh, dx2.row_mut(r));
    }

    // Attention branch: x2 = x + Wo Attn(LN1(x)).
    let mut da = Matrix::zeros(n, d);
    for r in 0..n {
        params.wo.vec_mul_transposed(dx2.row(r), da.row_mut(r));
    }
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    for r in 0..n {
        for head in 0..n_heads {
            let hs = head * hd..(head + 1) * hd;
            let p = &tape.probs[r][head];
            let da_h = &da.row(r)[hs.clone()];
            let dp: Vec<f32> = (0..=r).map(|j| dot(da_h, &tape.v.row(j)[hs.clone()])).collect();
            let mix = dot(p, &dp);
            for j in 0..=r {
                for (g, &a) in dv.row_mut(j)[hs.clone()].iter_mut().zip(da_h) {
                    *g += p[j] * a;
                }
                let ds = p[j] * (dp[j] - mix) * scale;
                let kj = tape.k.row(j)[hs.clone()].to_vec();
                for (g, &kk) in dq.row_mut(r)[hs.clone()].iter_mut().zip(&kj) {
                    *g += ds * kk;
                }
                let qr = tape.q.row(r)[hs.clone()].to_vec();
                for (g, &qq) in dk.row_mut(j)[hs.clone()].iter_mut().zip(&qr) {
                    *g += ds * qq;
                }
            }
        }
    }
    let mut dx = dx2.clone();
    let mut tmp = vec![0.0f32; d];
    for r in 0..n {
        dh.iter_mut().for_each(|v| *v = 0.0);
        for (w, g) in [(&params.wq, &dq), (&params.wk, &dk), (&params.wv, &dv)] {
            w.vec_mul_transposed(g.row(r), &mut tmp);
            for (a, &b) in dh.iter_mut().zip(&tmp) {
                *a += b;
            }
        }
        let (mean, inv_std) = tape.ln1[r];
        layer_norm_backward(x.row(r), &params.ln1_gain, mean, inv_std, &dh, dx.row_mut(r));
    }
    Ok(HiddenStates::new(dx, recorded_inputs.position_offset))
}

/// Full causal forward without a cache; shares the tape code so training
/// forward and backward see the same numbers.
pub(crate) fn training_forward(params: &BlockParams, x: &Matrix) -> Matrix {
    let tape = record(params, x);
    let d = params.hidden_dim();
    let mut out = tape.x2.clone();
    let mut mid = vec![0.0f32; 4 * d];
    let mut mlp = vec![0.0f32; d];
    for r in 0..x.rows {
        for (m, &z) in mid.iter_mut().zip(tape.pre_gelu.row(r)) {
            *m = gelu(z);
        }
        params.w2.vec_mul(&mid, &mut mlp);
        for (o, &m) in out.row_mut(r).iter_mut().zip(&mlp) {
            *o += m;
        }
    }
    out
}
