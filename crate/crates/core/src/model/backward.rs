//! Hand-derived reverse pass.
//!
//! The architecture is fixed and the prompt matrix is the only gradient
//! sink, so instead of a general tape each block has an explicit adjoint
//! that consumes the activations cached during the forward pass. Model
//! weights never receive a gradient.

use crate::error::{Error, Result};
use crate::model::forward::{AttnCache, DecLayerCache, EncLayerCache, FfnCache, ForwardTrace, LnCache};
use crate::model::{AttnWeights, FfnWeights, FrozenModel, LnWeights};
use crate::numerics::{gelu_deriv, matmul, transpose, Matrix};

/// Adjoint of layer norm. `dy` is the upstream gradient; the cache holds the
/// normalized activations and the per-row inverse std.
fn ln_backward(dy: &Matrix, cache: &LnCache, w: &LnWeights) -> Matrix {
    let (rows, cols) = dy.shape();
    let n = cols as f64;
    let mut dx = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let dy_row = dy.row(i);
        let xhat = cache.xhat.row(i);
        let inv = cache.inv[i];
        // dxhat = dy * gain
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..cols {
            let dxh = dy_row[j] * w.gain.get(j);
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[j];
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        let out = dx.row_mut(i);
        for j in 0..cols {
            let dxh = dy_row[j] * w.gain.get(j);
            out[j] = inv * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Adjoint of multi-head attention. Returns gradients w.r.t. the query-side
/// input and the key/value-side input; for self-attention the caller adds
/// them together.
fn attn_backward(
    dout: &Matrix,
    cache: &AttnCache,
    w: &AttnWeights,
    n_heads: usize,
) -> (Matrix, Matrix) {
    let d = dout.cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let s_q = dout.rows();
    let s_k = cache.k.rows();

    // out = ctx wo  =>  dctx = dout wo^T
    let dctx = matmul(dout, &transpose(&w.wo)).expect("shapes fixed");

    let mut dq = Matrix::zeros(s_q, d);
    let mut dk = Matrix::zeros(s_k, d);
    let mut dv = Matrix::zeros(s_k, d);
    for h in 0..n_heads {
        let off = h * dh;
        let p = &cache.probs[h];
        for i in 0..s_q {
            let dctx_row = &dctx.row(i)[off..off + dh];
            let p_row = p.row(i);
            // dP[i][j] = dctx_i . v_j ; dV_j += P[i][j] * dctx_i
            // softmax row adjoint: dS = P o (dP - sum(dP o P))
            let mut dp = vec![0.0; s_k];
            let mut dot = 0.0;
            for j in 0..s_k {
                let pij = p_row[j];
                if pij == 0.0 {
                    continue; // causal-masked or unreachable key
                }
                let vj = &cache.v.row(j)[off..off + dh];
                let g: f64 = dctx_row.iter().zip(vj.iter()).map(|(a, b)| a * b).sum();
                dp[j] = g;
                dot += g * pij;
                let dvj = &mut dv.row_mut(j)[off..off + dh];
                for (dvv, &c) in dvj.iter_mut().zip(dctx_row.iter()) {
                    *dvv += pij * c;
                }
            }
            let qi = &cache.q.row(i)[off..off + dh];
            let dq_row = &mut dq.row_mut(i)[off..off + dh];
            for j in 0..s_k {
                let pij = p_row[j];
                if pij == 0.0 {
                    continue;
                }
                let ds = pij * (dp[j] - dot) * scale;
                let kj = &cache.k.row(j)[off..off + dh];
                for (dqv, &kv) in dq_row.iter_mut().zip(kj.iter()) {
                    *dqv += ds * kv;
                }
                let dk_row = &mut dk.row_mut(j)[off..off + dh];
                for (dkv, &qv) in dk_row.iter_mut().zip(qi.iter()) {
                    *dkv += ds * qv;
                }
            }
        }
    }

    let d_q_in = matmul(&dq, &transpose(&w.wq)).expect("shapes fixed");
    let mut d_kv_in = matmul(&dk, &transpose(&w.wk)).expect("shapes fixed");
    let dv_in = matmul(&dv, &transpose(&w.wv)).expect("shapes fixed");
    d_kv_in.add_scaled(&dv_in, 1.0).expect("shapes fixed");
    (d_q_in, d_kv_in)
}

fn ffn_backward(dout: &Matrix, cache: &FfnCache, w: &FfnWeights) -> Matrix {
    // out = gelu(z1) w2 + b2
    let dg = matmul(dout, &transpose(&w.w2)).expect("shapes fixed");
    let mut dz1 = Matrix::zeros(dg.rows(), dg.cols());
    for (idx, v) in dz1.data_mut().iter_mut().enumerate() {
        *v = dg.data()[idx] * gelu_deriv(cache.z1.data()[idx]);
    }
    matmul(&dz1, &transpose(&w.w1)).expect("shapes fixed")
}

fn enc_layer_backward(
    dout: &Matrix,
    cache: &EncLayerCache,
    layer: &crate::model::EncoderLayer,
    n_heads: usize,
) -> Matrix {
    // out = x1 + ffn(ln2(x1)); x1 = x + attn(ln1(x))
    let db = ffn_backward(dout, &cache.ffn, &layer.ffn);
    let mut dx1 = ln_backward(&db, &cache.ln2, &layer.ln2);
    dx1.add_scaled(dout, 1.0).expect("shapes fixed");

    let (da_q, da_kv) = attn_backward(&dx1, &cache.attn, &layer.attn, n_heads);
    let mut da = da_q;
    da.add_scaled(&da_kv, 1.0).expect("shapes fixed");
    let mut dx = ln_backward(&da, &cache.ln1, &layer.ln1);
    dx.add_scaled(&dx1, 1.0).expect("shapes fixed");
    dx
}

/// Returns the gradient w.r.t. the layer input and the accumulated gradient
/// w.r.t. the encoder hidden states consumed by cross-attention.
fn dec_layer_backward(
    dout: &Matrix,
    cache: &DecLayerCache,
    layer: &crate::model::DecoderLayer,
    n_heads: usize,
) -> (Matrix, Matrix) {
    // out = x2 + ffn(ln3(x2))
    let db = ffn_backward(dout, &cache.ffn, &layer.ffn);
    let mut dx2 = ln_backward(&db, &cache.ln3, &layer.ln3);
    dx2.add_scaled(dout, 1.0).expect("shapes fixed");

    // x2 = x1 + cross(ln2(x1), enc)
    let (dc, denc) = attn_backward(&dx2, &cache.cross_attn, &layer.cross_attn, n_heads);
    let mut dx1 = ln_backward(&dc, &cache.ln2, &layer.ln2);
    dx1.add_scaled(&dx2, 1.0).expect("shapes fixed");

    // x1 = x + self(ln1(x))
    let (da_q, da_kv) = attn_backward(&dx1, &cache.self_attn, &layer.self_attn, n_heads);
    let mut da = da_q;
    da.add_scaled(&da_kv, 1.0).expect("shapes fixed");
    let mut dx = ln_backward(&da, &cache.ln1, &layer.ln1);
    dx.add_scaled(&dx1, 1.0).expect("shapes fixed");
    (dx, denc)
}

/// Propagates upstream gradients back to the prompt rows.
///
/// `dloss_dlogits` has the trace's logits shape; the two hidden-state
/// gradients may be zero matrices when the loss has no hidden-state term.
/// Embeddings, positions, and all layer weights are frozen, so the returned
/// `(l x d)` matrix is the complete gradient.
pub fn backward_to_prompt(
    model: &FrozenModel,
    trace: &ForwardTrace,
    dloss_dlogits: &Matrix,
    dloss_dhidden_enc: &Matrix,
    dloss_dhidden_dec: &Matrix,
) -> Result<Matrix> {
    if dloss_dlogits.shape() != trace.logits.shape() {
        return Err(Error::shape(
            "backward_to_prompt",
            dloss_dlogits.shape_string(),
            trace.logits.shape_string(),
        ));
    }
    if dloss_dhidden_enc.shape() != trace.enc_hidden.shape() {
        return Err(Error::shape(
            "backward_to_prompt",
            dloss_dhidden_enc.shape_string(),
            trace.enc_hidden.shape_string(),
        ));
    }
    if dloss_dhidden_dec.shape() != trace.dec_hidden.shape() {
        return Err(Error::shape(
            "backward_to_prompt",
            dloss_dhidden_dec.shape_string(),
            trace.dec_hidden.shape_string(),
        ));
    }

    let n_heads = model.config().n_heads;

    // logits = dec_hidden E^T / sqrt(d)  =>  d(dec_hidden) = dlogits E / sqrt(d)
    let scale = 1.0 / (model.config().d_model as f64).sqrt();
    let mut d_dec_hidden = matmul(dloss_dlogits, model.embedding()).expect("shapes fixed");
    for v in d_dec_hidden.data_mut() {
        *v *= scale;
    }
    d_dec_hidden
        .add_scaled(dloss_dhidden_dec, 1.0)
        .expect("shapes fixed");

    let mut dx = ln_backward(&d_dec_hidden, &trace.dec_final_ln, model.decoder_final_ln());
    let mut d_enc_hidden = Matrix::zeros(trace.enc_hidden.rows(), trace.enc_hidden.cols());
    for (cache, layer) in trace
        .dec_caches
        .iter()
        .zip(model.decoder_layers().iter())
        .rev()
    {
        let (dx_next, denc) = dec_layer_backward(&dx, cache, layer, n_heads);
        dx = dx_next;
        d_enc_hidden.add_scaled(&denc, 1.0).expect("shapes fixed");
    }
    // Decoder input embeddings are frozen; their gradient stops here.

    d_enc_hidden
        .add_scaled(dloss_dhidden_enc, 1.0)
        .expect("shapes fixed");
    let mut dx = ln_backward(&d_enc_hidden, &trace.enc_final_ln, model.encoder_final_ln());
    for (cache, layer) in trace
        .enc_caches
        .iter()
        .zip(model.encoder_layers().iter())
        .rev()
    {
        dx = enc_layer_backward(&dx, cache, layer, n_heads);
    }

    // Positions and source embeddings are frozen; only the prompt rows
    // carry gradient out of the encoder input.
    crate::numerics::row_slice(&dx, 0, trace.prompt_len)
}
