//! Forward pass with teacher forcing, plus greedy decoding.
//!
//! Every intermediate needed by the reverse pass is cached on the returned
//! trace, so a backward call never re-runs the network.

use crate::error::{Error, Result};
use crate::model::{AttnWeights, FfnWeights, FrozenModel, LnWeights, LAYER_NORM_EPS};
use crate::numerics::{argmax, gelu, log_softmax, matmul, Matrix};
use crate::tokens;

/// Per-row layer-norm cache: normalized activations and inverse std.
#[derive(Clone, Debug)]
pub(crate) struct LnCache {
    pub xhat: Matrix,
    pub inv: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct AttnCache {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Softmaxed score matrix per head, each `(s_q x s_k)`.
    pub probs: Vec<Matrix>,
}

#[derive(Clone, Debug)]
pub(crate) struct FfnCache {
    pub z1: Matrix,
}

#[derive(Clone, Debug)]
pub(crate) struct EncLayerCache {
    pub ln1: LnCache,
    pub attn: AttnCache,
    pub ln2: LnCache,
    pub ffn: FfnCache,
}

#[derive(Clone, Debug)]
pub(crate) struct DecLayerCache {
    pub ln1: LnCache,
    pub self_attn: AttnCache,
    pub ln2: LnCache,
    pub cross_attn: AttnCache,
    pub ln3: LnCache,
    pub ffn: FfnCache,
}

/// Everything a single teacher-forced forward pass produced.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Decoder logits, one row per decoder position (`tgt_len x vocab`).
    pub logits: Matrix,
    /// Final-layer encoder hidden states (`(l + n_src) x d`).
    pub enc_hidden: Matrix,
    /// Final-layer decoder hidden states (`tgt_len x d`).
    pub dec_hidden: Matrix,
    pub prompt_len: usize,
    pub src_len: usize,
    /// Decoder positions: target tokens plus the end-of-sequence step.
    pub tgt_len: usize,
    pub(crate) enc_caches: Vec<EncLayerCache>,
    pub(crate) enc_final_ln: LnCache,
    pub(crate) dec_caches: Vec<DecLayerCache>,
    pub(crate) dec_final_ln: LnCache,
}

pub(crate) fn ln_forward(x: &Matrix, w: &LnWeights) -> (Matrix, LnCache) {
    let (rows, cols) = x.shape();
    let mut y = Matrix::zeros(rows, cols);
    let mut xhat = Matrix::zeros(rows, cols);
    let mut inv = vec![0.0; rows];
    let n = cols as f64;
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv[i] = istd;
        let xh = xhat.row_mut(i);
        let out = y.row_mut(i);
        for j in 0..cols {
            let h = (row[j] - mean) * istd;
            xh[j] = h;
            out[j] = w.gain.get(j) * h + w.bias.get(j);
        }
    }
    (y, LnCache { xhat, inv })
}

/// Multi-head scaled-dot attention. Queries come from `q_in`, keys and
/// values from `kv_in` (the same matrix for self-attention).
pub(crate) fn attn_forward(
    q_in: &Matrix,
    kv_in: &Matrix,
    w: &AttnWeights,
    n_heads: usize,
    causal: bool,
) -> (Matrix, AttnCache) {
    let d = q_in.cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let s_q = q_in.rows();
    let s_k = kv_in.rows();

    let q = matmul(q_in, &w.wq).expect("projection shapes fixed by config");
    let k = matmul(kv_in, &w.wk).expect("projection shapes fixed by config");
    let v = matmul(kv_in, &w.wv).expect("projection shapes fixed by config");

    let mut ctx = Matrix::zeros(s_q, d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let off = h * dh;
        let mut p = Matrix::zeros(s_q, s_k);
        for i in 0..s_q {
            let qi = &q.row(i)[off..off + dh];
            let limit = if causal { i + 1 } else { s_k };
            let p_row = p.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for j in 0..limit {
                let kj = &k.row(j)[off..off + dh];
                let score = qi.iter().zip(kj.iter()).map(|(a, b)| a * b).sum::<f64>() * scale;
                p_row[j] = score;
                if score > max {
                    max = score;
                }
            }
            let mut sum = 0.0;
            for val in p_row.iter_mut().take(limit) {
                *val = (*val - max).exp();
                sum += *val;
            }
            for val in p_row.iter_mut().take(limit) {
                *val /= sum;
            }
            // masked-out entries stay exactly zero
            let ctx_row = &mut ctx.row_mut(i)[off..off + dh];
            for j in 0..limit {
                let pj = p.get(i, j);
                let vj = &v.row(j)[off..off + dh];
                for (c, &vv) in ctx_row.iter_mut().zip(vj.iter()) {
                    *c += pj * vv;
                }
            }
        }
        probs.push(p);
    }
    let out = matmul(&ctx, &w.wo).expect("projection shapes fixed by config");
    (out, AttnCache { q, k, v, probs })
}

pub(crate) fn ffn_forward(x: &Matrix, w: &FfnWeights) -> (Matrix, FfnCache) {
    let mut z1 = matmul(x, &w.w1).expect("ffn shapes fixed by config");
    for i in 0..z1.rows() {
        let row = z1.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v += w.b1.get(j);
        }
    }
    let g = z1.map(gelu);
    let mut out = matmul(&g, &w.w2).expect("ffn shapes fixed by config");
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v += w.b2.get(j);
        }
    }
    (out, FfnCache { z1 })
}

fn add_in_place(x: &mut Matrix, y: &Matrix) {
    for (a, b) in x.data_mut().iter_mut().zip(y.data().iter()) {
        *a += b;
    }
}

fn check_tokens(op: &'static str, ids: &[usize], vocab: usize) -> Result<()> {
    if let Some(&bad) = ids.iter().find(|&&t| t >= vocab) {
        return Err(Error::arg(op, format!("token id {bad} >= vocab {vocab}")));
    }
    Ok(())
}

/// Embeds `ids` and adds position codes starting at `pos_offset`.
fn embed_with_positions(model: &FrozenModel, ids: &[usize], pos_offset: usize) -> Matrix {
    let d = model.config().d_model;
    let mut x = Matrix::zeros(ids.len(), d);
    let mut pe = vec![0.0; d];
    for (i, &t) in ids.iter().enumerate() {
        model.positional(pos_offset + i, &mut pe);
        let row = x.row_mut(i);
        let emb = model.embedding_row(t);
        for j in 0..d {
            row[j] = emb[j] + pe[j];
        }
    }
    x
}

fn run_encoder(
    model: &FrozenModel,
    prompt: &Matrix,
    src_ids: &[usize],
) -> Result<(Matrix, Vec<EncLayerCache>, LnCache)> {
    let cfg = model.config();
    let d = cfg.d_model;
    let l = prompt.rows();
    if prompt.cols() != d {
        return Err(Error::shape(
            "forward",
            format!("prompt {}", prompt.shape_string()),
            format!("d_model {d}"),
        ));
    }
    if src_ids.is_empty() {
        return Err(Error::arg("forward", "empty source sequence"));
    }
    if l + src_ids.len() > cfg.max_src_len {
        return Err(Error::arg(
            "forward",
            format!(
                "prompt rows {l} + source length {} exceeds max_src_len {}",
                src_ids.len(),
                cfg.max_src_len
            ),
        ));
    }
    check_tokens("forward", src_ids, cfg.vocab_size)?;

    // [prompt ; embedded source] with positions 0..l+n.
    let n = src_ids.len();
    let mut x = Matrix::zeros(l + n, d);
    let mut pe = vec![0.0; d];
    for i in 0..l {
        model.positional(i, &mut pe);
        let row = x.row_mut(i);
        let p_row = prompt.row(i);
        for j in 0..d {
            row[j] = p_row[j] + pe[j];
        }
    }
    let src_embedded = embed_with_positions(model, src_ids, l);
    for i in 0..n {
        x.row_mut(l + i).copy_from_slice(src_embedded.row(i));
    }

    let mut caches = Vec::with_capacity(cfg.enc_layers);
    for layer in model.encoder_layers() {
        let (a, ln1) = ln_forward(&x, &layer.ln1);
        let (s, attn) = attn_forward(&a, &a, &layer.attn, cfg.n_heads, false);
        add_in_place(&mut x, &s);
        let (b, ln2) = ln_forward(&x, &layer.ln2);
        let (f, ffn) = ffn_forward(&b, &layer.ffn);
        add_in_place(&mut x, &f);
        caches.push(EncLayerCache {
            ln1,
            attn,
            ln2,
            ffn,
        });
    }
    let (enc_hidden, final_ln) = ln_forward(&x, model.encoder_final_ln());
    Ok((enc_hidden, caches, final_ln))
}

fn run_decoder(
    model: &FrozenModel,
    enc_hidden: &Matrix,
    prompt_len: usize,
    dec_in: &[usize],
) -> Result<(Matrix, Matrix, Vec<DecLayerCache>, LnCache)> {
    let cfg = model.config();
    check_tokens("forward", dec_in, cfg.vocab_size)?;
    if dec_in.len() > cfg.max_tgt_len {
        return Err(Error::arg(
            "forward",
            format!(
                "decoder length {} exceeds max_tgt_len {}",
                dec_in.len(),
                cfg.max_tgt_len
            ),
        ));
    }

    // Decoder positions continue after the prompt block, aligning decoder
    // step i with source position i.
    let mut x = embed_with_positions(model, dec_in, prompt_len);
    let mut caches = Vec::with_capacity(cfg.dec_layers);
    for layer in model.decoder_layers() {
        let (a, ln1) = ln_forward(&x, &layer.ln1);
        let (s, self_attn) = attn_forward(&a, &a, &layer.self_attn, cfg.n_heads, true);
        add_in_place(&mut x, &s);
        let (c, ln2) = ln_forward(&x, &layer.ln2);
        let (r, cross_attn) = attn_forward(&c, enc_hidden, &layer.cross_attn, cfg.n_heads, false);
        add_in_place(&mut x, &r);
        let (b, ln3) = ln_forward(&x, &layer.ln3);
        let (f, ffn) = ffn_forward(&b, &layer.ffn);
        add_in_place(&mut x, &f);
        caches.push(DecLayerCache {
            ln1,
            self_attn,
            ln2,
            cross_attn,
            ln3,
            ffn,
        });
    }
    let (dec_hidden, final_ln) = ln_forward(&x, model.decoder_final_ln());
    // Tied output projection, rescaled by 1/sqrt(d) as usual for tied heads.
    let scale = 1.0 / (cfg.d_model as f64).sqrt();
    let mut logits = matmul(&dec_hidden, &crate::numerics::transpose(model.embedding()))
        .expect("shapes fixed by config");
    for v in logits.data_mut() {
        *v *= scale;
    }
    Ok((dec_hidden, logits, caches, final_ln))
}

/// Teacher-forced forward pass. The encoder consumes `[prompt ; src]`; the
/// decoder consumes `[BOS, tgt...]` and is scored against `[tgt..., EOS]`,
/// so the trace has `tgt.len() + 1` decoder rows.
pub fn forward(
    model: &FrozenModel,
    prompt: &Matrix,
    src_ids: &[usize],
    tgt_ids: &[usize],
) -> Result<ForwardTrace> {
    let (enc_hidden, enc_caches, enc_final_ln) = run_encoder(model, prompt, src_ids)?;
    let mut dec_in = Vec::with_capacity(tgt_ids.len() + 1);
    dec_in.push(tokens::BOS);
    dec_in.extend_from_slice(tgt_ids);
    let (dec_hidden, logits, dec_caches, dec_final_ln) =
        run_decoder(model, &enc_hidden, prompt.rows(), &dec_in)?;
    Ok(ForwardTrace {
        logits,
        enc_hidden,
        dec_hidden,
        prompt_len: prompt.rows(),
        src_len: src_ids.len(),
        tgt_len: dec_in.len(),
        enc_caches,
        enc_final_ln,
        dec_caches,
        dec_final_ln,
    })
}

/// Encoder-only pass; used by greedy decoding so the encoder runs once per
/// example instead of once per generated token.
pub fn encode(model: &FrozenModel, prompt: &Matrix, src_ids: &[usize]) -> Result<Matrix> {
    let (enc_hidden, _, _) = run_encoder(model, prompt, src_ids)?;
    Ok(enc_hidden)
}

/// Mean negative log-likelihood of `[tgt..., EOS]` under the trace logits.
pub fn task_loss(trace: &ForwardTrace, tgt_ids: &[usize]) -> Result<f64> {
    Ok(task_loss_with_grad(trace, tgt_ids)?.0)
}

/// As [`task_loss`], also returning the gradient w.r.t. the logits.
pub fn task_loss_with_grad(trace: &ForwardTrace, tgt_ids: &[usize]) -> Result<(f64, Matrix)> {
    if trace.tgt_len != tgt_ids.len() + 1 {
        return Err(Error::shape(
            "task_loss",
            format!("trace with {} decoder rows", trace.tgt_len),
            format!("{} target tokens", tgt_ids.len()),
        ));
    }
    let m = trace.tgt_len;
    let vocab = trace.logits.cols();
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(m, vocab);
    let inv_m = 1.0 / m as f64;
    for i in 0..m {
        let label = if i < tgt_ids.len() {
            tgt_ids[i]
        } else {
            tokens::EOS
        };
        if label >= vocab {
            return Err(Error::arg(
                "task_loss",
                format!("token id {label} >= vocab {vocab}"),
            ));
        }
        let logp = log_softmax(trace.logits.row(i));
        loss -= logp[label] * inv_m;
        let g_row = grad.row_mut(i);
        for j in 0..vocab {
            g_row[j] = (logp[j].exp() - if j == label { 1.0 } else { 0.0 }) * inv_m;
        }
    }
    Ok((loss, grad))
}

/// Greedy decoding: feed BOS, repeatedly emit the argmax token, stop at EOS
/// or when `max_tgt_len - 1` tokens have been produced. Returns the emitted
/// tokens without the EOS.
pub fn greedy_decode(model: &FrozenModel, prompt: &Matrix, src_ids: &[usize]) -> Result<Vec<usize>> {
    let enc_hidden = encode(model, prompt, src_ids)?;
    let mut emitted: Vec<usize> = Vec::new();
    let max_steps = model.config().max_tgt_len - 1;
    let mut dec_in = vec![tokens::BOS];
    for _ in 0..max_steps {
        let (_, logits, _, _) = run_decoder(model, &enc_hidden, prompt.rows(), &dec_in)?;
        let next = argmax(logits.row(logits.rows() - 1));
        if next == tokens::EOS {
            break;
        }
        emitted.push(next);
        dec_in.push(next);
    }
    Ok(emitted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig, ModelInit};
    use crate::numerics::Rng;

    fn tiny_model() -> FrozenModel {
        init_model(&ModelConfig::tiny(), &mut Rng::new(11)).unwrap()
    }

    fn random_prompt(l: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        let mut m = Matrix::zeros(l, d);
        for v in m.data_mut() {
            *v = rng.gauss(0.5);
        }
        m
    }

    #[test]
    fn forward_is_pure() {
        let model = tiny_model();
        let prompt = random_prompt(4, 16, 1);
        let src = vec![5, 6, 7];
        let tgt = vec![7, 6];
        let a = forward(&model, &prompt, &src, &tgt).unwrap();
        let b = forward(&model, &prompt, &src, &tgt).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.enc_hidden, b.enc_hidden);
        assert_eq!(a.dec_hidden, b.dec_hidden);
    }

    #[test]
    fn zero_length_prompt_is_plain_seq2seq() {
        let model = tiny_model();
        let prompt = Matrix::zeros(0, 16);
        let trace = forward(&model, &prompt, &[4, 5], &[5]).unwrap();
        assert_eq!(trace.enc_hidden.rows(), 2);
        assert_eq!(trace.logits.rows(), 2); // one target token + EOS step
        assert_eq!(trace.prompt_len, 0);
    }

    #[test]
    fn encoder_rows_are_prompt_plus_source() {
        let model = tiny_model();
        for l in [1usize, 3, 8] {
            let prompt = random_prompt(l, 16, l as u64);
            let src = vec![4, 5, 6, 7];
            let trace = forward(&model, &prompt, &src, &[4]).unwrap();
            assert_eq!(trace.enc_hidden.rows(), l + src.len());
        }
    }

    #[test]
    fn perturbing_prompt_changes_some_logit() {
        let model = tiny_model();
        let prompt = random_prompt(4, 16, 2);
        let src = vec![5, 6, 7];
        let tgt = vec![7];
        let base = forward(&model, &prompt, &src, &tgt).unwrap();
        let mut nudged = prompt.clone();
        nudged.set(2, 3, nudged.get(2, 3) + 0.5);
        let after = forward(&model, &nudged, &src, &tgt).unwrap();
        assert_ne!(base.logits, after.logits);
    }

    #[test]
    fn forward_validates_inputs() {
        let model = tiny_model();
        // wrong prompt width
        assert!(forward(&model, &Matrix::zeros(4, 8), &[4], &[4]).is_err());
        // encoder overflow: prompt rows + source exceeds max_src_len (24)
        let long_src = vec![4; 22];
        assert!(forward(&model, &Matrix::zeros(4, 16), &long_src, &[4]).is_err());
        // decoder overflow
        let long_tgt = vec![4; 12];
        assert!(forward(&model, &Matrix::zeros(4, 16), &[4], &long_tgt).is_err());
        // out-of-vocab token
        assert!(forward(&model, &Matrix::zeros(4, 16), &[25], &[4]).is_err());
        // empty source
        assert!(forward(&model, &Matrix::zeros(4, 16), &[], &[4]).is_err());
    }

    #[test]
    fn task_loss_zero_when_correct_class_certain() {
        let model = tiny_model();
        let prompt = random_prompt(2, 16, 3);
        let mut trace = forward(&model, &prompt, &[5, 6], &[7]).unwrap();
        // Force logits so the labels [7, EOS] have all the mass.
        trace.logits = Matrix::zeros(2, 20);
        for j in 0..20 {
            trace.logits.set(0, j, if j == 7 { 500.0 } else { -500.0 });
            trace.logits.set(1, j, if j == tokens::EOS { 500.0 } else { -500.0 });
        }
        let loss = task_loss(&trace, &[7]).unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn task_loss_uniform_logits_is_ln_vocab() {
        let model = tiny_model();
        let prompt = random_prompt(2, 16, 4);
        let mut trace = forward(&model, &prompt, &[5, 6], &[7, 8]).unwrap();
        trace.logits = Matrix::filled(3, 20, 0.37);
        let loss = task_loss(&trace, &[7, 8]).unwrap();
        assert!((loss - 20.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn task_loss_nonnegative_and_length_checked() {
        let model = tiny_model();
        let prompt = random_prompt(2, 16, 5);
        let trace = forward(&model, &prompt, &[5, 6], &[7, 8]).unwrap();
        assert!(task_loss(&trace, &[7, 8]).unwrap() >= 0.0);
        assert!(task_loss(&trace, &[7]).is_err());
    }

    #[test]
    fn greedy_decode_stops_and_stays_in_vocab() {
        let model = FrozenModel::init(&ModelConfig::tiny(), ModelInit::Anchored, &mut Rng::new(9))
            .unwrap();
        let prompt = random_prompt(4, 16, 6);
        let out = greedy_decode(&model, &prompt, &[4, 5, 6]).unwrap();
        assert!(out.len() <= 11);
        assert!(out.iter().all(|&t| t < 20));
    }

    #[test]
    fn weights_unchanged_by_forward_and_decode() {
        let model = tiny_model();
        let before = model.weight_checksum();
        let prompt = random_prompt(4, 16, 7);
        let _ = forward(&model, &prompt, &[4, 5], &[5, 4]).unwrap();
        let _ = greedy_decode(&model, &prompt, &[4, 5]).unwrap();
        assert_eq!(model.weight_checksum(), before);
    }
}
