//! The distillation objective family.
//!
//! The task loss is the mean negative log-likelihood from the model module.
//! On top of it sit the distillation terms: temperature-scaled KL between
//! teacher and student output distributions, mean-squared error between
//! teacher and student hidden states (encoder and decoder contributions
//! added), and — as an ablation variant — a direct MSE between the teacher
//! prompt and the composed student prompt. The total is
//! `L_plm + lambda * (L_logits + L_hidden)`.
//!
//! All reductions are means, so loss scale is independent of batch size and
//! sequence length. Teachers are constants: no gradient ever flows to them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{backward_to_prompt, forward, task_loss_with_grad, FrozenModel};
use crate::numerics::{softmax, Matrix, Vector};
use crate::prompts::{chain_gradients, compose, SharedPrompt, TaskFactors, VanillaPrompt};

/// Which distillation terms are active, and their weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    /// Weight of the distillation terms in the total loss.
    pub lambda: f64,
    /// Softmax temperature for the logits KL, applied to both teacher and
    /// student.
    pub temperature: f64,
    pub use_logits_kl: bool,
    pub use_hidden_mse: bool,
    /// Replaces the KL and hidden losses with a direct prompt-to-prompt MSE.
    pub use_prompt_distance: bool,
}

impl DistillConfig {
    /// Standard distillation: KL on logits plus hidden-state MSE.
    pub fn standard(lambda: f64, temperature: f64) -> Self {
        DistillConfig {
            lambda,
            temperature,
            use_logits_kl: true,
            use_hidden_mse: true,
            use_prompt_distance: false,
        }
    }

    /// No distillation at all: plain task-loss training.
    pub fn plain() -> Self {
        DistillConfig {
            lambda: 0.0,
            temperature: 1.0,
            use_logits_kl: false,
            use_hidden_mse: false,
            use_prompt_distance: false,
        }
    }

    pub fn needs_teacher(&self) -> bool {
        self.use_logits_kl || self.use_hidden_mse || self.use_prompt_distance
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda must be a nonnegative real, got {}",
                self.lambda
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.use_prompt_distance && (self.use_logits_kl || self.use_hidden_mse) {
            return Err(Error::InvalidConfig(
                "prompt-distance loss excludes the logits/hidden distillation pair".into(),
            ));
        }
        Ok(())
    }
}

/// Per-batch losses and gradients for one task's decomposition.
#[derive(Clone, Debug)]
pub struct DistillationBatchResult {
    pub l_plm: f64,
    pub l_logits: f64,
    pub l_hidden: f64,
    pub l_prompt_distance: f64,
    pub l_total: f64,
    pub grad_shared: Matrix,
    /// Gradients for the task vectors, keyed by task id.
    pub grad_factors: BTreeMap<String, (Vector, Vector)>,
}

/// Mean over positions of `KL(softmax(teacher/T) || softmax(student/T))`.
/// The teacher distribution is a constant.
pub fn kl_logits_loss(
    teacher_logits: &Matrix,
    student_logits: &Matrix,
    temperature: f64,
) -> Result<f64> {
    Ok(kl_logits_loss_with_grad(teacher_logits, student_logits, temperature)?.0)
}

/// As [`kl_logits_loss`], also returning the gradient w.r.t. the student
/// logits: `(q - p) / (T * positions)` per entry.
pub fn kl_logits_loss_with_grad(
    teacher_logits: &Matrix,
    student_logits: &Matrix,
    temperature: f64,
) -> Result<(f64, Matrix)> {
    if teacher_logits.shape() != student_logits.shape() {
        return Err(Error::shape(
            "kl_logits_loss",
            teacher_logits.shape_string(),
            student_logits.shape_string(),
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::arg(
            "kl_logits_loss",
            format!("temperature must be positive, got {temperature}"),
        ));
    }
    let (rows, cols) = teacher_logits.shape();
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(rows, cols);
    let inv_rows = 1.0 / rows as f64;
    for i in 0..rows {
        let t_scaled: Vec<f64> = teacher_logits.row(i).iter().map(|&z| z / temperature).collect();
        let s_scaled: Vec<f64> = student_logits.row(i).iter().map(|&z| z / temperature).collect();
        let p = softmax(&t_scaled);
        let q = softmax(&s_scaled);
        let mut kl = 0.0;
        let g_row = grad.row_mut(i);
        for j in 0..cols {
            if p[j] > 0.0 {
                kl += p[j] * (p[j].ln() - q[j].ln());
            }
            g_row[j] = (q[j] - p[j]) / temperature * inv_rows;
        }
        loss += kl * inv_rows;
    }
    Ok((loss, grad))
}

/// Hidden-state distillation: elementwise mean squared error, with the
/// encoder and decoder contributions each mean-reduced and then added.
pub fn hidden_mse_loss(
    teacher_enc: &Matrix,
    teacher_dec: &Matrix,
    student_enc: &Matrix,
    student_dec: &Matrix,
) -> Result<f64> {
    Ok(hidden_mse_loss_with_grads(teacher_enc, teacher_dec, student_enc, student_dec)?.0)
}

/// As [`hidden_mse_loss`], also returning gradients w.r.t. the student
/// encoder and decoder hidden states.
pub fn hidden_mse_loss_with_grads(
    teacher_enc: &Matrix,
    teacher_dec: &Matrix,
    student_enc: &Matrix,
    student_dec: &Matrix,
) -> Result<(f64, Matrix, Matrix)> {
    let part = |t: &Matrix, s: &Matrix, which: &'static str| -> Result<(f64, Matrix)> {
        if t.shape() != s.shape() {
            return Err(Error::shape(which, t.shape_string(), s.shape_string()));
        }
        let numel = (t.rows() * t.cols()) as f64;
        let mut loss = 0.0;
        let mut grad = Matrix::zeros(t.rows(), t.cols());
        for (idx, g) in grad.data_mut().iter_mut().enumerate() {
            let diff = s.data()[idx] - t.data()[idx];
            loss += diff * diff / numel;
            *g = 2.0 * diff / numel;
        }
        Ok((loss, grad))
    };
    let (enc_loss, enc_grad) = part(teacher_enc, student_enc, "hidden_mse_loss(encoder)")?;
    let (dec_loss, dec_grad) = part(teacher_dec, student_dec, "hidden_mse_loss(decoder)")?;
    Ok((enc_loss + dec_loss, enc_grad, dec_grad))
}

/// `l_plm + lambda * (l_logits + l_hidden)`.
pub fn total_loss(l_plm: f64, l_logits: f64, l_hidden: f64, lambda: f64) -> f64 {
    l_plm + lambda * (l_logits + l_hidden)
}

/// Ablation variant: mean squared distance between the teacher prompt and
/// the composed student prompt.
pub fn prompt_distance_loss(teacher_prompt: &VanillaPrompt, student_composed: &Matrix) -> Result<f64> {
    Ok(prompt_distance_loss_with_grad(teacher_prompt, student_composed)?.0)
}

/// As [`prompt_distance_loss`], also returning the gradient w.r.t. the
/// composed student prompt.
pub fn prompt_distance_loss_with_grad(
    teacher_prompt: &VanillaPrompt,
    student_composed: &Matrix,
) -> Result<(f64, Matrix)> {
    let t = &teacher_prompt.matrix;
    if t.shape() != student_composed.shape() {
        return Err(Error::shape(
            "prompt_distance_loss",
            t.shape_string(),
            student_composed.shape_string(),
        ));
    }
    let numel = (t.rows() * t.cols()) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(t.rows(), t.cols());
    for (idx, g) in grad.data_mut().iter_mut().enumerate() {
        let diff = student_composed.data()[idx] - t.data()[idx];
        loss += diff * diff / numel;
        *g = 2.0 * diff / numel;
    }
    Ok((loss, grad))
}

/// Evaluates the configured objective on one task's batch and chains the
/// gradient onto the decomposition.
///
/// Runs the student forward for every example, the teacher forward only when
/// a distillation term needs it, and accumulates everything into a single
/// gradient for the shared prompt and this task's vectors. Losses are means
/// over the batch; omitted terms contribute zero loss and zero gradient.
pub fn batch_objective(
    model: &FrozenModel,
    shared: &SharedPrompt,
    factors: &TaskFactors,
    teacher_prompt: Option<&VanillaPrompt>,
    examples: &[(Vec<usize>, Vec<usize>)],
    cfg: &DistillConfig,
) -> Result<DistillationBatchResult> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::arg("batch_objective", "empty batch"));
    }
    let teacher = if cfg.needs_teacher() {
        Some(teacher_prompt.ok_or_else(|| {
            Error::arg(
                "batch_objective",
                format!("task {} has no teacher prompt", factors.task_id),
            )
        })?)
    } else {
        None
    };

    let composed = compose(shared, factors)?;
    let (l, d) = composed.shape();
    let mut d_composed = Matrix::zeros(l, d);
    let mut l_plm = 0.0;
    let mut l_logits = 0.0;
    let mut l_hidden = 0.0;

    for (src, tgt) in examples {
        let trace = forward(model, &composed, src, tgt)?;
        let (plm, plm_grad) = task_loss_with_grad(&trace, tgt)?;
        l_plm += plm;

        let mut dlogits = plm_grad;
        let mut dh_enc = Matrix::zeros(trace.enc_hidden.rows(), trace.enc_hidden.cols());
        let mut dh_dec = Matrix::zeros(trace.dec_hidden.rows(), trace.dec_hidden.cols());

        if cfg.use_logits_kl || cfg.use_hidden_mse {
            let teacher = teacher.expect("validated above");
            let t_trace = forward(model, &teacher.matrix, src, tgt)?;
            if cfg.use_logits_kl {
                let (kl, kl_grad) =
                    kl_logits_loss_with_grad(&t_trace.logits, &trace.logits, cfg.temperature)?;
                l_logits += kl;
                dlogits.add_scaled(&kl_grad, cfg.lambda)?;
            }
            if cfg.use_hidden_mse {
                let (mse, enc_grad, dec_grad) = hidden_mse_loss_with_grads(
                    &t_trace.enc_hidden,
                    &t_trace.dec_hidden,
                    &trace.enc_hidden,
                    &trace.dec_hidden,
                )?;
                l_hidden += mse;
                dh_enc.add_scaled(&enc_grad, cfg.lambda)?;
                dh_dec.add_scaled(&dec_grad, cfg.lambda)?;
            }
        }

        let dprompt = backward_to_prompt(model, &trace, &dlogits, &dh_enc, &dh_dec)?;
        d_composed.add_scaled(&dprompt, 1.0)?;
    }

    let n = examples.len() as f64;
    l_plm /= n;
    l_logits /= n;
    l_hidden /= n;
    for g in d_composed.data_mut() {
        *g /= n;
    }

    // The prompt-distance term does not depend on the batch contents, so it
    // enters once, outside the example loop.
    let mut l_prompt_distance = 0.0;
    let l_total = if cfg.use_prompt_distance {
        let teacher = teacher.expect("validated above");
        let (pd, pd_grad) = prompt_distance_loss_with_grad(teacher, &composed)?;
        l_prompt_distance = pd;
        d_composed.add_scaled(&pd_grad, cfg.lambda)?;
        l_plm + cfg.lambda * pd
    } else {
        total_loss(l_plm, l_logits, l_hidden, cfg.lambda)
    };

    let (grad_shared, du, dv) = chain_gradients(&d_composed, shared, factors)?;
    let mut grad_factors = BTreeMap::new();
    grad_factors.insert(factors.task_id.clone(), (du, dv));

    Ok(DistillationBatchResult {
        l_plm,
        l_logits,
        l_hidden,
        l_prompt_distance,
        l_total,
        grad_shared,
        grad_factors,
    })
}
