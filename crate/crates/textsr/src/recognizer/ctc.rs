//! CTC loss for the recognizer head.
//!
//! The alignment marginalization runs on the host in f64 log space (the
//! sequence lengths here are tiny), and the exact gradient with respect to
//! the logits — softmax minus the state posterior — is injected back into the
//! autodiff graph through a linear surrogate term. This keeps the dynamic
//! program out of the tensor graph while leaving both the loss value and the
//! gradient exact.

use candle_core::{DType, Tensor, D};
use candle_nn::ops;

use crate::error::{Error, Result};

/// Blank symbol index. Decode and loss both assume class 0.
pub const BLANK: usize = 0;

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Blank-separated extended label: blank, c1, blank, c2, ..., blank.
fn extend(label: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * label.len() + 1);
    ext.push(BLANK);
    for &c in label {
        ext.push(c);
        ext.push(BLANK);
    }
    ext
}

/// Fewest frames that can emit `label`: one per symbol plus a mandatory blank
/// between adjacent repeats.
fn min_frames(label: &[usize]) -> usize {
    let repeats = label.windows(2).filter(|w| w[0] == w[1]).count();
    label.len() + repeats
}

/// Forward/backward pass for one sequence.
///
/// `log_probs` is a T x K row-major log-softmax table. Returns the negative
/// log-likelihood of `label` and the per-frame class posterior gamma (T x K),
/// whose rows each sum to 1.
fn alpha_beta(
    log_probs: &[f64],
    t_len: usize,
    k: usize,
    label: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if let Some(&bad) = label.iter().find(|&&c| c == BLANK || c >= k) {
        return Err(Error::msg(format!(
            "label class {bad} invalid for alphabet of size {k}"
        )));
    }
    let need = min_frames(label);
    if need > t_len {
        return Err(Error::msg(format!(
            "label needs at least {need} frames but the sequence has {t_len}"
        )));
    }
    let ext = extend(label);
    let s = ext.len();
    let neg = f64::NEG_INFINITY;

    let mut alpha = vec![neg; t_len * s];
    alpha[0] = log_probs[ext[0]];
    if s > 1 {
        alpha[1] = log_probs[ext[1]];
    }
    for t in 1..t_len {
        for si in 0..s {
            let mut acc = alpha[(t - 1) * s + si];
            if si >= 1 {
                acc = log_sum_exp(acc, alpha[(t - 1) * s + si - 1]);
            }
            if si >= 2 && ext[si] != BLANK && ext[si] != ext[si - 2] {
                acc = log_sum_exp(acc, alpha[(t - 1) * s + si - 2]);
            }
            alpha[t * s + si] = acc + log_probs[t * k + ext[si]];
        }
    }
    let last = (t_len - 1) * s;
    let mut log_p = alpha[last + s - 1];
    if s > 1 {
        log_p = log_sum_exp(log_p, alpha[last + s - 2]);
    }
    if log_p == neg {
        return Err(Error::msg("label has no feasible alignment"));
    }

    // beta excludes the emission at its own frame, so alpha_t(s) + beta_t(s)
    // is the full log-mass of paths through state s at frame t.
    let mut beta = vec![neg; t_len * s];
    beta[last + s - 1] = 0.0;
    if s > 1 {
        beta[last + s - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for si in 0..s {
            let mut acc = beta[(t + 1) * s + si] + log_probs[(t + 1) * k + ext[si]];
            if si + 1 < s {
                acc = log_sum_exp(
                    acc,
                    beta[(t + 1) * s + si + 1] + log_probs[(t + 1) * k + ext[si + 1]],
                );
            }
            if si + 2 < s && ext[si + 2] != BLANK && ext[si + 2] != ext[si] {
                acc = log_sum_exp(
                    acc,
                    beta[(t + 1) * s + si + 2] + log_probs[(t + 1) * k + ext[si + 2]],
                );
            }
            beta[t * s + si] = acc;
        }
    }

    let mut gamma = vec![0f64; t_len * k];
    for t in 0..t_len {
        for si in 0..s {
            let v = alpha[t * s + si] + beta[t * s + si] - log_p;
            if v > neg {
                gamma[t * k + ext[si]] += v.exp();
            }
        }
    }
    Ok((-log_p, gamma))
}

/// Mean CTC negative log-likelihood over a batch.
///
/// `logits` is (B, L, K) raw scores; `labels[b]` lists the target class
/// indices for sample b (no blanks, each in 1..K). The returned scalar sits
/// in the autodiff graph: its value is the exact mean NLL and its gradient
/// with respect to `logits` is (softmax - gamma) / B.
pub fn ctc_loss_mean(logits: &Tensor, labels: &[Vec<usize>]) -> Result<Tensor> {
    let (b, l, k) = logits.dims3()?;
    if labels.len() != b {
        return Err(Error::msg(format!(
            "batch has {b} samples but {} labels",
            labels.len()
        )));
    }
    let host: Vec<f64> = ops::log_softmax(&logits.detach(), D::Minus1)?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;

    let mut total = 0.0;
    let mut coef = vec![0f64; b * l * k];
    for (bi, label) in labels.iter().enumerate() {
        let table = &host[bi * l * k..(bi + 1) * l * k];
        let (nll, gamma) = alpha_beta(table, l, k, label)?;
        total += nll;
        for i in 0..l * k {
            coef[bi * l * k + i] = (table[i].exp() - gamma[i]) / b as f64;
        }
    }
    let mean_nll = total / b as f64;

    let coef_t = Tensor::from_vec(coef, (b, l, k), logits.device())?.to_dtype(logits.dtype())?;
    let surr = (logits * &coef_t)?.sum_all()?;
    // Zero-valued but gradient-carrying, shifted to the true loss value.
    let loss = ((&surr - &surr.detach())? + mean_nll)?;
    Ok(loss)
}
