//! Cosine-similarity cross-entropy classification loss.
//!
//! Logit (i, n) is the cosine between image feature i and its per-image
//! class-n text feature; the loss is the batch mean of the one-hot cross
//! entropy over softmax(logit_scale * logits). logit_scale = 1 is the
//! literal raw-cosine objective; larger values sharpen the softmax the
//! way a contrastive model's learned temperature does. Image features of
//! the frozen encoders cluster tightly, leaving cosine contrasts of a few
//! hundredths between classes, so the default scale is calibrated high.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_LOGIT_SCALE: f64 = 30.0;

/// Scalar loss plus the intermediate nodes callers usually inspect.
pub struct LossVars {
    pub loss: Var,
    /// (B, N) raw cosine logits
    pub logits: Var,
    /// (B, N) softmax(logit_scale * logits)
    pub probs: Var,
}

/// Cosine logits between (B, d) image features and (B, N, d) per-image
/// text features.
pub fn cosine_logits(g: &mut Graph, image_feats: Var, text_feats: Var) -> Result<Var> {
    g.cosine_rows(image_feats, text_feats)
}

/// Cross entropy of scaled cosine logits against one-hot targets.
pub fn scaled_cross_entropy(
    g: &mut Graph,
    logits: Var,
    onehot: Var,
    logit_scale: f64,
) -> Result<LossVars> {
    if !(logit_scale > 0.0) {
        return Err(Error::invalid(format!("logit_scale must be > 0, got {logit_scale}")));
    }
    let scaled = g.scale(logits, logit_scale);
    let probs = g.softmax_temp(scaled, 1.0)?;
    let loss = g.cross_entropy_mean(scaled, onehot)?;
    Ok(LossVars { loss, logits, probs })
}

/// Value-level view of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// (B, N) raw cosine logits
    pub logits: Tensor,
    /// (B, N) rows summing to one
    pub probabilities: Tensor,
}

impl LossOutput {
    pub fn from_graph(g: &Graph, vars: &LossVars) -> Self {
        LossOutput {
            loss: g.value(vars.loss).item(),
            logits: g.value(vars.logits).clone(),
            probabilities: g.value(vars.probs).clone(),
        }
    }
}

/// Row argmax of a (B, N) logit tensor.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let n = logits.shape()[1];
    logits
        .data()
        .chunks(n)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0
        })
        .collect()
}
