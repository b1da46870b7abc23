//! White-box L∞ attacks on the image: FGSM and multi-step PGD.
//!
//! The attacker differentiates the full mixture loss — through the frozen
//! encoders, the mixture aggregation and the weight router — but may only
//! perturb the image, staying inside the ε-ball around the clean input
//! and inside the [0,1] pixel box. Model parameters are read-only for the
//! duration of an attack; text features are encoded once per call and
//! injected as constants, since they do not depend on the image.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sign, Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{forward_loss, ForwardOpts, ModelState, TextSource};
use crate::prompts::text_features;
use crate::seeding::substream;
use crate::synth::{FrozenEncoders, LabeledBatch};

/// L∞ attack parameters. Pixels are clamped to [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// L∞ budget in pixel units
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
}

/// ε = 4/255, the default perturbation budget everywhere.
pub const DEFAULT_EPSILON: f64 = 4.0 / 255.0;

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig::train_default(DEFAULT_EPSILON)
    }
}

impl AttackConfig {
    /// Training attack: 3 steps of size 2ε/3, deterministic start.
    pub fn train_default(epsilon: f64) -> Self {
        AttackConfig { epsilon, steps: 3, step_size: 2.0 * epsilon / 3.0, random_start: false }
    }

    /// Evaluation attack: `steps` PGD iterations of size ε/4 from a
    /// random point in the ball.
    pub fn eval_default(epsilon: f64, steps: usize) -> Self {
        AttackConfig { epsilon, steps, step_size: epsilon / 4.0, random_start: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::invalid(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        // ε = 0 is the degenerate ball: the attack is the identity and the
        // step size is irrelevant
        if self.epsilon > 0.0 && self.steps > 0 && !(self.step_size > 0.0) {
            return Err(Error::invalid(format!(
                "step_size must be > 0 when steps > 0, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// Projected gradient ascent on the mixture loss. Returns the
/// adversarial images; the model and encoders are bit-unchanged.
pub fn pgd(
    enc: &FrozenEncoders,
    state: &ModelState,
    batch: &LabeledBatch,
    cfg: &AttackConfig,
    logit_scale: f64,
    seed: u64,
) -> Result<Tensor> {
    cfg.validate()?;
    let params_before = state.checksum();
    let clean = batch.images.data();

    if cfg.epsilon == 0.0 {
        return Ok(batch.images.clone());
    }

    // constant for the whole attack: prompts do not depend on the image
    let text_vals = text_features(&state.bank, enc)?;

    let mut adv = clean.to_vec();
    if cfg.random_start {
        let mut rng = substream(seed, 0);
        for (a, &x) in adv.iter_mut().zip(clean) {
            let delta = (rng.gen::<f64>() * 2.0 - 1.0) * cfg.epsilon;
            *a = (x + delta).clamp(0.0, 1.0);
        }
    }

    for _ in 0..cfg.steps {
        let adv_batch = LabeledBatch::new(
            Tensor::new(batch.images.shape().to_vec(), adv.clone())?,
            batch.labels.clone(),
            batch.onehot.shape()[1],
        )?;
        let mut g = Graph::new();
        let opts = ForwardOpts {
            logit_scale,
            trainable_params: false,
            trainable_images: true,
            text: TextSource::Precomputed(&text_vals),
        };
        let vars = forward_loss(&mut g, enc, state, &adv_batch, &opts)?;
        g.backward(vars.loss)?;
        let grad = g.grad(vars.images).expect("image leaf requires grad");
        for (i, a) in adv.iter_mut().enumerate() {
            let stepped = *a + cfg.step_size * sign(grad[i]);
            let projected = (stepped - clean[i]).clamp(-cfg.epsilon, cfg.epsilon) + clean[i];
            *a = projected.clamp(0.0, 1.0);
        }
    }

    // budget and box constraints hold for every emitted batch
    for (a, &x) in adv.iter().zip(clean) {
        assert!((a - x).abs() <= cfg.epsilon + 1e-9, "L-inf budget violated: |{a} - {x}|");
        assert!((0.0..=1.0).contains(a), "pixel out of box: {a}");
    }
    assert_eq!(state.checksum(), params_before, "attack mutated model parameters");

    Tensor::new(batch.images.shape().to_vec(), adv)
}

/// Single sign step of size ε: pgd with steps=1, step_size=ε and a
/// deterministic start.
pub fn fgsm(
    enc: &FrozenEncoders,
    state: &ModelState,
    batch: &LabeledBatch,
    epsilon: f64,
    logit_scale: f64,
    seed: u64,
) -> Result<Tensor> {
    let cfg = AttackConfig { epsilon, steps: 1, step_size: epsilon, random_start: false };
    pgd(enc, state, batch, &cfg, logit_scale, seed)
}
