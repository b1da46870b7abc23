//! Alternating adversarial training: inner maximization by PGD on the
//! images, outer plain gradient descent on the router and the prompt
//! contexts, with text features built once per minibatch and shared by
//! every image in it.
//!
//! Both parameter groups are updated from the same backward pass, router
//! first, then contexts. The optimizer is the literal descent rule; a
//! cosine learning-rate schedule is available behind config but off by
//! default.

use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, AttackConfig};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::eval::{clean_accuracy, robust_accuracy};
use crate::model::{forward_loss, ForwardOpts, ModelState, Routing, TextSource};
use crate::objective::DEFAULT_LOGIT_SCALE;
use crate::prompts::{PromptBank, WeightRouter};
use crate::seeding::derive;
use crate::synth::{Dataset, DatasetSpec, EncoderDims, FrozenEncoders, LabeledBatch};

/// The three named seeds all randomness flows from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedBlock {
    pub data: u64,
    pub init: u64,
    pub attack: u64,
}

impl Default for SeedBlock {
    fn default() -> Self {
        SeedBlock { data: 17, init: 42, attack: 4242 }
    }
}

impl SeedBlock {
    /// Shifted block for repeated runs on a fixed world: the data seed
    /// stays put, initialization and attack seeds move. Method
    /// comparisons then see the same benchmark in every repetition.
    pub fn offset_run(&self, by: u64) -> SeedBlock {
        SeedBlock {
            data: self.data,
            init: self.init.wrapping_add(by),
            attack: self.attack.wrapping_add(by),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// Training hyperparameters, including the inner-maximization attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    /// number of prompts K
    pub prompt_count: usize,
    /// learnable context length M
    pub ctx_len: usize,
    /// router bottleneck width; defaults to feature_dim / 2
    pub router_hidden: Option<usize>,
    /// router temperature
    pub tau_w: f64,
    pub logit_scale: f64,
    pub routing: Routing,
    pub attack: AttackConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 2.0,
            schedule: LrSchedule::Constant,
            prompt_count: 8,
            ctx_len: 16,
            router_hidden: None,
            tau_w: 0.7,
            logit_scale: DEFAULT_LOGIT_SCALE,
            routing: Routing::Learned,
            attack: AttackConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be >= 1".to_string()));
        }
        if self.lr < 0.0 {
            return Err(Error::invalid(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive".to_string()));
        }
        self.attack.validate()
    }

    pub fn router_hidden_for(&self, feature_dim: usize) -> usize {
        self.router_hidden.unwrap_or((feature_dim / 2).max(1))
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// A dataset and the frozen encoders drawn from the same world seed.
#[derive(Debug, Clone)]
pub struct World {
    pub dataset: Dataset,
    pub encoders: FrozenEncoders,
}

impl World {
    pub fn build(spec: &DatasetSpec, dims: EncoderDims, ctx_len: usize) -> Result<World> {
        if dims.image_dim != spec.image_dim {
            return Err(Error::invalid(format!(
                "encoder image_dim {} does not match dataset image_dim {}",
                dims.image_dim, spec.image_dim
            )));
        }
        let dataset = crate::synth::generate_dataset(spec)?;
        let encoders = FrozenEncoders::new(dims, ctx_len, spec.n_classes, spec.seed);
        Ok(World { dataset, encoders })
    }
}

/// One line of the training record file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub clean_acc: f64,
    /// accuracy under the training attack on the test split
    pub robust_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ModelState,
    pub step: u64,
    pub history: Vec<EpochRecord>,
}

pub struct EpochStats {
    pub step_losses: Vec<f64>,
    pub mean_loss: f64,
}

/// Fresh model for a config: bank and router drawn from independent
/// substreams of the init seed, so presence of one never shifts the other.
pub fn init_model(cfg: &TrainConfig, enc: &FrozenEncoders, init_seed: u64) -> Result<ModelState> {
    let bank = PromptBank::init(cfg.prompt_count, cfg.ctx_len, enc.dims.token_dim, init_seed)?;
    let router = WeightRouter::init(
        enc.dims.feature_dim,
        cfg.router_hidden_for(enc.dims.feature_dim),
        cfg.prompt_count,
        cfg.tau_w,
        init_seed,
    )?;
    Ok(ModelState { bank, router, routing: cfg.routing })
}

/// One pass over the training split: per minibatch, attack at the current
/// parameters, rebuild text features once, and take one descent step on
/// the router then the contexts from a single backward pass.
pub fn train_epoch(
    model: &mut ModelState,
    world: &World,
    cfg: &TrainConfig,
    seeds: &SeedBlock,
    epoch: usize,
    step_counter: &mut u64,
) -> Result<EpochStats> {
    let train = &world.dataset.train;
    let n_classes = world.dataset.spec.n_classes;
    let lr = cfg.lr_at(epoch);
    let mut step_losses = Vec::new();

    let mut start = 0;
    let mut batch_idx = 0u64;
    while start < train.len() {
        let len = cfg.batch_size.min(train.len() - start);
        let minibatch = train.slice(start, len, n_classes)?;

        let attack_seed = derive(seeds.attack, (epoch as u64) << 24 | batch_idx);
        let adv_images =
            pgd(&world.encoders, model, &minibatch, &cfg.attack, cfg.logit_scale, attack_seed)?;
        let adv_batch = LabeledBatch::new(adv_images, minibatch.labels.clone(), n_classes)?;

        let mut g = Graph::new();
        let opts = ForwardOpts {
            logit_scale: cfg.logit_scale,
            trainable_params: true,
            trainable_images: false,
            text: TextSource::Encode,
        };
        let vars = forward_loss(&mut g, &world.encoders, model, &adv_batch, &opts)?;
        let loss = g.value(vars.loss).item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: *step_counter, checksum: model.checksum() });
        }
        g.backward(vars.loss)?;

        // router first, then contexts, both from this backward pass
        if let Some(rv) = vars.router {
            let grads: Vec<Vec<f64>> = [rv.w1, rv.b1, rv.w2, rv.b2]
                .iter()
                .map(|&v| g.grad(v).expect("router leaf requires grad").to_vec())
                .collect();
            for (param, grad) in model.router.params_mut().into_iter().zip(&grads) {
                for (p, &gr) in param.data_mut().iter_mut().zip(grad) {
                    *p -= lr * gr;
                }
            }
        }
        let ctx_grads: Vec<Vec<f64>> = vars
            .contexts
            .iter()
            .map(|&v| g.grad(v).expect("context leaf requires grad").to_vec())
            .collect();
        for (ctx, grad) in model.bank.contexts_mut().iter_mut().zip(&ctx_grads) {
            for (p, &gr) in ctx.data_mut().iter_mut().zip(grad) {
                *p -= lr * gr;
            }
        }

        step_losses.push(loss);
        *step_counter += 1;
        start += len;
        batch_idx += 1;
    }

    let mean_loss = step_losses.iter().sum::<f64>() / step_losses.len().max(1) as f64;
    Ok(EpochStats { step_losses, mean_loss })
}

/// Run the full training loop and record one metrics line per epoch
/// (clean and training-attack accuracy on the test split).
pub fn fit(world: &World, cfg: &TrainConfig, seeds: &SeedBlock) -> Result<TrainState> {
    cfg.validate()?;
    let enc_checksum = world.encoders.checksum();
    let mut model = init_model(cfg, &world.encoders, seeds.init)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let stats = train_epoch(&mut model, world, cfg, seeds, epoch, &mut step)?;
        let clean = clean_accuracy(&world.encoders, &model, &world.dataset.test, cfg.logit_scale)?;
        let robust = robust_accuracy(
            &world.encoders,
            &model,
            &world.dataset.test,
            &cfg.attack,
            cfg.logit_scale,
            derive(seeds.attack, 0xEBA1 << 32 | epoch as u64),
        )?;
        history.push(EpochRecord { epoch, train_loss: stats.mean_loss, clean_acc: clean, robust_acc: robust });
    }
    debug_assert_eq!(world.encoders.checksum(), enc_checksum);
    Ok(TrainState { model, step, history })
}
