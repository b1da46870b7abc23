//! The full differentiable pipeline: encode images, route, mix text
//! features, score with cosine logits, reduce to the cross-entropy loss.
//!
//! Every consumer — training updates, attacks, evaluation, gradient
//! checks — builds its forward pass through [`forward_loss`], so there is
//! exactly one definition of the objective.

use std::cell::Cell;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::objective::{scaled_cross_entropy, LossVars};
use crate::prompts::{mix, text_feature_graph, PromptBank, RouterVars, WeightRouter};
use crate::synth::{FrozenEncoders, LabeledBatch};

/// How mixture weights are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Routing {
    /// fixed 1/K weights for every image
    Uniform,
    /// conditional weight router on the image feature
    Learned,
}

/// Learnable state: the prompt bank and the router.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub bank: PromptBank,
    pub router: WeightRouter,
    pub routing: Routing,
}

impl ModelState {
    pub fn checksum(&self) -> u64 {
        self.bank.checksum() ^ self.router.checksum().rotate_left(17)
    }

    pub fn param_count(&self) -> usize {
        self.bank.param_count()
            + if self.routing == Routing::Learned { self.router.param_count() } else { 0 }
    }
}

/// Where the (K, N, d) text features come from.
pub enum TextSource<'a> {
    /// Build the encoding subgraph (differentiable w.r.t. contexts).
    /// Built once per graph and shared by every image in the batch.
    Encode,
    /// Inject precomputed values as a constant (attacks, evaluation).
    Precomputed(&'a Tensor),
}

pub struct ForwardOpts<'a> {
    pub logit_scale: f64,
    /// insert bank/router parameters as differentiable leaves
    pub trainable_params: bool,
    /// insert the image batch as a differentiable leaf (attack path)
    pub trainable_images: bool,
    pub text: TextSource<'a>,
}

/// Nodes of one forward pass.
pub struct ForwardVars {
    pub loss: Var,
    /// (B, N) raw cosine logits
    pub logits: Var,
    /// (B, N) class probabilities
    pub probs: Var,
    /// image leaf (B, p)
    pub images: Var,
    /// (B, d) image features
    pub image_feats: Var,
    /// (B, K) mixture weight rows
    pub weights: Var,
    /// context leaves when text was encoded in-graph (empty otherwise)
    pub contexts: Vec<Var>,
    /// router leaves when routing is learned and trainable
    pub router: Option<RouterVars>,
}

thread_local! {
    // graph construction is single-threaded by contract, so the
    // instrumentation is per thread
    static TEXT_GRAPH_BUILDS: Cell<u64> = const { Cell::new(0) };
}

/// Number of in-graph text-feature constructions on this thread since the
/// last reset. Each training minibatch must contribute exactly one.
pub fn text_graph_builds() -> u64 {
    TEXT_GRAPH_BUILDS.with(|c| c.get())
}

pub fn reset_text_graph_builds() {
    TEXT_GRAPH_BUILDS.with(|c| c.set(0));
}

fn detached(t: &Tensor) -> Tensor {
    let mut c = t.clone();
    c.set_requires_grad(false);
    c
}

/// Build the mixture classification loss for one batch.
pub fn forward_loss(
    g: &mut Graph,
    enc: &FrozenEncoders,
    state: &ModelState,
    batch: &LabeledBatch,
    opts: &ForwardOpts,
) -> Result<ForwardVars> {
    let k = state.bank.prompt_count();
    if state.routing == Routing::Learned && state.router.prompt_count != k {
        return Err(Error::invalid(format!(
            "router expects {} prompts, bank has {k}",
            state.router.prompt_count
        )));
    }

    let images = if opts.trainable_images {
        let mut t = batch.images.clone();
        t.set_requires_grad(true);
        g.leaf(&t)
    } else {
        g.constant(batch.images.clone())
    };
    let image_feats = enc.encode_image(g, images)?;

    let (features, contexts) = match &opts.text {
        TextSource::Encode => {
            TEXT_GRAPH_BUILDS.with(|c| c.set(c.get() + 1));
            if opts.trainable_params {
                let tf = text_feature_graph(g, &state.bank, enc)?;
                (tf.features, tf.contexts)
            } else {
                let mut detached_bank = state.bank.clone();
                for c in detached_bank.contexts_mut() {
                    c.set_requires_grad(false);
                }
                let tf = text_feature_graph(g, &detached_bank, enc)?;
                (tf.features, Vec::new())
            }
        }
        TextSource::Precomputed(values) => {
            let expect = [k, enc.n_classes, enc.dims.feature_dim];
            if values.shape() != expect {
                return Err(Error::shape(
                    "forward_loss",
                    format!("precomputed text features {:?}, want {expect:?}", values.shape()),
                ));
            }
            (g.constant((*values).clone()), Vec::new())
        }
    };

    let batch_size = batch.len();
    let (weights, router) = match state.routing {
        Routing::Uniform => {
            let w = Tensor::full(vec![batch_size, k], 1.0 / k as f64);
            (g.constant(w), None)
        }
        Routing::Learned => {
            let vars = if opts.trainable_params {
                state.router.leaves(g)
            } else {
                let params = state.router.params();
                RouterVars {
                    w1: g.constant(detached(params[0])),
                    b1: g.constant(detached(params[1])),
                    w2: g.constant(detached(params[2])),
                    b2: g.constant(detached(params[3])),
                }
            };
            let w = state.router.route(g, vars, image_feats)?;
            (w, opts.trainable_params.then_some(vars))
        }
    };

    let mixed = mix(g, features, weights)?;
    let logits = g.cosine_rows(image_feats, mixed)?;
    let onehot = g.constant(batch.onehot.clone());
    let LossVars { loss, logits, probs } = scaled_cross_entropy(g, logits, onehot, opts.logit_scale)?;

    Ok(ForwardVars { loss, logits, probs, images, image_feats, weights, contexts, router })
}
