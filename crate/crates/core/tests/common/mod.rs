//! Shared test support: the finite-difference oracle and random
//! end-to-end pipeline construction.
//!
//! The oracle only ever uses forward VALUES (central differences with
//! h = 1e-5); it never touches the backward pass it is checking.
#![allow(dead_code)] // each test target uses its own subset

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mixprompt::autodiff::{Graph, Tensor};
use mixprompt::model::{forward_loss, ForwardOpts, ModelState, Routing, TextSource};
use mixprompt::prompts::{PromptBank, WeightRouter};
use mixprompt::synth::{EncoderDims, FrozenEncoders, LabeledBatch};

pub const FD_H: f64 = 1e-5;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central difference of `f` along one coordinate of `data`.
pub fn central_diff(data: &mut [f64], i: usize, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let saved = data[i];
    data[i] = saved + FD_H;
    let up = f(data);
    data[i] = saved - FD_H;
    let down = f(data);
    data[i] = saved;
    (up - down) / (2.0 * FD_H)
}

/// A random small end-to-end pipeline: a fresh world, random parameters,
/// one batch of images with labels.
pub struct RandomPipeline {
    pub enc: FrozenEncoders,
    pub state: ModelState,
    pub batch: LabeledBatch,
    pub logit_scale: f64,
}

/// Dims drawn within the budget B≤4, N≤4, K≤4, M≤4, d≤8.
pub fn random_pipeline(seed: u64) -> RandomPipeline {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.gen_range(1..=4);
    let n = rng.gen_range(2..=4);
    let k = rng.gen_range(1..=4);
    let m = rng.gen_range(1..=4);
    let d = rng.gen_range(3..=8);
    let e = rng.gen_range(2..=6);
    let h = rng.gen_range(3..=8);
    let hr = rng.gen_range(2..=4);
    let p = rng.gen_range(4..=10);

    let dims = EncoderDims { image_dim: p, hidden_dim: h, feature_dim: d, token_dim: e };
    let enc = FrozenEncoders::new(dims, m, n, rng.gen());
    let bank = PromptBank::init(k, m, e, rng.gen()).unwrap();
    // inflate the contexts so their gradient path carries signal
    let mut bank = bank;
    for ctx in bank.contexts_mut() {
        for v in ctx.data_mut() {
            *v *= 20.0;
        }
    }
    let router = WeightRouter::init(d, hr, k, 0.4 + rng.gen::<f64>(), rng.gen()).unwrap();
    let routing = if rng.gen_bool(0.8) { Routing::Learned } else { Routing::Uniform };
    let state = ModelState { bank, router, routing };

    let images = Tensor::new(
        vec![b, p],
        (0..b * p).map(|_| rng.gen::<f64>()).collect(),
    )
    .unwrap();
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n)).collect();
    let batch = LabeledBatch::new(images, labels, n).unwrap();
    let logit_scale = 1.0 + 9.0 * rng.gen::<f64>();
    RandomPipeline { enc, state, batch, logit_scale }
}

/// Forward value of the full mixture loss for the pipeline.
pub fn pipeline_loss(p: &RandomPipeline) -> f64 {
    let mut g = Graph::new();
    let opts = ForwardOpts {
        logit_scale: p.logit_scale,
        trainable_params: true,
        trainable_images: true,
        text: TextSource::Encode,
    };
    let vars = forward_loss(&mut g, &p.enc, &p.state, &p.batch, &opts).unwrap();
    g.value(vars.loss).item()
}

/// Max relative error between analytic gradients (one backward pass) and
/// central differences, across prompt contexts, router parameters and
/// image pixels.
pub fn max_grad_error(p: &mut RandomPipeline) -> f64 {
    let mut g = Graph::new();
    let opts = ForwardOpts {
        logit_scale: p.logit_scale,
        trainable_params: true,
        trainable_images: true,
        text: TextSource::Encode,
    };
    let vars = forward_loss(&mut g, &p.enc, &p.state, &p.batch, &opts).unwrap();
    g.backward(vars.loss).unwrap();

    let ctx_grads: Vec<Vec<f64>> =
        vars.contexts.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
    let router_grads: Option<Vec<Vec<f64>>> = vars
        .router
        .map(|rv| [rv.w1, rv.b1, rv.w2, rv.b2].iter().map(|&v| g.grad(v).unwrap().to_vec()).collect());
    let image_grads = g.grad(vars.images).unwrap().to_vec();

    let mut worst = 0.0f64;

    // contexts
    for ki in 0..p.state.bank.prompt_count() {
        for i in 0..ctx_grads[ki].len() {
            let analytic = ctx_grads[ki][i];
            let saved = p.state.bank.contexts()[ki].data()[i];
            p.state.bank.contexts_mut()[ki].data_mut()[i] = saved + FD_H;
            let up = pipeline_loss(p);
            p.state.bank.contexts_mut()[ki].data_mut()[i] = saved - FD_H;
            let down = pipeline_loss(p);
            p.state.bank.contexts_mut()[ki].data_mut()[i] = saved;
            worst = worst.max(relative_error(analytic, (up - down) / (2.0 * FD_H)));
        }
    }

    // router parameters (only on the learned path)
    if let Some(rg) = &router_grads {
        if p.state.routing == Routing::Learned {
            for pi in 0..4 {
                for i in 0..rg[pi].len() {
                    let analytic = rg[pi][i];
                    let saved = p.state.router.params()[pi].data()[i];
                    p.state.router.params_mut()[pi].data_mut()[i] = saved + FD_H;
                    let up = pipeline_loss(p);
                    p.state.router.params_mut()[pi].data_mut()[i] = saved - FD_H;
                    let down = pipeline_loss(p);
                    p.state.router.params_mut()[pi].data_mut()[i] = saved;
                    worst = worst.max(relative_error(analytic, (up - down) / (2.0 * FD_H)));
                }
            }
        }
    }

    // image pixels
    for i in 0..image_grads.len() {
        let analytic = image_grads[i];
        let saved = p.batch.images.data()[i];
        p.batch.images.data_mut()[i] = saved + FD_H;
        let up = pipeline_loss(p);
        p.batch.images.data_mut()[i] = saved - FD_H;
        let down = pipeline_loss(p);
        p.batch.images.data_mut()[i] = saved;
        worst = worst.max(relative_error(analytic, (up - down) / (2.0 * FD_H)));
    }

    worst
}
