//! Learnable mixture prompt bank and the conditional weight router.
//!
//! The bank holds K independent context matrices; the full prompt for
//! class n under bank k is the M context tokens followed by the class
//! token (end position). The router is a two-layer tanh bottleneck whose
//! temperature softmax turns an image feature into a length-K mixture
//! weight row. Contexts and router weights are the only learnable
//! parameters anywhere in the pipeline.

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::seeding::{checksum_f64, substream};
use crate::synth::FrozenEncoders;

const SALT_BANK: u64 = 0;
const SALT_ROUTER: u64 = 1;

/// Standard deviation of fresh context entries.
pub const CONTEXT_INIT_STD: f64 = 0.02;

/// Placement of the class token inside a prompt. Only the end position is
/// implemented; front/middle are reserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassPosition {
    End,
}

/// K learnable context matrices of shape (M, e).
#[derive(Debug, Clone)]
pub struct PromptBank {
    pub ctx_len: usize,
    pub token_dim: usize,
    pub class_position: ClassPosition,
    contexts: Vec<Tensor>,
}

impl PromptBank {
    /// Draw a fresh bank of `k` contexts from N(0, 0.02²).
    pub fn init(k: usize, ctx_len: usize, token_dim: usize, seed: u64) -> Result<Self> {
        if k < 1 || ctx_len < 1 {
            return Err(Error::invalid(format!(
                "prompt bank needs K >= 1 and M >= 1, got K={k}, M={ctx_len}"
            )));
        }
        let mut rng = substream(seed, SALT_BANK);
        let normal = Normal::new(0.0, CONTEXT_INIT_STD).expect("positive std");
        let contexts = (0..k)
            .map(|_| {
                let data: Vec<f64> =
                    (0..ctx_len * token_dim).map(|_| normal.sample(&mut rng)).collect();
                let mut t = Tensor::new(vec![ctx_len, token_dim], data).expect("valid shape");
                t.set_requires_grad(true);
                t
            })
            .collect();
        Ok(PromptBank { ctx_len, token_dim, class_position: ClassPosition::End, contexts })
    }

    pub fn prompt_count(&self) -> usize {
        self.contexts.len()
    }

    pub fn contexts(&self) -> &[Tensor] {
        &self.contexts
    }

    pub fn contexts_mut(&mut self) -> &mut [Tensor] {
        &mut self.contexts
    }

    /// Total learnable scalars K * M * e.
    pub fn param_count(&self) -> usize {
        self.prompt_count() * self.ctx_len * self.token_dim
    }

    /// Insert the contexts as graph leaves (requires_grad preserved).
    pub fn leaves(&self, g: &mut Graph) -> Vec<Var> {
        self.contexts.iter().map(|c| g.leaf(c)).collect()
    }

    pub fn checksum(&self) -> u64 {
        checksum_f64(self.contexts.iter().flat_map(|t| t.data().iter().copied()))
    }
}

/// Per-image text features for every (bank, class) pair, encoded once per
/// minibatch: entry (k, n) = text_encode([context_k ; class_token_n]).
/// Returns a (K, N, d) tensor of values.
pub fn text_features(bank: &PromptBank, enc: &FrozenEncoders) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = text_feature_graph(&mut g, bank, enc)?;
    Ok(g.value(vars.features).clone())
}

/// Graph-level text features, differentiable w.r.t. the bank contexts.
pub struct TextFeatureVars {
    pub contexts: Vec<Var>,
    /// (K, N, d)
    pub features: Var,
}

pub fn text_feature_graph(
    g: &mut Graph,
    bank: &PromptBank,
    enc: &FrozenEncoders,
) -> Result<TextFeatureVars> {
    if bank.token_dim != enc.dims.token_dim || bank.ctx_len != enc.ctx_len {
        return Err(Error::shape(
            "text_features",
            format!(
                "bank (M={}, e={}) does not match encoder (M={}, e={})",
                bank.ctx_len, bank.token_dim, enc.ctx_len, enc.dims.token_dim
            ),
        ));
    }
    let contexts = bank.leaves(g);
    let class_tokens = g.constant(enc.class_tokens().clone());
    let rows = g.prompt_rows(&contexts, class_tokens)?;
    let flat = enc.encode_token_rows(g, rows)?;
    let features = g.reshape(
        flat,
        vec![bank.prompt_count(), enc.n_classes, enc.dims.feature_dim],
    )?;
    Ok(TextFeatureVars { contexts, features })
}

/// Two affine layers with a tanh bottleneck and a temperature softmax
/// head; maps a (B, d) feature batch to (B, K) mixture weight rows.
#[derive(Debug, Clone)]
pub struct WeightRouter {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub prompt_count: usize,
    pub temperature: f64,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// Graph leaves of one router instance.
#[derive(Debug, Clone, Copy)]
pub struct RouterVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl WeightRouter {
    pub fn init(
        feature_dim: usize,
        hidden_dim: usize,
        prompt_count: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::invalid(format!("router temperature must be > 0, got {temperature}")));
        }
        let mut rng = substream(seed, SALT_ROUTER);
        let mut draw = |shape: Vec<usize>, fan_in: usize| {
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = (0..numel).map(|_| normal.sample(&mut rng)).collect();
            let mut t = Tensor::new(shape, data).expect("valid shape");
            t.set_requires_grad(true);
            t
        };
        let w1 = draw(vec![feature_dim, hidden_dim], feature_dim);
        let b1 = draw(vec![hidden_dim], feature_dim);
        // zero head: routing starts exactly uniform and departs from 1/K
        // only as the gate learns
        let mut zero = |shape: Vec<usize>| {
            let mut t = Tensor::zeros(shape);
            t.set_requires_grad(true);
            t
        };
        let w2 = zero(vec![hidden_dim, prompt_count]);
        let b2 = zero(vec![prompt_count]);
        Ok(WeightRouter { feature_dim, hidden_dim, prompt_count, temperature, w1, b1, w2, b2 })
    }

    /// Router with all weights and biases zero; routes every image to the
    /// uniform 1/K row.
    pub fn zeros(feature_dim: usize, hidden_dim: usize, prompt_count: usize, temperature: f64) -> Self {
        let mk = |shape: Vec<usize>| {
            let mut t = Tensor::zeros(shape);
            t.set_requires_grad(true);
            t
        };
        WeightRouter {
            feature_dim,
            hidden_dim,
            prompt_count,
            temperature,
            w1: mk(vec![feature_dim, hidden_dim]),
            b1: mk(vec![hidden_dim]),
            w2: mk(vec![hidden_dim, prompt_count]),
            b2: mk(vec![prompt_count]),
        }
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn checksum(&self) -> u64 {
        checksum_f64(self.params().iter().flat_map(|t| t.data().iter().copied()))
    }

    pub fn leaves(&self, g: &mut Graph) -> RouterVars {
        RouterVars { w1: g.leaf(&self.w1), b1: g.leaf(&self.b1), w2: g.leaf(&self.w2), b2: g.leaf(&self.b2) }
    }

    /// Raw logits: (B, d) -> (B, K).
    pub fn logits(&self, g: &mut Graph, vars: RouterVars, features: Var) -> Result<Var> {
        let shape = g.value(features).shape();
        if shape.len() != 2 || shape[1] != self.feature_dim {
            return Err(Error::shape(
                "route",
                format!("want (B,{}), got {shape:?}", self.feature_dim),
            ));
        }
        let a1 = g.matmul(features, vars.w1)?;
        let a1 = g.add_bias(a1, vars.b1)?;
        let h = g.tanh(a1);
        let a2 = g.matmul(h, vars.w2)?;
        g.add_bias(a2, vars.b2)
    }

    /// Mixture weight rows softmax(logits / temperature): (B, d) -> (B, K),
    /// rows summing to one; differentiable w.r.t. both router parameters
    /// and the incoming features.
    pub fn route(&self, g: &mut Graph, vars: RouterVars, features: Var) -> Result<Var> {
        let logits = self.logits(g, vars, features)?;
        g.softmax_temp(logits, self.temperature)
    }
}

/// Weighted mixture of per-bank text features: (K, N, d) features and
/// (B, K) weight rows give (B, N, d) per-image class features. Exact
/// weighted sum over k, linear in both arguments.
pub fn mix(g: &mut Graph, features: Var, weights: Var) -> Result<Var> {
    let sf = g.value(features).shape().to_vec();
    let sw = g.value(weights).shape().to_vec();
    if sf.len() != 3 || sw.len() != 2 || sw[1] != sf[0] {
        return Err(Error::shape(
            "mix",
            format!("want (K,N,d) features with (B,K) weights, got {sf:?} and {sw:?}"),
        ));
    }
    let (k, n, d) = (sf[0], sf[1], sf[2]);
    let flat = g.reshape(features, vec![k, n * d])?;
    let mixed = g.matmul(weights, flat)?;
    g.reshape(mixed, vec![sw[0], n, d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::EncoderDims;

    fn small_enc(ctx_len: usize) -> FrozenEncoders {
        FrozenEncoders::new(
            EncoderDims { image_dim: 8, hidden_dim: 6, feature_dim: 4, token_dim: 3 },
            ctx_len,
            5,
            21,
        )
    }

    #[test]
    fn bank_init_is_seeded_and_counted() {
        let a = PromptBank::init(8, 16, 16, 3).unwrap();
        let b = PromptBank::init(8, 16, 16, 3).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.param_count(), 2048);
        let c = PromptBank::init(8, 16, 16, 4).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn bank_init_std_near_nominal() {
        let bank = PromptBank::init(8, 16, 16, 7).unwrap();
        let all: Vec<f64> = bank.contexts().iter().flat_map(|t| t.data().to_vec()).collect();
        let mean: f64 = all.iter().sum::<f64>() / all.len() as f64;
        let var: f64 = all.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / all.len() as f64;
        let std = var.sqrt();
        assert!((std - CONTEXT_INIT_STD).abs() < 0.002, "std = {std}");
    }

    #[test]
    fn text_features_match_direct_encoding_for_k1() {
        let enc = small_enc(2);
        let bank = PromptBank::init(1, 2, 3, 5).unwrap();
        let feats = text_features(&bank, &enc).unwrap();
        assert_eq!(feats.shape(), &[1, 5, 4]);
        for n in 0..5 {
            let mut tokens = Tensor::zeros(vec![3, 3]);
            tokens.data_mut()[..6].copy_from_slice(bank.contexts()[0].data());
            tokens.data_mut()[6..].copy_from_slice(&enc.class_tokens().data()[n * 3..(n + 1) * 3]);
            let direct = enc.encode_tokens(&tokens).unwrap();
            let got = &feats.data()[n * 4..(n + 1) * 4];
            for (a, b) in got.iter().zip(direct.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn text_features_recompute_bit_identical() {
        let enc = small_enc(2);
        let bank = PromptBank::init(3, 2, 3, 5).unwrap();
        let a = text_features(&bank, &enc).unwrap();
        let b = text_features(&bank, &enc).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn bank_encoder_dim_mismatch_fails() {
        let enc = small_enc(2);
        let bank = PromptBank::init(2, 3, 3, 5).unwrap(); // wrong M
        assert!(text_features(&bank, &enc).is_err());
    }

    #[test]
    fn zero_router_routes_uniformly() {
        let router = WeightRouter::zeros(4, 2, 5, 0.7);
        let mut g = Graph::new();
        let vars = router.leaves(&mut g);
        let feats = g.leaf(&Tensor::new(vec![3, 4], vec![0.3; 12]).unwrap());
        let w = router.route(&mut g, vars, feats).unwrap();
        for &v in g.value(w).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn huge_temperature_degenerates_to_uniform() {
        let router = WeightRouter::init(4, 2, 5, 1e6, 3).unwrap();
        let mut g = Graph::new();
        let vars = router.leaves(&mut g);
        let feats = g.leaf(&Tensor::new(vec![2, 4], vec![0.9, -0.2, 0.4, 0.1, -1.0, 0.3, 0.0, 2.0]).unwrap());
        let w = router.route(&mut g, vars, feats).unwrap();
        for &v in g.value(w).data() {
            assert!((v - 0.2).abs() < 1e-6);
        }
    }

    #[test]
    fn hand_set_logits_match_reference_softmax() {
        // zero weights, head bias [1, 2], temperature 0.7
        let mut router = WeightRouter::zeros(4, 2, 2, 0.7);
        router.params_mut()[3].data_mut().copy_from_slice(&[1.0, 2.0]);
        let mut g = Graph::new();
        let vars = router.leaves(&mut g);
        let feats = g.leaf(&Tensor::new(vec![1, 4], vec![0.5; 4]).unwrap());
        let w = router.route(&mut g, vars, feats).unwrap();
        let d = g.value(w).data();
        assert!((d[0] - 0.19332).abs() < 1e-5, "{d:?}");
        assert!((d[1] - 0.80668).abs() < 1e-5, "{d:?}");
    }

    #[test]
    fn route_rows_sum_to_one_and_reject_bad_temperature() {
        assert!(WeightRouter::init(4, 2, 3, 0.0, 1).is_err());
        let router = WeightRouter::init(4, 2, 3, 0.7, 1).unwrap();
        let mut g = Graph::new();
        let vars = router.leaves(&mut g);
        let feats = g.leaf(&Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64).cos()).collect()).unwrap());
        let w = router.route(&mut g, vars, feats).unwrap();
        for r in 0..3 {
            let s: f64 = g.value(w).data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mix_selects_and_averages() {
        let mut g = Graph::new();
        let f = g.leaf(&Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]).unwrap());
        // one-hot on bank 1, then an even blend
        let w = g.leaf(&Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.5, 0.5]).unwrap());
        let m = mix(&mut g, f, w).unwrap();
        assert_eq!(g.value(m).shape(), &[2, 2, 2]);
        assert_eq!(&g.value(m).data()[..4], &[10.0, 20.0, 30.0, 40.0]);
        assert_eq!(&g.value(m).data()[4..], &[5.5, 11.0, 16.5, 22.0]);
    }

    #[test]
    fn mix_k1_is_identity_for_any_weights() {
        let mut g = Graph::new();
        let f = g.leaf(&Tensor::new(vec![1, 2, 3], (0..6).map(|i| i as f64).collect()).unwrap());
        let w = g.leaf(&Tensor::new(vec![4, 1], vec![1.0; 4]).unwrap());
        let m = mix(&mut g, f, w).unwrap();
        for i in 0..4 {
            assert_eq!(&g.value(m).data()[i * 6..(i + 1) * 6], g.value(f).data());
        }
    }

    #[test]
    fn mix_is_bilinear() {
        let fdata: Vec<f64> = (0..12).map(|i| (i as f64 * 0.61).sin()).collect();
        let wdata = vec![0.3, 0.7, 0.9, 0.1];
        let eval = |fd: &[f64], wd: &[f64]| -> Vec<f64> {
            let mut g = Graph::new();
            let f = g.leaf(&Tensor::new(vec![2, 3, 2], fd.to_vec()).unwrap());
            let w = g.leaf(&Tensor::new(vec![2, 2], wd.to_vec()).unwrap());
            let m = mix(&mut g, f, w).unwrap();
            g.value(m).data().to_vec()
        };
        let base = eval(&fdata, &wdata);
        let scaled = eval(&fdata.iter().map(|x| 3.0 * x).collect::<Vec<_>>(), &wdata);
        for (a, b) in scaled.iter().zip(&base) {
            assert!((a - 3.0 * b).abs() < 1e-12);
        }
        let f2: Vec<f64> = (0..12).map(|i| (i as f64 * 0.23).cos()).collect();
        let sum_eval = eval(&fdata.iter().zip(&f2).map(|(a, b)| a + b).collect::<Vec<_>>(), &wdata);
        let separate: Vec<f64> = eval(&fdata, &wdata)
            .iter()
            .zip(eval(&f2, &wdata))
            .map(|(a, b)| a + b)
            .collect();
        for (a, b) in sum_eval.iter().zip(&separate) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mix_commutes_with_class_permutation() {
        // permuting the class axis of the features permutes the output
        // classes the same way; the weights never see the class index
        let fdata: Vec<f64> = (0..24).map(|i| (i as f64 * 0.17).sin()).collect();
        let wdata = vec![0.2, 0.8, 0.6, 0.4];
        let (k, n, d) = (2, 3, 4);
        let perm = [2usize, 0, 1];
        let mut fperm = vec![0.0; 24];
        for ki in 0..k {
            for ni in 0..n {
                let src = &fdata[(ki * n + ni) * d..(ki * n + ni + 1) * d];
                fperm[(ki * n + perm[ni]) * d..(ki * n + perm[ni] + 1) * d].copy_from_slice(src);
            }
        }
        let eval = |fd: &[f64]| -> Vec<f64> {
            let mut g = Graph::new();
            let f = g.leaf(&Tensor::new(vec![k, n, d], fd.to_vec()).unwrap());
            let w = g.leaf(&Tensor::new(vec![2, k], wdata.clone()).unwrap());
            let m = mix(&mut g, f, w).unwrap();
            g.value(m).data().to_vec()
        };
        let base = eval(&fdata);
        let permuted = eval(&fperm);
        for b in 0..2 {
            for ni in 0..n {
                let x = &base[(b * n + ni) * d..(b * n + ni + 1) * d];
                let y = &permuted[(b * n + perm[ni]) * d..(b * n + perm[ni] + 1) * d];
                for (a, c) in x.iter().zip(y) {
                    assert_eq!(a.to_bits(), c.to_bits());
                }
            }
        }
    }
}
