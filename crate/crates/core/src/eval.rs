//! Clean/robust evaluation and the experiment recipes: the
//! length-vs-number sweep, the component/K/temperature ablation ladders,
//! the ε-budget sweep, the accuracy–robustness trade-off report and the
//! synthetic transfer evaluation.
//!
//! Every reported number is reproducible from its config fingerprint and
//! seed block; recipe cells run sequentially and draw their own seeds.

use serde::Serialize;
use std::path::{Path, PathBuf};

use crate::attacks::{fgsm, pgd, AttackConfig};
use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{forward_loss, ForwardOpts, ModelState, Routing, TextSource};
use crate::objective::predictions;
use crate::seeding::derive;
use crate::synth::{DatasetSpec, FrozenEncoders, LabeledBatch};
use crate::trainer::{fit, TrainState, World};

/// Evaluation walks the test split in fixed-size chunks; attack seeds are
/// derived per chunk, so the value is independent of the split size only
/// through this constant.
const EVAL_CHUNK: usize = 64;

const EVAL_SALT_PGD: u64 = 0xE7A1;
const EVAL_SALT_FGSM: u64 = 0xE7A2;

/// Accuracies in percent for one trained state on one test split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub clean_acc: f64,
    pub robust_acc_fgsm: f64,
    pub robust_acc_pgd: f64,
    /// fingerprint of the producing config (seeds included)
    pub fingerprint: u64,
    /// fingerprint with the training attack neutralized; shared by a
    /// standard/adversarial training pair of the same setup
    pub pair_key: u64,
}

impl Metrics {
    pub fn with_keys(mut self, fingerprint: u64, pair_key: u64) -> Self {
        self.fingerprint = fingerprint;
        self.pair_key = pair_key;
        self
    }

    /// Robust accuracy above clean accuracy is legitimate but worth
    /// surfacing; callers print this when present.
    pub fn anomaly(&self) -> Option<String> {
        (self.robust_acc_pgd > self.clean_acc).then(|| {
            format!(
                "robust_acc_pgd {:.2} exceeds clean_acc {:.2}",
                self.robust_acc_pgd, self.clean_acc
            )
        })
    }
}

fn accuracy_of_chunk(
    enc: &FrozenEncoders,
    state: &ModelState,
    chunk: &LabeledBatch,
    logit_scale: f64,
    text_vals: &crate::autodiff::Tensor,
) -> Result<usize> {
    let mut g = Graph::new();
    let opts = ForwardOpts {
        logit_scale,
        trainable_params: false,
        trainable_images: false,
        text: TextSource::Precomputed(text_vals),
    };
    let vars = forward_loss(&mut g, enc, state, chunk, &opts)?;
    let preds = predictions(g.value(vars.logits));
    Ok(preds.iter().zip(&chunk.labels).filter(|(p, l)| p == l).count())
}

fn chunked<T>(
    batch: &LabeledBatch,
    n_classes: usize,
    mut f: impl FnMut(usize, LabeledBatch) -> Result<T>,
) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut idx = 0;
    while start < batch.len() {
        let len = EVAL_CHUNK.min(batch.len() - start);
        out.push(f(idx, batch.slice(start, len, n_classes)?)?);
        start += len;
        idx += 1;
    }
    Ok(out)
}

/// Percent of `test` classified correctly on clean inputs; the router
/// sees the clean image feature.
pub fn clean_accuracy(
    enc: &FrozenEncoders,
    state: &ModelState,
    test: &LabeledBatch,
    logit_scale: f64,
) -> Result<f64> {
    let n_classes = enc.n_classes;
    let text_vals = crate::prompts::text_features(&state.bank, enc)?;
    let hits = chunked(test, n_classes, |_, chunk| {
        accuracy_of_chunk(enc, state, &chunk, logit_scale, &text_vals)
    })?;
    Ok(100.0 * hits.iter().sum::<usize>() as f64 / test.len() as f64)
}

/// Percent classified correctly after the given PGD attack; the router
/// sees the adversarial image feature.
pub fn robust_accuracy(
    enc: &FrozenEncoders,
    state: &ModelState,
    test: &LabeledBatch,
    attack: &AttackConfig,
    logit_scale: f64,
    seed: u64,
) -> Result<f64> {
    let n_classes = enc.n_classes;
    let text_vals = crate::prompts::text_features(&state.bank, enc)?;
    let hits = chunked(test, n_classes, |idx, chunk| {
        let adv = pgd(enc, state, &chunk, attack, logit_scale, derive(seed, idx as u64))?;
        let adv_batch = LabeledBatch::new(adv, chunk.labels.clone(), n_classes)?;
        accuracy_of_chunk(enc, state, &adv_batch, logit_scale, &text_vals)
    })?;
    Ok(100.0 * hits.iter().sum::<usize>() as f64 / test.len() as f64)
}

fn fgsm_accuracy(
    enc: &FrozenEncoders,
    state: &ModelState,
    test: &LabeledBatch,
    epsilon: f64,
    logit_scale: f64,
    seed: u64,
) -> Result<f64> {
    let n_classes = enc.n_classes;
    let text_vals = crate::prompts::text_features(&state.bank, enc)?;
    let hits = chunked(test, n_classes, |idx, chunk| {
        let adv = fgsm(enc, state, &chunk, epsilon, logit_scale, derive(seed, idx as u64))?;
        let adv_batch = LabeledBatch::new(adv, chunk.labels.clone(), n_classes)?;
        accuracy_of_chunk(enc, state, &adv_batch, logit_scale, &text_vals)
    })?;
    Ok(100.0 * hits.iter().sum::<usize>() as f64 / test.len() as f64)
}

/// Clean, FGSM and PGD accuracy of one trained state.
pub fn evaluate(
    enc: &FrozenEncoders,
    state: &ModelState,
    test: &LabeledBatch,
    attack: &AttackConfig,
    logit_scale: f64,
    attack_seed: u64,
) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::invalid("evaluate: empty test set".to_string()));
    }
    attack.validate()?;
    let clean = clean_accuracy(enc, state, test, logit_scale)?;
    let fgsm_acc = fgsm_accuracy(
        enc,
        state,
        test,
        attack.epsilon,
        logit_scale,
        derive(attack_seed, EVAL_SALT_FGSM),
    )?;
    let pgd_acc =
        robust_accuracy(enc, state, test, attack, logit_scale, derive(attack_seed, EVAL_SALT_PGD))?;
    Ok(Metrics {
        clean_acc: clean,
        robust_acc_fgsm: fgsm_acc,
        robust_acc_pgd: pgd_acc,
        fingerprint: 0,
        pair_key: 0,
    })
}

/// Evaluate a source-trained state against a foreign world: same
/// dimensions and class count, prototypes and class tokens re-drawn from
/// the foreign seed.
pub fn transfer_eval(
    source: &World,
    state: &ModelState,
    foreign_spec: &DatasetSpec,
    attack: &AttackConfig,
    logit_scale: f64,
    attack_seed: u64,
) -> Result<Metrics> {
    let src = &source.dataset.spec;
    if foreign_spec.image_dim != src.image_dim || foreign_spec.n_classes != src.n_classes {
        return Err(Error::invalid(format!(
            "transfer_eval: foreign world ({} classes, dim {}) does not match source ({} classes, dim {})",
            foreign_spec.n_classes, foreign_spec.image_dim, src.n_classes, src.image_dim
        )));
    }
    let foreign = crate::synth::generate_dataset(foreign_spec)?;
    let enc = source.encoders.with_class_tokens_from(foreign_spec.seed);
    evaluate(&enc, state, &foreign.test, attack, logit_scale, attack_seed)
}

// ── aggregation over seeds ──────────────────────────────────────────

/// Per-seed values with their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stats {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl Stats {
    pub fn from_values(per_seed: Vec<f64>) -> Stats {
        let n = per_seed.len().max(1) as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let var = if per_seed.len() > 1 {
            per_seed.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Stats { per_seed, mean, std: var.sqrt() }
    }
}

/// One recipe cell aggregated over the seed set.
#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub label: String,
    pub n_seeds: usize,
    pub clean: Stats,
    pub fgsm: Stats,
    pub pgd: Stats,
    pub fingerprints: Vec<u64>,
}

fn aggregate(label: &str, metrics: &[Metrics]) -> CellResult {
    CellResult {
        label: label.to_string(),
        n_seeds: metrics.len(),
        clean: Stats::from_values(metrics.iter().map(|m| m.clean_acc).collect()),
        fgsm: Stats::from_values(metrics.iter().map(|m| m.robust_acc_fgsm).collect()),
        pgd: Stats::from_values(metrics.iter().map(|m| m.robust_acc_pgd).collect()),
        fingerprints: metrics.iter().map(|m| m.fingerprint).collect(),
    }
}

/// Train and evaluate one configuration under one shifted seed block.
pub fn run_single(cfg: &RunConfig, seed_offset: u64) -> Result<(TrainState, Metrics, World)> {
    let mut shifted = cfg.clone();
    shifted.seeds = cfg.seeds.offset_run(seed_offset);
    let spec = shifted.dataset_spec();
    let world = World::build(&spec, shifted.encoder_dims(), shifted.train.ctx_len)?;
    let state = fit(&world, &shifted.train, &shifted.seeds)?;
    let metrics = evaluate(
        &world.encoders,
        &state.model,
        &world.dataset.test,
        &shifted.eval_attack(),
        shifted.train.logit_scale,
        derive(shifted.seeds.attack, EVAL_SALT_PGD ^ 0xC0FFEE),
    )?
    .with_keys(shifted.fingerprint(), shifted.pair_key());
    Ok((state, metrics, world))
}

/// Train and evaluate one cell across the configured seed set.
pub fn run_cell(cfg: &RunConfig, label: &str) -> Result<CellResult> {
    let mut all = Vec::with_capacity(cfg.eval.n_seeds);
    for s in 0..cfg.eval.n_seeds {
        let (_, m, _) = run_single(cfg, s as u64)?;
        all.push(m);
    }
    Ok(aggregate(label, &all))
}

// ── length-vs-number sweep ──────────────────────────────────────────

/// Matched-budget (context length, prompt count) groups.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub groups: Vec<Vec<(usize, usize)>>,
}

impl SweepSpec {
    /// The default matched-budget group: one long prompt against two and
    /// four shorter ones with the same K*M*e learnable scalars.
    pub fn default_budget_group() -> SweepSpec {
        SweepSpec { groups: vec![vec![(32, 1), (16, 2), (8, 4)]] }
    }

    /// Budget validation is a hard precondition: within a group every
    /// member must satisfy the same K*M*e.
    pub fn validate(&self, token_dim: usize) -> Result<()> {
        for group in &self.groups {
            if group.is_empty() {
                return Err(Error::invalid("sweep: empty budget group".to_string()));
            }
            let budget = group[0].0 * group[0].1 * token_dim;
            for &(m, k) in group {
                if m * k * token_dim != budget {
                    return Err(Error::invalid(format!(
                        "sweep: (M={m}, K={k}) budget {} does not match group budget {budget}",
                        m * k * token_dim
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Train one model per (M, K) pair across the seed set, budget-matched.
pub fn sweep_length_vs_number(cfg: &RunConfig, spec: &SweepSpec) -> Result<Vec<CellResult>> {
    spec.validate(cfg.encoder.token_dim)?;
    let mut rows = Vec::new();
    for group in &spec.groups {
        for &(m, k) in group {
            let mut cell = cfg.clone();
            cell.train.ctx_len = m;
            cell.train.prompt_count = k;
            rows.push(run_cell(&cell, &format!("M{m}-K{k}"))?);
        }
    }
    Ok(rows)
}

// ── ablation ladders ────────────────────────────────────────────────

/// Component ladder: single prompt, plus uniform mixture, plus router.
pub fn ablation_components(cfg: &RunConfig) -> Result<Vec<CellResult>> {
    let mut rows = Vec::new();
    let mut baseline = cfg.clone();
    baseline.train.prompt_count = 1;
    baseline.train.routing = Routing::Uniform;
    rows.push(run_cell(&baseline, "baseline")?);

    let mut mixture = cfg.clone();
    mixture.train.routing = Routing::Uniform;
    rows.push(run_cell(&mixture, "mixture")?);

    let mut routed = cfg.clone();
    routed.train.routing = Routing::Learned;
    rows.push(run_cell(&routed, "mixture+router")?);
    Ok(rows)
}

/// Prompt-count ladder at the full configuration.
pub fn ablation_prompt_count(cfg: &RunConfig) -> Result<Vec<CellResult>> {
    [1usize, 2, 4, 8]
        .iter()
        .map(|&k| {
            let mut cell = cfg.clone();
            cell.train.prompt_count = k;
            cell.train.routing = Routing::Learned;
            run_cell(&cell, &format!("K{k}"))
        })
        .collect()
}

/// Router-temperature ladder plus the uniform-mixture reference row.
pub fn ablation_temperature(cfg: &RunConfig) -> Result<Vec<CellResult>> {
    let mut rows = Vec::new();
    for tau in [0.3, 0.7, 1.1, 1e6] {
        let mut cell = cfg.clone();
        cell.train.tau_w = tau;
        cell.train.routing = Routing::Learned;
        rows.push(run_cell(&cell, &format!("tau{tau}"))?);
    }
    let mut uniform = cfg.clone();
    uniform.train.routing = Routing::Uniform;
    rows.push(run_cell(&uniform, "uniform")?);
    Ok(rows)
}

pub struct AblationReport {
    pub components: Vec<CellResult>,
    pub prompt_count: Vec<CellResult>,
    pub temperature: Vec<CellResult>,
}

/// The three ablation ladders of the benchmark.
pub fn ablation_suite(cfg: &RunConfig) -> Result<AblationReport> {
    Ok(AblationReport {
        components: ablation_components(cfg)?,
        prompt_count: ablation_prompt_count(cfg)?,
        temperature: ablation_temperature(cfg)?,
    })
}

// ── ε-budget sweep ──────────────────────────────────────────────────

/// Train once per seed at the configured budget, then evaluate PGD
/// robustness at each ε in `budgets` on the same model.
pub fn epsilon_budget_sweep(cfg: &RunConfig, budgets: &[f64]) -> Result<Vec<CellResult>> {
    let mut per_budget: Vec<Vec<Metrics>> = vec![Vec::new(); budgets.len()];
    for s in 0..cfg.eval.n_seeds {
        let (state, _, world) = run_single(cfg, s as u64)?;
        let mut shifted = cfg.clone();
        shifted.seeds = cfg.seeds.offset_run(s as u64);
        for (bi, &eps) in budgets.iter().enumerate() {
            let attack = AttackConfig::eval_default(eps, cfg.eval.pgd_steps);
            let m = evaluate(
                &world.encoders,
                &state.model,
                &world.dataset.test,
                &attack,
                cfg.train.logit_scale,
                derive(shifted.seeds.attack, 0xB0D6E7 ^ bi as u64),
            )?
            .with_keys(shifted.fingerprint(), shifted.pair_key());
            per_budget[bi].push(m);
        }
    }
    Ok(budgets
        .iter()
        .zip(per_budget)
        .map(|(&eps, ms)| aggregate(&format!("eps{:.0}/255", eps * 255.0), &ms))
        .collect())
}

/// The default budget ladder 4, 8, 12, 16 / 255.
pub fn default_epsilon_budgets() -> Vec<f64> {
    [4.0, 8.0, 12.0, 16.0].iter().map(|n| n / 255.0).collect()
}

// ── accuracy–robustness trade-off ───────────────────────────────────

/// (Δclean, Δrobust) of adversarial over standard training. Fails if the
/// two metrics do not come from the same configuration pair.
pub fn tradeoff(standard: &Metrics, adversarial: &Metrics) -> Result<(f64, f64)> {
    if standard.pair_key != adversarial.pair_key {
        return Err(Error::invalid(format!(
            "tradeoff: mismatched configs (pair keys {:#x} vs {:#x})",
            standard.pair_key, adversarial.pair_key
        )));
    }
    Ok((
        adversarial.clean_acc - standard.clean_acc,
        adversarial.robust_acc_pgd - standard.robust_acc_pgd,
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct TradeoffRow {
    pub label: String,
    pub delta_clean: Stats,
    pub delta_robust: Stats,
    pub standard: CellResult,
    pub adversarial: CellResult,
}

/// Standard-vs-adversarial training deltas for the given prompt counts,
/// both sides evaluated under the same attack.
pub fn tradeoff_report(cfg: &RunConfig, prompt_counts: &[usize]) -> Result<Vec<TradeoffRow>> {
    let mut rows = Vec::new();
    for &k in prompt_counts {
        let mut adv_cfg = cfg.clone();
        adv_cfg.train.prompt_count = k;
        // pin the eval budget so both sides share it explicitly
        adv_cfg.eval.epsilon = Some(adv_cfg.eval_attack().epsilon);
        let mut std_cfg = adv_cfg.clone();
        std_cfg.train.attack.epsilon = 0.0;
        std_cfg.train.attack.steps = 0;
        std_cfg.train.attack.step_size = 1.0;
        std_cfg.train.attack.random_start = false;

        let (mut d_clean, mut d_robust) = (Vec::new(), Vec::new());
        let (mut std_ms, mut adv_ms) = (Vec::new(), Vec::new());
        for s in 0..cfg.eval.n_seeds {
            let (_, std_m, _) = run_single(&std_cfg, s as u64)?;
            let (_, adv_m, _) = run_single(&adv_cfg, s as u64)?;
            let (dc, dr) = tradeoff(&std_m, &adv_m)?;
            d_clean.push(dc);
            d_robust.push(dr);
            std_ms.push(std_m);
            adv_ms.push(adv_m);
        }
        rows.push(TradeoffRow {
            label: format!("K{k}"),
            delta_clean: Stats::from_values(d_clean),
            delta_robust: Stats::from_values(d_robust),
            standard: aggregate(&format!("K{k}-standard"), &std_ms),
            adversarial: aggregate(&format!("K{k}-adversarial"), &adv_ms),
        });
    }
    Ok(rows)
}

// ── transfer table ──────────────────────────────────────────────────

/// Source-trained states evaluated on their own test split and on a
/// foreign world, for the full mixture and the single-prompt baseline.
pub fn transfer_table(cfg: &RunConfig) -> Result<Vec<CellResult>> {
    let mut rows = Vec::new();
    for (label, k, routing) in [
        ("mixture", cfg.train.prompt_count, Routing::Learned),
        ("single-prompt", 1, Routing::Uniform),
    ] {
        let mut cell = cfg.clone();
        cell.train.prompt_count = k;
        cell.train.routing = routing;
        let (mut local, mut foreign) = (Vec::new(), Vec::new());
        for s in 0..cfg.eval.n_seeds {
            let (state, local_m, world) = run_single(&cell, s as u64)?;
            let mut shifted = cell.clone();
            shifted.seeds = cell.seeds.offset_run(s as u64);
            let mut foreign_spec = world.dataset.spec.clone();
            foreign_spec.seed = cfg.eval.transfer_seed.wrapping_add(s as u64);
            let fm = transfer_eval(
                &world,
                &state.model,
                &foreign_spec,
                &shifted.eval_attack(),
                cfg.train.logit_scale,
                derive(shifted.seeds.attack, 0x7A4E5F),
            )?
            .with_keys(shifted.fingerprint(), shifted.pair_key());
            local.push(local_m);
            foreign.push(fm);
        }
        rows.push(aggregate(&format!("{label}-source"), &local));
        rows.push(aggregate(&format!("{label}-transfer"), &foreign));
    }
    Ok(rows)
}

// ── table files ─────────────────────────────────────────────────────

/// A named table emitted as CSV plus an aligned text rendering.
#[derive(Debug, Clone)]
pub struct Table {
    pub name: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.headers.join(","));
        out.push('\n');
        for row in &self.rows {
            debug_assert!(row.iter().all(|c| !c.contains(',')));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_aligned(&self) -> String {
        let mut widths: Vec<usize> = self.headers.iter().map(|h| h.len()).collect();
        for row in &self.rows {
            for (i, cell) in row.iter().enumerate() {
                widths[i] = widths[i].max(cell.len());
            }
        }
        let fmt_row = |cells: &[String]| -> String {
            cells
                .iter()
                .enumerate()
                .map(|(i, c)| format!("{:<w$}", c, w = widths[i]))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = fmt_row(&self.headers);
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&fmt_row(row));
            out.push('\n');
        }
        out
    }

    /// Write `<name>.csv` and `<name>.txt` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let csv = dir.join(format!("{}.csv", self.name));
        let txt = dir.join(format!("{}.txt", self.name));
        std::fs::write(&csv, self.to_csv())?;
        std::fs::write(&txt, self.to_aligned())?;
        Ok((csv, txt))
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.4}")
}

/// Standard rendering of aggregated cells.
pub fn cells_to_table(name: &str, cells: &[CellResult]) -> Table {
    Table {
        name: name.to_string(),
        headers: [
            "config", "n_seeds", "clean_mean", "clean_std", "fgsm_mean", "fgsm_std", "pgd_mean",
            "pgd_std",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        rows: cells
            .iter()
            .map(|c| {
                vec![
                    c.label.clone(),
                    c.n_seeds.to_string(),
                    fmt(c.clean.mean),
                    fmt(c.clean.std),
                    fmt(c.fgsm.mean),
                    fmt(c.fgsm.std),
                    fmt(c.pgd.mean),
                    fmt(c.pgd.std),
                ]
            })
            .collect(),
    }
}

pub fn tradeoff_to_table(name: &str, rows: &[TradeoffRow]) -> Table {
    Table {
        name: name.to_string(),
        headers: [
            "config",
            "n_seeds",
            "delta_clean_mean",
            "delta_clean_std",
            "delta_robust_mean",
            "delta_robust_std",
            "std_clean",
            "std_pgd",
            "adv_clean",
            "adv_pgd",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    r.label.clone(),
                    r.delta_clean.per_seed.len().to_string(),
                    fmt(r.delta_clean.mean),
                    fmt(r.delta_clean.std),
                    fmt(r.delta_robust.mean),
                    fmt(r.delta_robust.std),
                    fmt(r.standard.clean.mean),
                    fmt(r.standard.pgd.mean),
                    fmt(r.adversarial.clean.mean),
                    fmt(r.adversarial.pgd.mean),
                ]
            })
            .collect(),
    }
}
