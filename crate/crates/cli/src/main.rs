//! Command-line harness: dataset generation, training, evaluation, the
//! benchmark sweep recipes and the router-inequality verifier. One
//! command is one process; every output lands in one run directory next
//! to an echo of the producing config and a manifest.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use mixprompt::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use mixprompt::config::RunConfig;
use mixprompt::error::Error;
use mixprompt::eval::{
    ablation_components, ablation_prompt_count, ablation_temperature, cells_to_table,
    default_epsilon_budgets, epsilon_budget_sweep, evaluate, run_single, sweep_length_vs_number,
    tradeoff_report, tradeoff_to_table, transfer_table, SweepSpec,
};
use mixprompt::seeding::derive;
use mixprompt::synth::{generate_dataset, save_dataset};
use mixprompt::theory;
use mixprompt::trainer::World;

#[derive(Parser)]
#[command(name = "mixprompt", about = "Adversarially robust mixture prompt tuning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// run configuration (TOML); defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// output directory for this run
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed_data: Option<u64>,
    #[arg(long)]
    seed_init: Option<u64>,
    #[arg(long)]
    seed_attack: Option<u64>,
    /// override the evaluation PGD iteration count
    #[arg(long)]
    pgd_steps: Option<usize>,
    /// override the evaluation perturbation budget
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset files for a config
    GenData(CommonOpts),
    /// Train a model and emit a checkpoint plus the metric history
    Train(CommonOpts),
    /// Evaluate a checkpoint: clean, FGSM and PGD accuracy
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run one benchmark recipe and emit its table files
    Sweep {
        #[command(flatten)]
        common: CommonOpts,
        /// fig2, table4, table5, table6, table10, fig3 or table3
        #[arg(long)]
        recipe: String,
    },
    /// Monte-Carlo verification of the router weighting inequality
    VerifyTheorem {
        #[arg(long, default_value_t = 10_000)]
        draws: usize,
        #[arg(long, default_value_t = 2)]
        k_min: usize,
        #[arg(long, default_value_t = 10)]
        k_max: usize,
        #[arg(long, default_value_t = 0.0)]
        eta_min: f64,
        #[arg(long, default_value_t = 2.0)]
        eta_max: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A run directory: config echo plus a manifest of everything written.
struct RunDir {
    root: PathBuf,
    outputs: Vec<String>,
}

impl RunDir {
    fn create(root: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(root)
            .with_context(|| format!("cannot create run directory {}", root.display()))?;
        Ok(RunDir { root: root.to_path_buf(), outputs: Vec::new() })
    }

    fn write(&mut self, name: &str, contents: &str) -> anyhow::Result<PathBuf> {
        let path = self.root.join(name);
        std::fs::write(&path, contents)?;
        self.outputs.push(name.to_string());
        Ok(path)
    }

    fn record(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    fn finish(mut self, command: &str, cfg: &RunConfig) -> anyhow::Result<()> {
        self.outputs.push("manifest.json".to_string());
        self.outputs.sort();
        let manifest = serde_json::json!({
            "command": command,
            "config_fingerprint": format!("{:#018x}", cfg.fingerprint()),
            "seeds": { "data": cfg.seeds.data, "init": cfg.seeds.init, "attack": cfg.seeds.attack },
            "outputs": self.outputs,
        });
        std::fs::write(self.root.join("manifest.json"), format!("{manifest:#}\n"))?;
        Ok(())
    }
}

fn load_config(common: &CommonOpts) -> anyhow::Result<(RunConfig, Option<String>)> {
    let (mut cfg, source) = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            (RunConfig::from_toml_str(&text)?, Some(text))
        }
        None => (RunConfig::default(), None),
    };
    if let Some(s) = common.seed_data {
        cfg.seeds.data = s;
    }
    if let Some(s) = common.seed_init {
        cfg.seeds.init = s;
    }
    if let Some(s) = common.seed_attack {
        cfg.seeds.attack = s;
    }
    if let Some(steps) = common.pgd_steps {
        cfg.eval.pgd_steps = steps;
    }
    if let Some(eps) = common.epsilon {
        cfg.eval.epsilon = Some(eps);
    }
    cfg.validate()?;
    Ok((cfg, source))
}

fn echo_config(dir: &mut RunDir, cfg: &RunConfig, source: Option<&String>) -> anyhow::Result<()> {
    dir.write("config.toml", &cfg.to_toml())?;
    if let Some(text) = source {
        dir.write("config.source.toml", text)?;
    }
    Ok(())
}

fn cmd_gen_data(common: &CommonOpts) -> anyhow::Result<()> {
    let (cfg, source) = load_config(common)?;
    let mut dir = RunDir::create(&common.out)?;
    echo_config(&mut dir, &cfg, source.as_ref())?;
    let ds = generate_dataset(&cfg.dataset_spec())?;
    let path = dir.root.join("dataset.bin");
    save_dataset(&ds, &path)?;
    dir.record("dataset.bin");
    println!(
        "dataset: {} train / {} test samples, {} classes, fingerprint {:#018x}",
        ds.train.len(),
        ds.test.len(),
        ds.spec.n_classes,
        ds.spec.fingerprint()
    );
    dir.finish("gen-data", &cfg)
}

fn metrics_file(m: &mixprompt::eval::Metrics) -> String {
    let mut s = serde_json::to_string_pretty(m).expect("metrics serialize");
    s.push('\n');
    s
}

fn cmd_train(common: &CommonOpts) -> anyhow::Result<()> {
    let (cfg, source) = load_config(common)?;
    let mut dir = RunDir::create(&common.out)?;
    echo_config(&mut dir, &cfg, source.as_ref())?;

    let (state, metrics, _world) = run_single(&cfg, 0)?;

    let mut history = String::new();
    for rec in &state.history {
        history.push_str(&serde_json::to_string(rec).expect("record serialize"));
        history.push('\n');
    }
    dir.write("history.jsonl", &history)?;

    let ck = Checkpoint {
        model: state.model.clone(),
        enc_dims: cfg.encoder_dims(),
        n_classes: cfg.dataset.n_classes,
        logit_scale: cfg.train.logit_scale,
        seeds: cfg.seeds,
    };
    save_checkpoint(&ck, &dir.root.join("checkpoint.ckpt"))?;
    dir.record("checkpoint.ckpt");

    dir.write("metrics.json", &metrics_file(&metrics))?;
    if let Some(note) = metrics.anomaly() {
        eprintln!("note: {note}");
    }
    println!(
        "trained {} epochs: clean {:.2}%, fgsm {:.2}%, pgd {:.2}%",
        state.history.len(),
        metrics.clean_acc,
        metrics.robust_acc_fgsm,
        metrics.robust_acc_pgd
    );
    dir.finish("train", &cfg)
}

fn cmd_eval(common: &CommonOpts, checkpoint: &Path) -> anyhow::Result<()> {
    let (mut cfg, source) = load_config(common)?;
    let ck = load_checkpoint(checkpoint)?;
    if ck.enc_dims != cfg.encoder_dims() {
        bail!(
            "checkpoint encoder dims {:?} do not match config dims {:?}",
            ck.enc_dims,
            cfg.encoder_dims()
        );
    }
    if ck.n_classes != cfg.dataset.n_classes {
        bail!("checkpoint has {} classes, config has {}", ck.n_classes, cfg.dataset.n_classes);
    }
    // the checkpoint's seed block reproduces the world it was trained in;
    // explicit flags still win
    if common.seed_data.is_none() {
        cfg.seeds.data = ck.seeds.data;
    }
    if common.seed_init.is_none() {
        cfg.seeds.init = ck.seeds.init;
    }
    if common.seed_attack.is_none() {
        cfg.seeds.attack = ck.seeds.attack;
    }

    let mut dir = RunDir::create(&common.out)?;
    echo_config(&mut dir, &cfg, source.as_ref())?;

    let spec = cfg.dataset_spec();
    let world = World::build(&spec, cfg.encoder_dims(), ck.model.bank.ctx_len)?;
    let metrics = evaluate(
        &world.encoders,
        &ck.model,
        &world.dataset.test,
        &cfg.eval_attack(),
        ck.logit_scale,
        derive(cfg.seeds.attack, 0xE7A1 ^ 0xC0FFEE),
    )?
    .with_keys(cfg.fingerprint(), cfg.pair_key());

    dir.write("metrics.json", &metrics_file(&metrics))?;
    if let Some(note) = metrics.anomaly() {
        eprintln!("note: {note}");
    }
    println!(
        "clean {:.2}%, fgsm {:.2}%, pgd {:.2}% (eps {:.5}, {} steps)",
        metrics.clean_acc,
        metrics.robust_acc_fgsm,
        metrics.robust_acc_pgd,
        cfg.eval_attack().epsilon,
        cfg.eval_attack().steps
    );
    dir.finish("eval", &cfg)
}

fn cmd_sweep(common: &CommonOpts, recipe: &str) -> anyhow::Result<()> {
    let (cfg, source) = load_config(common)?;
    let mut dir = RunDir::create(&common.out)?;
    echo_config(&mut dir, &cfg, source.as_ref())?;

    let tables = match recipe {
        "fig2" => {
            let rows = sweep_length_vs_number(&cfg, &SweepSpec::default_budget_group())?;
            vec![cells_to_table("fig2_sweep", &rows)]
        }
        "table4" => {
            let rows = ablation_components(&cfg)?;
            vec![cells_to_table("table4_components", &rows)]
        }
        "table5" => {
            let rows = ablation_prompt_count(&cfg)?;
            vec![cells_to_table("table5_K", &rows)]
        }
        "table6" => {
            let rows = ablation_temperature(&cfg)?;
            vec![cells_to_table("table6_tau", &rows)]
        }
        "table10" => {
            let rows = epsilon_budget_sweep(&cfg, &default_epsilon_budgets())?;
            vec![cells_to_table("table10_epsilon", &rows)]
        }
        "fig3" => {
            let rows = tradeoff_report(&cfg, &[1, cfg.train.prompt_count])?;
            vec![tradeoff_to_table("fig3_tradeoff", &rows)]
        }
        "table3" => {
            let rows = transfer_table(&cfg)?;
            vec![cells_to_table("table3_transfer", &rows)]
        }
        other => return Err(Error::UnknownRecipe(other.to_string()).into()),
    };

    for table in &tables {
        table.save(&dir.root)?;
        dir.record(&format!("{}.csv", table.name));
        dir.record(&format!("{}.txt", table.name));
        println!("{}", table.to_aligned());
    }
    dir.finish(&format!("sweep:{recipe}"), &cfg)
}

fn cmd_verify_theorem(
    draws: usize,
    k_range: (usize, usize),
    eta_range: (f64, f64),
    seed: u64,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let report = theory::monte_carlo(draws, k_range, eta_range, seed)?;
    let text = format!(
        "draws: {}\nviolations: {}\nstrictness failures: {}\nlemma disagreements: {}\nworst margin: {:.3e}\n",
        report.draws,
        report.violations,
        report.strictness_failures,
        report.lemma_disagreements,
        report.worst_margin
    );
    print!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("theorem_report.txt"), &text)?;
        let mut json = serde_json::to_string_pretty(&report).expect("report serialize");
        json.push('\n');
        std::fs::write(dir.join("theorem_report.json"), json)?;
    }
    if !report.all_clear() {
        bail!("inequality verification failed: {report:?}");
    }
    Ok(())
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData(common) => cmd_gen_data(common),
        Command::Train(common) => cmd_train(common),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint),
        Command::Sweep { common, recipe } => cmd_sweep(common, recipe),
        Command::VerifyTheorem { draws, k_min, k_max, eta_min, eta_max, seed, out } => {
            cmd_verify_theorem(
                *draws,
                (*k_min, *k_max),
                (*eta_min, *eta_max),
                *seed,
                out.as_deref(),
            )
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
