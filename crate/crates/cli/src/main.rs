//! `dsqn`: train, evaluate and attack deep spiking Q-networks.
//!
//! Results go to stdout as JSON (or CSV for `case-study` without `--out`);
//! diagnostics go to stderr, filtered by `DSQN_LOG`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use dsqn_core::attack::{attacked_eval, AttackConfig};
use dsqn_core::envs::{evaluate, make_env, EvalProtocol};
use dsqn_core::grad::{corrupted_surrogate_grad, grad_check, surrogate_grad};
use dsqn_core::network::{case_study, QNetwork};
use dsqn_core::neuron::NeuronConfig;
use dsqn_core::qlearn::{TrainHooks, Trainer};
use dsqn_core::runtime::{
    checkpoint_config, load_checkpoint, rng_stream, save_checkpoint, Checkpoint, MetricsRow, MetricsSink, RunConfig,
};
use dsqn_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dsqn", version, about = "Deep spiking Q-network engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write metrics and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint with the standard protocol.
    Eval(EvalArgs),
    /// Evaluate a checkpoint clean and under iterative FGSM.
    Attack(AttackArgs),
    /// Sweep input current through the one-LIF, one-LI micro network.
    CaseStudy(CaseStudyArgs),
    /// Compare the BPTT recursion against the tape and finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a trainer checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Behaviour epsilon; defaults to the run's evaluation epsilon.
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    epsilon: f64,
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write `attack_report.json` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CaseStudyArgs {
    #[arg(long = "t", default_value_t = 8)]
    sim_steps: usize,
    #[arg(long, default_value_t = 2.0)]
    tau: f64,
    #[arg(long, default_value_t = 1.0)]
    v_threshold: f64,
    #[arg(long, default_value_t = 0.0)]
    v_reset: f64,
    #[arg(long, default_value_t = 0.0)]
    i_min: f64,
    #[arg(long, default_value_t = 3.0)]
    i_max: f64,
    /// Number of intervals; the sweep has `steps + 1` rows.
    #[arg(long, default_value_t = 300)]
    steps: usize,
    /// Write `case_study.csv` here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Negative control: use a surrogate derivative with the wrong slope.
    #[arg(long, hide = true)]
    corrupt_surrogate: bool,
}

/// Outcome that is not an error but still fails the command.
struct CheckFailed;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DSQN_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Attack(a) => attack(a),
        Command::CaseStudy(a) => case_study_cmd(a),
        Command::GradCheck(a) => grad_check_cmd(a),
    };
    match result {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(CheckFailed)) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

type CmdResult = Result<std::result::Result<(), CheckFailed>>;

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(value).expect("json"))?;
    Ok(())
}

struct TrainOutput {
    sink: MetricsSink,
    dir: PathBuf,
    checkpoint_interval: u64,
}

impl TrainHooks for TrainOutput {
    fn on_row(&mut self, row: &MetricsRow) -> Result<()> {
        if let Some(mean) = row.eval_mean {
            info!("step {} episode {} eval {mean:.3}", row.step, row.episode);
        }
        self.sink.record(row)
    }

    fn after_step(&mut self, trainer: &Trainer) -> Result<()> {
        let step = trainer.progress.step;
        if self.checkpoint_interval > 0 && step.is_multiple_of(self.checkpoint_interval) {
            let path = self.dir.join(format!("step_{step:08}.ckpt"));
            info!("checkpoint {}", path.display());
            save_checkpoint(&path, trainer)?;
        }
        Ok(())
    }
}

fn train(args: TrainArgs) -> CmdResult {
    let mut trainer = match &args.resume {
        Some(path) => {
            if args.seed.is_some() {
                return Err(Error::Config("--seed cannot be combined with --resume".into()));
            }
            load_checkpoint(path)?
        }
        None => {
            let mut config = RunConfig::load(&args.config)?;
            if let Some(seed) = args.seed {
                config.seed = seed;
            }
            Trainer::new(config)?
        }
    };
    let dir = args
        .out
        .clone()
        .or_else(|| trainer.config.out_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir".into()))?;
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), trainer.config.to_toml())?;
    let mut hooks = TrainOutput {
        sink: MetricsSink::create(&dir)?,
        dir: dir.clone(),
        checkpoint_interval: trainer.config.train.checkpoint_interval,
    };
    trainer.run(None, &mut hooks)?;
    hooks.sink.flush()?;
    let final_path = dir.join("final.ckpt");
    save_checkpoint(&final_path, &trainer)?;
    let p = &trainer.progress;
    print_json(&json!({
        "steps": p.step,
        "episodes": p.episode,
        "last_eval": p.last_eval,
        "best_eval": p.best_eval,
        "early_stop": p.stopped,
        "checkpoint": final_path,
    }))?;
    Ok(Ok(()))
}

/// Network and run configuration stored in a trainer checkpoint.
fn load_policy(path: &Path) -> Result<(QNetwork<f32>, RunConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let config = checkpoint_config(&ckpt)
        .ok_or_else(|| Error::Config(format!("{} carries no run configuration", path.display())))?;
    let net = ckpt.network("online").map_err(Error::from)?;
    Ok((net, config))
}

fn eval(args: EvalArgs) -> CmdResult {
    let (net, config) = load_policy(&args.ckpt)?;
    let protocol = EvalProtocol {
        episodes: args.episodes,
        epsilon: args.epsilon.unwrap_or(config.hyper.eval_epsilon),
        noop_max: config.train.noop_max,
        frames: config.env.frames,
    };
    if protocol.episodes == 0 || !(0.0..=1.0).contains(&protocol.epsilon) {
        return Err(Error::Config("episodes must be >= 1 and epsilon in [0, 1]".into()));
    }
    let mut env = make_env(&config.env)?;
    let result = evaluate(&net, &mut env, &protocol, &mut rng_stream(args.seed, "eval"))?;
    print_json(&json!({
        "env": config.env.name,
        "episodes": protocol.episodes,
        "epsilon": protocol.epsilon,
        "mean": result.mean,
        "returns": result.returns,
    }))?;
    Ok(Ok(()))
}

fn attack(args: AttackArgs) -> CmdResult {
    let cfg = AttackConfig {
        epsilon: args.epsilon,
        max_iters: args.max_iters,
        episodes: args.episodes,
        ..AttackConfig::default()
    };
    cfg.validate()?;
    let (net, config) = load_policy(&args.ckpt)?;
    // The attacked policy is deterministic: no exploration noise.
    let protocol = EvalProtocol {
        episodes: cfg.episodes,
        epsilon: 0.0,
        noop_max: config.train.noop_max,
        frames: config.env.frames,
    };
    let mut env = make_env(&config.env)?;
    // Same stream as `eval`, so `before` matches `eval --epsilon 0`.
    let report = attacked_eval(&net, &mut env, &protocol, &cfg, &mut rng_stream(args.seed, "eval"))?;
    let value = serde_json::to_value(&report).expect("report serializes");
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("attack_report.json"), serde_json::to_string_pretty(&value).expect("json"))?;
    }
    print_json(&value)?;
    Ok(Ok(()))
}

fn case_study_cmd(args: CaseStudyArgs) -> CmdResult {
    let neuron = NeuronConfig { tau: args.tau, v_threshold: args.v_threshold, v_reset: args.v_reset };
    let rows = case_study(args.sim_steps, neuron, args.i_min, args.i_max, args.steps)?;
    let mut text = String::from("I,last_mem,max_mem,mean_mem\n");
    for r in &rows {
        text.push_str(&format!("{},{},{},{}\n", r.current, r.last_mem, r.max_mem, r.mean_mem));
    }
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("case_study.csv");
            fs::write(&path, text)?;
            info!("wrote {} rows to {}", rows.len(), path.display());
        }
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(Ok(()))
}

fn grad_check_cmd(args: GradCheckArgs) -> CmdResult {
    let dsurrogate = if args.corrupt_surrogate { corrupted_surrogate_grad } else { surrogate_grad::<f64> };
    let summary = grad_check(args.trials, &mut rng_stream(args.seed, "grad-check"), dsurrogate)?;
    print_json(&serde_json::to_value(summary).expect("summary serializes"))?;
    if summary.passed {
        Ok(Ok(()))
    } else {
        eprintln!("gradient check failed");
        Ok(Err(CheckFailed))
    }
}
