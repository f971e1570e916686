mod preset;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use caf_core::active::{run_experiment, ExperimentConfig, ScheduleBand, SetPolicy};
use caf_core::codec::{Alphabet, HeadLayout};
use caf_core::dataset::EncodedSet;
use caf_core::forge::{generate_dataset, generate_with_repeats, ForgeConfig, LabeledSample};
use caf_core::io::{self, Checkpoint, MetricsRow};
use caf_core::net::{NetConfig, Network};
use caf_core::rng::RandomSource;
use caf_core::select::{score_pool, SelectionPolicy, Strategy};
use caf_core::trainer::{lr_at, EvalPlan, Trainer};
use caf_core::Error;

use preset::Preset;

#[derive(Parser)]
#[command(name = "caf", version, about = "Synthetic verification codes, a CNN reader and active learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory of labelled code images.
    Gen(GenArgs),
    /// Train a network on a dataset, writing a checkpoint and metrics.
    Train(TrainArgs),
    /// Run the multi-round active-learning loop.
    Active(ActiveArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value_t = Preset::Mini)]
    preset: Preset,
    /// Number of samples.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Code length [default: from preset]
    #[arg(long)]
    length: Option<usize>,
    /// Characters codes are drawn from [default: from preset]
    #[arg(long)]
    alphabet: Option<String>,
    /// Image width in pixels [default: from preset]
    #[arg(long)]
    width: Option<usize>,
    /// Image height in pixels [default: from preset]
    #[arg(long)]
    height: Option<usize>,
    /// Maximum per-character shear, degrees [default: from preset]
    #[arg(long)]
    skew: Option<f64>,
    /// Allow repeated codes when the count exceeds the label space.
    #[arg(long, default_value_t = false)]
    allow_repeats: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value_t = Preset::Mini)]
    preset: Preset,
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset directory, evaluated during training.
    #[arg(long)]
    holdout: PathBuf,
    /// Optimizer steps to run.
    #[arg(long)]
    iters: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for checkpoint.bin, metrics.csv and config.json.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint; its configuration replaces the preset.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Steps between holdout evaluations [default: from preset]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    eval_interval: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Most,
    Least,
    Random,
    All,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Most => Strategy::MostUncertain,
            StrategyArg::Least => Strategy::LeastUncertain,
            StrategyArg::Random => Strategy::Random,
            StrategyArg::All => Strategy::All,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SetPolicyArg {
    Augment,
    Replace,
}

#[derive(Args)]
struct ActiveArgs {
    #[arg(long, value_enum, default_value_t = Preset::Mini)]
    preset: Preset,
    #[arg(long, value_enum, default_value_t = StrategyArg::Most)]
    strategy: StrategyArg,
    #[arg(long, value_enum, default_value_t = SetPolicyArg::Augment)]
    set_policy: SetPolicyArg,
    /// Rounds including the initial training [default: from preset]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    rounds: Option<u64>,
    /// Samples selected per round [default: from preset]
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent runs to average.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    repeats: u64,
    /// Output directory for metrics.csv, rounds.jsonl and config.json.
    #[arg(long)]
    out: PathBuf,
    /// Steps per round, replacing the preset schedule [default: from preset]
    #[arg(long)]
    iters: Option<u64>,
    /// Initial training set size [default: from preset]
    #[arg(long)]
    initial: Option<usize>,
    /// Pool size [default: from preset]
    #[arg(long)]
    pool: Option<usize>,
    /// Holdout size [default: from preset]
    #[arg(long)]
    holdout: Option<usize>,
    /// Re-initialize weights every round.
    #[arg(long, default_value_t = false)]
    reset_weights: bool,
    /// Zero momentum and restart the learning-rate schedule every round.
    #[arg(long, default_value_t = false)]
    reset_optimizer: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

/// Usage problems detected after flag parsing; exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Active(a) => cmd_active(a),
        Command::Eval(a) => cmd_eval(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let is_usage = e.downcast_ref::<UsageError>().is_some()
                || matches!(e.downcast_ref::<Error>(), Some(Error::Usage(_)));
            ExitCode::from(if is_usage { 2 } else { 1 })
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("CAF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("CAF_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")
}

fn cmd_gen(a: GenArgs) -> anyhow::Result<()> {
    let mut cfg = a.preset.expand().forge;
    if let Some(chars) = &a.alphabet {
        cfg.alphabet = Alphabet::new(chars).map_err(|e| usage(format!("--alphabet: {e}")))?;
    }
    cfg.code_length = a.length.unwrap_or(cfg.code_length);
    cfg.width = a.width.unwrap_or(cfg.width);
    cfg.height = a.height.unwrap_or(cfg.height);
    cfg.skew_range = a.skew.unwrap_or(cfg.skew_range);
    cfg.seed = a.seed;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let n = a.count as usize;
    let samples = if a.allow_repeats && n as u128 > cfg.label_space() {
        generate_with_repeats(&cfg, n)?
    } else {
        generate_dataset(&cfg, n)?
    };
    io::save_dataset(&samples, &a.out, Some(&cfg))?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

/// Loads a dataset, taking the alphabet from its config echo when present.
fn load_encoded(dir: &Path, fallback: &Alphabet) -> anyhow::Result<(Option<ForgeConfig>, EncodedSet)> {
    let echo = io::read_dataset_config(dir)?;
    let alphabet = echo.as_ref().map_or_else(|| fallback.clone(), |c| c.alphabet.clone());
    let samples = io::load_dataset(dir, &alphabet)?;
    let set = encode(&samples, &alphabet)?;
    Ok((echo, set))
}

fn encode(samples: &[LabeledSample], alphabet: &Alphabet) -> anyhow::Result<EncodedSet> {
    let length = samples.first().map_or(1, |s| s.label.len());
    let head = HeadLayout::new(length, alphabet.len())?;
    Ok(EncodedSet::from_samples(samples, alphabet, head)?)
}

fn check_fit(net: &NetConfig, set: &EncodedSet, what: &str, echo: Option<&ForgeConfig>) -> anyhow::Result<()> {
    let fits = set.head() == net.head && (set.height(), set.width()) == (net.input_height, net.input_width);
    if fits {
        return Ok(());
    }
    let data_desc = match echo {
        Some(cfg) => serde_json::to_string(cfg)?,
        None => format!(
            "{{\"width\":{},\"height\":{},\"code_length\":{},\"alphabet_size\":{}}}",
            set.width(),
            set.height(),
            set.head().length,
            set.head().classes
        ),
    };
    bail!(
        "{what} does not match the network\n  network: {}\n  dataset: {data_desc}",
        serde_json::to_string(net)?
    )
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let preset = a.preset.expand();
    let (net_cfg, optim, state) = match &a.resume {
        Some(path) => {
            let ckpt = io::load_checkpoint(path)?;
            (ckpt.net, ckpt.optim, Some(ckpt.state))
        }
        None => (preset.net.clone(), preset.optim.clone(), None),
    };
    let fallback = &preset.forge.alphabet;
    let (echo, train) = load_encoded(&a.data, fallback)?;
    check_fit(&net_cfg, &train, "training data", echo.as_ref())?;
    let (hecho, holdout) = load_encoded(&a.holdout, fallback)?;
    check_fit(&net_cfg, &holdout, "holdout data", hecho.as_ref())?;
    if train.alphabet() != holdout.alphabet() {
        bail!("training and holdout datasets use different alphabets");
    }
    if train.is_empty() && a.iters > 0 {
        return Err(usage("training dataset is empty"));
    }

    let trainer = Trainer::new(Network::new(net_cfg.clone())?, optim.clone())?;
    let mut state = state.unwrap_or_else(|| trainer.init_state(RandomSource::new(a.seed)));
    let interval = a.eval_interval.unwrap_or(preset.looping.eval_interval);
    let start = state.t;
    let initial = trainer.evaluate(&state.params, &holdout)?;
    let mut rows = vec![MetricsRow {
        run: "train".into(),
        round: 0,
        iter: start,
        lr: Some(lr_at(&optim, start)),
        loss: None,
        seq_acc: Some(initial.sequence),
        char_acc: Some(initial.per_char),
        train_size: Some(train.len()),
        mean_eta: None,
    }];
    let trace = trainer.train_for(
        &mut state,
        &train,
        a.iters,
        Some(EvalPlan {
            set: &holdout,
            interval,
        }),
    )?;
    let mut prev = start;
    for e in &trace.evals {
        rows.push(MetricsRow {
            run: "train".into(),
            round: 0,
            iter: e.t,
            lr: Some(lr_at(&optim, e.t)),
            loss: trace.mean_loss(prev.checked_sub(1), e.t - 1),
            seq_acc: Some(e.accuracy.sequence),
            char_acc: Some(e.accuracy.per_char),
            train_size: Some(train.len()),
            mean_eta: None,
        });
        prev = e.t;
    }

    let ckpt_path = io::prepare_output(&a.out, "checkpoint.bin")?;
    io::save_checkpoint(
        &Checkpoint {
            net: net_cfg.clone(),
            optim: optim.clone(),
            state,
        },
        &ckpt_path,
    )?;
    io::write_metrics(&rows, &a.out.join("metrics.csv"))?;
    io::write_json(
        &serde_json::json!({
            "command": "train",
            "seed": a.seed,
            "iters": a.iters,
            "eval_interval": interval,
            "resume": a.resume,
            "net": net_cfg,
            "optim": optim,
            "data": echo,
        }),
        &a.out.join("config.json"),
    )?;
    let last = rows.last().expect("initial row");
    println!(
        "trained {} steps; loss={} seq_acc={:.4} char_acc={:.4}; wrote {}",
        a.iters,
        last.loss.map_or_else(|| "-".into(), |l| format!("{l:.4}")),
        last.seq_acc.unwrap_or(0.0),
        last.char_acc.unwrap_or(0.0),
        a.out.display()
    );
    Ok(())
}

fn cmd_active(a: ActiveArgs) -> anyhow::Result<()> {
    let set_policy = match a.set_policy {
        SetPolicyArg::Augment => SetPolicy::Augment,
        SetPolicyArg::Replace => SetPolicy::Replace,
    };
    let preset = a.preset.expand_for(set_policy);
    let mut looping = preset.looping.clone();
    if let Some(r) = a.rounds {
        looping.rounds = r as usize;
    }
    looping.selection = SelectionPolicy {
        strategy: a.strategy.into(),
        k: a.k.unwrap_or(looping.selection.k),
    };
    looping.repeats = a.repeats as usize;
    looping.initial_train_size = a.initial.unwrap_or(looping.initial_train_size);
    looping.pool_size = a.pool.unwrap_or(looping.pool_size);
    looping.holdout_size = a.holdout.unwrap_or(looping.holdout_size);
    looping.reset_weights = a.reset_weights;
    looping.reset_optimizer = a.reset_optimizer;
    if let Some(iters) = a.iters {
        looping.schedule = vec![ScheduleBand {
            through_round: looping.rounds,
            iterations: iters,
        }];
    } else if let Some(last) = looping.schedule.last_mut() {
        // Extra rounds keep the final budget.
        last.through_round = last.through_round.max(looping.rounds);
    }
    let cfg = ExperimentConfig {
        forge: preset.forge,
        net: preset.net,
        optim: preset.optim,
        looping,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let result = run_experiment(&cfg, a.seed)?;
    let metrics = io::prepare_output(&a.out, "metrics.csv")?;
    io::write_metrics(&result.metrics_rows(), &metrics)?;
    io::write_round_records(result.records(), &a.out.join("rounds.jsonl"))?;
    io::write_json(
        &serde_json::json!({
            "command": "active",
            "seed": a.seed,
            "forge": cfg.forge,
            "net": cfg.net,
            "optim": cfg.optim,
            "loop": cfg.looping,
        }),
        &a.out.join("config.json"),
    )?;
    for (i, acc) in result.mean_accuracy_by_round().iter().enumerate() {
        println!("round {} mean_seq_acc={acc:.4}", i + 1);
    }
    println!(
        "wrote {} round records to {}",
        result.records().count(),
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let ckpt = io::load_checkpoint(&a.checkpoint)?;
    let fallback = match ckpt.net.head.classes {
        10 => Alphabet::digits(),
        _ => Alphabet::full(),
    };
    let (echo, set) = load_encoded(&a.data, &fallback)?;
    check_fit(&ckpt.net, &set, "dataset", echo.as_ref())?;
    if set.is_empty() {
        return Err(usage("dataset is empty"));
    }
    let net = Network::new(ckpt.net.clone())?;
    let scored = score_pool(&net, &ckpt.state.params, &set)?;
    let trainer = Trainer::new(net, ckpt.optim.clone())?;
    let acc = trainer.evaluate(&ckpt.state.params, &set)?;
    let mean_eta = scored.iter().map(|s| s.eta).sum::<f64>() / scored.len() as f64;
    println!("samples: {}", set.len());
    println!("sequence accuracy: {:.4}", acc.sequence);
    println!("per-character accuracy: {:.4}", acc.per_char);
    println!("mean uncertainty: {mean_eta:.4}");
    println!(
        "seq_acc={} char_acc={} mean_eta={}",
        io::format_sig6(acc.sequence),
        io::format_sig6(acc.per_char),
        io::format_sig6(mean_eta)
    );
    Ok(())
}
