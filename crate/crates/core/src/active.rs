//! Multi-round active learning: train, score the pool, keep the correctly
//! predicted samples chosen by the selection policy, grow or replace the
//! training set, retrain.
//!
//! The loop never reads pool labels directly. It sees only whether its own
//! prediction was right, and trains on that prediction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::HeadLayout;
use crate::dataset::EncodedSet;
use crate::error::{Error, Result};
use crate::forge::{generate_dataset, generate_with_repeats, ForgeConfig, LabeledSample};
use crate::io::MetricsRow;
use crate::net::{NetConfig, Network};
use crate::rng::RandomSource;
use crate::select::{score_pool, select, SelectionPolicy, Strategy};
use crate::trainer::{lr_at, EvalPlan, OptimConfig, TrainState, TrainTrace, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetPolicy {
    /// Selected samples are appended to the training set.
    Augment,
    /// The training set becomes exactly the selected samples.
    Replace,
}

impl std::str::FromStr for SetPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "augment" => Ok(SetPolicy::Augment),
            "replace" => Ok(SetPolicy::Replace),
            other => Err(Error::Usage(format!("unknown set policy '{other}'"))),
        }
    }
}

/// Rounds up to and including `through_round` train for `iterations` steps.
/// Rounds count from 1; round 1 is the initial training on the seed set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleBand {
    pub through_round: usize,
    pub iterations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    /// Total rounds, including the initial training (round 1).
    pub rounds: usize,
    pub initial_train_size: usize,
    pub pool_size: usize,
    pub holdout_size: usize,
    pub selection: SelectionPolicy,
    pub set_policy: SetPolicy,
    pub schedule: Vec<ScheduleBand>,
    pub eval_interval: u64,
    pub repeats: usize,
    /// Remove selected samples from later rounds' pools.
    pub consume_pool: bool,
    /// Under [`SetPolicy::Replace`], keep the initial set alongside the
    /// selection.
    pub keep_initial: bool,
    /// Re-initialize weights before each round's training.
    pub reset_weights: bool,
    /// Zero momentum and restart the learning-rate schedule each round.
    pub reset_optimizer: bool,
}

impl LoopConfig {
    /// Twenty rounds of augmenting with the 5000 most uncertain correct
    /// samples, 50000 iterations per round.
    pub fn paper_exp1() -> Self {
        LoopConfig {
            rounds: 20,
            initial_train_size: 10_000,
            pool_size: 50_000,
            holdout_size: 10_000,
            selection: SelectionPolicy {
                strategy: Strategy::MostUncertain,
                k: 5_000,
            },
            set_policy: SetPolicy::Augment,
            schedule: vec![ScheduleBand {
                through_round: 20,
                iterations: 50_000,
            }],
            eval_interval: 5_000,
            repeats: 2,
            consume_pool: true,
            keep_initial: false,
            reset_weights: false,
            reset_optimizer: false,
        }
    }

    /// Forty rounds replacing the training set with the correctly classified
    /// pool samples under a decaying iteration budget.
    pub fn paper_exp2() -> Self {
        let band = |through_round, iterations| ScheduleBand {
            through_round,
            iterations,
        };
        LoopConfig {
            rounds: 40,
            initial_train_size: 10_000,
            pool_size: 100_000,
            holdout_size: 10_000,
            selection: SelectionPolicy {
                strategy: Strategy::All,
                k: 5_000,
            },
            set_policy: SetPolicy::Replace,
            schedule: vec![
                band(5, 50_000),
                band(10, 25_000),
                band(15, 20_000),
                band(20, 15_000),
                band(25, 10_000),
                band(40, 5_000),
            ],
            eval_interval: 5_000,
            repeats: 2,
            consume_pool: false,
            keep_initial: false,
            reset_weights: false,
            reset_optimizer: false,
        }
    }

    /// Desk-scale loop for the three-digit preset.
    pub fn mini() -> Self {
        LoopConfig {
            rounds: 6,
            initial_train_size: 500,
            pool_size: 5_000,
            holdout_size: 500,
            selection: SelectionPolicy {
                strategy: Strategy::MostUncertain,
                k: 500,
            },
            set_policy: SetPolicy::Augment,
            schedule: vec![ScheduleBand {
                through_round: 6,
                iterations: 2_000,
            }],
            eval_interval: 500,
            repeats: 2,
            consume_pool: true,
            keep_initial: false,
            reset_weights: false,
            reset_optimizer: false,
        }
    }

    /// Applies the default pool handling for a set policy: consume under
    /// augment, rescore everything under replace.
    pub fn with_set_policy(mut self, policy: SetPolicy) -> Self {
        self.set_policy = policy;
        self.consume_pool = policy == SetPolicy::Augment;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.rounds == 0 {
            return bad("at least one round is required".into());
        }
        if self.initial_train_size == 0 || self.holdout_size == 0 {
            return bad("initial and holdout sets must be non-empty".into());
        }
        if self.rounds > 1 && self.pool_size == 0 {
            return bad("selection rounds need a non-empty pool".into());
        }
        if self.eval_interval == 0 || self.repeats == 0 {
            return bad("eval_interval and repeats must be >= 1".into());
        }
        if self.schedule.is_empty() {
            return bad("empty iteration schedule".into());
        }
        for w in self.schedule.windows(2) {
            if w[1].through_round <= w[0].through_round {
                return bad("schedule bands must have increasing through_round".into());
            }
            if w[1].iterations > w[0].iterations {
                return bad("schedule iterations must be non-increasing".into());
            }
        }
        let last = self.schedule.last().expect("checked non-empty");
        if last.through_round < self.rounds {
            return bad(format!(
                "schedule ends at round {} but {} rounds are configured",
                last.through_round, self.rounds
            ));
        }
        Ok(())
    }

    pub fn iterations_for(&self, round: usize) -> u64 {
        self.schedule
            .iter()
            .find(|b| round <= b.through_round)
            .map_or(0, |b| b.iterations)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Global step count when the holdout was evaluated.
    pub iter: u64,
    /// Learning rate the next step would use.
    pub lr: f64,
    /// Mean batch loss since the previous evaluation.
    pub loss: Option<f64>,
    pub seq_acc: f64,
    pub char_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub run: String,
    pub strategy: String,
    pub repeat: usize,
    pub round: usize,
    /// Pool indices chosen this round.
    pub selected: Vec<usize>,
    /// Labels the loop attached to `selected` (its own predictions).
    pub selected_labels: Vec<String>,
    /// Pool indices present in the training set after this round.
    pub train_pool_indices: Vec<usize>,
    /// Initial-set samples present in the training set after this round.
    pub train_initial: usize,
    pub train_set_size: usize,
    pub pool_scored: usize,
    pub pool_correct_rate: Option<f64>,
    pub eta_min: Option<f64>,
    pub eta_mean: Option<f64>,
    pub eta_max: Option<f64>,
    pub accuracy: Vec<EvalPoint>,
    pub skipped: bool,
    pub warning: Option<String>,
}

impl RoundRecord {
    /// Holdout sequence accuracy after the round (the last evaluation).
    pub fn final_accuracy(&self) -> Option<f64> {
        self.accuracy.last().map(|p| p.seq_acc)
    }

    pub fn metrics_rows(&self) -> Vec<MetricsRow> {
        self.accuracy
            .iter()
            .map(|p| MetricsRow {
                run: self.run.clone(),
                round: self.round,
                iter: p.iter,
                lr: Some(p.lr),
                loss: p.loss,
                seq_acc: Some(p.seq_acc),
                char_acc: Some(p.char_acc),
                train_size: Some(self.train_set_size),
                mean_eta: self.eta_mean,
            })
            .collect()
    }
}

/// Disjoint splits of one generated corpus. Pool indices in records refer to
/// positions in `pool`.
#[derive(Debug, Clone)]
pub struct Splits {
    pub initial: EncodedSet,
    pub pool: EncodedSet,
    pub holdout: EncodedSet,
    /// Generator labels of `pool`, for auditing.
    pub pool_samples: Vec<LabeledSample>,
}

/// Generates `initial + pool + holdout` samples and cuts them in that order.
/// Labels are pairwise distinct when the label space allows it.
pub fn make_splits(forge: &ForgeConfig, lc: &LoopConfig, head: HeadLayout) -> Result<Splits> {
    let n = lc.initial_train_size + lc.pool_size + lc.holdout_size;
    let samples = if n as u128 <= forge.label_space() {
        generate_dataset(forge, n)?
    } else {
        generate_with_repeats(forge, n)?
    };
    let a = lc.initial_train_size;
    let b = a + lc.pool_size;
    let enc = |s: &[LabeledSample]| EncodedSet::from_samples(s, &forge.alphabet, head);
    Ok(Splits {
        initial: enc(&samples[..a])?,
        pool: enc(&samples[a..b])?,
        holdout: enc(&samples[b..])?,
        pool_samples: samples[a..b].to_vec(),
    })
}

fn repeat_source(seed: u64, repeat: usize) -> RandomSource {
    RandomSource::new(seed).child_indexed("repeat", repeat as u64)
}

/// The corpus an experiment with `seed` uses for `repeat`.
pub fn repeat_splits(cfg: &ExperimentConfig, seed: u64, repeat: usize) -> Result<Splits> {
    let forge = ForgeConfig {
        seed: repeat_source(seed, repeat).child("data").seed(),
        ..cfg.forge.clone()
    };
    make_splits(&forge, &cfg.looping, cfg.net.head)
}

/// A named selection policy; the name becomes the run id prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub policy: SelectionPolicy,
}

impl Arm {
    pub fn new(policy: SelectionPolicy) -> Self {
        Arm {
            name: policy.strategy.name().to_string(),
            policy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub arm: String,
    /// One list of records per repeat.
    pub runs: Vec<Vec<RoundRecord>>,
}

impl ExperimentResult {
    pub fn records(&self) -> impl Iterator<Item = &RoundRecord> {
        self.runs.iter().flatten()
    }

    /// Holdout sequence accuracy per round, averaged over repeats.
    pub fn mean_accuracy_by_round(&self) -> Vec<f64> {
        let rounds = self.runs.iter().map(Vec::len).max().unwrap_or(0);
        (0..rounds)
            .map(|r| {
                let vals: Vec<f64> = self
                    .runs
                    .iter()
                    .filter_map(|run| run.iter().take(r + 1).rev().find_map(|rec| rec.final_accuracy()))
                    .collect();
                vals.iter().sum::<f64>() / vals.len().max(1) as f64
            })
            .collect()
    }

    pub fn mean_final_accuracy(&self) -> f64 {
        self.mean_accuracy_by_round().last().copied().unwrap_or(0.0)
    }

    pub fn metrics_rows(&self) -> Vec<MetricsRow> {
        self.records().flat_map(RoundRecord::metrics_rows).collect()
    }
}

/// Everything an experiment needs besides the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub forge: ForgeConfig,
    pub net: NetConfig,
    pub optim: OptimConfig,
    pub looping: LoopConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.forge.validate()?;
        self.optim.validate()?;
        self.looping.validate()?;
        let head = self.net.head;
        if head.length != self.forge.code_length || head.classes != self.forge.alphabet.len() {
            return Err(Error::InvalidConfig(format!(
                "network head {}x{} does not fit codes of {} over {} characters",
                head.length,
                head.classes,
                self.forge.code_length,
                self.forge.alphabet.len()
            )));
        }
        if (self.net.input_height, self.net.input_width) != (self.forge.height, self.forge.width) {
            return Err(Error::InvalidConfig(format!(
                "network input {}x{} does not match images {}x{}",
                self.net.input_width, self.net.input_height, self.forge.width, self.forge.height
            )));
        }
        Ok(())
    }
}

/// Runs the configured loop `repeats` times. Each repeat draws its own
/// corpus and initial weights from `seed`; the forge config's own seed is
/// replaced.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentResult> {
    let arm = Arm::new(cfg.looping.selection);
    let mut out = run_arms(cfg, &[arm], seed)?;
    Ok(out.pop().expect("one arm"))
}

/// Runs several selection policies on identical corpora and identical
/// first-round models, one result per arm.
pub fn compare_strategies(cfg: &ExperimentConfig, arms: &[Arm], seed: u64) -> Result<Vec<ExperimentResult>> {
    if arms.len() < 2 {
        return Err(Error::Usage("comparison needs at least two strategies".into()));
    }
    let mut names: Vec<&str> = arms.iter().map(|a| a.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != arms.len() {
        return Err(Error::Usage("strategy names must be distinct".into()));
    }
    run_arms(cfg, arms, seed)
}

fn run_arms(cfg: &ExperimentConfig, arms: &[Arm], seed: u64) -> Result<Vec<ExperimentResult>> {
    cfg.validate()?;
    let net = Network::new(cfg.net.clone())?;
    let trainer = Trainer::new(net, cfg.optim.clone())?;
    let mut results: Vec<ExperimentResult> = arms
        .iter()
        .map(|a| ExperimentResult {
            arm: a.name.clone(),
            runs: Vec::new(),
        })
        .collect();
    for repeat in 0..cfg.looping.repeats {
        let rrs = repeat_source(seed, repeat);
        let splits = repeat_splits(cfg, seed, repeat)?;
        let lp = Loop {
            trainer: &trainer,
            lc: &cfg.looping,
            splits: &splits,
            rs: &rrs,
        };
        let (state, round1) = lp.initial_round().map_err(|e| round_err(1, e))?;
        let runs: Vec<Vec<RoundRecord>> = arms
            .par_iter()
            .map(|arm| lp.rounds(arm, repeat, state.clone(), &round1))
            .collect::<Result<_>>()?;
        for (res, run) in results.iter_mut().zip(runs) {
            res.runs.push(run);
        }
    }
    Ok(results)
}

fn round_err(round: usize, e: Error) -> Error {
    match e {
        e @ Error::Round { .. } => e,
        e => Error::Round {
            round,
            source: Box::new(e),
        },
    }
}

struct Loop<'a> {
    trainer: &'a Trainer,
    lc: &'a LoopConfig,
    splits: &'a Splits,
    rs: &'a RandomSource,
}

impl Loop<'_> {
    fn initial_round(&self) -> Result<(TrainState, RoundRecord)> {
        let mut state = self.trainer.init_state(self.rs.child("train"));
        let mut accuracy = vec![self.eval_point(&state)?];
        let trace = self.train(&mut state, &self.splits.initial, 1)?;
        accuracy.extend(self.trace_points(&trace, 0));
        let record = RoundRecord {
            run: String::new(),
            strategy: String::new(),
            repeat: 0,
            round: 1,
            selected: Vec::new(),
            selected_labels: Vec::new(),
            train_pool_indices: Vec::new(),
            train_initial: self.splits.initial.len(),
            train_set_size: self.splits.initial.len(),
            pool_scored: 0,
            pool_correct_rate: None,
            eta_min: None,
            eta_mean: None,
            eta_max: None,
            accuracy,
            skipped: false,
            warning: None,
        };
        Ok((state, record))
    }

    fn rounds(
        &self,
        arm: &Arm,
        repeat: usize,
        mut state: TrainState,
        round1: &RoundRecord,
    ) -> Result<Vec<RoundRecord>> {
        let run = format!("{}-{repeat}", arm.name);
        let mut first = round1.clone();
        first.run = run.clone();
        first.strategy = arm.name.clone();
        first.repeat = repeat;
        progress(&first);
        let mut records = vec![first];

        let pool = &self.splits.pool;
        let mut train = self.splits.initial.clone();
        let mut train_initial = train.len();
        let mut train_pool: Vec<usize> = Vec::new();
        let mut available: Vec<usize> = (0..pool.len()).collect();

        for round in 2..=self.lc.rounds {
            let rec = (|| -> Result<RoundRecord> {
                let scope = if available.len() == pool.len() {
                    None
                } else {
                    Some(pool.subset(&available))
                };
                let scored = if available.is_empty() {
                    Vec::new()
                } else {
                    score_pool(self.trainer.network(), &state.params, scope.as_ref().unwrap_or(pool))?
                };
                let correct = scored.iter().filter(|s| s.correct).count();
                let mut sel_rs = self.rs.child_indexed("select", round as u64);
                let picked = select(&scored, arm.policy, &mut sel_rs);
                let selected: Vec<usize> = picked.iter().map(|&i| available[i]).collect();
                let selected_labels: Vec<String> = picked
                    .iter()
                    .map(|&i| scored[i].predicted.as_str().to_string())
                    .collect();
                let etas: Vec<f64> = picked.iter().map(|&i| scored[i].eta).collect();

                let mut rec = RoundRecord {
                    run: run.clone(),
                    strategy: arm.name.clone(),
                    repeat,
                    round,
                    selected: selected.clone(),
                    selected_labels,
                    train_pool_indices: Vec::new(),
                    train_initial,
                    train_set_size: train.len(),
                    pool_scored: scored.len(),
                    pool_correct_rate: (!scored.is_empty()).then(|| correct as f64 / scored.len() as f64),
                    eta_min: etas.iter().copied().reduce(f64::min),
                    eta_mean: (!etas.is_empty()).then(|| etas.iter().sum::<f64>() / etas.len() as f64),
                    eta_max: etas.iter().copied().reduce(f64::max),
                    accuracy: Vec::new(),
                    skipped: false,
                    warning: None,
                };

                if selected.is_empty() && self.lc.set_policy == SetPolicy::Replace {
                    rec.train_pool_indices = train_pool.clone();
                    rec.skipped = true;
                    rec.warning = Some("no correctly predicted pool samples; training set kept and round skipped".into());
                    return Ok(rec);
                }

                match self.lc.set_policy {
                    SetPolicy::Augment => {}
                    SetPolicy::Replace => {
                        train = if self.lc.keep_initial {
                            self.splits.initial.clone()
                        } else {
                            self.splits.initial.subset(&[])
                        };
                        train_initial = train.len();
                        train_pool.clear();
                    }
                }
                for (&i, &local) in selected.iter().zip(&picked) {
                    train.push_from(pool, i, &scored[local].predicted)?;
                    train_pool.push(i);
                }
                if self.lc.consume_pool {
                    let taken: std::collections::HashSet<usize> = selected.iter().copied().collect();
                    available.retain(|i| !taken.contains(i));
                }
                rec.train_pool_indices = train_pool.clone();
                rec.train_initial = train_initial;
                rec.train_set_size = train.len();

                if self.lc.reset_weights {
                    state = self
                        .trainer
                        .init_state(self.rs.child("train").child_indexed("reinit", round as u64));
                } else if self.lc.reset_optimizer {
                    state.reset_optimizer();
                }
                let start = state.t;
                let trace = self.train(&mut state, &train, round)?;
                rec.accuracy = self.trace_points(&trace, start);
                if rec.accuracy.is_empty() {
                    rec.accuracy.push(self.eval_point(&state)?);
                }
                Ok(rec)
            })()
            .map_err(|e| round_err(round, e))?;
            if let Some(w) = &rec.warning {
                eprintln!("warning: run={} round={round}: {w}", rec.run);
            }
            progress(&rec);
            records.push(rec);
        }
        Ok(records)
    }

    fn train(&self, state: &mut TrainState, data: &EncodedSet, round: usize) -> Result<TrainTrace> {
        let plan = EvalPlan {
            set: &self.splits.holdout,
            interval: self.lc.eval_interval,
        };
        self.trainer
            .train_for(state, data, self.lc.iterations_for(round), Some(plan))
    }

    fn eval_point(&self, state: &TrainState) -> Result<EvalPoint> {
        let acc = self.trainer.evaluate(&state.params, &self.splits.holdout)?;
        Ok(EvalPoint {
            iter: state.t,
            lr: lr_at(self.trainer.config(), state.t),
            loss: None,
            seq_acc: acc.sequence,
            char_acc: acc.per_char,
        })
    }

    /// Evaluations of a training call; each carries the mean loss of the steps
    /// since the previous evaluation (or since `start`).
    fn trace_points(&self, trace: &TrainTrace, start: u64) -> Vec<EvalPoint> {
        let mut prev = start;
        trace
            .evals
            .iter()
            .map(|e| {
                // Steps are keyed by their pre-update t, evaluations by post-update t.
                let loss = trace.mean_loss(prev.checked_sub(1), e.t - 1);
                prev = e.t;
                EvalPoint {
                    iter: e.t,
                    lr: lr_at(self.trainer.config(), e.t),
                    loss,
                    seq_acc: e.accuracy.sequence,
                    char_acc: e.accuracy.per_char,
                }
            })
            .collect()
    }
}

fn progress(rec: &RoundRecord) {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    eprintln!(
        "round={} strategy={} train_size={} pool_correct={} acc={}",
        rec.round,
        rec.strategy,
        rec.train_set_size,
        fmt(rec.pool_correct_rate),
        fmt(rec.final_accuracy())
    );
}
