//! Mini-batch SGD with momentum, L2 weight decay on weights (not biases), and
//! the inverse-power schedule `lr(t) = lr0 * (1 + gamma * t)^(-power)`.
//!
//! All randomness in a step is derived from `(state seed, t)`: the dropout
//! stream is `child_indexed("dropout", t)` and the epoch permutation is
//! `child_indexed("shuffle", epoch)` with the epoch computed from `t`. A
//! restored checkpoint therefore continues exactly where it stopped.

use serde::{Deserialize, Serialize};

use crate::dataset::EncodedSet;
use crate::error::{Error, Result};
use crate::net::{Mode, ModelParams, Network};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr0: f64,
    /// Exponent of the inverse-power schedule.
    pub decay_power: f64,
    /// Rate of the inverse-power schedule.
    pub decay_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl OptimConfig {
    pub fn paper() -> Self {
        OptimConfig {
            lr0: 1e-2,
            decay_power: 0.75,
            decay_rate: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
        }
    }

    /// Same schedule and regularization, smaller batches.
    pub fn mini() -> Self {
        OptimConfig {
            batch_size: 16,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr0 > 0.0
            && self.lr0.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.decay_rate >= 0.0
            && self.decay_power >= 0.0
            && self.batch_size >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("optimizer settings {self:?}")))
        }
    }
}

pub fn lr_at(cfg: &OptimConfig, t: u64) -> f64 {
    cfg.lr0 * (1.0 + cfg.decay_rate * t as f64).powf(-cfg.decay_power)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub velocity: ModelParams,
    /// Steps applied so far, across every call and round.
    pub t: u64,
    pub rs: RandomSource,
}

impl TrainState {
    pub fn new(net: &Network, rs: RandomSource) -> Self {
        let params = net.init_params(&rs.child("init"));
        let velocity = params.zeros_like();
        TrainState {
            params,
            velocity,
            t: 0,
            rs,
        }
    }

    pub fn reset_optimizer(&mut self) {
        self.velocity = self.params.zeros_like();
        self.t = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// Fraction of codes with every character right.
    pub sequence: f64,
    pub per_char: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub t: u64,
    pub accuracy: Accuracy,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainTrace {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty() && self.evals.is_empty()
    }

    /// Mean batch loss over steps with `t` in `(after, upto]`.
    pub fn mean_loss(&self, after: Option<u64>, upto: u64) -> Option<f64> {
        let window: Vec<f64> = self
            .steps
            .iter()
            .filter(|s| after.map_or(true, |a| s.t > a) && s.t <= upto)
            .map(|s| s.loss)
            .collect();
        (!window.is_empty()).then(|| window.iter().sum::<f64>() / window.len() as f64)
    }
}

/// Held-out evaluation during training.
#[derive(Debug, Clone, Copy)]
pub struct EvalPlan<'a> {
    pub set: &'a EncodedSet,
    /// Evaluate whenever the global step count is a multiple of this; the
    /// final step of a call is always evaluated.
    pub interval: u64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    net: Network,
    cfg: OptimConfig,
}

impl Trainer {
    pub fn new(net: Network, cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer { net, cfg })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    pub fn init_state(&self, rs: RandomSource) -> TrainState {
        TrainState::new(&self.net, rs)
    }

    /// One SGD step on an explicit batch. Returns the batch loss (before the
    /// update).
    pub fn step(&self, state: &mut TrainState, batch: &Tensor, targets: &Tensor) -> Result<f64> {
        let mut drop_rs = state.rs.child_indexed("dropout", state.t);
        let cache = self
            .net
            .forward_cached(&state.params, batch, Mode::Train, &mut drop_rs)?;
        let loss = cache.loss(targets)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: state.t,
                what: "loss",
            });
        }
        let grads = self.net.backward(&state.params, &cache, targets)?;
        self.apply_gradients(state, grads)?;
        Ok(loss)
    }

    /// `g += λ·w` (weights only); `v = μ·v − lr(t)·g`; `w += v`; `t += 1`.
    pub fn apply_gradients(&self, state: &mut TrainState, mut grads: ModelParams) -> Result<()> {
        if !grads.same_shape(&state.params) || !state.velocity.same_shape(&state.params) {
            return Err(Error::shape("step", "gradient/velocity shapes differ from params"));
        }
        let lr = lr_at(&self.cfg, state.t);
        let mu = self.cfg.momentum;
        let lambda = self.cfg.weight_decay;
        for ((g, _), (p, is_weight)) in grads.tensors_mut().zip(
            state
                .params
                .tensors()
                .map(|(_, p, is_weight)| (p, is_weight)),
        ) {
            if is_weight && lambda != 0.0 {
                g.axpy(lambda, p)?;
            }
        }
        if !grads.is_finite() {
            return Err(Error::Diverged {
                iteration: state.t,
                what: "gradient",
            });
        }
        let tensors = state
            .params
            .tensors_mut()
            .zip(state.velocity.tensors_mut())
            .zip(grads.tensors());
        for (((p, _), (v, _)), (_, g, _)) in tensors {
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv - lr * gv;
                *pv += *vv;
            }
        }
        state.t += 1;
        Ok(())
    }

    /// Runs `iterations` steps over shuffled epochs of `data`.
    pub fn train_for(
        &self,
        state: &mut TrainState,
        data: &EncodedSet,
        iterations: u64,
        eval: Option<EvalPlan<'_>>,
    ) -> Result<TrainTrace> {
        let mut trace = TrainTrace::default();
        if iterations == 0 {
            return Ok(trace);
        }
        if data.is_empty() {
            return Err(Error::Usage("cannot train on an empty dataset".into()));
        }
        let mut sampler = EpochSampler::new(data.len(), self.cfg.batch_size);
        let end = state.t + iterations;
        while state.t < end {
            let t = state.t;
            let indices = sampler.batch(&state.rs, t);
            let (x, y) = data.gather(indices)?;
            let loss = self.step(state, &x, &y)?;
            trace.steps.push(StepRecord {
                t,
                lr: lr_at(&self.cfg, t),
                loss,
            });
            if let Some(plan) = eval {
                if state.t % plan.interval.max(1) == 0 || state.t == end {
                    trace.evals.push(EvalRecord {
                        t: state.t,
                        accuracy: self.evaluate(&state.params, plan.set)?,
                    });
                }
            }
        }
        Ok(trace)
    }

    pub fn evaluate(&self, params: &ModelParams, set: &EncodedSet) -> Result<Accuracy> {
        let preds = self.predict_classes(params, set)?;
        Ok(accuracy(&preds, set))
    }

    /// Argmax class per character for every sample of `set`.
    pub fn predict_classes(&self, params: &ModelParams, set: &EncodedSet) -> Result<Vec<Vec<usize>>> {
        if set.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self
            .net
            .predict(params, set.inputs())?
            .iter()
            .map(|d| d.argmax())
            .collect())
    }
}

pub(crate) fn accuracy(preds: &[Vec<usize>], set: &EncodedSet) -> Accuracy {
    if preds.is_empty() {
        return Accuracy {
            sequence: 0.0,
            per_char: 0.0,
        };
    }
    let alphabet = set.alphabet();
    let mut seq = 0usize;
    let mut chars = 0usize;
    let mut total_chars = 0usize;
    for (p, label) in preds.iter().zip(set.labels()) {
        let hits = p
            .iter()
            .zip(label.chars())
            .filter(|(&c, ch)| alphabet.encode_char(*ch).ok() == Some(c))
            .count();
        chars += hits;
        total_chars += p.len();
        if hits == p.len() {
            seq += 1;
        }
    }
    Accuracy {
        sequence: seq as f64 / preds.len() as f64,
        per_char: chars as f64 / total_chars as f64,
    }
}

/// Shuffled epochs without replacement. The epoch and in-epoch position are
/// derived from the global step `t`, so sampling is a pure function of
/// `(seed, t, dataset size)`.
struct EpochSampler {
    len: usize,
    batch: usize,
    epoch: Option<u64>,
    order: Vec<usize>,
}

impl EpochSampler {
    fn new(len: usize, batch: usize) -> Self {
        EpochSampler {
            len,
            batch: batch.min(len),
            epoch: None,
            order: Vec::new(),
        }
    }

    fn batches_per_epoch(&self) -> u64 {
        self.len.div_ceil(self.batch) as u64
    }

    fn batch(&mut self, rs: &RandomSource, t: u64) -> &[usize] {
        let per = self.batches_per_epoch();
        let (epoch, pos) = (t / per, (t % per) as usize);
        if self.epoch != Some(epoch) {
            self.order = (0..self.len).collect();
            rs.child_indexed("shuffle", epoch).shuffle(&mut self.order);
            self.epoch = Some(epoch);
        }
        let start = pos * self.batch;
        &self.order[start..(start + self.batch).min(self.len)]
    }
}
