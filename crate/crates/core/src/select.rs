//! Best-versus-runner-up uncertainty and pool selection.
//!
//! `eta` is the mean over characters of `second_best / best`, so 0 means every
//! character is predicted with certainty and 1 means every character has a
//! tie at the top. Higher is more uncertain.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{LabelSeq, PredDist};
use crate::dataset::EncodedSet;
use crate::error::{Error, Result};
use crate::net::{ModelParams, Network};
use crate::rng::RandomSource;

pub fn eta(dist: &PredDist) -> Result<f64> {
    if dist.classes() < 2 {
        return Err(Error::InvalidDistribution(format!(
            "rows of {} entries have no runner-up",
            dist.classes()
        )));
    }
    let mut total = 0.0;
    for row in dist.rows() {
        let (mut best, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &p in row {
            if p > best {
                second = best;
                best = p;
            } else if p > second {
                second = p;
            }
        }
        if !(best > 0.0 && best.is_finite() && second >= 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "row with maximum {best} and runner-up {second}"
            )));
        }
        total += second / best;
    }
    Ok(total / dist.length() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub pool_index: usize,
    pub predicted: LabelSeq,
    pub correct: bool,
    pub eta: f64,
}

/// Predicts every pool sample in eval mode and scores it. Output follows pool
/// order.
pub fn score_pool(net: &Network, params: &ModelParams, pool: &EncodedSet) -> Result<Vec<ScoredSample>> {
    if pool.is_empty() {
        return Err(Error::Usage("cannot score an empty pool".into()));
    }
    let head = net.head();
    if pool.head() != head || (pool.height(), pool.width()) != (net.config().input_height, net.config().input_width) {
        return Err(Error::shape(
            "score_pool",
            format!(
                "pool is {}x{} with {}x{} labels, network expects {}x{} with {}x{}",
                pool.height(),
                pool.width(),
                pool.head().length,
                pool.head().classes,
                net.config().input_height,
                net.config().input_width,
                head.length,
                head.classes
            ),
        ));
    }
    let dists = net.predict(params, pool.inputs())?;
    dists
        .par_iter()
        .zip(pool.labels().par_iter())
        .enumerate()
        .map(|(i, (dist, truth))| {
            let predicted = head.decode_prediction(pool.alphabet(), dist)?;
            Ok(ScoredSample {
                pool_index: i,
                correct: &predicted == truth,
                predicted,
                eta: eta(dist)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    MostUncertain,
    LeastUncertain,
    Random,
    All,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::MostUncertain => "most_uncertain",
            Strategy::LeastUncertain => "least_uncertain",
            Strategy::Random => "random",
            Strategy::All => "all",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Accepts the full names and the short forms `most`, `least`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "most" | "most_uncertain" => Ok(Strategy::MostUncertain),
            "least" | "least_uncertain" => Ok(Strategy::LeastUncertain),
            "random" => Ok(Strategy::Random),
            "all" => Ok(Strategy::All),
            other => Err(Error::Usage(format!("unknown strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub strategy: Strategy,
    /// Ignored by [`Strategy::All`].
    pub k: usize,
}

/// Pool indices chosen from the correctly predicted samples. Ties in `eta`
/// go to the lower pool index. Returns every candidate when there are fewer
/// than `k`.
pub fn select(scored: &[ScoredSample], policy: SelectionPolicy, rs: &mut RandomSource) -> Vec<usize> {
    let mut candidates: Vec<&ScoredSample> = scored.iter().filter(|s| s.correct).collect();
    let k = policy.k;
    match policy.strategy {
        Strategy::All => candidates.iter().map(|s| s.pool_index).collect(),
        _ if candidates.len() <= k => {
            candidates.sort_by_key(|s| s.pool_index);
            candidates.iter().map(|s| s.pool_index).collect()
        }
        Strategy::Random => {
            candidates.sort_by_key(|s| s.pool_index);
            rs.sample_indices(candidates.len(), k)
                .into_iter()
                .map(|i| candidates[i].pool_index)
                .collect()
        }
        Strategy::MostUncertain | Strategy::LeastUncertain => {
            let descending = policy.strategy == Strategy::MostUncertain;
            candidates.sort_by(|a, b| {
                let by_eta = a.eta.partial_cmp(&b.eta).unwrap_or(Ordering::Equal);
                let by_eta = if descending { by_eta.reverse() } else { by_eta };
                by_eta.then(a.pool_index.cmp(&b.pool_index))
            });
            candidates[..k].iter().map(|s| s.pool_index).collect()
        }
    }
}
