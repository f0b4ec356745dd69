//! Proxy reward modeling by projected mini-batch gradient descent on the
//! prediction loss.

use ndarray::Array2;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preference::{accumulate_grad, ComparisonCounts, PredictionLoss, PreferenceDataset};
use crate::reward::RewardTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardInit {
    Zero,
    UniformRandom,
    /// Every cell starts at `+R`.
    Optimistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub init: RewardInit,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2.0,
            batch_size: 256,
            epochs: 40,
            init: RewardInit::Optimistic,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::Config(format!(
                "batch_size must be in 1..={n}, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

pub fn init_reward(
    init: RewardInit,
    n_prompts: usize,
    n_responses: usize,
    bound: f64,
    rng: &mut impl Rng,
) -> Result<RewardTable> {
    match init {
        RewardInit::Zero => RewardTable::zeros(n_prompts, n_responses, bound),
        RewardInit::Optimistic => RewardTable::filled(n_prompts, n_responses, bound, bound),
        RewardInit::UniformRandom => RewardTable::new(
            Array2::from_shape_fn((n_prompts, n_responses), |_| rng.gen_range(-bound..=bound)),
            bound,
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean negative log-likelihood per tuple on the full dataset.
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct ProxyFit {
    pub reward: RewardTable,
    /// Epoch 0 holds the statistics of the initialization.
    pub curve: Vec<EpochStats>,
}

/// Fits a reward table to the preferences. Each epoch runs `ceil(N / batch)`
/// steps on mini-batches drawn with replacement, with the step size annealed
/// linearly to zero over the run; cells never observed in the data keep their
/// initial value.
pub fn train_proxy(data: &PreferenceDataset, bound: f64, cfg: &TrainConfig) -> Result<ProxyFit> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    cfg.validate(data.len())?;
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut reward = init_reward(cfg.init, data.n_prompts(), data.n_responses(), bound, &mut rng)?;

    let counts = ComparisonCounts::new(data);
    let stats = |epoch: usize, r: &RewardTable| -> Result<EpochStats> {
        Ok(EpochStats {
            epoch,
            loss: counts.loss(r)? / data.len() as f64,
            accuracy: accuracy(r, data),
        })
    };
    let mut curve = vec![stats(0, &reward)?];

    let tuples = data.tuples();
    let steps = data.len().div_ceil(cfg.batch_size);
    let scale = 1.0 / cfg.batch_size as f64;
    let mut grad = Array2::zeros((data.n_prompts(), data.n_responses()));
    let total = (steps * cfg.epochs) as f64;
    for epoch in 1..=cfg.epochs {
        for k in 0..steps {
            let done = ((epoch - 1) * steps + k) as f64;
            grad.fill(0.0);
            let batch = (0..cfg.batch_size).map(|_| &tuples[rng.gen_range(0..tuples.len())]);
            accumulate_grad(&reward, batch, scale, &mut grad);
            reward = reward.descend(&grad, cfg.learning_rate * (1.0 - done / total))?;
        }
        let s = stats(epoch, &reward)?;
        if !s.loss.is_finite() {
            return Err(Error::Divergence {
                iteration: epoch,
                detail: format!("proxy loss {}", s.loss),
            });
        }
        curve.push(s);
    }
    Ok(ProxyFit { reward, curve })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub loss_per_tuple: f64,
    /// Fraction of tuples whose label agrees with the reward ordering; ties score one half.
    pub accuracy: f64,
}

pub fn proxy_loss_report(r: &RewardTable, data: &PreferenceDataset) -> Result<LossReport> {
    let loss = data.loss(r)?;
    Ok(LossReport {
        loss_per_tuple: loss / data.len() as f64,
        accuracy: accuracy(r, data),
    })
}

fn accuracy(r: &RewardTable, data: &PreferenceDataset) -> f64 {
    let score: f64 = data
        .tuples()
        .iter()
        .map(|t| {
            let d = r.get(t.x, t.a1) - r.get(t.x, t.a2);
            if d == 0.0 {
                0.5
            } else if (d > 0.0) == t.preferred {
                1.0
            } else {
                0.0
            }
        })
        .sum();
    score / data.len() as f64
}
