//! Policy optimization against a fixed reward: greedy argmax, the closed-form
//! KL-regularized optimum, and a clipped-ratio policy gradient on softmax
//! logits.

use ndarray::Array2;
use rand::distributions::{Distribution as _, WeightedIndex};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::dist::TabularPolicy;
use crate::error::{Error, Result};
use crate::metrics::{kl_divergence, value};
use crate::reward::RewardTable;
use crate::worldgen::World;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptMethod {
    GreedyExact,
    KlClosedForm,
    PolicyGradient,
}

impl OptMethod {
    pub fn name(&self) -> &'static str {
        match self {
            OptMethod::GreedyExact => "greedy_exact",
            OptMethod::KlClosedForm => "kl_closed_form",
            OptMethod::PolicyGradient => "policy_gradient",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptConfig {
    /// KL weight; zero means unregularized.
    pub eta: f64,
    pub method: OptMethod,
    pub pg_steps: usize,
    /// Samples per policy-gradient step.
    pub pg_batch: usize,
    pub pg_lr: f64,
    /// Surrogate passes over each batch.
    pub pg_epochs: usize,
    pub clip_epsilon: f64,
    pub seed: u64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            eta: 0.0,
            method: OptMethod::GreedyExact,
            pg_steps: 400,
            pg_batch: 512,
            pg_lr: 2.0,
            pg_epochs: 4,
            clip_epsilon: 0.2,
            seed: 0,
        }
    }
}

impl OptConfig {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn kl(eta: f64) -> Self {
        Self {
            eta,
            method: OptMethod::KlClosedForm,
            ..Self::default()
        }
    }

    pub fn policy_gradient(eta: f64) -> Self {
        Self {
            eta,
            method: OptMethod::PolicyGradient,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be non-negative, got {}", self.eta));
        }
        match self.method {
            OptMethod::GreedyExact => {}
            OptMethod::KlClosedForm if self.eta <= 0.0 => {
                return bad("kl_closed_form needs eta > 0".into());
            }
            OptMethod::KlClosedForm => {}
            OptMethod::PolicyGradient => {
                if !(self.clip_epsilon > 0.0) {
                    return bad(format!("clip_epsilon must be positive, got {}", self.clip_epsilon));
                }
                if self.pg_steps > 0 && (self.pg_batch == 0 || self.pg_epochs == 0) {
                    return bad("pg_batch and pg_epochs must be positive".into());
                }
                if !(self.pg_lr > 0.0 && self.pg_lr.is_finite()) {
                    return bad(format!("pg_lr must be positive, got {}", self.pg_lr));
                }
            }
        }
        Ok(())
    }
}

fn argmax_first(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (a, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = a;
        }
    }
    best
}

/// Point mass on the highest-reward response of each prompt, lowest index on ties.
pub fn greedy_policy(r: &RewardTable) -> TabularPolicy {
    let choices: Vec<usize> = (0..r.n_prompts()).map(|x| argmax_first(r.row(x))).collect();
    TabularPolicy::deterministic(&choices, r.n_responses()).expect("argmax is in range")
}

/// Maximizer of `V_r(pi) - eta * KL(pi || pi_ref)`: `pi ∝ pi_ref * exp(r / eta)`.
pub fn kl_optimal_policy(r: &RewardTable, pi_ref: &TabularPolicy, eta: f64) -> Result<TabularPolicy> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Parameter(format!("eta must be positive, got {eta}")));
    }
    if (r.n_prompts(), r.n_responses()) != (pi_ref.n_prompts(), pi_ref.n_responses()) {
        return Err(Error::Shape("reward and reference policy differ in shape".into()));
    }
    let mut logits = Array2::from_elem(pi_ref.matrix().dim(), f64::NEG_INFINITY);
    for ((idx, l), &p) in logits.indexed_iter_mut().zip(pi_ref.matrix()) {
        if p > 0.0 {
            *l = p.ln() + r.get(idx.0, idx.1) / eta;
        }
    }
    softmax_rows(&logits)
}

/// Row-wise softmax; `-inf` logits map to exactly zero.
fn softmax_rows(logits: &Array2<f64>) -> Result<TabularPolicy> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|l| if l == f64::NEG_INFINITY { 0.0 } else { (l - max).exp() });
        let total = row.sum();
        row /= total;
    }
    TabularPolicy::new(out)
}

/// Stochastic clipped-ratio policy gradient on per-prompt softmax logits,
/// maximizing `V_r(pi) - eta * KL(pi || pi_ref)`.
///
/// The logits start at `ln pi_ref`; responses outside the reference support
/// stay at probability zero. Advantages are rewards centred by the exact
/// expected reward of the behaviour policy at the same prompt. The KL term is
/// differentiated analytically. The step size anneals linearly to zero.
pub fn pg_optimize(r: &RewardTable, pi_ref: &TabularPolicy, world: &World, cfg: &OptConfig) -> Result<TabularPolicy> {
    cfg.validate()?;
    let (nx, na) = (r.n_prompts(), r.n_responses());
    if (nx, na) != (pi_ref.n_prompts(), pi_ref.n_responses()) || world.mu.len() != nx {
        return Err(Error::Shape(
            "reward, reference policy and world differ in shape".into(),
        ));
    }
    let mut logits = pi_ref
        .matrix()
        .mapv(|p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY });
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let prompts = WeightedIndex::new(world.mu.probs()).map_err(|e| Error::Distribution(e.to_string()))?;

    struct Sample {
        x: usize,
        a: usize,
        advantage: f64,
        old_prob: f64,
    }

    for step in 0..cfg.pg_steps {
        let lr = cfg.pg_lr * (1.0 - step as f64 / cfg.pg_steps as f64);
        let behaviour = softmax_rows(&logits)?;
        let rows: Vec<WeightedIndex<f64>> = (0..nx)
            .map(|x| WeightedIndex::new(behaviour.row(x).iter()).map_err(|e| Error::Distribution(e.to_string())))
            .collect::<Result<_>>()?;
        let baseline: Vec<f64> = (0..nx).map(|x| behaviour.row(x).dot(&r.row(x))).collect();
        let batch: Vec<Sample> = (0..cfg.pg_batch)
            .map(|_| {
                let x = prompts.sample(&mut rng);
                let a = rows[x].sample(&mut rng);
                Sample {
                    x,
                    a,
                    advantage: r.get(x, a) - baseline[x],
                    old_prob: behaviour.prob(x, a),
                }
            })
            .collect();

        for _ in 0..cfg.pg_epochs {
            let pi = softmax_rows(&logits)?;
            let mut grad = Array2::<f64>::zeros((nx, na));
            let scale = 1.0 / cfg.pg_batch as f64;
            for s in &batch {
                let ratio = pi.prob(s.x, s.a) / s.old_prob;
                let clipped = (s.advantage > 0.0 && ratio > 1.0 + cfg.clip_epsilon)
                    || (s.advantage < 0.0 && ratio < 1.0 - cfg.clip_epsilon);
                if clipped {
                    continue;
                }
                let w = scale * s.advantage * ratio;
                for b in 0..na {
                    let indicator = if b == s.a { 1.0 } else { 0.0 };
                    grad[[s.x, b]] += w * (indicator - pi.prob(s.x, b));
                }
            }
            if cfg.eta > 0.0 {
                for x in 0..nx {
                    let kl_x: f64 = (0..na)
                        .filter(|&b| pi.prob(x, b) > 0.0)
                        .map(|b| pi.prob(x, b) * (pi.prob(x, b) / pi_ref.prob(x, b)).ln())
                        .sum();
                    for b in 0..na {
                        let p = pi.prob(x, b);
                        if p > 0.0 {
                            let d = p * ((p / pi_ref.prob(x, b)).ln() - kl_x);
                            grad[[x, b]] -= cfg.eta * world.mu.get(x) * d;
                        }
                    }
                }
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    iteration: step,
                    detail: "non-finite policy gradient".into(),
                });
            }
            logits.zip_mut_with(&grad, |l, g| {
                if l.is_finite() {
                    *l += lr * g;
                }
            });
        }
    }
    softmax_rows(&logits)
}

/// Runs the configured optimizer against `r`.
pub fn optimize(r: &RewardTable, world: &World, cfg: &OptConfig) -> Result<TabularPolicy> {
    cfg.validate()?;
    match cfg.method {
        OptMethod::GreedyExact => Ok(greedy_policy(r)),
        OptMethod::KlClosedForm => kl_optimal_policy(r, &world.pi_ref, cfg.eta),
        OptMethod::PolicyGradient => pg_optimize(r, &world.pi_ref, world, cfg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalRow {
    pub v_true: f64,
    pub v_proxy: f64,
    pub v_pet: f64,
    /// `None` when the policy leaves the reference support.
    pub kl_to_ref: Option<f64>,
}

pub fn evaluate_policy(pi: &TabularPolicy, world: &World, proxy: &RewardTable, pet: &RewardTable) -> Result<EvalRow> {
    let kl_to_ref = match kl_divergence(pi, &world.pi_ref, &world.mu) {
        Ok(kl) => Some(kl),
        Err(Error::Support { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalRow {
        v_true: value(&world.true_reward, pi, &world.mu)?,
        v_proxy: value(proxy, pi, &world.mu)?,
        v_pet: value(pet, pi, &world.mu)?,
        kl_to_ref,
    })
}
