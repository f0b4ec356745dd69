//! Best-of-n rejection sampling: a sampler, the exact induced policy, and a
//! check that sampling against `r0` is optimal for `r0` among all rejection
//! samplers sharing the base policy and `n`.

use rand::distributions::{Distribution as _, WeightedIndex};
use rand::Rng;
use serde::Serialize;

use crate::dist::{Distribution, TabularPolicy};
use crate::error::{Error, Result};
use crate::metrics::value;
use crate::reward::RewardTable;

/// Base policy, scoring reward and number of draws of a rejection sampler.
#[derive(Debug, Clone, Copy)]
pub struct RsSpec<'a> {
    pub base: &'a TabularPolicy,
    pub reward: &'a RewardTable,
    pub n: usize,
}

impl<'a> RsSpec<'a> {
    pub fn new(base: &'a TabularPolicy, reward: &'a RewardTable, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Parameter("rejection sampling needs n >= 1".into()));
        }
        if (base.n_prompts(), base.n_responses()) != (reward.n_prompts(), reward.n_responses()) {
            return Err(Error::Shape(format!(
                "base policy {}x{} vs reward {}x{}",
                base.n_prompts(),
                base.n_responses(),
                reward.n_prompts(),
                reward.n_responses()
            )));
        }
        Ok(Self { base, reward, n })
    }
}

/// Draws `n` responses from the base policy at `x` and returns the one with
/// the highest reward, keeping the earliest draw among ties.
pub fn rs_sample<R: Rng + ?Sized>(spec: &RsSpec<'_>, x: usize, rng: &mut R) -> usize {
    let sampler = WeightedIndex::new(spec.base.row(x).iter()).expect("policy row is a distribution");
    rs_sample_with(spec, x, &sampler, rng)
}

/// [`rs_sample`] with a prebuilt sampler for `base(.|x)`.
pub fn rs_sample_with<R: Rng + ?Sized>(
    spec: &RsSpec<'_>,
    x: usize,
    sampler: &WeightedIndex<f64>,
    rng: &mut R,
) -> usize {
    let mut best = sampler.sample(rng);
    let mut best_reward = spec.reward.get(x, best);
    for _ in 1..spec.n {
        let a = sampler.sample(rng);
        let v = spec.reward.get(x, a);
        if v > best_reward {
            best = a;
            best_reward = v;
        }
    }
    best
}

/// Exact output distribution of [`rs_sample`] at prompt `x`.
///
/// Responses with equal reward form a group `g`. With `F` the base mass
/// strictly below the group and `q` the group mass, the best draw lands in
/// `g` with probability `(F + q)^n - F^n`; within the group the first-hit
/// winner is distributed proportionally to base mass.
pub fn rs_exact_row(spec: &RsSpec<'_>, x: usize) -> Vec<f64> {
    let base = spec.base.row(x);
    if spec.n == 1 {
        return base.to_vec();
    }
    let rewards = spec.reward.row(x);
    let na = base.len();
    let mut order: Vec<usize> = (0..na).collect();
    order.sort_by(|&i, &j| rewards[i].total_cmp(&rewards[j]));

    let n = i32::try_from(spec.n).expect("n fits in i32");
    let mut out = vec![0.0; na];
    let mut below = 0.0;
    let mut start = 0;
    while start < na {
        let level = rewards[order[start]];
        let end = start + order[start..].iter().take_while(|&&a| rewards[a] == level).count();
        let group = &order[start..end];
        let q: f64 = group.iter().map(|&a| base[a]).sum();
        if q > 0.0 {
            let hit = (below + q).powi(n) - below.powi(n);
            for &a in group {
                out[a] = base[a] / q * hit;
            }
        }
        below += q;
        start = end;
    }
    out
}

pub fn rs_exact_policy(spec: &RsSpec<'_>) -> Result<TabularPolicy> {
    let rows: Vec<Distribution> = (0..spec.base.n_prompts())
        .map(|x| Distribution::new(rs_exact_row(spec, x)))
        .collect::<Result<_>>()?;
    TabularPolicy::from_rows(&rows)
}

/// Convenience wrapper building the spec inline.
pub fn rs_policy(base: &TabularPolicy, reward: &RewardTable, n: usize) -> Result<TabularPolicy> {
    rs_exact_policy(&RsSpec::new(base, reward, n)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct Proposition1Report {
    /// Value under `r0` of rejection sampling with `r0` itself.
    pub own_value: f64,
    /// Value under `r0` of rejection sampling with each challenger.
    pub challenger_values: Vec<f64>,
    /// `own_value - challenger_value`, one per challenger.
    pub margins: Vec<f64>,
}

impl Proposition1Report {
    pub fn min_margin(&self) -> f64 {
        self.margins.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub const PROPOSITION1_TOL: f64 = 1e-9;

/// Verifies that no challenger reward yields a rejection sampler scoring
/// higher under `r0` than rejection sampling with `r0`.
pub fn verify_proposition1(
    base: &TabularPolicy,
    r0: &RewardTable,
    n: usize,
    challengers: &[RewardTable],
    mu: &Distribution,
) -> Result<Proposition1Report> {
    if challengers.is_empty() {
        return Err(Error::Parameter("at least one challenger reward is required".into()));
    }
    let own_value = value(r0, &rs_policy(base, r0, n)?, mu)?;
    let challenger_values = challengers
        .iter()
        .map(|r| value(r0, &rs_policy(base, r, n)?, mu))
        .collect::<Result<Vec<_>>>()?;
    let margins: Vec<f64> = challenger_values.iter().map(|v| own_value - v).collect();
    let report = Proposition1Report {
        own_value,
        challenger_values,
        margins,
    };
    if report.min_margin() < -PROPOSITION1_TOL {
        let worst = report
            .margins
            .iter()
            .position(|m| *m == report.min_margin())
            .unwrap_or(0);
        return Err(Error::PropertyViolation {
            property: "rejection sampling optimality",
            detail: format!("challenger {worst} beats r0 by {}", -report.min_margin()),
        });
    }
    Ok(report)
}
