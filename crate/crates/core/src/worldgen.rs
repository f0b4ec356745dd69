//! Synthetic worlds with a known true reward, and preference datasets drawn
//! from them.
//!
//! A `hackable` world removes a few responses per prompt from the support of
//! the pair distribution and gives those responses the lowest true rewards of
//! their row. A reward model fitted to the data never sees them, so whatever
//! value it holds there is unconstrained, and a policy that exploits an
//! overestimate loses true value.

use ndarray::{Array2, Array3};
use rand::distributions::{Distribution as _, WeightedIndex};
use rand::rngs::StdRng;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::dist::{masked_softmax, Distribution, PairDistribution, PromptSpace, ResponseSpace, Space, TabularPolicy};
use crate::error::{Error, Result};
use crate::preference::{sigmoid, PreferenceDataset, PreferenceTuple};
use crate::reward::RewardTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageProfile {
    Full,
    Hackable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_prompts: usize,
    pub n_responses: usize,
    pub reward_bound: f64,
    pub coverage_profile: CoverageProfile,
    /// Responses per prompt excluded from the pair distribution (hackable only).
    pub n_uncovered: usize,
    /// Softmax temperature of the rejection-sampling base policy.
    pub base_temperature: f64,
    /// Softmax temperature of the reference policy.
    pub ref_temperature: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_prompts: 8,
            n_responses: 10,
            reward_bound: 2.0,
            coverage_profile: CoverageProfile::Hackable,
            n_uncovered: 2,
            base_temperature: 1.5,
            ref_temperature: 0.25,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn full(n_prompts: usize, n_responses: usize, reward_bound: f64, seed: u64) -> Self {
        Self {
            n_prompts,
            n_responses,
            reward_bound,
            coverage_profile: CoverageProfile::Full,
            n_uncovered: 0,
            seed,
            ..Self::default()
        }
    }

    /// Number of responses per prompt that the pair distribution leaves out.
    pub fn effective_uncovered(&self) -> usize {
        match self.coverage_profile {
            CoverageProfile::Full => 0,
            CoverageProfile::Hackable => self.n_uncovered,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_prompts == 0 {
            return bad("n_prompts must be positive".into());
        }
        if self.n_responses < 2 {
            return bad("n_responses must be at least 2".into());
        }
        if !(self.reward_bound > 0.0 && self.reward_bound.is_finite()) {
            return bad(format!("reward_bound must be positive, got {}", self.reward_bound));
        }
        if self.n_uncovered >= self.n_responses {
            return bad(format!(
                "n_uncovered ({}) must be below n_responses ({})",
                self.n_uncovered, self.n_responses
            ));
        }
        if self.n_responses - self.effective_uncovered() < 2 {
            return bad("at least two covered responses are needed to form pairs".into());
        }
        for (name, t) in [
            ("base_temperature", self.base_temperature),
            ("ref_temperature", self.ref_temperature),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("{name} must be positive, got {t}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "crate::schema::WorldRepr", try_from = "crate::schema::WorldRepr")]
pub struct World {
    pub prompts: PromptSpace,
    pub responses: ResponseSpace,
    pub true_reward: RewardTable,
    pub mu: Distribution,
    pub pair_dist: PairDistribution,
    pub pi_ref: TabularPolicy,
    pub pi0: TabularPolicy,
    /// Responses left out of the pair distribution, per prompt, ascending.
    pub uncovered: Vec<Vec<usize>>,
    pub seed: u64,
}

impl World {
    pub fn n_prompts(&self) -> usize {
        self.prompts.size
    }

    pub fn n_responses(&self) -> usize {
        self.responses.size
    }

    pub fn bound(&self) -> f64 {
        self.true_reward.bound()
    }

    pub fn is_uncovered(&self, x: usize, a: usize) -> bool {
        self.uncovered[x].binary_search(&a).is_ok()
    }
}

pub fn make_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let (nx, na) = (cfg.n_prompts, cfg.n_responses);
    let bound = cfg.reward_bound;
    let k = cfg.effective_uncovered();
    let mut rng = StdRng::seed_from_u64(cfg.seed);

    let mut rewards = Array2::zeros((nx, na));
    let mut uncovered = Vec::with_capacity(nx);
    for x in 0..nx {
        let mut draws: Vec<f64> = (0..na).map(|_| rng.gen_range(-bound..bound)).collect();
        let mut hidden: Vec<usize> = index::sample(&mut rng, na, k).into_vec();
        hidden.sort_unstable();
        if k > 0 {
            draws.sort_by(f64::total_cmp);
            let (low, high) = draws.split_at_mut(k);
            high.shuffle(&mut rng);
            let mut low = low.iter();
            let mut high = high.iter();
            for a in 0..na {
                let v = if hidden.binary_search(&a).is_ok() {
                    low.next()
                } else {
                    high.next()
                };
                rewards[[x, a]] = *v.expect("partition sizes match");
            }
        } else {
            for (a, v) in draws.into_iter().enumerate() {
                rewards[[x, a]] = v;
            }
        }
        uncovered.push(hidden);
    }
    let true_reward = RewardTable::new(rewards, bound)?;

    let mut pair = Array3::zeros((nx, na, na));
    let mut pi_ref = Array2::zeros((nx, na));
    let mut pi0 = Array2::zeros((nx, na));
    let all = vec![true; na];
    for x in 0..nx {
        let covered: Vec<bool> = (0..na).map(|a| uncovered[x].binary_search(&a).is_err()).collect();
        let m = covered.iter().filter(|c| **c).count();
        let cell = 1.0 / (nx * m * (m - 1)) as f64;
        for a1 in 0..na {
            for a2 in 0..na {
                if a1 != a2 && covered[a1] && covered[a2] {
                    pair[[x, a1, a2]] = cell;
                }
            }
        }
        let row = true_reward.row(x);
        let p_ref = masked_softmax(row, cfg.ref_temperature, &covered);
        let p_base = masked_softmax(row, cfg.base_temperature, &all);
        for a in 0..na {
            pi_ref[[x, a]] = p_ref[a];
            pi0[[x, a]] = p_base[a];
        }
    }
    let pair_dist = PairDistribution::new(pair)?;
    let mu = pair_dist.prompt_marginal();

    Ok(World {
        prompts: Space::new(nx)?,
        responses: Space::new(na)?,
        true_reward,
        mu,
        pair_dist,
        pi_ref: TabularPolicy::new(pi_ref)?,
        pi0: TabularPolicy::new(pi0)?,
        uncovered,
        seed: cfg.seed,
    })
}

/// Draws `n` i.i.d. comparisons from the pair distribution and labels each
/// with the Bradley-Terry model of the true reward.
pub fn sample_dataset(world: &World, n: usize, seed: u64) -> Result<PreferenceDataset> {
    if n == 0 {
        return Err(Error::EmptyData);
    }
    let (nx, na) = (world.n_prompts(), world.n_responses());
    let cells = WeightedIndex::new(world.pair_dist.tensor().iter()).map_err(|e| Error::Distribution(e.to_string()))?;
    let mut rng = StdRng::seed_from_u64(seed);
    let tuples = (0..n)
        .map(|_| {
            let c = cells.sample(&mut rng);
            let (x, a1, a2) = (c / (na * na), (c / na) % na, c % na);
            debug_assert!(x < nx);
            let p = sigmoid(world.true_reward.get(x, a1) - world.true_reward.get(x, a2));
            PreferenceTuple {
                x,
                a1,
                a2,
                preferred: rng.gen::<f64>() < p,
            }
        })
        .collect();
    PreferenceDataset::new(nx, na, tuples)
}
