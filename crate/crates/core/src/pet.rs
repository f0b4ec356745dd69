//! Pessimistic reward fine-tuning.
//!
//! The fine-tuned reward minimizes
//!
//! ```text
//! h(r) = V_r(pi_RS(pi0, r, n)) - V_r(pi_ref) + beta * L_D(r) / N
//! ```
//!
//! over the box `[-R, R]`. Rejection sampling with `r` is the best
//! rejection sampler for `r`, so the derivative of `h` through the policy
//! vanishes and each step only differentiates with respect to `r` while the
//! freshly refreshed policy `pi_t` is held fixed.
//!
//! `Exact` mode evaluates both expectations in closed form on the full
//! dataset. `Sampled` mode follows the stochastic recipe: draw `M` tuples
//! from the dataset, one response from `pi_t` (by actually running the
//! rejection sampler) and one from `pi_ref` per tuple, and descend on the
//! per-item average of the resulting loss. That average is an unbiased
//! estimate of `h` when the prompt distribution is the dataset's own.

use ndarray::Array2;
use rand::distributions::{Distribution as _, WeightedIndex};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::dist::{Distribution, TabularPolicy};
use crate::error::{Error, Result};
use crate::metrics::value;
use crate::preference::{accumulate_grad, ComparisonCounts, PredictionLoss, PreferenceDataset, PreferenceTuple};
use crate::reward::RewardTable;
use crate::rs::{rs_policy, rs_sample_with, RsSpec};
use crate::worldgen::World;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PetMode {
    Exact,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PetConfig {
    /// Weight of the per-tuple prediction loss.
    pub beta: f64,
    /// Rejection-sampling draws.
    pub n: usize,
    pub iterations: usize,
    /// Mini-batch size in sampled mode.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mode: PetMode,
    pub seed: u64,
}

impl Default for PetConfig {
    fn default() -> Self {
        Self {
            beta: 10.0,
            n: 64,
            iterations: 500,
            batch_size: 256,
            learning_rate: 0.5,
            mode: PetMode::Exact,
            seed: 0,
        }
    }
}

impl PetConfig {
    pub fn validate(&self, n_data: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.mode == PetMode::Sampled && (self.batch_size == 0 || self.batch_size > n_data) {
            return bad(format!("batch_size must be in 1..={n_data}, got {}", self.batch_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Array2<f64>,
}

/// Exact pessimistic loss and its gradient with `pi_t` held fixed. The
/// prediction loss enters as its per-comparison mean over `batch`.
pub fn pet_loss_exact<D: PredictionLoss + ?Sized>(
    r: &RewardTable,
    pi_t: &TabularPolicy,
    pi_ref: &TabularPolicy,
    mu: &Distribution,
    batch: &D,
    beta: f64,
) -> Result<LossGrad> {
    let gap = value(r, pi_t, mu)? - value(r, pi_ref, mu)?;
    let m = batch.count() as f64;
    let loss = gap + beta * batch.loss(r)? / m;

    let mut grad = pi_t.matrix() - pi_ref.matrix();
    for (x, mut row) in grad.rows_mut().into_iter().enumerate() {
        row *= mu.get(x);
    }
    batch.add_grad(r, beta / m, &mut grad);
    Ok(LossGrad { loss, grad })
}

/// One mini-batch item of the sampled loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PetDraw {
    pub tuple: PreferenceTuple,
    /// Response drawn from the current rejection-sampling policy.
    pub response: usize,
    /// Response drawn from the reference policy.
    pub reference: usize,
}

/// Per-item average of `r(x, a) - r(x, a_ref) + beta * nll(tuple)` and its gradient.
pub fn pet_loss_sampled(r: &RewardTable, draws: &[PetDraw], beta: f64) -> Result<LossGrad> {
    if draws.is_empty() {
        return Err(Error::EmptyData);
    }
    let m = draws.len() as f64;
    let mut grad = Array2::zeros((r.n_prompts(), r.n_responses()));
    let mut loss = 0.0;
    for d in draws {
        let x = d.tuple.x;
        loss += r.try_get(x, d.response)? - r.try_get(x, d.reference)? + beta * d.tuple.neg_log_likelihood(r);
        grad[[x, d.response]] += 1.0 / m;
        grad[[x, d.reference]] -= 1.0 / m;
    }
    accumulate_grad(r, draws.iter().map(|d| &d.tuple), beta / m, &mut grad);
    Ok(LossGrad { loss: loss / m, grad })
}

/// Samples `m` items: tuples uniformly with replacement from `data`, one
/// rejection-sampled response per tuple and one reference response.
pub fn draw_pet_batch<R: Rng + ?Sized>(
    data: &PreferenceDataset,
    sampler: &RsSpec<'_>,
    pi_ref: &TabularPolicy,
    m: usize,
    rng: &mut R,
) -> Result<Vec<PetDraw>> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let base_rows = row_samplers(sampler.base)?;
    let ref_rows = row_samplers(pi_ref)?;
    let tuples = data.tuples();
    Ok((0..m)
        .map(|_| {
            let tuple = tuples[rng.gen_range(0..tuples.len())];
            let response = rs_sample_with(sampler, tuple.x, &base_rows[tuple.x], rng);
            let reference = ref_rows[tuple.x].sample(rng);
            PetDraw {
                tuple,
                response,
                reference,
            }
        })
        .collect())
}

fn row_samplers(pi: &TabularPolicy) -> Result<Vec<WeightedIndex<f64>>> {
    (0..pi.n_prompts())
        .map(|x| WeightedIndex::new(pi.row(x).iter()).map_err(|e| Error::Distribution(e.to_string())))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PetIterStats {
    pub t: usize,
    /// Loss used for the step (mini-batch estimate in sampled mode).
    pub pess_loss: f64,
    /// Per-tuple prediction loss on the full dataset.
    pub pred_loss: f64,
    /// `V_r(pi_t) - V_r(pi_ref)` under the world's prompt distribution.
    pub value_gap: f64,
}

#[derive(Debug, Clone)]
pub struct PetRun {
    pub reward: RewardTable,
    pub trace: Vec<PetIterStats>,
}

pub fn pet_finetune(world: &World, data: &PreferenceDataset, r_init: &RewardTable, cfg: &PetConfig) -> Result<PetRun> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    cfg.validate(data.len())?;
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut r = RewardTable::new(r_init.values().clone(), r_init.bound())?;
    let mut trace = Vec::with_capacity(cfg.iterations);
    let counts = ComparisonCounts::new(data);
    let n_data = data.len() as f64;

    for t in 1..=cfg.iterations {
        let spec = RsSpec::new(&world.pi0, &r, cfg.n)?;
        let pi_t = rs_policy(&world.pi0, &r, cfg.n)?;
        let step = match cfg.mode {
            PetMode::Exact => pet_loss_exact(&r, &pi_t, &world.pi_ref, &world.mu, &counts, cfg.beta)?,
            PetMode::Sampled => {
                let draws = draw_pet_batch(data, &spec, &world.pi_ref, cfg.batch_size, &mut rng)?;
                pet_loss_sampled(&r, &draws, cfg.beta)?
            }
        };
        let stats = PetIterStats {
            t,
            pess_loss: step.loss,
            pred_loss: counts.loss(&r)? / n_data,
            value_gap: value(&r, &pi_t, &world.mu)? - value(&r, &world.pi_ref, &world.mu)?,
        };
        if !stats.pess_loss.is_finite() || step.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration: t,
                detail: format!(
                    "pessimistic loss {}, prediction loss {}, value gap {}",
                    stats.pess_loss, stats.pred_loss, stats.value_gap
                ),
            });
        }
        trace.push(stats);
        r = r.descend(&step.grad, cfg.learning_rate)?;
    }
    Ok(PetRun { reward: r, trace })
}

/// `V_r(pi_RS(pi0, r, n)) - V_r(pi_ref)`: how much better the reward's own
/// rejection sampler looks than the reference policy, judged by that reward.
pub fn relative_score(r: &RewardTable, world: &World, n: usize) -> Result<f64> {
    let pi = rs_policy(&world.pi0, r, n)?;
    Ok(value(r, &pi, &world.mu)? - value(r, &world.pi_ref, &world.mu)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PessimismCertificate {
    pub score_pet: f64,
    pub score_proxy: f64,
    pub pred_loss_pet: f64,
    pub pred_loss_proxy: f64,
}

impl PessimismCertificate {
    pub fn is_more_pessimistic(&self) -> bool {
        self.score_pet <= self.score_proxy
    }
}

pub fn pessimism_certificate(
    r_pet: &RewardTable,
    proxy: &RewardTable,
    world: &World,
    data: &PreferenceDataset,
    n: usize,
) -> Result<PessimismCertificate> {
    let n_data = data.len() as f64;
    Ok(PessimismCertificate {
        score_pet: relative_score(r_pet, world, n)?,
        score_proxy: relative_score(proxy, world, n)?,
        pred_loss_pet: data.loss(r_pet)? / n_data,
        pred_loss_proxy: data.loss(proxy)? / n_data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use crate::preference::prediction_loss_grad;
    use crate::rewardmodel::{train_proxy, TrainConfig};
    use crate::worldgen::{make_world, sample_dataset, WorldConfig};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_policy(rng: &mut StdRng, nx: usize, na: usize) -> TabularPolicy {
        let m = Array2::from_shape_fn((nx, na), |_| rng.gen_range(0.05..1.0));
        let rows: Vec<Distribution> = m
            .rows()
            .into_iter()
            .map(|r| Distribution::from_weights(r.as_slice().unwrap()).unwrap())
            .collect();
        TabularPolicy::from_rows(&rows).unwrap()
    }

    fn small_setup(seed: u64) -> (World, PreferenceDataset) {
        let w = make_world(&WorldConfig::full(3, 4, 1.0, seed)).unwrap();
        let data = sample_dataset(&w, 60, seed + 1).unwrap();
        (w, data)
    }

    fn hackable_setup(seed: u64) -> (World, PreferenceDataset, RewardTable) {
        let w = make_world(&WorldConfig {
            seed,
            ..WorldConfig::default()
        })
        .unwrap();
        let data = sample_dataset(&w, 20_000, seed + 100).unwrap();
        let proxy = train_proxy(
            &data,
            w.bound(),
            &TrainConfig {
                seed: seed + 200,
                ..TrainConfig::default()
            },
        )
        .unwrap()
        .reward;
        (w, data, proxy)
    }

    #[test]
    fn identical_policies_and_zero_beta_give_zero() {
        let (w, data) = small_setup(1);
        let lg = pet_loss_exact(&w.true_reward, &w.pi_ref, &w.pi_ref, &w.mu, &data, 0.0).unwrap();
        assert_eq!(lg.loss, 0.0);
        assert!(lg.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn large_beta_follows_prediction_gradient() {
        let (w, data) = small_setup(2);
        let r = RewardTable::zeros(3, 4, 1.0).unwrap();
        let pi_t = rs_policy(&w.pi0, &r, 4).unwrap();
        let beta = 1e9;
        let lg = pet_loss_exact(&r, &pi_t, &w.pi_ref, &w.mu, &data, beta).unwrap();
        let pred = prediction_loss_grad(&r, &data).unwrap() * (beta / data.len() as f64);
        // The value-gap part stays bounded while the prediction part grows with beta.
        let norm = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm(&(&lg.grad - &pred)) / norm(&pred) < 1e-6);
        for (a, b) in lg.grad.iter().zip(pred.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1.0);
        }
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(3);
        for case in 0..50 {
            let (w, data) = small_setup(case);
            let pi_t = random_policy(&mut rng, 3, 4);
            let r0 = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-0.9..0.9));
            let beta = rng.gen_range(0.1..20.0);
            let f = |m: &Array2<f64>| {
                let r = RewardTable::new(m.clone(), 2.0).unwrap();
                pet_loss_exact(&r, &pi_t, &w.pi_ref, &w.mu, &data, beta).unwrap().loss
            };
            let r = RewardTable::new(r0.clone(), 1.0).unwrap();
            let analytic = pet_loss_exact(&r, &pi_t, &w.pi_ref, &w.mu, &data, beta).unwrap().grad;
            let check = check_gradient(f, &r0, &analytic, 1e-5);
            assert!(check.passes(1e-5), "case {case}: {}", check.rel_error);
        }
    }

    #[test]
    fn sampled_gradient_matches_finite_differences() {
        let (w, data) = small_setup(4);
        let r = RewardTable::new(Array2::from_elem((3, 4), 0.2), 1.0).unwrap();
        let spec = RsSpec::new(&w.pi0, &r, 8).unwrap();
        let mut rng = StdRng::seed_from_u64(5);
        let draws = draw_pet_batch(&data, &spec, &w.pi_ref, 16, &mut rng).unwrap();
        let f = |m: &Array2<f64>| {
            pet_loss_sampled(&RewardTable::new(m.clone(), 2.0).unwrap(), &draws, 3.0)
                .unwrap()
                .loss
        };
        let analytic = pet_loss_sampled(&r, &draws, 3.0).unwrap().grad;
        assert!(check_gradient(f, r.values(), &analytic, 1e-5).passes(1e-5));
    }

    #[test]
    fn gradient_ignores_how_the_policy_was_produced() {
        let (w, data) = small_setup(6);
        let r = RewardTable::new(
            Array2::from_shape_fn((3, 4), |(x, a)| 0.1 * (x as f64) - 0.2 * (a as f64)),
            1.0,
        )
        .unwrap();
        let produced = rs_policy(&w.pi0, &r, 16).unwrap();
        let frozen = TabularPolicy::new(produced.matrix().to_owned()).unwrap();
        let a = pet_loss_exact(&r, &produced, &w.pi_ref, &w.mu, &data, 5.0).unwrap();
        let b = pet_loss_exact(&r, &frozen, &w.pi_ref, &w.mu, &data, 5.0).unwrap();
        assert_eq!(a.grad, b.grad);
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn sampled_loss_is_unbiased() {
        let (w, data) = small_setup(7);
        let mu = data.prompt_distribution().unwrap();
        let r = RewardTable::new(
            Array2::from_shape_fn((3, 4), |(x, a)| 0.3 * ((x + a) % 3) as f64 - 0.3),
            1.0,
        )
        .unwrap();
        let n = 4;
        let pi_t = rs_policy(&w.pi0, &r, n).unwrap();
        let beta = 2.0;
        let exact = pet_loss_exact(&r, &pi_t, &w.pi_ref, &mu, &data, beta).unwrap().loss;
        let spec = RsSpec::new(&w.pi0, &r, n).unwrap();
        let mut rng = StdRng::seed_from_u64(8);
        let trials = 10_000;
        let samples: Vec<f64> = (0..trials)
            .map(|_| {
                let draws = draw_pet_batch(&data, &spec, &w.pi_ref, 8, &mut rng).unwrap();
                pet_loss_sampled(&r, &draws, beta).unwrap().loss
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / trials as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        let se = (var / trials as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "mean {mean} exact {exact} se {se}");
    }

    #[test]
    fn zero_iterations_return_the_initial_reward() {
        let (w, data) = small_setup(9);
        let cfg = PetConfig {
            iterations: 0,
            ..PetConfig::default()
        };
        let run = pet_finetune(&w, &data, &w.true_reward, &cfg).unwrap();
        assert_eq!(run.reward, w.true_reward);
        assert!(run.trace.is_empty());
    }

    #[test]
    fn config_validation() {
        let (w, data) = small_setup(10);
        for cfg in [
            PetConfig {
                beta: 0.0,
                ..PetConfig::default()
            },
            PetConfig {
                n: 0,
                ..PetConfig::default()
            },
            PetConfig {
                mode: PetMode::Sampled,
                batch_size: 61,
                ..PetConfig::default()
            },
        ] {
            assert!(matches!(
                pet_finetune(&w, &data, &w.true_reward, &cfg),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn hackable_world_exploited_cells_decrease() {
        let (w, data, proxy) = hackable_setup(0);
        let exploited = rs_policy(&w.pi0, &proxy, 64).unwrap();
        let run = pet_finetune(&w, &data, &proxy, &PetConfig::default()).unwrap();
        let mut checked = 0;
        for x in 0..w.n_prompts() {
            for &a in &w.uncovered[x] {
                if exploited.prob(x, a) > 0.01 {
                    checked += 1;
                    assert!(run.reward.get(x, a) < proxy.get(x, a), "cell ({x},{a})");
                }
            }
        }
        assert!(checked > 0);
        assert!(run.reward.values().iter().all(|v| v.abs() <= w.bound()));
        assert_eq!(run.trace.len(), PetConfig::default().iterations);

        let cert = pessimism_certificate(&run.reward, &proxy, &w, &data, 64).unwrap();
        assert!(cert.is_more_pessimistic());
        assert!(cert.score_pet < cert.score_proxy);
        assert!(cert.pred_loss_pet <= cert.pred_loss_proxy + 0.05 * std::f64::consts::LN_2);
    }

    #[test]
    fn sampled_mode_also_reduces_exploitation() {
        let (w, data, proxy) = hackable_setup(1);
        let cfg = PetConfig {
            mode: PetMode::Sampled,
            ..PetConfig::default()
        };
        let run = pet_finetune(&w, &data, &proxy, &cfg).unwrap();
        assert!(relative_score(&run.reward, &w, 64).unwrap() < relative_score(&proxy, &w, 64).unwrap());
    }

    #[test]
    fn certificate_of_identical_rewards() {
        let (w, data) = small_setup(11);
        let cert = pessimism_certificate(&w.true_reward, &w.true_reward, &w, &data, 8).unwrap();
        assert_eq!(cert.score_pet, cert.score_proxy);
        assert_eq!(cert.pred_loss_pet, cert.pred_loss_proxy);
        assert!(cert.is_more_pessimistic());
    }

    #[test]
    fn own_rejection_sampler_never_scores_below_reference() {
        let mut rng = StdRng::seed_from_u64(12);
        for seed in 0..20 {
            let (mut w, _) = small_setup(seed);
            w.pi0 = w.pi_ref.clone();
            let r = RewardTable::new(Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0)), 1.0).unwrap();
            for n in [1, 2, 7] {
                assert!(relative_score(&r, &w, n).unwrap() >= -1e-12);
            }
        }
    }
}
