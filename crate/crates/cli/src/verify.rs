//! Property suite behind `petbench verify`. Each check returns a margin that
//! is non-negative exactly when the property holds.

use std::time::Instant;

use ndarray::Array2;
use petbench_core::gradcheck::check_gradient;
use petbench_core::pet::{pet_loss_exact, LossGrad};
use petbench_core::policyopt::{greedy_policy, kl_optimal_policy, optimize, OptConfig};
use petbench_core::rewardmodel::RewardInit;
use petbench_core::rs::{rs_exact_policy, rs_sample_with, PROPOSITION1_TOL};
use petbench_core::theory::{coverage_coefficient, covering_log, empirical_gap, theorem_beta, theorem_bound};
use petbench_core::{
    make_world, pet_finetune, prediction_loss, prediction_loss_grad, rs_policy, sample_dataset, train_proxy, value,
    verify_proposition1, Distribution, PetConfig, PreferenceDataset, PreferenceTuple, RewardTable, RsSpec,
    TabularPolicy, TrainConfig, WorldConfig,
};
use rand::distributions::WeightedIndex;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::config::{sub_seed, RunConfig};

pub const GRAD_H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-5;
pub const RS_TV_TOL: f64 = 0.005;

#[derive(Debug, Clone, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    /// Slack to the threshold; negative when the property fails.
    pub margin: f64,
    pub detail: String,
    pub seconds: f64,
}

impl PropertyResult {
    fn new(name: &'static str, margin: f64, detail: String, start: Instant) -> Self {
        Self {
            name,
            passed: margin >= 0.0,
            margin,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {}: margin {:.3e} ({}; {:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.margin,
            self.detail,
            self.seconds
        )
    }
}

/// Signature of the PET gradient under test; the loss itself always comes
/// from the library so a broken gradient cannot hide behind a matching loss.
pub type PetGradFn = fn(
    &RewardTable,
    &TabularPolicy,
    &TabularPolicy,
    &Distribution,
    &PreferenceDataset,
    f64,
) -> petbench_core::Result<LossGrad>;

pub fn library_pet_grad(
    r: &RewardTable,
    pi_t: &TabularPolicy,
    pi_ref: &TabularPolicy,
    mu: &Distribution,
    data: &PreferenceDataset,
    beta: f64,
) -> petbench_core::Result<LossGrad> {
    pet_loss_exact(r, pi_t, pi_ref, mu, data, beta)
}

fn random_policy(rng: &mut StdRng, nx: usize, na: usize) -> TabularPolicy {
    let rows: Vec<Distribution> = (0..nx)
        .map(|_| {
            let w: Vec<f64> = (0..na).map(|_| rng.gen_range(0.02..1.0)).collect();
            Distribution::from_weights(&w).expect("positive weights")
        })
        .collect();
    TabularPolicy::from_rows(&rows).expect("rows share a length")
}

/// Random rewards in `[-scale, scale]`; coarse tables produce ties.
fn random_reward(rng: &mut StdRng, nx: usize, na: usize, scale: f64, bound: f64) -> RewardTable {
    let coarse = rng.gen_bool(0.3);
    let values = Array2::from_shape_fn((nx, na), |_| {
        let v: f64 = rng.gen_range(-scale..=scale);
        if coarse {
            (v * 2.0).round() / 2.0
        } else {
            v
        }
    });
    RewardTable::projected(values, bound).expect("bound is positive")
}

fn random_world(rng: &mut StdRng) -> petbench_core::World {
    let nx = rng.gen_range(1..=3);
    let na = rng.gen_range(2..=6);
    make_world(&WorldConfig::full(nx, na, 1.0, rng.gen())).expect("valid config")
}

/// Rejection sampling with `r0` is never beaten under `r0` by sampling with
/// another reward, over random worlds, bases, rewards and `n <= 8`.
pub fn proposition1(trials: usize, seed: u64) -> PropertyResult {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    let mut errors = 0;
    for _ in 0..trials {
        let w = random_world(&mut rng);
        let (nx, na) = (w.n_prompts(), w.n_responses());
        let base = if rng.gen_bool(0.5) {
            w.pi0.clone()
        } else {
            random_policy(&mut rng, nx, na)
        };
        let r0 = random_reward(&mut rng, nx, na, 1.0, 1.0);
        let challenger = match rng.gen_range(0..3) {
            0 => random_reward(&mut rng, nx, na, 1.0, 1.0),
            1 => r0.negated(),
            _ => RewardTable::projected(
                r0.values() + &random_reward(&mut rng, nx, na, 0.2, 1.0).values().view(),
                1.0,
            )
            .expect("bound is positive"),
        };
        let n = rng.gen_range(1..=8);
        match verify_proposition1(&base, &r0, n, &[challenger], &w.mu) {
            Ok(rep) => worst = worst.min(rep.min_margin()),
            Err(_) => errors += 1,
        }
    }
    let margin = if errors > 0 { -1.0 } else { worst + PROPOSITION1_TOL };
    PropertyResult::new(
        "proposition1",
        margin,
        format!("{trials} trials, min value margin {worst:.3e}, {errors} violations"),
        start,
    )
}

/// Total variation between the exact rejection-sampling policy and the
/// empirical distribution of `draws` samples per prompt.
pub fn rs_monte_carlo(specs: usize, draws: usize, seed: u64) -> PropertyResult {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..specs {
        let nx = rng.gen_range(1..=2);
        let na = rng.gen_range(2..=6);
        let base = random_policy(&mut rng, nx, na);
        let r = random_reward(&mut rng, nx, na, 1.0, 1.0);
        let n = rng.gen_range(1..=8);
        let spec = RsSpec::new(&base, &r, n).expect("valid spec");
        let exact = rs_exact_policy(&spec).expect("valid spec");
        for x in 0..nx {
            let rows = WeightedIndex::new(base.row(x).iter()).expect("valid row");
            let mut counts = vec![0usize; na];
            for _ in 0..draws {
                counts[rs_sample_with(&spec, x, &rows, &mut rng)] += 1;
            }
            let tv = 0.5
                * counts
                    .iter()
                    .enumerate()
                    .map(|(a, c)| (*c as f64 / draws as f64 - exact.prob(x, a)).abs())
                    .sum::<f64>();
            worst = worst.max(tv);
        }
    }
    PropertyResult::new(
        "rs_exact_vs_monte_carlo",
        RS_TV_TOL - worst,
        format!("{specs} specs x {draws} draws, max TV {worst:.2e}"),
        start,
    )
}

fn random_dataset(rng: &mut StdRng, nx: usize, na: usize, max_len: usize) -> PreferenceDataset {
    let len = rng.gen_range(1..=max_len);
    let tuples = (0..len)
        .map(|_| PreferenceTuple {
            x: rng.gen_range(0..nx),
            a1: rng.gen_range(0..na),
            a2: rng.gen_range(0..na),
            preferred: rng.gen(),
        })
        .collect();
    PreferenceDataset::new(nx, na, tuples).expect("indices in range")
}

/// Evaluation points stay well inside a box wider than the perturbation.
fn unbounded(m: &Array2<f64>) -> RewardTable {
    RewardTable::new(m.clone(), 1e3).expect("finite values")
}

pub fn gradient_prediction(instances: usize, seed: u64) -> PropertyResult {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let nx = rng.gen_range(1..=4);
        let na = rng.gen_range(2..=6);
        let data = random_dataset(&mut rng, nx, na, 200);
        let r = random_reward(&mut rng, nx, na, 2.0, 1e3);
        let analytic = prediction_loss_grad(&r, &data).expect("non-empty data");
        let f = |m: &Array2<f64>| prediction_loss(&unbounded(m), &data).expect("non-empty data");
        worst = worst.max(check_gradient(f, r.values(), &analytic, GRAD_H).rel_error);
    }
    PropertyResult::new(
        "gradient_prediction_loss",
        GRAD_TOL - worst,
        format!("{instances} instances, max relative error {worst:.2e}"),
        start,
    )
}

pub fn gradient_pet(instances: usize, seed: u64, grad: PetGradFn) -> PropertyResult {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let w = random_world(&mut rng);
        let (nx, na) = (w.n_prompts(), w.n_responses());
        let data = random_dataset(&mut rng, nx, na, 100);
        let pi_t = random_policy(&mut rng, nx, na);
        let beta = rng.gen_range(0.1..20.0);
        let r = random_reward(&mut rng, nx, na, 2.0, 1e3);
        let f = |m: &Array2<f64>| {
            pet_loss_exact(&unbounded(m), &pi_t, &w.pi_ref, &w.mu, &data, beta)
                .expect("shapes match")
                .loss
        };
        let analytic = match grad(&r, &pi_t, &w.pi_ref, &w.mu, &data, beta) {
            Ok(lg) => lg.grad,
            Err(_) => return PropertyResult::new("gradient_pet_loss", -1.0, "gradient errored".into(), start),
        };
        worst = worst.max(check_gradient(f, r.values(), &analytic, GRAD_H).rel_error);
    }
    PropertyResult::new(
        "gradient_pet_loss",
        GRAD_TOL - worst,
        format!("{instances} instances, max relative error {worst:.2e}"),
        start,
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoremTrial {
    pub seed: u64,
    pub gap: f64,
    pub bound: f64,
    pub coverage: f64,
    pub unbounded: bool,
}

pub const THEOREM_N: usize = 2000;
pub const THEOREM_DELTA: f64 = 0.1;
pub const THEOREM_RS_N: usize = 8;

/// One full-coverage micro-world: fit a proxy, solve the pessimistic
/// objective at the theorem's weight, and compare the true-value gap to
/// rejection sampling on `r*` against the bound.
pub fn theorem_trial(seed: u64) -> anyhow::Result<TheoremTrial> {
    let bound = 1.0;
    let world = make_world(&WorldConfig::full(2, 3, bound, sub_seed(seed, "world")))?;
    let data = sample_dataset(&world, THEOREM_N, sub_seed(seed, "dataset"))?;
    let proxy = train_proxy(
        &data,
        bound,
        &TrainConfig {
            init: RewardInit::Zero,
            seed: sub_seed(seed, "proxy"),
            ..TrainConfig::default()
        },
    )?
    .reward;

    let dim = world.n_prompts() * world.n_responses();
    let cover = covering_log(dim, bound, 1.0 / THEOREM_N as f64)?;
    // The objective here weights the per-tuple mean, the theorem the sum.
    let beta = THEOREM_N as f64 * theorem_beta(THEOREM_N, bound, cover, THEOREM_DELTA)?;
    // Step size from a curvature bound of beta * L_D / N: a quarter of the
    // largest Laplacian eigenvalue bound 2 * max degree of the empirical pairs.
    let mut degree = Array2::<f64>::zeros((world.n_prompts(), world.n_responses()));
    for t in data.tuples().iter().filter(|t| t.a1 != t.a2) {
        degree[[t.x, t.a1]] += 1.0 / THEOREM_N as f64;
        degree[[t.x, t.a2]] += 1.0 / THEOREM_N as f64;
    }
    let curvature = 0.5 * degree.iter().copied().fold(0.0, f64::max);
    let pet_cfg = PetConfig {
        beta,
        n: THEOREM_RS_N,
        iterations: 2000,
        learning_rate: 1.0 / (beta * curvature),
        seed: sub_seed(seed, "pet"),
        ..PetConfig::default()
    };
    let r_hat = pet_finetune(&world, &data, &proxy, &pet_cfg)?.reward;

    let challenger = rs_policy(&world.pi0, &world.true_reward, THEOREM_RS_N)?;
    let cov = coverage_coefficient(&challenger, &world, 32, sub_seed(seed, "coverage"))?;
    Ok(TheoremTrial {
        seed,
        gap: empirical_gap(&world, &r_hat, &world.true_reward, THEOREM_RS_N)?,
        bound: theorem_bound(cov.coefficient(), THEOREM_N, bound, cover, THEOREM_DELTA)?,
        coverage: cov.value,
        unbounded: cov.unbounded,
    })
}

/// The bound must dominate the measured gap in at least 18 of 20 runs and
/// be finite in all of them.
pub fn theorem_smoke(seeds: usize, seed: u64) -> PropertyResult {
    let start = Instant::now();
    let trials: Vec<anyhow::Result<TheoremTrial>> =
        (0..seeds as u64).map(|k| theorem_trial(seed.wrapping_add(k))).collect();
    let ok: Vec<&TheoremTrial> = trials.iter().filter_map(|t| t.as_ref().ok()).collect();
    let failed_runs = seeds - ok.len();
    let holds = ok.iter().filter(|t| t.gap <= t.bound).count();
    let finite = ok.iter().filter(|t| t.bound.is_finite()).count();
    let required = (seeds * 9).div_ceil(10);
    let min_slack = ok.iter().map(|t| t.bound - t.gap).fold(f64::INFINITY, f64::min);
    let max_gap = ok.iter().map(|t| t.gap).fold(f64::NEG_INFINITY, f64::max);
    let max_c = ok.iter().map(|t| t.coverage).fold(0.0, f64::max);
    let margin = if failed_runs > 0 || finite < seeds {
        -1.0
    } else {
        (holds as f64 - required as f64) / seeds as f64
    };
    PropertyResult::new(
        "theorem_bound_smoke",
        margin,
        format!(
            "bound held {holds}/{seeds} (need {required}), finite {finite}/{seeds}, max gap {max_gap:.3e}, min slack {min_slack:.3}, max C {max_c:.3}"
        ),
        start,
    )
}

/// Policy gradient against the true reward of the default world: without
/// regularization it approaches the greedy value, with it the closed form.
pub fn optimizer_soundness(seed: u64) -> PropertyResult {
    let start = Instant::now();
    let cfg = RunConfig {
        seed,
        ..RunConfig::default()
    }
    .resolve();
    let run = || -> anyhow::Result<(f64, f64, f64)> {
        let world = make_world(&cfg.world)?;
        let r = &world.true_reward;
        let greedy = value(r, &greedy_policy(r), &world.mu)?;
        let pg0 = optimize(
            r,
            &world,
            &OptConfig {
                seed: sub_seed(seed, "pg/0"),
                ..OptConfig::policy_gradient(0.0)
            },
        )?;
        let eta = 1.0;
        let pg1 = optimize(
            r,
            &world,
            &OptConfig {
                seed: sub_seed(seed, "pg/1"),
                ..OptConfig::policy_gradient(eta)
            },
        )?;
        let tv = pg1.max_tv(&kl_optimal_policy(r, &world.pi_ref, eta)?);
        Ok((greedy - value(r, &pg0, &world.mu)?, world.bound(), tv))
    };
    match run() {
        Ok((gap, bound, tv)) => PropertyResult::new(
            "optimizer_soundness",
            (0.05 * bound - gap).min(0.05 - tv),
            format!(
                "greedy gap {gap:.3e} (limit {:.2}), TV to closed form {tv:.3e} (limit 0.05)",
                0.05 * bound
            ),
            start,
        ),
        Err(e) => PropertyResult::new("optimizer_soundness", -1.0, format!("error: {e:#}"), start),
    }
}

/// The full suite with fixed seeds.
pub fn run_all(seed: u64) -> Vec<PropertyResult> {
    vec![
        proposition1(200, seed),
        rs_monte_carlo(10, 1_000_000, seed.wrapping_add(1)),
        gradient_prediction(50, seed.wrapping_add(2)),
        gradient_pet(50, seed.wrapping_add(3), library_pet_grad),
        theorem_smoke(20, seed.wrapping_add(4)),
        optimizer_soundness(seed.wrapping_add(5)),
    ]
}
