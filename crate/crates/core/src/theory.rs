//! Coverage coefficients and the finite-sample performance-gap bound.
//!
//! For a challenger reward `r` write `d = r* - r`. The coverage ratio of a
//! policy `pi` is
//!
//! ```text
//! E_{x~mu, a1~pi, a2~pi_ref}[d(x,a1) - d(x,a2)]
//! ---------------------------------------------
//! sqrt(E_{(x,a1,a2)~mu_D}[(d(x,a1) - d(x,a2))^2])
//! ```
//!
//! and the coefficient is `max(0, sup_r ratio)`. The ratio is invariant to
//! rescaling `d`, so it measures direction only: it is finite exactly when
//! every direction that changes the numerator is also visible to the data
//! distribution, and unbounded when `pi` leans on responses the data never
//! compares.

use ndarray::Array2;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::dist::TabularPolicy;
use crate::error::{Error, Result};
use crate::metrics::value;
use crate::reward::RewardTable;
use crate::rs::rs_policy;
use crate::worldgen::World;

/// Ratios above this are reported as unbounded.
pub const UNBOUNDED_RATIO: f64 = 1e6;

const ASCENT_ITERS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StartTrace {
    pub start: usize,
    pub ratio: f64,
    pub accepted_steps: usize,
}

#[derive(Debug, Clone)]
pub struct CoverageEstimate {
    /// Best ratio found, floored at zero. Meaningless when `unbounded`.
    pub value: f64,
    pub unbounded: bool,
    /// Challenger attaining `value`.
    pub argmax_reward: RewardTable,
    pub method_trace: Vec<StartTrace>,
}

impl CoverageEstimate {
    /// The coefficient as a number, `+inf` when unbounded.
    pub fn coefficient(&self) -> f64 {
        if self.unbounded {
            f64::INFINITY
        } else {
            self.value
        }
    }
}

/// Numerator weights and data Laplacian of the coverage ratio for one world and policy.
pub struct CoverageProblem<'a> {
    world: &'a World,
    /// `mu(x) * (pi(a|x) - pi_ref(a|x))`.
    weights: Array2<f64>,
    /// Symmetrized pair weights `mu_D(x,a,b) + mu_D(x,b,a)`, per prompt.
    pair_weights: Vec<Array2<f64>>,
}

impl<'a> CoverageProblem<'a> {
    pub fn new(pi: &TabularPolicy, world: &'a World) -> Result<Self> {
        let (nx, na) = (world.n_prompts(), world.n_responses());
        if (pi.n_prompts(), pi.n_responses()) != (nx, na) {
            return Err(Error::Shape("policy does not match world".into()));
        }
        let mut weights = pi.matrix() - world.pi_ref.matrix();
        for (x, mut row) in weights.rows_mut().into_iter().enumerate() {
            row *= world.mu.get(x);
        }
        let pair_weights = (0..nx)
            .map(|x| {
                Array2::from_shape_fn((na, na), |(a, b)| {
                    world.pair_dist.prob(x, a, b) + world.pair_dist.prob(x, b, a)
                })
            })
            .collect();
        Ok(Self {
            world,
            weights,
            pair_weights,
        })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn pair_weights(&self, x: usize) -> &Array2<f64> {
        &self.pair_weights[x]
    }

    fn numerator(&self, d: &Array2<f64>) -> f64 {
        (&self.weights * d).sum()
    }

    /// `E_{mu_D}[(d(a1) - d(a2))^2]` and its gradient `2 L d`.
    fn denominator(&self, d: &Array2<f64>) -> (f64, Array2<f64>) {
        let na = d.ncols();
        let mut grad = Array2::zeros(d.dim());
        let mut total = 0.0;
        for (x, w) in self.pair_weights.iter().enumerate() {
            for a in 0..na {
                for b in 0..na {
                    let diff = d[[x, a]] - d[[x, b]];
                    total += 0.5 * w[[a, b]] * diff * diff;
                    grad[[x, a]] += 2.0 * w[[a, b]] * diff;
                }
            }
        }
        (total, grad)
    }

    /// Coverage ratio of challenger `r` and its gradient with respect to `r`.
    /// Returns `+inf` when the data cannot see `r* - r` but the numerator can.
    pub fn ratio(&self, r: &Array2<f64>) -> (f64, Array2<f64>) {
        let d = self.world.true_reward.values() - r;
        let num = self.numerator(&d);
        let (den, den_grad) = self.denominator(&d);
        // Below these levels both terms are rounding noise of a per-prompt constant shift.
        let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if den <= 1e-24 * scale * scale || scale == 0.0 {
            let ratio = if num > 1e-12 * scale { f64::INFINITY } else { 0.0 };
            return (ratio, Array2::zeros(d.dim()));
        }
        let s = den.sqrt();
        // d ratio / d d = w / s - num * (L d) / s^3, and d = r* - r.
        let grad_d = &self.weights / s - &(den_grad * (0.5 * num / (s * s * s)));
        (num / s, -grad_d)
    }
}

/// Derives an independent stream per multi-start index.
fn start_seed(seed: u64, start: usize) -> u64 {
    let mut z = seed ^ (start as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Estimates the coverage coefficient of `pi` by multi-start projected
/// gradient ascent of the ratio over challengers in `[-R, R]`.
///
/// Start 0 perturbs `r*` along the numerator weights; the others are uniform
/// draws from the box. Each start uses backtracking steps and stops when no
/// step improves the ratio.
pub fn coverage_coefficient(pi: &TabularPolicy, world: &World, n_starts: usize, seed: u64) -> Result<CoverageEstimate> {
    if n_starts == 0 {
        return Err(Error::Parameter("n_starts must be positive".into()));
    }
    let problem = CoverageProblem::new(pi, world)?;
    let bound = world.bound();
    let r_star = world.true_reward.values();
    let project = |m: Array2<f64>| m.mapv(|v| v.clamp(-bound, bound));

    let mut best_ratio = f64::NEG_INFINITY;
    let mut best_r = r_star.clone();
    let mut trace = Vec::with_capacity(n_starts);
    for start in 0..n_starts {
        let mut rng = StdRng::seed_from_u64(start_seed(seed, start));
        let mut r = if start == 0 {
            let scale = problem.weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
            if scale > 0.0 {
                project(r_star - &(problem.weights() * (0.1 * bound / scale)))
            } else {
                r_star.clone()
            }
        } else {
            Array2::from_shape_fn(r_star.dim(), |_| rng.gen_range(-bound..=bound))
        };
        let (mut ratio, mut grad) = problem.ratio(&r);
        let mut step = 0.1 * bound;
        let mut accepted = 0;
        for _ in 0..ASCENT_ITERS {
            if !ratio.is_finite() || ratio > UNBOUNDED_RATIO {
                break;
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            let mut improved = false;
            while step > 1e-12 * bound {
                let candidate = project(&r + &(&grad * (step / norm)));
                let (c_ratio, c_grad) = problem.ratio(&candidate);
                if c_ratio > ratio {
                    r = candidate;
                    ratio = c_ratio;
                    grad = c_grad;
                    step *= 2.0;
                    improved = true;
                    accepted += 1;
                    break;
                }
                step *= 0.5;
            }
            if !improved {
                break;
            }
        }
        trace.push(StartTrace {
            start,
            ratio,
            accepted_steps: accepted,
        });
        if ratio > best_ratio {
            best_ratio = ratio;
            best_r = r;
        }
    }

    let unbounded = best_ratio > UNBOUNDED_RATIO;
    Ok(CoverageEstimate {
        value: best_ratio.max(0.0),
        unbounded,
        argmax_reward: RewardTable::new(best_r, bound)?,
        method_trace: trace,
    })
}

/// Log covering number of `[-R, R]^dim` in sup norm by an `epsilon` grid.
pub fn covering_log(dim: usize, bound: f64, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(dim as f64 * (2.0 * bound / epsilon).max(1.0).ln())
}

fn check_bound_inputs(n: usize, bound: f64, cover_log: f64, delta: f64) -> Result<f64> {
    if n == 0 || !(bound > 0.0) || !(cover_log >= 0.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Parameter(format!(
            "need N > 0, R > 0, log covering >= 0 and delta in (0, 1); got {n}, {bound}, {cover_log}, {delta}"
        )));
    }
    // log(N_eps / delta)
    Ok(cover_log + (1.0 / delta).ln())
}

fn squared_link(bound: f64) -> f64 {
    (1.0 + bound.exp()).powi(2)
}

/// Pessimism weight that balances the two terms of the gap bound, for the
/// summed prediction loss over `n` comparisons.
pub fn theorem_beta(n: usize, bound: f64, cover_log: f64, delta: f64) -> Result<f64> {
    let log_term = check_bound_inputs(n, bound, cover_log, delta)?;
    Ok((n as f64).sqrt() * squared_link(bound) / (2.0 * 6f64.sqrt() * log_term.sqrt()))
}

/// Upper bound on the true-value gap to a challenger with coverage `c`;
/// `+inf` when `c` is infinite.
pub fn theorem_bound(c: f64, n: usize, bound: f64, cover_log: f64, delta: f64) -> Result<f64> {
    let log_term = check_bound_inputs(n, bound, cover_log, delta)?;
    if c.is_nan() || c < 0.0 {
        return Err(Error::Parameter(format!("coverage must be non-negative, got {c}")));
    }
    if c.is_infinite() {
        return Ok(f64::INFINITY);
    }
    Ok(squared_link(bound) * (c * c + 1.0) * (6.0 * log_term).sqrt() / (4.0 * (n as f64).sqrt()))
}

/// `V_{r*}(pi_RS(pi0, challenger, n)) - V_{r*}(pi_RS(pi0, r_hat, n))`.
pub fn empirical_gap(world: &World, r_hat: &RewardTable, challenger: &RewardTable, n: usize) -> Result<f64> {
    let ours = rs_policy(&world.pi0, r_hat, n)?;
    let theirs = rs_policy(&world.pi0, challenger, n)?;
    Ok(value(&world.true_reward, &theirs, &world.mu)? - value(&world.true_reward, &ours, &world.mu)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub beta_star: f64,
    /// Bound value; `null` in JSON when the coverage is unbounded.
    pub rhs: f64,
    pub gap_empirical: f64,
    pub covering_log: f64,
    pub epsilon: f64,
    pub delta: f64,
    #[serde(rename = "N")]
    pub n_data: usize,
    #[serde(rename = "R")]
    pub bound: f64,
    pub coverage: f64,
    pub coverage_unbounded: bool,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.gap_empirical <= self.rhs
    }
}

/// Assembles the bound for challenger policy `pi_RS(pi0, challenger, n)`
/// against `pi_RS(pi0, r_hat, n)`, with `epsilon = 1 / N`.
pub fn bound_report(
    world: &World,
    r_hat: &RewardTable,
    challenger: &RewardTable,
    rs_n: usize,
    n_data: usize,
    delta: f64,
    coverage: &CoverageEstimate,
) -> Result<BoundReport> {
    let epsilon = 1.0 / n_data.max(1) as f64;
    let dim = world.n_prompts() * world.n_responses();
    let cover = covering_log(dim, world.bound(), epsilon)?;
    Ok(BoundReport {
        beta_star: theorem_beta(n_data, world.bound(), cover, delta)?,
        rhs: theorem_bound(coverage.coefficient(), n_data, world.bound(), cover, delta)?,
        gap_empirical: empirical_gap(world, r_hat, challenger, rs_n)?,
        covering_log: cover,
        epsilon,
        delta,
        n_data,
        bound: world.bound(),
        coverage: coverage.value,
        coverage_unbounded: coverage.unbounded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn covering_log_examples() {
        assert_eq!(covering_log(1, 1.0, 2.0).unwrap(), 0.0);
        assert_eq!(covering_log(1, 1.0, 5.0).unwrap(), 0.0);
        assert_relative_eq!(
            covering_log(16, 2.0, 0.01).unwrap(),
            16.0 * 400f64.ln(),
            max_relative = 1e-12
        );
        assert!((covering_log(16, 2.0, 0.01).unwrap() - 95.86).abs() < 0.01);
        assert!(covering_log(3, 1.0, 0.0).is_err());
    }

    #[test]
    fn covering_log_monotonicity() {
        let base = covering_log(4, 1.0, 0.1).unwrap();
        assert!(covering_log(5, 1.0, 0.1).unwrap() > base);
        assert!(covering_log(4, 2.0, 0.1).unwrap() > base);
        assert!(covering_log(4, 1.0, 0.05).unwrap() > base);
    }

    /// `log(N_eps / delta) = 6` with `delta = 0.5`.
    fn cover_for_log_six() -> (f64, f64) {
        let delta = 0.5;
        (6.0 - 2f64.ln(), delta)
    }

    #[test]
    fn theorem_beta_examples() {
        let (cover, delta) = cover_for_log_six();
        let beta = theorem_beta(100, 1.0, cover, delta).unwrap();
        let expected = 10.0 * (1.0 + 1f64.exp()).powi(2) / (2.0 * 6f64.sqrt() * 6f64.sqrt());
        assert_relative_eq!(beta, expected, max_relative = 1e-12);
        assert!((beta - 11.5213).abs() < 1e-4);
        assert_relative_eq!(
            theorem_beta(400, 1.0, cover, delta).unwrap() / beta,
            2.0,
            max_relative = 1e-12
        );
        assert!(theorem_beta(100, 1.5, cover, delta).unwrap() > beta);
        assert!(theorem_beta(100, 1.0, cover, 1.0).is_err());
    }

    #[test]
    fn theorem_bound_examples() {
        let (cover, delta) = cover_for_log_six();
        let b0 = theorem_bound(0.0, 100, 1.0, cover, delta).unwrap();
        let expected = (1.0 + 1f64.exp()).powi(2) * 36f64.sqrt() / (4.0 * 10.0);
        assert_relative_eq!(b0, expected, max_relative = 1e-12);
        let b4 = theorem_bound(0.0, 400, 1.0, cover, delta).unwrap();
        assert_relative_eq!(b4, b0 / 2.0, max_relative = 1e-12);
        assert_relative_eq!(
            theorem_bound(2.0, 100, 1.0, cover, delta).unwrap(),
            5.0 * b0,
            max_relative = 1e-12
        );
        assert_eq!(
            theorem_bound(f64::INFINITY, 100, 1.0, cover, delta).unwrap(),
            f64::INFINITY
        );
        assert!(theorem_bound(-1.0, 100, 1.0, cover, delta).is_err());
    }

    #[test]
    fn start_seeds_differ() {
        assert_ne!(start_seed(1, 0), start_seed(1, 1));
        assert_ne!(start_seed(1, 0), start_seed(2, 0));
    }

    use crate::dist::{Distribution, PairDistribution, Space};
    use crate::worldgen::{make_world, CoverageProfile, WorldConfig};
    use nalgebra::DMatrix;
    use ndarray::{array, Array3};

    /// One prompt, three responses, uneven pair weights.
    fn micro_world() -> World {
        let mut pair = Array3::zeros((1, 3, 3));
        pair[[0, 0, 1]] = 0.3;
        pair[[0, 1, 0]] = 0.1;
        pair[[0, 1, 2]] = 0.2;
        pair[[0, 0, 2]] = 0.4;
        World {
            prompts: Space::new(1).unwrap(),
            responses: Space::new(3).unwrap(),
            true_reward: RewardTable::new(array![[0.3, -0.2, 0.1]], 1.0).unwrap(),
            mu: Distribution::point(1, 0),
            pair_dist: PairDistribution::new(pair).unwrap(),
            pi_ref: TabularPolicy::new(array![[0.5, 0.3, 0.2]]).unwrap(),
            pi0: TabularPolicy::uniform(1, 3),
            uncovered: vec![vec![]],
            seed: 0,
        }
    }

    /// `sqrt(sum_x g_x^T L_x^+ g_x)`, the dual norm of the numerator weights
    /// under the data Laplacian, which is the unconstrained supremum.
    fn closed_form(problem: &CoverageProblem<'_>) -> f64 {
        let g = problem.weights();
        let na = g.ncols();
        let mut total = 0.0;
        for x in 0..g.nrows() {
            let w = problem.pair_weights(x);
            let lap = DMatrix::from_fn(na, na, |a, b| {
                if a == b {
                    (0..na).filter(|&c| c != a).map(|c| w[[a, c]]).sum::<f64>()
                } else {
                    -w[[a, b]]
                }
            });
            let pinv = lap.pseudo_inverse(1e-12).unwrap();
            let gx = nalgebra::DVector::from_iterator(na, g.row(x).iter().copied());
            total += (gx.transpose() * &pinv * &gx)[(0, 0)];
        }
        total.sqrt()
    }

    #[test]
    fn micro_world_matches_grid_and_closed_form() {
        let w = micro_world();
        let pi = TabularPolicy::new(array![[0.1, 0.2, 0.7]]).unwrap();
        let problem = CoverageProblem::new(&pi, &w).unwrap();
        let steps = 80;
        let mut grid_best = f64::NEG_INFINITY;
        for i in 0..=steps {
            for j in 0..=steps {
                for k in 0..=steps {
                    let at = |t: usize| -1.0 + 2.0 * t as f64 / steps as f64;
                    let (ratio, _) = problem.ratio(&array![[at(i), at(j), at(k)]]);
                    if ratio.is_finite() {
                        grid_best = grid_best.max(ratio);
                    }
                }
            }
        }
        let exact = closed_form(&problem);
        let est = coverage_coefficient(&pi, &w, 8, 3).unwrap();
        assert!(!est.unbounded);
        assert!(grid_best <= exact + 1e-9);
        assert!(
            (grid_best - exact).abs() < 0.02 * exact,
            "grid {grid_best} exact {exact}"
        );
        assert!(
            (est.value - exact).abs() < 1e-4 * exact,
            "estimate {} exact {exact}",
            est.value
        );
        let (at_argmax, _) = problem.ratio(est.argmax_reward.values());
        assert!((at_argmax - est.value).abs() < 1e-12);
    }

    #[test]
    fn full_coverage_matches_closed_form() {
        let w = make_world(&WorldConfig::full(4, 5, 2.0, 11)).unwrap();
        let pi = TabularPolicy::uniform(4, 5);
        let problem = CoverageProblem::new(&pi, &w).unwrap();
        let exact = closed_form(&problem);
        let est = coverage_coefficient(&pi, &w, 4, 0).unwrap();
        assert!(!est.unbounded);
        assert!(est.value.is_finite() && est.value > 0.0);
        assert!(est.value <= exact * (1.0 + 1e-9));
        assert!(
            (est.value - exact).abs() < 1e-3 * exact,
            "estimate {} exact {exact}",
            est.value
        );
    }

    #[test]
    fn reference_policy_has_zero_coverage() {
        let w = make_world(&WorldConfig::full(3, 4, 1.0, 2)).unwrap();
        let est = coverage_coefficient(&w.pi_ref, &w, 3, 0).unwrap();
        assert_eq!(est.value, 0.0);
        assert!(!est.unbounded);
    }

    #[test]
    fn uncovered_mass_is_unbounded() {
        let cfg = WorldConfig {
            coverage_profile: CoverageProfile::Hackable,
            n_prompts: 3,
            n_responses: 5,
            n_uncovered: 2,
            seed: 4,
            ..WorldConfig::default()
        };
        let w = make_world(&cfg).unwrap();
        let choices: Vec<usize> = w.uncovered.iter().map(|u| u[0]).collect();
        let pi = TabularPolicy::deterministic(&choices, 5).unwrap();
        let est = coverage_coefficient(&pi, &w, 4, 1).unwrap();
        assert!(est.unbounded);
        assert_eq!(est.coefficient(), f64::INFINITY);
    }

    #[test]
    fn more_starts_never_lower_the_estimate() {
        let w = make_world(&WorldConfig::full(3, 4, 1.0, 9)).unwrap();
        let pi = TabularPolicy::uniform(3, 4);
        let mut last = f64::NEG_INFINITY;
        for starts in 1..=6 {
            let est = coverage_coefficient(&pi, &w, starts, 5).unwrap();
            assert!(est.value >= last);
            assert_eq!(est.method_trace.len(), starts);
            last = est.value;
        }
    }

    #[test]
    fn squared_denominator_diverges_under_scaling() {
        // Without the square root the ratio is linear over quadratic, so
        // shrinking any improving direction sends it to infinity.
        let w = micro_world();
        let pi = TabularPolicy::new(array![[0.1, 0.2, 0.7]]).unwrap();
        let problem = CoverageProblem::new(&pi, &w).unwrap();
        let dir = array![[-0.1, 0.0, 0.1]];
        let literal = |t: f64| {
            let d = &dir * t;
            problem.numerator(&d) / problem.denominator(&d).0
        };
        assert!(literal(1e-3) > 100.0 * literal(1e-1));
        let rms = |t: f64| problem.ratio(&(w.true_reward.values() - &(&dir * t))).0;
        assert!((rms(1e-3) - rms(1e-1)).abs() < 1e-9);
    }

    #[test]
    fn bound_report_assembles() {
        let w = make_world(&WorldConfig::full(2, 3, 1.0, 1)).unwrap();
        let est = coverage_coefficient(&w.pi_ref, &w, 2, 0).unwrap();
        let rep = bound_report(&w, &w.true_reward, &w.true_reward, 4, 1000, 0.1, &est).unwrap();
        assert_eq!(rep.gap_empirical, 0.0);
        assert!(rep.holds());
        assert_relative_eq!(rep.epsilon, 1e-3);
        assert_relative_eq!(rep.covering_log, 6.0 * 2000f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn shape_and_parameter_errors() {
        let w = micro_world();
        assert!(coverage_coefficient(&TabularPolicy::uniform(2, 3), &w, 1, 0).is_err());
        assert!(coverage_coefficient(&w.pi_ref, &w, 0, 0).is_err());
    }
}
