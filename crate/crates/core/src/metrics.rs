use crate::dist::{Distribution, TabularPolicy};
use crate::error::{Error, Result};
use crate::reward::RewardTable;

fn check_shapes(r_dims: (usize, usize), pi: &TabularPolicy, mu: &Distribution) -> Result<()> {
    if r_dims != (pi.n_prompts(), pi.n_responses()) || mu.len() != pi.n_prompts() {
        return Err(Error::Shape(format!(
            "reward {:?}, policy {}x{}, prompt distribution {}",
            r_dims,
            pi.n_prompts(),
            pi.n_responses(),
            mu.len()
        )));
    }
    Ok(())
}

/// Expected reward `E_{x~mu, a~pi(.|x)} r(x, a)`.
pub fn value(r: &RewardTable, pi: &TabularPolicy, mu: &Distribution) -> Result<f64> {
    check_shapes((r.n_prompts(), r.n_responses()), pi, mu)?;
    Ok(mu
        .probs()
        .iter()
        .enumerate()
        .map(|(x, w)| w * pi.row(x).dot(&r.row(x)))
        .sum())
}

/// `E_{x~mu} KL(pi1(.|x) || pi2(.|x))`, with `0 log 0 = 0`.
///
/// Fails with [`Error::Support`] when `pi1` puts mass where `pi2` has none
/// on a prompt of positive weight.
pub fn kl_divergence(pi1: &TabularPolicy, pi2: &TabularPolicy, mu: &Distribution) -> Result<f64> {
    check_shapes((pi2.n_prompts(), pi2.n_responses()), pi1, mu)?;
    let mut total = 0.0;
    for (x, &w) in mu.probs().iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for (a, (&p, &q)) in pi1.row(x).iter().zip(pi2.row(x)).enumerate() {
            if p == 0.0 {
                continue;
            }
            if q == 0.0 {
                return Err(Error::Support { x, a });
            }
            row += p * (p / q).ln();
        }
        total += w * row;
    }
    // Rounding can produce tiny negatives for identical rows.
    Ok(total.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_policy(rng: &mut StdRng, nx: usize, na: usize) -> TabularPolicy {
        let mut m = Array2::from_shape_fn((nx, na), |_| rng.gen_range(0.05..1.0));
        for mut row in m.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        TabularPolicy::new(m).unwrap()
    }

    #[test]
    fn value_examples() {
        let r = RewardTable::new(array![[2.0, -1.0]], 2.0).unwrap();
        let pi = TabularPolicy::deterministic(&[0], 2).unwrap();
        assert_eq!(value(&r, &pi, &Distribution::uniform(1)).unwrap(), 2.0);

        let r = RewardTable::new(array![[0.0, 1.0]], 2.0).unwrap();
        let uniform = TabularPolicy::uniform(1, 2);
        assert_eq!(value(&r, &uniform, &Distribution::uniform(1)).unwrap(), 0.5);

        assert!(matches!(
            value(&r, &TabularPolicy::uniform(2, 2), &Distribution::uniform(2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn value_matches_monte_carlo() {
        let mut rng = StdRng::seed_from_u64(11);
        let (nx, na) = (3, 4);
        let r = RewardTable::new(Array2::from_shape_fn((nx, na), |_| rng.gen_range(-2.0..2.0)), 2.0).unwrap();
        let pi = random_policy(&mut rng, nx, na);
        let mu = Distribution::new(vec![0.2, 0.5, 0.3]).unwrap();
        let exact = value(&r, &pi, &mu).unwrap();

        let draws = 100_000;
        let pick = |rng: &mut StdRng, probs: &[f64]| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            probs.len() - 1
        };
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..draws {
            let x = pick(&mut rng, mu.probs());
            let row: Vec<f64> = pi.row(x).to_vec();
            let a = pick(&mut rng, &row);
            let v = r.get(x, a);
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / draws as f64;
        let se = ((sum_sq / draws as f64 - mean * mean) / draws as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "mc {mean} exact {exact} se {se}");
    }

    #[test]
    fn value_is_linear_in_reward() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..50 {
            let r1 = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
            let r2 = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
            let alpha: f64 = rng.gen();
            let mix = &r1 * alpha + &r2 * (1.0 - alpha);
            let pi = random_policy(&mut rng, 2, 3);
            let mu = Distribution::new(vec![0.4, 0.6]).unwrap();
            let v = |m: Array2<f64>| value(&RewardTable::new(m, 1.0).unwrap(), &pi, &mu).unwrap();
            let lhs = v(mix);
            let rhs = alpha * v(r1) + (1.0 - alpha) * v(r2);
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
        }
    }

    #[test]
    fn kl_examples() {
        let mu = Distribution::uniform(1);
        let pi = TabularPolicy::uniform(1, 4);
        assert_eq!(kl_divergence(&pi, &pi, &mu).unwrap(), 0.0);
        let point = TabularPolicy::deterministic(&[2], 4).unwrap();
        assert_abs_diff_eq!(kl_divergence(&point, &pi, &mu).unwrap(), 4f64.ln(), epsilon = 1e-12);
        assert!(matches!(
            kl_divergence(&pi, &point, &mu),
            Err(Error::Support { x: 0, a: 0 })
        ));
    }

    #[test]
    fn kl_ignores_zero_weight_prompts() {
        let mu = Distribution::new(vec![1.0, 0.0]).unwrap();
        let p = TabularPolicy::new(array![[0.5, 0.5], [1.0, 0.0]]).unwrap();
        let q = TabularPolicy::new(array![[0.5, 0.5], [0.0, 1.0]]).unwrap();
        assert_eq!(kl_divergence(&p, &q, &mu).unwrap(), 0.0);
    }

    #[test]
    fn kl_is_non_negative() {
        let mut rng = StdRng::seed_from_u64(3);
        let mu = Distribution::new(vec![0.3, 0.7]).unwrap();
        for _ in 0..100 {
            let p = random_policy(&mut rng, 2, 5);
            let q = random_policy(&mut rng, 2, 5);
            assert!(kl_divergence(&p, &q, &mu).unwrap() >= 0.0);
        }
    }
}
