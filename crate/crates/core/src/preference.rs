//! Bradley-Terry preferences and the prediction loss.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dist::Distribution;
use crate::error::{check_index, Error, Result};
use crate::reward::RewardTable;

pub fn sigmoid(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(y))` without forming the sigmoid.
pub fn log_sigmoid(y: f64) -> f64 {
    if y >= 0.0 {
        -(-y).exp().ln_1p()
    } else {
        y - y.exp().ln_1p()
    }
}

/// Probability that `a1` is preferred to `a2` at prompt `x`.
pub fn bt_prob(r: &RewardTable, x: usize, a1: usize, a2: usize) -> Result<f64> {
    Ok(sigmoid(r.try_get(x, a1)? - r.try_get(x, a2)?))
}

/// One labelled comparison; `preferred == true` means `a1` beat `a2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceTuple {
    pub x: usize,
    pub a1: usize,
    pub a2: usize,
    #[serde(rename = "sigma", with = "label")]
    pub preferred: bool,
}

mod label {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(serde::de::Error::custom(format!("label must be 0 or 1, got {other}"))),
        }
    }
}

impl PreferenceTuple {
    /// Signed reward margin `r(x, winner) - r(x, loser)`.
    fn margin(&self, r: &RewardTable) -> f64 {
        let d = r.get(self.x, self.a1) - r.get(self.x, self.a2);
        if self.preferred {
            d
        } else {
            -d
        }
    }

    pub fn neg_log_likelihood(&self, r: &RewardTable) -> f64 {
        -log_sigmoid(self.margin(r))
    }

    /// Derivative of the negative log-likelihood with respect to
    /// `r(x, a1) - r(x, a2)`.
    fn dloss_ddiff(&self, r: &RewardTable) -> f64 {
        let p = sigmoid(r.get(self.x, self.a1) - r.get(self.x, self.a2));
        p - if self.preferred { 1.0 } else { 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "crate::schema::DatasetRepr", try_from = "crate::schema::DatasetRepr")]
pub struct PreferenceDataset {
    n_prompts: usize,
    n_responses: usize,
    tuples: Vec<PreferenceTuple>,
}

impl PreferenceDataset {
    pub fn new(n_prompts: usize, n_responses: usize, tuples: Vec<PreferenceTuple>) -> Result<Self> {
        for t in &tuples {
            check_index("prompt", t.x, n_prompts)?;
            check_index("response", t.a1, n_responses)?;
            check_index("response", t.a2, n_responses)?;
        }
        Ok(Self {
            n_prompts,
            n_responses,
            tuples,
        })
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn tuples(&self) -> &[PreferenceTuple] {
        &self.tuples
    }

    pub fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    pub fn n_responses(&self) -> usize {
        self.n_responses
    }

    /// New dataset sharing the spaces of `self` with the given tuples.
    pub fn with_tuples(&self, tuples: Vec<PreferenceTuple>) -> Self {
        Self {
            n_prompts: self.n_prompts,
            n_responses: self.n_responses,
            tuples,
        }
    }

    /// Empirical distribution of prompts in the dataset.
    pub fn prompt_distribution(&self) -> Result<Distribution> {
        if self.is_empty() {
            return Err(Error::EmptyData);
        }
        let mut counts = vec![0.0; self.n_prompts];
        for t in &self.tuples {
            counts[t.x] += 1.0;
        }
        Distribution::from_weights(&counts)
    }

    /// Whether response `a` appears in any tuple for prompt `x`.
    pub fn observed_cells(&self) -> Array2<bool> {
        let mut seen = Array2::from_elem((self.n_prompts, self.n_responses), false);
        for t in &self.tuples {
            seen[[t.x, t.a1]] = true;
            seen[[t.x, t.a2]] = true;
        }
        seen
    }
}

/// Preference data that can evaluate the summed prediction loss and its gradient.
pub trait PredictionLoss {
    /// Number of comparisons.
    fn count(&self) -> usize;

    fn shape(&self) -> (usize, usize);

    /// Summed negative log-likelihood; callers check shapes and emptiness.
    fn loss_unchecked(&self, r: &RewardTable) -> f64;

    /// Adds `scale` times the loss gradient into `grad`.
    fn add_grad(&self, r: &RewardTable, scale: f64, grad: &mut Array2<f64>);

    fn check(&self, r: &RewardTable) -> Result<()> {
        if self.count() == 0 {
            return Err(Error::EmptyData);
        }
        let (nx, na) = self.shape();
        if r.n_prompts() != nx || r.n_responses() != na {
            return Err(Error::Shape(format!(
                "reward is {}x{}, preference data spaces are {nx}x{na}",
                r.n_prompts(),
                r.n_responses(),
            )));
        }
        Ok(())
    }

    fn loss(&self, r: &RewardTable) -> Result<f64> {
        self.check(r)?;
        Ok(self.loss_unchecked(r))
    }
}

impl PredictionLoss for PreferenceDataset {
    fn count(&self) -> usize {
        self.len()
    }

    fn shape(&self) -> (usize, usize) {
        (self.n_prompts, self.n_responses)
    }

    fn loss_unchecked(&self, r: &RewardTable) -> f64 {
        self.tuples.iter().map(|t| t.neg_log_likelihood(r)).sum()
    }

    fn add_grad(&self, r: &RewardTable, scale: f64, grad: &mut Array2<f64>) {
        accumulate_grad(r, self.tuples.iter(), scale, grad);
    }
}

/// Win/loss counts per ordered `(x, a1, a2)` cell: a sufficient statistic of
/// a dataset for the prediction loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonCounts {
    n_prompts: usize,
    n_responses: usize,
    total: usize,
    /// `(x, a1, a2, times a1 won, times a2 won)` for every non-empty cell.
    cells: Vec<(usize, usize, usize, f64, f64)>,
}

impl ComparisonCounts {
    pub fn new(data: &PreferenceDataset) -> Self {
        let (nx, na) = (data.n_prompts, data.n_responses);
        let mut counts = vec![[0.0f64; 2]; nx * na * na];
        for t in &data.tuples {
            let slot = &mut counts[(t.x * na + t.a1) * na + t.a2];
            slot[usize::from(!t.preferred)] += 1.0;
        }
        let cells = counts
            .iter()
            .enumerate()
            .filter(|(_, c)| c[0] + c[1] > 0.0)
            .map(|(i, c)| (i / (na * na), (i / na) % na, i % na, c[0], c[1]))
            .collect();
        Self {
            n_prompts: nx,
            n_responses: na,
            total: data.len(),
            cells,
        }
    }
}

impl PredictionLoss for ComparisonCounts {
    fn count(&self) -> usize {
        self.total
    }

    fn shape(&self) -> (usize, usize) {
        (self.n_prompts, self.n_responses)
    }

    fn loss_unchecked(&self, r: &RewardTable) -> f64 {
        self.cells
            .iter()
            .map(|&(x, a1, a2, wins, losses)| {
                let d = r.get(x, a1) - r.get(x, a2);
                -wins * log_sigmoid(d) - losses * log_sigmoid(-d)
            })
            .sum()
    }

    fn add_grad(&self, r: &RewardTable, scale: f64, grad: &mut Array2<f64>) {
        for &(x, a1, a2, wins, losses) in &self.cells {
            let p = sigmoid(r.get(x, a1) - r.get(x, a2));
            let g = scale * ((wins + losses) * p - wins);
            grad[[x, a1]] += g;
            grad[[x, a2]] -= g;
        }
    }
}

/// Summed negative log-likelihood of the labels under the Bradley-Terry model of `r`.
pub fn prediction_loss(r: &RewardTable, data: &PreferenceDataset) -> Result<f64> {
    data.loss(r)
}

/// Gradient of [`prediction_loss`] with respect to every table entry.
pub fn prediction_loss_grad(r: &RewardTable, data: &PreferenceDataset) -> Result<Array2<f64>> {
    data.check(r)?;
    let mut grad = Array2::zeros((r.n_prompts(), r.n_responses()));
    data.add_grad(r, 1.0, &mut grad);
    Ok(grad)
}

pub(crate) fn accumulate_grad<'a>(
    r: &RewardTable,
    tuples: impl Iterator<Item = &'a PreferenceTuple>,
    scale: f64,
    grad: &mut Array2<f64>,
) {
    for t in tuples {
        let g = scale * t.dloss_ddiff(r);
        grad[[t.x, t.a1]] += g;
        grad[[t.x, t.a2]] -= g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn tuple(x: usize, a1: usize, a2: usize, preferred: bool) -> PreferenceTuple {
        PreferenceTuple { x, a1, a2, preferred }
    }

    #[test]
    fn sigmoid_reference_points() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_abs_diff_eq!(sigmoid(1.0), 0.7310585786, epsilon = 1e-10);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert_abs_diff_eq!(log_sigmoid(0.0), -LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(log_sigmoid(-800.0), -800.0, epsilon = 1e-9);
        assert!(log_sigmoid(800.0) <= 0.0 && log_sigmoid(800.0) > -1e-300);
        for y in [-5.0, -0.3, 0.7, 4.0] {
            assert_abs_diff_eq!(log_sigmoid(y), sigmoid(y).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn bt_prob_examples() {
        let r = RewardTable::new(array![[1.0, 1.0, 0.0]], 2.0).unwrap();
        assert_eq!(bt_prob(&r, 0, 0, 1).unwrap(), 0.5);
        assert_abs_diff_eq!(bt_prob(&r, 0, 0, 2).unwrap(), 0.7310585786, epsilon = 1e-10);
        assert!(matches!(bt_prob(&r, 0, 0, 3), Err(Error::Range { .. })));
        assert!(matches!(bt_prob(&r, 1, 0, 0), Err(Error::Range { .. })));
    }

    #[test]
    fn single_tuple_losses() {
        let r = RewardTable::new(array![[0.3, 0.3, -1.0]], 2.0).unwrap();
        let tied = PreferenceDataset::new(1, 3, vec![tuple(0, 0, 1, true)]).unwrap();
        assert_abs_diff_eq!(prediction_loss(&r, &tied).unwrap(), LN_2, epsilon = 1e-12);

        let degenerate = PreferenceDataset::new(1, 3, vec![tuple(0, 2, 2, false)]).unwrap();
        assert_abs_diff_eq!(prediction_loss(&r, &degenerate).unwrap(), LN_2, epsilon = 1e-12);
        let g = prediction_loss_grad(&r, &degenerate).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let r = RewardTable::zeros(1, 2, 1.0).unwrap();
        let empty = PreferenceDataset::new(1, 2, vec![]).unwrap();
        assert!(matches!(prediction_loss(&r, &empty), Err(Error::EmptyData)));
        assert!(matches!(prediction_loss_grad(&r, &empty), Err(Error::EmptyData)));
    }

    #[test]
    fn dataset_rejects_out_of_range_tuples() {
        assert!(PreferenceDataset::new(2, 2, vec![tuple(2, 0, 1, true)]).is_err());
        assert!(PreferenceDataset::new(2, 2, vec![tuple(0, 0, 2, true)]).is_err());
    }

    #[test]
    fn label_serializes_as_bit() {
        let s = serde_json::to_string(&tuple(1, 2, 3, true)).unwrap();
        assert_eq!(s, r#"{"x":1,"a1":2,"a2":3,"sigma":1}"#);
        assert!(serde_json::from_str::<PreferenceTuple>(r#"{"x":1,"a1":2,"a2":3,"sigma":2}"#).is_err());
    }

    fn arb_instance() -> impl Strategy<Value = (RewardTable, PreferenceDataset)> {
        (1usize..4, 2usize..5).prop_flat_map(|(nx, na)| {
            let table = prop::collection::vec(-2.0f64..2.0, nx * na);
            let tuples = prop::collection::vec((0..nx, 0..na, 0..na, any::<bool>()), 1..30);
            (table, tuples).prop_map(move |(v, ts)| {
                let r = RewardTable::new(Array2::from_shape_vec((nx, na), v).unwrap(), 2.0).unwrap();
                let ts = ts.into_iter().map(|(x, a1, a2, s)| tuple(x, a1, a2, s)).collect();
                (r, PreferenceDataset::new(nx, na, ts).unwrap())
            })
        })
    }

    proptest! {
        #[test]
        fn sigmoid_antisymmetry(y in -50.0f64..50.0) {
            prop_assert!((sigmoid(y) + sigmoid(-y) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn bt_prob_complements((r, _) in arb_instance(), a1 in 0usize..2, a2 in 0usize..2) {
            let p = bt_prob(&r, 0, a1, a2).unwrap() + bt_prob(&r, 0, a2, a1).unwrap();
            prop_assert!((p - 1.0).abs() < 1e-12);
        }

        #[test]
        fn loss_invariant_to_prompt_shift((r, data) in arb_instance(), c in -3.0f64..3.0) {
            let x = 0;
            let mut shifted = r.values().clone();
            shifted.row_mut(x).mapv_inplace(|v| v + c);
            // Shifts may leave the box; compare on a widened bound.
            let wide = RewardTable::new(shifted, 10.0).unwrap();
            let base = RewardTable::new(r.values().clone(), 10.0).unwrap();
            let l0 = prediction_loss(&base, &data).unwrap();
            let l1 = prediction_loss(&wide, &data).unwrap();
            prop_assert!((l0 - l1).abs() < 1e-9 * (1.0 + l0.abs()));
        }

        #[test]
        fn counts_agree_with_tuples((r, data) in arb_instance()) {
            let counts = ComparisonCounts::new(&data);
            let l0 = data.loss(&r).unwrap();
            let l1 = counts.loss(&r).unwrap();
            prop_assert!((l0 - l1).abs() < 1e-9 * (1.0 + l0));
            let mut g0 = Array2::zeros(r.values().dim());
            let mut g1 = Array2::zeros(r.values().dim());
            data.add_grad(&r, 1.0, &mut g0);
            counts.add_grad(&r, 1.0, &mut g1);
            for (a, b) in g0.iter().zip(&g1) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn grad_rows_sum_to_zero((r, data) in arb_instance()) {
            let g = prediction_loss_grad(&r, &data).unwrap();
            for row in g.rows() {
                prop_assert!(row.sum().abs() < 1e-10);
            }
        }

        #[test]
        fn grad_matches_finite_differences((r, data) in arb_instance()) {
            let f = |m: &Array2<f64>| prediction_loss(&RewardTable::new(m.clone(), 10.0).unwrap(), &data).unwrap();
            let analytic = prediction_loss_grad(&r, &data).unwrap();
            let check = crate::gradcheck::check_gradient(f, r.values(), &analytic, 1e-5);
            prop_assert!(check.passes(1e-5), "relative error {}", check.rel_error);
        }
    }
}
