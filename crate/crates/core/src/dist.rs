//! Finite spaces, probability vectors, tabular policies and the dataset
//! pair distribution.

use ndarray::{Array2, Array3, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_index, Error, Result};

/// Absolute tolerance on the total mass of any distribution.
pub const SUM_TOL: f64 = 1e-9;

/// A finite index set `0..size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Space {
    pub size: usize,
}

impl Space {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config("space must contain at least one element".into()));
        }
        Ok(Self { size })
    }

    pub fn check(&self, what: &'static str, index: usize) -> Result<()> {
        check_index(what, index, self.size)
    }
}

pub type PromptSpace = Space;
pub type ResponseSpace = Space;

fn check_probs(probs: impl IntoIterator<Item = f64>, what: &str) -> Result<()> {
    let mut total = 0.0;
    for p in probs {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::Distribution(format!("{what}: entry {p} is not a probability")));
        }
        total += p;
    }
    if (total - 1.0).abs() > SUM_TOL {
        return Err(Error::Distribution(format!("{what}: mass sums to {total}")));
    }
    Ok(())
}

/// Probability vector over a finite index set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Distribution("empty support".into()));
        }
        check_probs(probs.iter().copied(), "distribution")?;
        Ok(Self { probs })
    }

    pub fn uniform(size: usize) -> Self {
        assert!(size > 0, "uniform distribution over an empty set");
        Self {
            probs: vec![1.0 / size as f64; size],
        }
    }

    pub fn point(size: usize, index: usize) -> Self {
        assert!(index < size);
        let mut probs = vec![0.0; size];
        probs[index] = 1.0;
        Self { probs }
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Distribution(format!("cannot normalize weights {weights:?}")));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.probs[index]
    }
}

impl TryFrom<Vec<f64>> for Distribution {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs)
    }
}

impl From<Distribution> for Vec<f64> {
    fn from(d: Distribution) -> Self {
        d.probs
    }
}

/// Softmax of `scores / temperature` over the entries where `mask` is true;
/// masked-out entries get probability zero.
pub fn masked_softmax(scores: ArrayView1<f64>, temperature: f64, mask: &[bool]) -> Vec<f64> {
    debug_assert_eq!(scores.len(), mask.len());
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores
        .iter()
        .zip(mask)
        .map(|(s, m)| if *m { ((s - max) / temperature).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// Per-prompt conditional distributions over responses, stored as a dense
/// `[prompts x responses]` matrix whose rows each sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "crate::schema::PolicyRepr", try_from = "crate::schema::PolicyRepr")]
pub struct TabularPolicy {
    probs: Array2<f64>,
}

impl TabularPolicy {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        if probs.nrows() == 0 || probs.ncols() == 0 {
            return Err(Error::Shape("policy needs at least one prompt and one response".into()));
        }
        for (x, row) in probs.axis_iter(Axis(0)).enumerate() {
            check_probs(row.iter().copied(), &format!("policy row {x}"))?;
        }
        Ok(Self { probs })
    }

    pub fn from_rows(rows: &[Distribution]) -> Result<Self> {
        let n_responses = rows.first().map(Distribution::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != n_responses) {
            return Err(Error::Shape("policy rows have different lengths".into()));
        }
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.probs().iter().copied()).collect();
        let probs = Array2::from_shape_vec((rows.len(), n_responses), flat).map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(probs)
    }

    pub fn uniform(n_prompts: usize, n_responses: usize) -> Self {
        Self {
            probs: Array2::from_elem((n_prompts, n_responses), 1.0 / n_responses as f64),
        }
    }

    /// Point mass on `choices[x]` for each prompt.
    pub fn deterministic(choices: &[usize], n_responses: usize) -> Result<Self> {
        let mut probs = Array2::zeros((choices.len(), n_responses));
        for (x, &a) in choices.iter().enumerate() {
            check_index("response", a, n_responses)?;
            probs[[x, a]] = 1.0;
        }
        Self::new(probs)
    }

    pub fn n_prompts(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_responses(&self) -> usize {
        self.probs.ncols()
    }

    pub fn prob(&self, x: usize, a: usize) -> f64 {
        self.probs[[x, a]]
    }

    pub fn row(&self, x: usize) -> ArrayView1<'_, f64> {
        self.probs.row(x)
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.probs
    }

    /// Largest per-prompt total variation distance to `other`.
    pub fn max_tv(&self, other: &TabularPolicy) -> f64 {
        self.probs
            .axis_iter(Axis(0))
            .zip(other.probs.axis_iter(Axis(0)))
            .map(|(p, q)| 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Joint distribution over `(prompt, first response, second response)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "crate::schema::PairRepr", try_from = "crate::schema::PairRepr")]
pub struct PairDistribution {
    probs: Array3<f64>,
}

impl PairDistribution {
    pub fn new(probs: Array3<f64>) -> Result<Self> {
        let (nx, na, nb) = probs.dim();
        if nx == 0 || na == 0 || na != nb {
            return Err(Error::Shape(format!("pair distribution shape {:?}", probs.dim())));
        }
        check_probs(probs.iter().copied(), "pair distribution")?;
        Ok(Self { probs })
    }

    pub fn n_prompts(&self) -> usize {
        self.probs.dim().0
    }

    pub fn n_responses(&self) -> usize {
        self.probs.dim().1
    }

    pub fn prob(&self, x: usize, a1: usize, a2: usize) -> f64 {
        self.probs[[x, a1, a2]]
    }

    pub fn tensor(&self) -> &Array3<f64> {
        &self.probs
    }

    pub fn prompt_marginal(&self) -> Distribution {
        let probs = self.probs.axis_iter(Axis(0)).map(|slice| slice.sum()).collect();
        Distribution { probs }
    }

    /// Total mass on pairs that involve response `a` at prompt `x`, in either slot.
    pub fn response_mass(&self, x: usize, a: usize) -> f64 {
        let slice = self.probs.index_axis(Axis(0), x);
        slice.row(a).sum() + slice.column(a).sum() - slice[[a, a]]
    }
}
