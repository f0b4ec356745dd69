use ndarray::{Array2, ArrayView1};

use crate::error::{check_index, Error, Result};

/// Tabular reward model `r(x, a)` confined to the box `[-bound, bound]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(into = "crate::schema::RewardRepr", try_from = "crate::schema::RewardRepr")]
pub struct RewardTable {
    values: Array2<f64>,
    bound: f64,
}

impl RewardTable {
    pub fn new(values: Array2<f64>, bound: f64) -> Result<Self> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(Error::Parameter(format!("reward bound must be positive, got {bound}")));
        }
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Shape("reward table needs at least one cell".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || v.abs() > bound) {
            return Err(Error::Parameter(format!("reward {v} outside [-{bound}, {bound}]")));
        }
        Ok(Self { values, bound })
    }

    /// Builds a table by clamping every entry into the box.
    pub fn projected(mut values: Array2<f64>, bound: f64) -> Result<Self> {
        values.mapv_inplace(|v| v.clamp(-bound, bound));
        Self::new(values, bound)
    }

    pub fn filled(n_prompts: usize, n_responses: usize, value: f64, bound: f64) -> Result<Self> {
        Self::new(Array2::from_elem((n_prompts, n_responses), value), bound)
    }

    pub fn zeros(n_prompts: usize, n_responses: usize, bound: f64) -> Result<Self> {
        Self::filled(n_prompts, n_responses, 0.0, bound)
    }

    pub fn n_prompts(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_responses(&self) -> usize {
        self.values.ncols()
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn get(&self, x: usize, a: usize) -> f64 {
        self.values[[x, a]]
    }

    pub fn try_get(&self, x: usize, a: usize) -> Result<f64> {
        check_index("prompt", x, self.n_prompts())?;
        check_index("response", a, self.n_responses())?;
        Ok(self.values[[x, a]])
    }

    pub fn row(&self, x: usize) -> ArrayView1<'_, f64> {
        self.values.row(x)
    }

    /// Projected descent step: `clamp(r - lr * grad)`.
    pub fn descend(&self, grad: &Array2<f64>, lr: f64) -> Result<Self> {
        self.check_shape(grad)?;
        let mut values = &self.values - &(grad * lr);
        values.mapv_inplace(|v| v.clamp(-self.bound, self.bound));
        Ok(Self {
            values,
            bound: self.bound,
        })
    }

    pub fn negated(&self) -> Self {
        Self {
            values: -&self.values,
            bound: self.bound,
        }
    }

    pub fn check_shape(&self, m: &Array2<f64>) -> Result<()> {
        if m.dim() != self.values.dim() {
            return Err(Error::Shape(format!(
                "expected {:?}, got {:?}",
                self.values.dim(),
                m.dim()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_out_of_bound_entries() {
        assert!(RewardTable::new(array![[0.0, 2.5]], 2.0).is_err());
        assert!(RewardTable::new(array![[0.0, 2.0]], 2.0).is_ok());
        assert!(RewardTable::new(array![[0.0]], 0.0).is_err());
    }

    #[test]
    fn descent_is_projected() {
        let r = RewardTable::new(array![[1.5, -1.5]], 2.0).unwrap();
        let next = r.descend(&array![[-10.0, 10.0]], 1.0).unwrap();
        assert_eq!(next.values(), &array![[2.0, -2.0]]);
        assert!(r.descend(&array![[1.0]], 1.0).is_err());
    }

    #[test]
    fn try_get_checks_range() {
        let r = RewardTable::zeros(2, 3, 1.0).unwrap();
        assert!(matches!(r.try_get(2, 0), Err(Error::Range { .. })));
        assert!(matches!(r.try_get(0, 3), Err(Error::Range { .. })));
    }
}
