//! Central finite-difference checks for analytic gradients over reward tables.

use ndarray::Array2;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` in the
    /// Euclidean norm; zero when both vanish.
    pub rel_error: f64,
    /// Cell with the largest absolute disagreement.
    pub worst_cell: (usize, usize),
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error < tol
    }
}

/// Central differences of `f` at `at` with step `h` in every cell.
pub fn numeric_gradient(f: impl Fn(&Array2<f64>) -> f64, at: &Array2<f64>, h: f64) -> Array2<f64> {
    let mut probe = at.clone();
    Array2::from_shape_fn(at.dim(), |idx| {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let up = f(&probe);
        probe[idx] = orig - h;
        let down = f(&probe);
        probe[idx] = orig;
        (up - down) / (2.0 * h)
    })
}

/// Compares `analytic` against central differences of `f` at `at`.
pub fn check_gradient(f: impl Fn(&Array2<f64>) -> f64, at: &Array2<f64>, analytic: &Array2<f64>, h: f64) -> GradCheck {
    let numeric = numeric_gradient(f, at, h);
    let norm = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = analytic - &numeric;
    let scale = norm(analytic).max(norm(&numeric));
    let rel_error = if scale == 0.0 { 0.0 } else { norm(&diff) / scale };
    let mut worst_cell = (0, 0);
    let mut worst = -1.0;
    for ((x, a), d) in diff.indexed_iter() {
        if d.abs() > worst {
            worst = d.abs();
            worst_cell = (x, a);
        }
    }
    GradCheck { rel_error, worst_cell }
}
