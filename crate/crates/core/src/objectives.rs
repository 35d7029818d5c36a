//! Differentiable test objectives with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{FopError, Result};
use crate::tensor::{dot, sym_eigendecompose, Mat};

/// A smooth scalar function with an analytic gradient.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, theta: &[f64]) -> f64;
    fn gradient(&self, theta: &[f64]) -> Vec<f64>;

    /// Known global minimizers and their values, if any.
    fn known_minima(&self) -> Vec<(Vec<f64>, f64)> {
        Vec::new()
    }
}

/// `(x + 2y − 7)² + (2x + y − 5)²`, minimum 0 at `(1, 3)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Booth;

pub fn booth(theta: &[f64]) -> f64 {
    let (x, y) = (theta[0], theta[1]);
    (x + 2.0 * y - 7.0).powi(2) + (2.0 * x + y - 5.0).powi(2)
}

pub fn booth_grad(theta: &[f64]) -> Vec<f64> {
    let (x, y) = (theta[0], theta[1]);
    let a = x + 2.0 * y - 7.0;
    let b = 2.0 * x + y - 5.0;
    vec![2.0 * a + 4.0 * b, 4.0 * a + 2.0 * b]
}

impl Objective for Booth {
    fn dim(&self) -> usize {
        2
    }
    fn value(&self, theta: &[f64]) -> f64 {
        booth(theta)
    }
    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        booth_grad(theta)
    }
    fn known_minima(&self) -> Vec<(Vec<f64>, f64)> {
        vec![(vec![1.0, 3.0], 0.0)]
    }
}

/// `(x² + y − 11)² + (x + y² − 7)²`, four global minima with value 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct Himmelblau;

pub fn himmelblau(theta: &[f64]) -> f64 {
    let (x, y) = (theta[0], theta[1]);
    (x * x + y - 11.0).powi(2) + (x + y * y - 7.0).powi(2)
}

pub fn himmelblau_grad(theta: &[f64]) -> Vec<f64> {
    let (x, y) = (theta[0], theta[1]);
    let a = x * x + y - 11.0;
    let b = x + y * y - 7.0;
    vec![4.0 * x * a + 2.0 * b, 2.0 * a + 4.0 * y * b]
}

/// The four minimizers, to 1e-12.
pub const HIMMELBLAU_MINIMA: [[f64; 2]; 4] = [
    [3.0, 2.0],
    [-2.805_118_086_952_745, 3.131_312_518_250_573],
    [-3.779_310_253_377_747, -3.283_185_991_286_170],
    [3.584_428_340_330_492, -1.848_126_526_964_404],
];

impl Objective for Himmelblau {
    fn dim(&self) -> usize {
        2
    }
    fn value(&self, theta: &[f64]) -> f64 {
        himmelblau(theta)
    }
    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        himmelblau_grad(theta)
    }
    fn known_minima(&self) -> Vec<(Vec<f64>, f64)> {
        HIMMELBLAU_MINIMA.iter().map(|m| (m.to_vec(), 0.0)).collect()
    }
}

/// `(1 − x)² + 100 (y − x²)²`. Not one of the headline toy problems; kept as an
/// extra sanity objective.
#[derive(Debug, Clone, Copy, Default)]
pub struct Rosenbrock;

impl Objective for Rosenbrock {
    fn dim(&self) -> usize {
        2
    }
    fn value(&self, t: &[f64]) -> f64 {
        (1.0 - t[0]).powi(2) + 100.0 * (t[1] - t[0] * t[0]).powi(2)
    }
    fn gradient(&self, t: &[f64]) -> Vec<f64> {
        let r = t[1] - t[0] * t[0];
        vec![-2.0 * (1.0 - t[0]) - 400.0 * t[0] * r, 200.0 * r]
    }
    fn known_minima(&self) -> Vec<(Vec<f64>, f64)> {
        vec![(vec![1.0, 1.0], 0.0)]
    }
}

/// `f(θ) = ½ (θ − θ*)ᵀ A (θ − θ*)` with `A` symmetric positive definite.
///
/// Satisfies the Polyak–Łojasiewicz inequality `½‖∇f‖² ≥ μ (f − f*)` with
/// `μ = λ_min(A)` and is `L`-smooth with `L = λ_max(A)`.
#[derive(Debug, Clone)]
pub struct QuadraticPl {
    pub a: Mat,
    pub theta_star: Vec<f64>,
    pub mu: f64,
    pub l: f64,
}

pub fn quadratic_pl(a: Mat, theta_star: Vec<f64>) -> Result<QuadraticPl> {
    if a.rows() != theta_star.len() {
        return Err(crate::error::shape_err(
            "quadratic_pl",
            (theta_star.len(), theta_star.len()),
            a.shape(),
        ));
    }
    let eig = sym_eigendecompose(&a)?;
    let (mu, l) = (eig.min(), eig.max());
    if !(mu > 0.0) {
        return Err(FopError::Contract(format!(
            "A must be positive definite, smallest eigenvalue is {mu:e}"
        )));
    }
    Ok(QuadraticPl { a, theta_star, mu, l })
}

impl QuadraticPl {
    fn offset(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().zip(&self.theta_star).map(|(t, s)| t - s).collect()
    }

    fn a_times(&self, v: &[f64]) -> Vec<f64> {
        (0..self.a.rows()).map(|r| dot(self.a.row(r), v)).collect()
    }
}

impl Objective for QuadraticPl {
    fn dim(&self) -> usize {
        self.theta_star.len()
    }
    fn value(&self, theta: &[f64]) -> f64 {
        let d = self.offset(theta);
        0.5 * dot(&d, &self.a_times(&d))
    }
    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        self.a_times(&self.offset(theta))
    }
    fn known_minima(&self) -> Vec<(Vec<f64>, f64)> {
        vec![(self.theta_star.clone(), 0.0)]
    }
}

/// Central differences `(f(θ + h e_i) − f(θ − h e_i)) / 2h`.
pub fn finite_diff_grad<F>(f: F, theta: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let x = theta[i];
            probe[i] = x + h;
            let up = f(&probe);
            probe[i] = x - h;
            let down = f(&probe);
            probe[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central differences with a per-coordinate step `rel_h · max(1, |θ_i|)`.
pub fn finite_diff_grad_scaled<F>(f: F, theta: &[f64], rel_h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let x = theta[i];
            let h = rel_h * x.abs().max(1.0);
            probe[i] = x + h;
            let up = f(&probe);
            probe[i] = x - h;
            let down = f(&probe);
            probe[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Built-in two-dimensional problems selectable from run configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyProblem {
    Booth,
    Himmelblau,
    Rosenbrock,
}

impl ToyProblem {
    pub fn objective(self) -> Box<dyn Objective> {
        match self {
            ToyProblem::Booth => Box::new(Booth),
            ToyProblem::Himmelblau => Box::new(Himmelblau),
            ToyProblem::Rosenbrock => Box::new(Rosenbrock),
        }
    }

    /// Fixed starting point used when a run config gives none.
    pub fn default_init(self) -> Vec<f64> {
        match self {
            ToyProblem::Booth => vec![-4.0, -4.0],
            ToyProblem::Himmelblau => vec![0.0, -4.0],
            ToyProblem::Rosenbrock => vec![-1.5, 2.0],
        }
    }
}
