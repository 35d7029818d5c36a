//! Diagnostics for learned preconditioners: rotation angles, eigenspectra,
//! norm-growth traces and the linear-rate check for fixed-`P` gradient descent
//! on PL quadratics.

use serde::Serialize;

use crate::error::{FopError, Result};
use crate::objectives::{Objective, QuadraticPl};
use crate::optim::OptimizerKind;
use crate::precond::HyperOptimizer;
use crate::record::RunRecord;
use crate::tensor::{dot, norm2, sym_eigenvalues, Mat};

/// Angle in degrees between `g` and `pg`, in `[0, 180]`.
pub fn rotation_angle(g: &[f64], pg: &[f64]) -> Result<f64> {
    if g.len() != pg.len() {
        return Err(FopError::ShapeMismatch {
            op: "rotation_angle",
            expected: format!("{} entries", g.len()),
            got: format!("{} entries", pg.len()),
        });
    }
    let (ng, np) = (norm2(g), norm2(pg));
    if ng == 0.0 || np == 0.0 || !ng.is_finite() || !np.is_finite() {
        return Err(FopError::UndefinedAngle);
    }
    // 2·atan2(‖u‖v‖ − v‖u‖‖, ‖u‖v‖ + v‖u‖‖) stays accurate near 0° and 180°, unlike acos
    let (mut diff, mut sum) = (0.0, 0.0);
    for (a, b) in g.iter().zip(pg) {
        let (x, y) = (a * np, b * ng);
        diff += (x - y) * (x - y);
        sum += (x + y) * (x + y);
    }
    Ok((2.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees())
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumReport {
    pub layer: usize,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    pub min: f64,
    pub max: f64,
    /// Product of the eigenvalues.
    pub determinant: f64,
    /// `λ_min / λ_max`; 0 when `λ_max` is 0.
    pub uniformity: f64,
}

pub fn spectrum(layer: usize, p: &Mat) -> Result<SpectrumReport> {
    let eigenvalues = sym_eigenvalues(p)?;
    let max = eigenvalues.first().copied().unwrap_or(0.0);
    let min = eigenvalues.last().copied().unwrap_or(0.0);
    Ok(SpectrumReport {
        layer,
        determinant: eigenvalues.iter().product(),
        uniformity: if max != 0.0 { min / max } else { 0.0 },
        eigenvalues,
        min,
        max,
    })
}

/// Step size paired with the linear rate `1 − μ (2λ_min − λ_max²) / L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RateStep {
    /// Step `(2λ_min − λ_max²) / L`, the same constant that appears in the rate.
    Literal,
    /// Step `1 / L`, the classical smooth-descent step.
    InverseSmoothness,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceCheck {
    pub mu: f64,
    pub l: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `(2λ_min − λ_max²) / L`
    pub rho_step: f64,
    /// Step size the run used.
    pub step: f64,
    /// `1 − μ ρ_step`
    pub rate: f64,
    /// Largest gradient norm seen along the run.
    pub k: f64,
    /// `(f₀ − f*) · rate^k` per iteration.
    pub bound: Vec<f64>,
    /// `max_k (f_k − f*) − bound_k`; negative when the bound holds with room.
    pub max_violation: f64,
    /// Iterations where the gap exceeds the bound by more than `1e-12`.
    pub violations: usize,
}

impl ConvergenceCheck {
    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

/// Loss and gradient-norm trace of fixed-`P` gradient descent.
#[derive(Debug, Clone)]
pub struct QuadraticRun {
    pub step: f64,
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
}

/// `(λ_min(P), λ_max(P), ρ_step)`; errors unless `ρ_step > 0` and the rate lies in `(0, 1]`.
pub fn rate_constants(quad: &QuadraticPl, p: &Mat) -> Result<(f64, f64, f64)> {
    let vals = sym_eigenvalues(p)?;
    let (lmin, lmax) = (*vals.last().unwrap_or(&0.0), *vals.first().unwrap_or(&0.0));
    if lmin < -1e-12 {
        return Err(FopError::Config(format!("P is not PSD: λ_min = {lmin:e}")));
    }
    let rho = (2.0 * lmin - lmax * lmax) / quad.l;
    if !(rho > 0.0) {
        return Err(FopError::Config(format!(
            "2λ_min − λ_max² must be positive (λ_min = {lmin}, λ_max = {lmax})"
        )));
    }
    let rate = 1.0 - quad.mu * rho;
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(FopError::Config(format!("rate 1 − μρ = {rate} outside (0, 1]")));
    }
    Ok((lmin, lmax, rho))
}

/// Runs `θ_{k+1} = θ_k − step · P ∇f(θ_k)` for `iters` steps.
pub fn preconditioned_gd(
    quad: &QuadraticPl,
    p: &Mat,
    rule: RateStep,
    theta0: &[f64],
    iters: usize,
) -> Result<QuadraticRun> {
    let (_, _, rho) = rate_constants(quad, p)?;
    let step = match rule {
        RateStep::Literal => rho,
        RateStep::InverseSmoothness => 1.0 / quad.l,
    };
    let mut theta = theta0.to_vec();
    let mut losses = Vec::with_capacity(iters + 1);
    let mut grad_norms = Vec::with_capacity(iters + 1);
    for k in 0..=iters {
        let g = quad.gradient(&theta);
        losses.push(quad.value(&theta));
        grad_norms.push(norm2(&g));
        if k == iters {
            break;
        }
        for r in 0..theta.len() {
            theta[r] -= step * dot(p.row(r), &g);
        }
    }
    Ok(QuadraticRun { step, losses, grad_norms })
}

/// Checks `f(θ_k) − f* ≤ (1 − μ ρ_step)^k (f(θ₀) − f*) + 1e-12` along a run.
pub fn verify_convergence_bound(run: &QuadraticRun, quad: &QuadraticPl, p: &Mat) -> Result<ConvergenceCheck> {
    let (lambda_min, lambda_max, rho_step) = rate_constants(quad, p)?;
    let rate = 1.0 - quad.mu * rho_step;
    let f_star = 0.0;
    let gap0 = run.losses.first().copied().unwrap_or(0.0) - f_star;
    let mut bound = Vec::with_capacity(run.losses.len());
    let mut max_violation = f64::NEG_INFINITY;
    let mut violations = 0;
    let mut factor = 1.0;
    for &f in &run.losses {
        let b = gap0 * factor;
        let excess = (f - f_star) - b;
        max_violation = max_violation.max(excess);
        if !(excess <= 1e-12) {
            violations += 1;
        }
        bound.push(b);
        factor *= rate;
    }
    Ok(ConvergenceCheck {
        mu: quad.mu,
        l: quad.l,
        lambda_min,
        lambda_max,
        rho_step,
        step: run.step,
        rate,
        k: run.grad_norms.iter().copied().fold(0.0, f64::max),
        bound,
        max_violation,
        violations,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct NormRow {
    pub t: u64,
    pub layer: usize,
    pub spectral: f64,
    pub frobenius: f64,
    /// `‖P(0)‖₂ + t ρ K_t²` with `K_t` the running maximum gradient norm.
    pub bound: f64,
    pub violated: bool,
}

/// Norm-growth trace of every snapshotted preconditioner against the linear bound.
///
/// `ρ` comes from the recorded config; runs whose hyper-optimizer is not plain
/// SGD carry no bound (reported as `NaN`, never violated).
pub fn norm_trace(record: &RunRecord) -> Result<Vec<NormRow>> {
    if record.snapshots.is_empty() {
        return Err(FopError::MissingSnapshots {
            what: "preconditioner snapshots".into(),
            hint: "a FOP optimizer and --snapshot-every > 0".into(),
        });
    }
    let rho = match record.optimizer_config().map(|c| c.kind) {
        Some(OptimizerKind::Fop { preconditioner, .. })
            if preconditioner.hyper_optimizer == HyperOptimizer::PlainSgd =>
        {
            Some(preconditioner.hyper_lr)
        }
        _ => None,
    };
    // running max of the gradient norm, indexed by step
    let mut k_running = Vec::with_capacity(record.series.len());
    let mut k = 0.0f64;
    for row in &record.series {
        k = k.max(row.grad_norm);
        k_running.push((row.t, k));
    }
    let k_at = |t: u64| {
        k_running
            .iter()
            .take_while(|(s, _)| *s <= t)
            .last()
            .map_or(0.0, |(_, k)| *k)
    };

    let mut out = Vec::with_capacity(record.snapshots.len());
    let mut initial: Vec<(usize, f64)> = Vec::new();
    for snap in &record.snapshots {
        let p = snap.matrix()?;
        let spectral = sym_eigenvalues(&p)?.first().copied().unwrap_or(0.0);
        let p0 = match initial.iter().find(|(l, _)| *l == snap.layer) {
            Some((_, v)) => *v,
            None => {
                initial.push((snap.layer, spectral));
                spectral
            }
        };
        let bound = match rho {
            Some(rho) => {
                let kt = k_at(snap.t);
                p0 + snap.t as f64 * rho * kt * kt
            }
            None => f64::NAN,
        };
        out.push(NormRow {
            t: snap.t,
            layer: snap.layer,
            spectral,
            frobenius: p.frobenius_norm(),
            bound,
            violated: spectral > bound + 1e-8,
        });
    }
    Ok(out)
}
