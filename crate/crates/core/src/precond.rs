//! Learned first-order preconditioners.
//!
//! A preconditioner holds a matrix `M` and transforms a layer gradient `G`
//! (preconditioned axis first, `n × c`) into `P G` with `P` built from `M`:
//!
//! | mode         | `P`                                  |
//! |--------------|--------------------------------------|
//! | `Full`       | `M Mᵀ`, `M` starts at `I`            |
//! | `LowRank`    | `I + M Mᵀ`, `M` is `n × k`, `M_ij ~ N(0, σ²)` |
//! | `Normalized` | `√n · M Mᵀ / ‖M Mᵀ‖_F`               |
//! | `Stabilized` | `γ(t) · M Mᵀ / ‖M Mᵀ‖₂`              |
//!
//! `M` is learned online from the hypergradient of the current loss with
//! respect to the `M` used in the previous step:
//! `∇_M J = −ε (g_t g_{t−1}ᵀ + g_{t−1} g_tᵀ) M`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, FopError, Result};
use crate::tensor::{gaussian_mat, spectral_norm_psd, Mat, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PrecondMode {
    Full,
    LowRank {
        rank: usize,
    },
    Normalized,
    Stabilized {
        p_inf: f64,
        #[serde(default)]
        delta: DeltaSchedule,
    },
}

impl PrecondMode {
    pub fn tag(&self) -> &'static str {
        match self {
            PrecondMode::Full => "full",
            PrecondMode::LowRank { .. } => "low_rank",
            PrecondMode::Normalized => "normalized",
            PrecondMode::Stabilized { .. } => "stabilized",
        }
    }
}

/// Decay schedule `δ(t)` for the stabilized mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DeltaSchedule {
    /// `δ(t) = t^(−exponent)`
    InversePower { exponent: f64 },
    /// Constant `δ`; mostly useful to probe the limits of `γ`.
    Fixed { value: f64 },
}

impl Default for DeltaSchedule {
    fn default() -> Self {
        DeltaSchedule::InversePower { exponent: 2.0 }
    }
}

impl DeltaSchedule {
    pub fn at(&self, t: u64) -> f64 {
        match *self {
            DeltaSchedule::InversePower { exponent } => (t.max(1) as f64).powf(-exponent),
            DeltaSchedule::Fixed { value } => value,
        }
    }
}

/// `γ(t) = δ(t)·‖P(t)‖₂ + (1 − δ(t))·p∞`
pub fn stabilized_gamma(t: u64, p_norm: f64, p_inf: f64, delta: &DeltaSchedule) -> f64 {
    let d = delta.at(t);
    d * p_norm + (1.0 - d) * p_inf
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HyperOptimizer {
    PlainSgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

impl Default for HyperOptimizer {
    fn default() -> Self {
        HyperOptimizer::PlainSgd
    }
}

impl HyperOptimizer {
    pub fn adam() -> Self {
        HyperOptimizer::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

pub(crate) fn default_beta1() -> f64 {
    0.9
}
pub(crate) fn default_beta2() -> f64 {
    0.999
}
pub(crate) fn default_adam_eps() -> f64 {
    1e-8
}
fn default_sigma() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreconditionerConfig {
    pub mode: PrecondMode,
    /// Step size `ρ` of the hyper-optimizer.
    pub hyper_lr: f64,
    #[serde(default)]
    pub hyper_optimizer: HyperOptimizer,
    /// Standard deviation of the initial low-rank factor.
    #[serde(default = "default_sigma")]
    pub init_sigma: f64,
}

impl PreconditionerConfig {
    pub fn full(hyper_lr: f64) -> Self {
        Self::with_mode(PrecondMode::Full, hyper_lr)
    }

    pub fn low_rank(rank: usize, hyper_lr: f64) -> Self {
        Self::with_mode(PrecondMode::LowRank { rank }, hyper_lr)
    }

    pub fn with_mode(mode: PrecondMode, hyper_lr: f64) -> Self {
        Self {
            mode,
            hyper_lr,
            hyper_optimizer: HyperOptimizer::PlainSgd,
            init_sigma: default_sigma(),
        }
    }

    pub fn sigma(mut self, s: f64) -> Self {
        self.init_sigma = s;
        self
    }

    pub fn hyper_optimizer(mut self, h: HyperOptimizer) -> Self {
        self.hyper_optimizer = h;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hyper_lr >= 0.0) || !self.hyper_lr.is_finite() {
            return Err(FopError::Config(format!("hyper_lr must be >= 0, got {}", self.hyper_lr)));
        }
        if !(self.init_sigma >= 0.0) || !self.init_sigma.is_finite() {
            return Err(FopError::Config(format!(
                "init_sigma must be >= 0, got {}",
                self.init_sigma
            )));
        }
        if let PrecondMode::Stabilized { p_inf, .. } = self.mode {
            if !(p_inf > 0.0) || !p_inf.is_finite() {
                return Err(FopError::Config(format!("p_inf must be > 0, got {p_inf}")));
            }
        }
        if let HyperOptimizer::Adam { beta1, beta2, eps } = self.hyper_optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(FopError::Config("Adam betas must lie in [0,1), eps > 0".into()));
            }
        }
        Ok(())
    }
}

/// A learnable preconditioner for one parameter tensor.
#[derive(Debug, Clone)]
pub struct Preconditioner {
    m: Mat,
    config: PreconditionerConfig,
    adam_m: Mat,
    adam_v: Mat,
    hyper_steps: u64,
    prev_grad: Option<Mat>,
    /// Completed `observe` calls; the step in progress is `t + 1`.
    t: u64,
}

impl Preconditioner {
    /// Creates a preconditioner for gradients with `n` rows.
    pub fn new(n: usize, config: PreconditionerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let m = match config.mode {
            PrecondMode::LowRank { rank } => gaussian_mat(n, rank, config.init_sigma, rng)?,
            _ => Mat::identity(n),
        };
        Self::with_matrix(m, config)
    }

    /// Starts from a given `M`.
    pub fn with_matrix(m: Mat, config: PreconditionerConfig) -> Result<Self> {
        config.validate()?;
        match config.mode {
            PrecondMode::LowRank { rank } if m.cols() != rank => {
                return Err(shape_err("Preconditioner", (m.rows(), rank), m.shape()));
            }
            PrecondMode::LowRank { .. } => {}
            _ if !m.is_square() => {
                return Err(shape_err("Preconditioner", (m.rows(), m.rows()), m.shape()));
            }
            _ => {}
        }
        let (r, c) = m.shape();
        Ok(Self {
            m,
            config,
            adam_m: Mat::zeros(r, c),
            adam_v: Mat::zeros(r, c),
            hyper_steps: 0,
            prev_grad: None,
            t: 0,
        })
    }

    pub fn config(&self) -> &PreconditionerConfig {
        &self.config
    }

    /// Number of gradient rows this preconditioner acts on.
    pub fn dim(&self) -> usize {
        self.m.rows()
    }

    pub fn m(&self) -> &Mat {
        &self.m
    }

    pub fn iteration(&self) -> u64 {
        self.t
    }

    pub fn prev_grad(&self) -> Option<&Mat> {
        self.prev_grad.as_ref()
    }

    /// Adam moment buffers for `M` (zero when the plain hyper-optimizer is used).
    pub fn hyper_moments(&self) -> (&Mat, &Mat) {
        (&self.adam_m, &self.adam_v)
    }

    /// `M Mᵀ`, plus the identity in low-rank mode.
    pub fn base_matrix(&self) -> Mat {
        let mut p = self.m.gram_outer();
        if matches!(self.config.mode, PrecondMode::LowRank { .. }) {
            for i in 0..p.rows() {
                p[(i, i)] += 1.0;
            }
        }
        p
    }

    /// Rescaling applied on top of `base_matrix` at the current step.
    fn scale(&self, base: Option<&Mat>) -> Result<f64> {
        let owned;
        let base = match base {
            Some(b) => b,
            None => {
                owned = self.base_matrix();
                &owned
            }
        };
        match &self.config.mode {
            PrecondMode::Full | PrecondMode::LowRank { .. } => Ok(1.0),
            PrecondMode::Normalized => {
                let norm = base.frobenius_norm();
                if norm < 1e-300 {
                    return Err(FopError::Degenerate(format!("‖MMᵀ‖_F = {norm:e}")));
                }
                Ok((self.dim() as f64).sqrt() / norm)
            }
            PrecondMode::Stabilized { p_inf, delta } => {
                let norm = spectral_norm_psd(base)?;
                if norm < 1e-300 {
                    return Err(FopError::Degenerate(format!("‖MMᵀ‖₂ = {norm:e}")));
                }
                Ok(stabilized_gamma(self.t + 1, norm, *p_inf, delta) / norm)
            }
        }
    }

    /// The matrix actually applied to the next gradient.
    pub fn effective_matrix(&self) -> Result<Mat> {
        let base = self.base_matrix();
        let s = self.scale(Some(&base))?;
        Ok(if s == 1.0 { base } else { base.scale(s) })
    }

    /// `P G` for a gradient with the preconditioned axis first.
    pub fn apply(&self, g: &Mat) -> Result<Mat> {
        if g.rows() != self.dim() {
            return Err(shape_err("apply", (self.dim(), g.cols()), g.shape()));
        }
        let mmt_g = self.m.matmul(&self.m.t_matmul(g)?)?;
        match self.config.mode {
            PrecondMode::Full => Ok(mmt_g),
            PrecondMode::LowRank { .. } => g.add(&mmt_g),
            PrecondMode::Normalized | PrecondMode::Stabilized { .. } => {
                Ok(mmt_g.scale(self.scale(None)?))
            }
        }
    }

    /// `∇_M J = −ε (g_t g_prevᵀ + g_prev g_tᵀ) M` with the current `M`.
    pub fn hypergradient(&self, g_t: &Mat, g_prev: &Mat, lr: f64) -> Result<Mat> {
        g_t.check_same_shape(g_prev, "hypergradient")?;
        if g_t.rows() != self.dim() {
            return Err(shape_err("hypergradient", (self.dim(), g_t.cols()), g_t.shape()));
        }
        // (g_t g_pᵀ + g_p g_tᵀ) M without forming the n × n outer products
        let mut out = g_t.matmul(&g_prev.t_matmul(&self.m)?)?;
        out.add_scaled(1.0, &g_prev.matmul(&g_t.t_matmul(&self.m)?)?)?;
        Ok(out.scale(-lr))
    }

    /// One hyper-optimizer step on `M`.
    pub fn update_m(&mut self, grad_m: &Mat) -> Result<()> {
        self.m.check_same_shape(grad_m, "update_m")?;
        let rho = self.config.hyper_lr;
        match self.config.hyper_optimizer {
            HyperOptimizer::PlainSgd => self.m.add_scaled(-rho, grad_m)?,
            HyperOptimizer::Adam { beta1, beta2, eps } => {
                self.hyper_steps += 1;
                let k = self.hyper_steps as i32;
                let c1 = 1.0 - beta1.powi(k);
                let c2 = 1.0 - beta2.powi(k);
                let m = self.m.data_mut();
                let mom = self.adam_m.data_mut();
                let vel = self.adam_v.data_mut();
                for (((w, g), a), b) in m.iter_mut().zip(grad_m.data()).zip(mom).zip(vel) {
                    *a = beta1 * *a + (1.0 - beta1) * g;
                    *b = beta2 * *b + (1.0 - beta2) * g * g;
                    *w -= rho * (*a / c1) / ((*b / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }

    /// Finishes a step: learns from the previous gradient (if cached), then caches `g`.
    ///
    /// The first call has nothing to compare against and only caches.
    pub fn observe(&mut self, g: &Mat, lr: f64) -> Result<()> {
        if let Some(prev) = self.prev_grad.take() {
            let grad_m = self.hypergradient(g, &prev, lr)?;
            self.update_m(&grad_m)?;
        } else if g.rows() != self.dim() {
            return Err(shape_err("observe", (self.dim(), g.cols()), g.shape()));
        }
        self.prev_grad = Some(g.clone());
        self.t += 1;
        Ok(())
    }
}
