//! Step rules: SGD, momentum, Adam, the scalar and per-parameter hypergradient
//! baselines, and learned preconditioning composed with any base rule.

use serde::{Deserialize, Serialize};

use crate::analysis::rotation_angle;
use crate::error::{shape_err, FopError, Result};
use crate::precond::{
    default_adam_eps, default_beta1, default_beta2, HyperOptimizer, PrecondMode, Preconditioner,
    PreconditionerConfig,
};
use crate::tensor::{Mat, Rng};

/// Update rule that consumes a (possibly preconditioned) gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BaseKind {
    Sgd,
    Momentum {
        alpha: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum {
        alpha: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
    /// Scalar learning rate per layer, adapted by hypergradient.
    Shd {
        hyper_lr: f64,
        #[serde(default)]
        hyper_optimizer: HyperOptimizer,
    },
    /// Per-parameter diagonal scaling, adapted by hypergradient.
    Pphd {
        hyper_lr: f64,
        #[serde(default)]
        hyper_optimizer: HyperOptimizer,
    },
    Fop {
        base: BaseKind,
        preconditioner: PreconditionerConfig,
    },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            OptimizerKind::Sgd => "sgd".into(),
            OptimizerKind::Momentum { .. } => "momentum".into(),
            OptimizerKind::Adam { .. } => "adam".into(),
            OptimizerKind::Shd { .. } => "shd".into(),
            OptimizerKind::Pphd { .. } => "pphd".into(),
            OptimizerKind::Fop { base, preconditioner } => {
                let b = match base {
                    BaseKind::Sgd => "sgd",
                    BaseKind::Momentum { .. } => "momentum",
                    BaseKind::Adam { .. } => "adam",
                };
                format!("fop-{}-{b}", preconditioner.mode.tag())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Learning rate `ε`.
    pub lr: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn momentum(lr: f64, alpha: f64) -> Self {
        Self::new(OptimizerKind::Momentum { alpha }, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::adam(), lr)
    }

    pub fn fop(lr: f64, base: BaseKind, preconditioner: PreconditionerConfig) -> Self {
        Self::new(OptimizerKind::Fop { base, preconditioner }, lr)
    }

    /// `lr = 0` is accepted: it is the "no learning" control.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(FopError::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        let check_alpha = |alpha: f64| {
            if (0.0..1.0).contains(&alpha) {
                Ok(())
            } else {
                Err(FopError::Config(format!("momentum must lie in [0,1), got {alpha}")))
            }
        };
        let check_adam = |b1: f64, b2: f64, eps: f64| {
            if (0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2) && eps > 0.0 {
                Ok(())
            } else {
                Err(FopError::Config("Adam betas must lie in [0,1), eps > 0".into()))
            }
        };
        match &self.kind {
            OptimizerKind::Sgd => Ok(()),
            OptimizerKind::Momentum { alpha } => check_alpha(*alpha),
            OptimizerKind::Adam { beta1, beta2, eps } => check_adam(*beta1, *beta2, *eps),
            OptimizerKind::Shd { hyper_lr, .. } | OptimizerKind::Pphd { hyper_lr, .. } => {
                if *hyper_lr >= 0.0 && hyper_lr.is_finite() {
                    Ok(())
                } else {
                    Err(FopError::Config(format!("hyper_lr must be >= 0, got {hyper_lr}")))
                }
            }
            OptimizerKind::Fop { base, preconditioner } => {
                preconditioner.validate()?;
                match *base {
                    BaseKind::Sgd => Ok(()),
                    BaseKind::Momentum { alpha } => check_alpha(alpha),
                    BaseKind::Adam { beta1, beta2, eps } => check_adam(beta1, beta2, eps),
                }
            }
        }
    }
}

/// Shape and grouping of one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSpec {
    pub rows: usize,
    pub cols: usize,
    /// Layer index; scalar hypergradient learning rates are shared per layer.
    pub layer: usize,
    /// Whether learned preconditioning applies (weights yes, biases no).
    pub precondition: bool,
}

impl ParamSpec {
    pub fn matrix(rows: usize, cols: usize, layer: usize) -> Self {
        Self { rows, cols, layer, precondition: true }
    }

    pub fn bias(cols: usize, layer: usize) -> Self {
        Self { rows: 1, cols, layer, precondition: false }
    }
}

#[derive(Debug, Clone, Default)]
struct Slot {
    velocity: Option<Mat>,
    adam: Option<(Mat, Mat)>,
    precond: Option<Preconditioner>,
    diag: Option<Mat>,
    diag_adam: Option<(Mat, Mat)>,
    prev_grad: Option<Mat>,
    last_angle: Option<f64>,
}

/// Scalar Adam state for an S-HD layer learning rate.
#[derive(Debug, Clone, Copy, Default)]
struct ScalarAdam {
    m: f64,
    v: f64,
}

/// Optimizer state for a collection of parameter tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    specs: Vec<ParamSpec>,
    slots: Vec<Slot>,
    layer_lrs: Vec<f64>,
    layer_lr_adam: Vec<ScalarAdam>,
    t: u64,
}

impl Optimizer {
    /// `rng` seeds low-rank preconditioner factors; other kinds draw nothing.
    pub fn new(config: OptimizerConfig, specs: &[ParamSpec], rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut slots = Vec::with_capacity(specs.len());
        for spec in specs {
            let mut slot = Slot::default();
            let shape = || Mat::zeros(spec.rows, spec.cols);
            let base = match &config.kind {
                OptimizerKind::Sgd => Some(BaseKind::Sgd),
                OptimizerKind::Momentum { alpha } => Some(BaseKind::Momentum { alpha: *alpha }),
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    Some(BaseKind::Adam { beta1: *beta1, beta2: *beta2, eps: *eps })
                }
                OptimizerKind::Fop { base, preconditioner } => {
                    if spec.precondition {
                        let mut pc = preconditioner.clone();
                        // a rank beyond the layer's input dimension means full rank
                        if let PrecondMode::LowRank { rank } = &mut pc.mode {
                            *rank = (*rank).min(spec.rows);
                        }
                        let p = Preconditioner::new(spec.rows, pc, rng)?;
                        slot.precond = Some(p);
                    }
                    Some(*base)
                }
                OptimizerKind::Pphd { .. } => {
                    slot.diag = Some(Mat::from_parts(
                        spec.rows,
                        spec.cols,
                        vec![1.0; spec.rows * spec.cols],
                    ));
                    slot.diag_adam = Some((shape(), shape()));
                    None
                }
                OptimizerKind::Shd { .. } => None,
            };
            match base {
                Some(BaseKind::Momentum { .. }) => slot.velocity = Some(shape()),
                Some(BaseKind::Adam { .. }) => slot.adam = Some((shape(), shape())),
                _ => {}
            }
            slots.push(slot);
        }
        let layers = specs.iter().map(|s| s.layer + 1).max().unwrap_or(0);
        Ok(Self {
            layer_lrs: vec![config.lr; layers],
            layer_lr_adam: vec![ScalarAdam::default(); layers],
            config,
            specs: specs.to_vec(),
            slots,
            t: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Completed steps.
    pub fn iteration(&self) -> u64 {
        self.t
    }

    /// Preconditioners by parameter index (FOP only).
    pub fn preconditioners(&self) -> impl Iterator<Item = (usize, &Preconditioner)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.precond.as_ref().map(|p| (i, p)))
    }

    /// Current per-layer learning rates (S-HD; constant `ε` otherwise).
    pub fn layer_lrs(&self) -> &[f64] {
        &self.layer_lrs
    }

    /// Per-parameter diagonal of parameter `i` (PP-HD only).
    pub fn diagonal(&self, i: usize) -> Option<&Mat> {
        self.slots.get(i).and_then(|s| s.diag.as_ref())
    }

    /// Angle in degrees between the raw and preconditioned gradient of each
    /// parameter at the last step; `None` for unpreconditioned or zero gradients.
    pub fn last_rotation_angles(&self) -> Vec<Option<f64>> {
        self.slots.iter().map(|s| s.last_angle).collect()
    }

    fn check(&self, params: &[Mat], grads: &[Mat]) -> Result<()> {
        if params.len() != self.specs.len() || grads.len() != self.specs.len() {
            return Err(FopError::ShapeMismatch {
                op: "step",
                expected: format!("{} tensors", self.specs.len()),
                got: format!("{} params, {} grads", params.len(), grads.len()),
            });
        }
        for ((p, g), s) in params.iter().zip(grads).zip(&self.specs) {
            if p.shape() != (s.rows, s.cols) {
                return Err(shape_err("step", (s.rows, s.cols), p.shape()));
            }
            if g.shape() != (s.rows, s.cols) {
                return Err(shape_err("step", (s.rows, s.cols), g.shape()));
            }
        }
        Ok(())
    }

    /// Applies one update to `params` given their gradients.
    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat]) -> Result<()> {
        self.check(params, grads)?;
        self.t += 1;
        let lr = self.config.lr;
        let t = self.t;
        match self.config.kind.clone() {
            OptimizerKind::Sgd => {
                for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
                    base_update(BaseKind::Sgd, lr, t, slot, p, g);
                }
            }
            OptimizerKind::Momentum { alpha } => {
                for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
                    base_update(BaseKind::Momentum { alpha }, lr, t, slot, p, g);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let base = BaseKind::Adam { beta1, beta2, eps };
                for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
                    base_update(base, lr, t, slot, p, g);
                }
            }
            OptimizerKind::Shd { hyper_lr, hyper_optimizer } => {
                self.shd_step(params, grads, hyper_lr, hyper_optimizer)?
            }
            OptimizerKind::Pphd { hyper_lr, hyper_optimizer } => {
                self.pphd_step(params, grads, hyper_lr, hyper_optimizer)?
            }
            OptimizerKind::Fop { base, .. } => {
                for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
                    let pg = match slot.precond.as_ref() {
                        Some(pre) => pre.apply(g)?,
                        None => {
                            base_update(base, lr, t, slot, p, g);
                            continue;
                        }
                    };
                    slot.last_angle = rotation_angle(g.data(), pg.data()).ok();
                    base_update(base, lr, t, slot, p, &pg);
                    // the hypergradient uses raw gradients
                    if let Some(pre) = slot.precond.as_mut() {
                        pre.observe(g, lr)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn shd_step(
        &mut self,
        params: &mut [Mat],
        grads: &[Mat],
        hyper_lr: f64,
        hyper: HyperOptimizer,
    ) -> Result<()> {
        if self.t > 1 {
            let mut inner = vec![0.0; self.layer_lrs.len()];
            for ((g, slot), spec) in grads.iter().zip(&self.slots).zip(&self.specs) {
                let prev = slot.prev_grad.as_ref().expect("cached after first step");
                inner[spec.layer] += g.dot(prev)?;
            }
            let k = (self.t - 1) as i32;
            for ((lr, state), ip) in self.layer_lrs.iter_mut().zip(&mut self.layer_lr_adam).zip(inner) {
                // ∂J_t/∂ε = −⟨g_t, g_{t−1}⟩
                *lr -= hyper_step(hyper, hyper_lr, -ip, &mut state.m, &mut state.v, k);
            }
        }
        for ((p, g), (slot, spec)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.slots.iter_mut().zip(&self.specs))
        {
            p.add_scaled(-self.layer_lrs[spec.layer], g)?;
            slot.prev_grad = Some(g.clone());
        }
        Ok(())
    }

    fn pphd_step(
        &mut self,
        params: &mut [Mat],
        grads: &[Mat],
        hyper_lr: f64,
        hyper: HyperOptimizer,
    ) -> Result<()> {
        let lr = self.config.lr;
        let k = (self.t.max(2) - 1) as i32;
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            let d = slot.diag.as_mut().expect("pphd slot");
            if let Some(prev) = slot.prev_grad.as_ref() {
                let (am, av) = slot.diag_adam.as_mut().expect("pphd slot");
                let it = d
                    .data_mut()
                    .iter_mut()
                    .zip(g.data().iter().zip(prev.data()))
                    .zip(am.data_mut().iter_mut().zip(av.data_mut().iter_mut()));
                for ((di, (gi, pi)), (mi, vi)) in it {
                    *di -= hyper_step(hyper, hyper_lr, -(gi * pi), mi, vi, k);
                }
            }
            for ((w, gi), di) in p.data_mut().iter_mut().zip(g.data()).zip(d.data()) {
                *w -= lr * (di * gi);
            }
            slot.prev_grad = Some(g.clone());
        }
        Ok(())
    }
}

/// Step to subtract from a hyperparameter given its gradient.
fn hyper_step(h: HyperOptimizer, rate: f64, grad: f64, m: &mut f64, v: &mut f64, k: i32) -> f64 {
    match h {
        HyperOptimizer::PlainSgd => rate * grad,
        HyperOptimizer::Adam { beta1, beta2, eps } => {
            *m = beta1 * *m + (1.0 - beta1) * grad;
            *v = beta2 * *v + (1.0 - beta2) * grad * grad;
            let mh = *m / (1.0 - beta1.powi(k));
            let vh = *v / (1.0 - beta2.powi(k));
            rate * mh / (vh.sqrt() + eps)
        }
    }
}

fn base_update(base: BaseKind, lr: f64, t: u64, slot: &mut Slot, p: &mut Mat, g: &Mat) {
    match base {
        BaseKind::Sgd => {
            for (w, gi) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * gi;
            }
        }
        BaseKind::Momentum { alpha } => {
            let v = slot.velocity.as_mut().expect("momentum slot");
            for ((w, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = alpha * *vi + gi;
                *w -= lr * *vi;
            }
        }
        BaseKind::Adam { beta1, beta2, eps } => {
            let (m, v) = slot.adam.as_mut().expect("adam slot");
            let k = t as i32;
            let c1 = 1.0 - beta1.powi(k);
            let c2 = 1.0 - beta2.powi(k);
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((w, gi), (mi, vi)) in it {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}
