use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::mlp::MlpModel;
use crate::error::{FopError, Result};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::record::{
    preconditioner_state, snapshot_preconditioners, AngleRow, EvalRow, RunRecord, SeriesRow,
};
use crate::tensor::{Mat, Rng};

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e12;

/// Examples used for the training-loss column of evaluations.
const TRAIN_EVAL_SUBSET: usize = 1000;

fn default_snapshot_every() -> u64 {
    100
}

fn default_snapshot_max_dim() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Evaluate every this many steps; 0 evaluates only before and after training.
    #[serde(default)]
    pub eval_every: u64,
    /// Seeds batch shuffling and low-rank preconditioner initialisation.
    #[serde(default)]
    pub seed: u64,
    /// Record preconditioner snapshots every this many steps; 0 disables them.
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: u64,
    /// Layers with larger preconditioners are left out of snapshots.
    #[serde(default = "default_snapshot_max_dim")]
    pub snapshot_max_dim: usize,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, optimizer: OptimizerConfig) -> Self {
        Self {
            epochs,
            batch_size,
            optimizer,
            eval_every: 0,
            seed: 0,
            snapshot_every: default_snapshot_every(),
            snapshot_max_dim: default_snapshot_max_dim(),
        }
    }

    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if self.epochs == 0 {
            return Err(FopError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.batch_size > data.len() {
            return Err(FopError::Config(format!(
                "batch size {} must lie in [1, {}]",
                self.batch_size,
                data.len()
            )));
        }
        self.optimizer.validate()
    }
}

/// State visible to a training observer after each step.
pub struct StepView<'a> {
    pub t: u64,
    pub loss: f64,
    pub grads: &'a [Mat],
    pub model: &'a MlpModel,
    pub optimizer: &'a Optimizer,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub optimizer: Optimizer,
}

/// Trains `model` in place with mini-batch steps.
pub fn train(model: &mut MlpModel, data: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, data, test, cfg, &mut |_| Ok(()))
}

/// Like [`train`], calling `observer` after every optimizer step.
pub fn train_with(
    model: &mut MlpModel,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(StepView<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate(data)?;
    if data.dim() != model.input_dim() {
        return Err(FopError::Config(format!(
            "dataset has {} features, model expects {}",
            data.dim(),
            model.input_dim()
        )));
    }
    let start = Instant::now();
    let mut rng = Rng::new(cfg.seed);
    let mut shuffle_rng = rng.fork(1);
    let mut opt_rng = rng.fork(2);
    let mut optimizer = Optimizer::new(cfg.optimizer.clone(), &model.param_specs(), &mut opt_rng)?;
    let mut record = RunRecord::new("train", cfg)?;

    let train_eval = data.take(TRAIN_EVAL_SUBSET);
    let eval_set = test.unwrap_or(&train_eval);
    let evaluate = |model: &MlpModel, t: u64, epoch: usize| -> Result<EvalRow> {
        Ok(EvalRow {
            t,
            epoch,
            train_loss: model.loss(&train_eval.inputs, &train_eval.labels)?,
            test_loss: model.loss(&eval_set.inputs, &eval_set.labels)?,
            test_accuracy: model.accuracy(&eval_set.inputs, &eval_set.labels)?,
        })
    };

    record.evals.push(evaluate(model, 0, 0)?);
    if cfg.snapshot_every > 0 {
        record.snapshots.extend(snapshot_preconditioners(&optimizer, 0, cfg.snapshot_max_dim)?);
    }

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut t = 0u64;
    let mut failure = None;
    let mut last_grad_norm = f64::NAN;
    'epochs: for epoch in 1..=cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(idx);
            let cache = model.forward(&x)?;
            let (loss, grads) = model.backward(&cache, &y)?;
            let grad_norm = grads.iter().map(|g| g.frobenius_norm().powi(2)).sum::<f64>().sqrt();
            if !loss.is_finite() || loss > DIVERGENCE_LOSS || !grad_norm.is_finite() {
                failure = Some(format!("loss {loss:e} at step {}", t + 1));
                break 'epochs;
            }
            optimizer.step(&mut model.params, &grads)?;
            t += 1;
            last_grad_norm = grad_norm;
            record.series.push(SeriesRow { t, loss, grad_norm, p_norm: None, theta: Vec::new() });
            for (i, angle) in optimizer.last_rotation_angles().into_iter().enumerate() {
                if let Some(angle) = angle {
                    record.angles.push(AngleRow { t, layer: optimizer.specs()[i].layer, angle });
                }
            }
            if model.params.iter().any(|p| !p.is_finite()) {
                failure = Some(format!("non-finite parameters after step {t}"));
                break 'epochs;
            }
            observer(StepView { t, loss, grads: &grads, model, optimizer: &optimizer })?;
            if cfg.eval_every > 0 && t % cfg.eval_every == 0 {
                record.evals.push(evaluate(model, t, epoch)?);
            }
            if cfg.snapshot_every > 0 && t % cfg.snapshot_every == 0 {
                record.snapshots.extend(snapshot_preconditioners(&optimizer, t, cfg.snapshot_max_dim)?);
            }
        }
    }

    let diverged = failure.is_some();
    if !diverged {
        if record.evals.last().map(|e| e.t) != Some(t) {
            record.evals.push(evaluate(model, t, cfg.epochs)?);
        }
        if cfg.snapshot_every > 0 && t % cfg.snapshot_every != 0 {
            record.snapshots.extend(snapshot_preconditioners(&optimizer, t, cfg.snapshot_max_dim)?);
        }
        record.precond_state = preconditioner_state(&optimizer, cfg.snapshot_max_dim);
    }
    let last = record.evals.last().expect("initial evaluation");
    record.summary.converged = !diverged;
    record.summary.diverged = diverged;
    record.summary.failure = failure;
    record.summary.iterations = t;
    record.summary.final_loss = if diverged {
        record.series.last().map_or(f64::NAN, |r| r.loss)
    } else {
        last.test_loss
    };
    record.summary.final_grad_norm = last_grad_norm;
    record.summary.final_accuracy = (!diverged).then_some(last.test_accuracy);
    record.summary.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(TrainOutcome { record, optimizer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{synthetic_blobs, Activation, SyntheticSpec};

    fn small_data() -> (Dataset, Dataset) {
        let spec = SyntheticSpec { train: 200, test: 100, dim: 12, classes: 3, latent: 4, ..Default::default() };
        synthetic_blobs(&spec).unwrap()
    }

    #[test]
    fn zero_lr_keeps_untrained_accuracy() {
        let (train_set, test_set) = small_data();
        let mut model = MlpModel::new(&[12, 8, 3], Activation::Tanh, &mut Rng::new(4)).unwrap();
        let before = model.accuracy(&test_set.inputs, &test_set.labels).unwrap();
        let cfg = TrainConfig::new(1, 20, OptimizerConfig::sgd(0.0));
        let out = train(&mut model, &train_set, Some(&test_set), &cfg).unwrap();
        assert_eq!(out.record.summary.final_accuracy, Some(before));
        assert_eq!(out.record.summary.iterations, 10);
    }

    #[test]
    fn training_improves_and_is_deterministic() {
        let (train_set, test_set) = small_data();
        let run = || {
            let mut model = MlpModel::new(&[12, 8, 3], Activation::Tanh, &mut Rng::new(4)).unwrap();
            let mut cfg = TrainConfig::new(5, 20, OptimizerConfig::momentum(0.1, 0.9));
            cfg.seed = 9;
            train(&mut model, &train_set, Some(&test_set), &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.record.series, b.record.series);
        assert_eq!(a.record.summary.final_accuracy, b.record.summary.final_accuracy);
        assert!(a.record.evals.last().unwrap().train_loss < a.record.evals[0].train_loss);
    }

    #[test]
    fn rejects_bad_config() {
        let (train_set, _) = small_data();
        let mut model = MlpModel::new(&[12, 3], Activation::Tanh, &mut Rng::new(0)).unwrap();
        let cfg = TrainConfig::new(0, 10, OptimizerConfig::sgd(0.1));
        assert!(train(&mut model, &train_set, None, &cfg).is_err());
        let cfg = TrainConfig::new(1, 1000, OptimizerConfig::sgd(0.1));
        assert!(train(&mut model, &train_set, None, &cfg).is_err());
        let mut wrong = MlpModel::new(&[5, 3], Activation::Tanh, &mut Rng::new(0)).unwrap();
        let cfg = TrainConfig::new(1, 10, OptimizerConfig::sgd(0.1));
        assert!(train(&mut wrong, &train_set, None, &cfg).is_err());
    }
}
