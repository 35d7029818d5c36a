//! Run drivers behind the command-line tool: single toy runs, tuned
//! optimizer comparisons, hyperparameter sweeps, MLP training jobs and
//! post-hoc analysis of run records.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{norm_trace, spectrum};
use crate::error::{FopError, Result};
use crate::nn::{
    load_idx, mnist_dir_from_env, synthetic_blobs, train, Activation, Dataset, MlpModel, SyntheticSpec,
    TrainConfig, MNIST_FILES,
};
use crate::objectives::ToyProblem;
use crate::optim::{BaseKind, Optimizer, OptimizerConfig, OptimizerKind, ParamSpec};
use crate::record::{
    preconditioner_norm, preconditioner_state, snapshot_preconditioners, write_atomic, AngleRow, RunRecord,
    SeriesRow,
};
use crate::tensor::{norm2, Mat, Rng};

pub const DEFAULT_LR_GRID: [f64; 7] = [1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.3, 1.0];
pub const DEFAULT_HYPER_LR_GRID: [f64; 7] = [1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2];

/// Loss above which a toy run counts as diverged.
pub const TOY_DIVERGENCE_LOSS: f64 = 1e12;

/// Largest parameter count for which `θ` is stored in the series.
const THETA_RECORD_MAX_DIM: usize = 4;

/// Largest preconditioner for which the per-step spectral norm is recorded.
const P_NORM_MAX_DIM: usize = 32;

fn default_max_iters() -> u64 {
    50_000
}

fn default_tol() -> f64 {
    1e-6
}

fn default_snapshot_every() -> u64 {
    100
}

fn default_lr_grid() -> Vec<f64> {
    DEFAULT_LR_GRID.to_vec()
}

fn default_hyper_lr_grid() -> Vec<f64> {
    DEFAULT_HYPER_LR_GRID.to_vec()
}

/// Runs `f` on a pool of `jobs` threads (0 lets rayon choose).
fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| FopError::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    Ok(pool.install(f))
}

// ---------------------------------------------------------------------------
// toy runs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub problem: ToyProblem,
    pub optimizer: OptimizerConfig,
    /// Defaults to the problem's documented starting point.
    #[serde(default)]
    pub init: Option<Vec<f64>>,
    #[serde(default = "default_max_iters")]
    pub max_iters: u64,
    /// Stop once `‖∇f‖₂` falls below this.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub seed: u64,
    /// Preconditioner snapshot interval; 0 disables snapshots.
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: u64,
}

impl ToyConfig {
    pub fn new(problem: ToyProblem, optimizer: OptimizerConfig) -> Self {
        Self {
            problem,
            optimizer,
            init: None,
            max_iters: default_max_iters(),
            tol: default_tol(),
            seed: 0,
            snapshot_every: default_snapshot_every(),
        }
    }

    pub fn start(&self) -> Vec<f64> {
        self.init.clone().unwrap_or_else(|| self.problem.default_init())
    }

    /// The config with defaults spelled out, as echoed into run records.
    pub fn resolved(&self) -> Self {
        Self { init: Some(self.start()), ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.problem.objective().dim();
        if self.start().len() != dim {
            return Err(FopError::Config(format!(
                "init has {} coordinates, {:?} needs {dim}",
                self.start().len(),
                self.problem
            )));
        }
        if !(self.tol > 0.0) {
            return Err(FopError::Config(format!("tol must be positive, got {}", self.tol)));
        }
        self.optimizer.validate()
    }
}

/// Outcome of a toy run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyOutcome {
    pub converged: bool,
    pub diverged: bool,
    pub failure: Option<String>,
    pub iterations: u64,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    /// `Σ ‖θ_{t+1} − θ_t‖₂`
    pub path_length: f64,
    pub theta: Vec<f64>,
}

/// State visible to a toy-run observer after each step.
pub struct ToyStep<'a> {
    pub t: u64,
    pub theta: &'a [f64],
    /// Gradient that drove step `t`.
    pub grad: &'a [f64],
    pub optimizer: &'a Optimizer,
}

fn simulate(
    cfg: &ToyConfig,
    mut record: Option<&mut RunRecord>,
    observer: &mut dyn FnMut(ToyStep<'_>) -> Result<()>,
) -> Result<ToyOutcome> {
    cfg.validate()?;
    let objective = cfg.problem.objective();
    let mut theta = cfg.start();
    let n = theta.len();
    let specs = [ParamSpec::matrix(n, 1, 0)];
    let mut optimizer = Optimizer::new(cfg.optimizer.clone(), &specs, &mut Rng::new(cfg.seed))?;
    let keep_theta = n <= THETA_RECORD_MAX_DIM;

    let mut loss = objective.value(&theta);
    let mut grad = objective.gradient(&theta);
    let mut grad_norm = norm2(&grad);
    let mut path_length = 0.0;
    let mut failure = None;
    let mut converged = grad_norm < cfg.tol;
    let mut t = 0u64;

    let snapshots = cfg.snapshot_every > 0;
    if let Some(rec) = record.as_deref_mut() {
        rec.series.push(SeriesRow {
            t,
            loss,
            grad_norm,
            p_norm: preconditioner_norm(&optimizer, P_NORM_MAX_DIM)?,
            theta: if keep_theta { theta.clone() } else { Vec::new() },
        });
        if snapshots {
            rec.snapshots.extend(snapshot_preconditioners(&optimizer, 0, usize::MAX)?);
        }
    }

    let mut params = vec![Mat::column(&theta)];
    while !converged && t < cfg.max_iters {
        let g = [Mat::column(&grad)];
        optimizer.step(&mut params, &g)?;
        t += 1;
        let next = params[0].data();
        path_length += next.iter().zip(&theta).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        theta.copy_from_slice(next);
        observer(ToyStep { t, theta: &theta, grad: &grad, optimizer: &optimizer })?;

        loss = objective.value(&theta);
        grad = objective.gradient(&theta);
        grad_norm = norm2(&grad);
        if let Some(rec) = record.as_deref_mut() {
            let p_norm = preconditioner_norm(&optimizer, P_NORM_MAX_DIM).ok().flatten();
            rec.series.push(SeriesRow {
                t,
                loss,
                grad_norm,
                p_norm,
                theta: if keep_theta { theta.clone() } else { Vec::new() },
            });
            if let Some(Some(angle)) = optimizer.last_rotation_angles().first() {
                rec.angles.push(AngleRow { t, layer: 0, angle: *angle });
            }
            if snapshots && t % cfg.snapshot_every == 0 {
                rec.snapshots.extend(snapshot_preconditioners(&optimizer, t, usize::MAX)?);
            }
        }
        if !loss.is_finite() || loss > TOY_DIVERGENCE_LOSS || !grad_norm.is_finite() {
            failure = Some(format!("diverged at step {t}: loss {loss:e}"));
            break;
        }
        converged = grad_norm < cfg.tol;
    }
    let diverged = failure.is_some();
    if !converged && !diverged {
        failure = Some(format!("iteration cap {} reached with ‖∇f‖ = {grad_norm:e}", cfg.max_iters));
    }
    if let Some(rec) = record {
        if snapshots && !diverged && t % cfg.snapshot_every != 0 {
            rec.snapshots.extend(snapshot_preconditioners(&optimizer, t, usize::MAX)?);
        }
        if !diverged {
            rec.precond_state = preconditioner_state(&optimizer, usize::MAX);
        }
    }
    Ok(ToyOutcome {
        converged,
        diverged,
        failure,
        iterations: t,
        final_loss: loss,
        final_grad_norm: grad_norm,
        path_length,
        theta,
    })
}

/// Runs gradient descent on a toy problem until `‖∇f‖ < tol`, divergence or the cap.
pub fn run_toy(cfg: &ToyConfig) -> Result<RunRecord> {
    run_toy_with(cfg, &mut |_| Ok(()))
}

/// Like [`run_toy`], calling `observer` after every optimizer step.
pub fn run_toy_with(cfg: &ToyConfig, observer: &mut dyn FnMut(ToyStep<'_>) -> Result<()>) -> Result<RunRecord> {
    let start = Instant::now();
    let mut record = RunRecord::new("toy", &cfg.resolved())?;
    let out = simulate(cfg, Some(&mut record), observer)?;
    let s = &mut record.summary;
    s.converged = out.converged;
    s.diverged = out.diverged;
    s.failure = out.failure;
    s.iterations = out.iterations;
    s.final_loss = out.final_loss;
    s.final_grad_norm = out.final_grad_norm;
    s.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Toy run without a record; used for tuning.
pub fn toy_outcome(cfg: &ToyConfig) -> Result<ToyOutcome> {
    simulate(cfg, None, &mut |_| Ok(()))
}

// ---------------------------------------------------------------------------
// benchmarks

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    /// Row label; defaults to the optimizer's name.
    #[serde(default)]
    pub name: Option<String>,
    pub kind: OptimizerKind,
    /// Fixed learning rate; tuned over the grid when absent.
    #[serde(default)]
    pub lr: Option<f64>,
    /// Fixed hypergradient step (FOP, S-HD, PP-HD); tuned when absent.
    #[serde(default)]
    pub hyper_lr: Option<f64>,
}

impl BenchEntry {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { name: None, kind, lr: None, hyper_lr: None }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub problem: ToyProblem,
    #[serde(default)]
    pub init: Option<Vec<f64>>,
    pub optimizers: Vec<BenchEntry>,
    #[serde(default = "default_lr_grid")]
    pub lr_grid: Vec<f64>,
    #[serde(default = "default_hyper_lr_grid")]
    pub hyper_lr_grid: Vec<f64>,
    #[serde(default = "default_max_iters")]
    pub max_iters: u64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Breaks ties between equally fast settings and seeds low-rank factors.
    #[serde(default)]
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(problem: ToyProblem, optimizers: Vec<BenchEntry>) -> Self {
        Self {
            problem,
            init: None,
            optimizers,
            lr_grid: default_lr_grid(),
            hyper_lr_grid: default_hyper_lr_grid(),
            max_iters: default_max_iters(),
            tol: default_tol(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub name: String,
    pub lr: f64,
    pub hyper_lr: Option<f64>,
    pub converged: bool,
    pub diverged: bool,
    pub iterations: u64,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub path_length: f64,
    pub failure: Option<String>,
}

fn hyper_lr_of(kind: &OptimizerKind) -> Option<f64> {
    match kind {
        OptimizerKind::Shd { hyper_lr, .. } | OptimizerKind::Pphd { hyper_lr, .. } => Some(*hyper_lr),
        OptimizerKind::Fop { preconditioner, .. } => Some(preconditioner.hyper_lr),
        _ => None,
    }
}

fn with_hyper_lr(kind: &OptimizerKind, rho: f64) -> OptimizerKind {
    let mut kind = kind.clone();
    match &mut kind {
        OptimizerKind::Shd { hyper_lr, .. } | OptimizerKind::Pphd { hyper_lr, .. } => *hyper_lr = rho,
        OptimizerKind::Fop { preconditioner, .. } => preconditioner.hyper_lr = rho,
        _ => {}
    }
    kind
}

fn with_alpha(kind: &OptimizerKind, a: f64) -> Result<OptimizerKind> {
    let mut kind = kind.clone();
    match &mut kind {
        OptimizerKind::Momentum { alpha } | OptimizerKind::Fop { base: BaseKind::Momentum { alpha }, .. } => *alpha = a,
        other => {
            return Err(FopError::Config(format!("optimizer {} has no momentum to sweep", other.name())));
        }
    }
    Ok(kind)
}

/// Tunes one entry over its grid; returns the chosen row.
fn tune_entry(cfg: &BenchConfig, entry: &BenchEntry, index: usize) -> Result<BenchRow> {
    let lrs = entry.lr.map_or_else(|| cfg.lr_grid.clone(), |lr| vec![lr]);
    let rhos: Vec<Option<f64>> = match (hyper_lr_of(&entry.kind), entry.hyper_lr) {
        (None, _) => vec![None],
        (Some(_), Some(rho)) => vec![Some(rho)],
        (Some(_), None) => cfg.hyper_lr_grid.iter().map(|&r| Some(r)).collect(),
    };
    if lrs.is_empty() || rhos.is_empty() {
        return Err(FopError::Config(format!("empty tuning grid for {}", entry.label())));
    }
    let mut candidates = Vec::new();
    for &lr in &lrs {
        for &rho in &rhos {
            let kind = rho.map_or_else(|| entry.kind.clone(), |r| with_hyper_lr(&entry.kind, r));
            let toy = ToyConfig {
                problem: cfg.problem,
                optimizer: OptimizerConfig::new(kind, lr),
                init: cfg.init.clone(),
                max_iters: cfg.max_iters,
                tol: cfg.tol,
                seed: cfg.seed,
                snapshot_every: 0,
            };
            candidates.push((lr, rho, toy));
        }
    }
    let outcomes: Vec<Result<ToyOutcome>> = candidates.par_iter().map(|(_, _, toy)| toy_outcome(toy)).collect();

    let row = |(lr, rho): (f64, Option<f64>), o: &ToyOutcome| BenchRow {
        name: entry.label(),
        lr,
        hyper_lr: rho,
        converged: o.converged,
        diverged: o.diverged,
        iterations: o.iterations,
        final_loss: o.final_loss,
        final_grad_norm: o.final_grad_norm,
        path_length: o.path_length,
        failure: o.failure.clone(),
    };
    let ok: Vec<(usize, &ToyOutcome)> =
        outcomes.iter().enumerate().filter_map(|(i, o)| o.as_ref().ok().map(|o| (i, o))).collect();

    // fewest iterations among converged settings; the seed picks among ties
    let best_iters = ok.iter().filter(|(_, o)| o.converged).map(|(_, o)| o.iterations).min();
    let chosen = if let Some(best) = best_iters {
        let tied: Vec<usize> =
            ok.iter().filter(|(_, o)| o.converged && o.iterations == best).map(|(i, _)| *i).collect();
        let pick = Rng::new(cfg.seed).fork(index as u64).below(tied.len());
        Some(tied[pick])
    } else {
        ok.iter()
            .filter(|(_, o)| !o.diverged)
            .min_by(|a, b| a.1.final_loss.total_cmp(&b.1.final_loss))
            .or_else(|| ok.first())
            .map(|(i, _)| *i)
    };
    match chosen {
        Some(i) => {
            let (lr, rho, _) = &candidates[i];
            Ok(row((*lr, *rho), outcomes[i].as_ref().expect("ok outcome")))
        }
        None => {
            let err = outcomes.into_iter().find_map(|o| o.err()).expect("all candidates failed");
            Ok(BenchRow {
                name: entry.label(),
                lr: lrs[0],
                hyper_lr: rhos[0],
                converged: false,
                diverged: false,
                iterations: 0,
                final_loss: f64::NAN,
                final_grad_norm: f64::NAN,
                path_length: 0.0,
                failure: Some(err.to_string()),
            })
        }
    }
}

/// Tunes every listed optimizer on a shared problem; one row per optimizer.
pub fn run_bench(cfg: &BenchConfig, jobs: usize) -> Result<Vec<BenchRow>> {
    if cfg.optimizers.is_empty() {
        return Err(FopError::Config("bench needs at least one optimizer".into()));
    }
    with_pool(jobs, || {
        cfg.optimizers
            .iter()
            .enumerate()
            .map(|(i, e)| tune_entry(cfg, e, i))
            .collect::<Result<Vec<_>>>()
    })?
}

fn csv_f(v: f64) -> String {
    format!("{v:?}")
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(csv_f).unwrap_or_default()
}

fn csv_text(s: &Option<String>) -> String {
    s.as_deref().unwrap_or("").replace([',', '\n', '\r'], ";")
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out =
        String::from("optimizer,lr,hyper_lr,converged,diverged,iterations,final_loss,final_grad_norm,path_length,failure\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.name,
            csv_f(r.lr),
            csv_opt(r.hyper_lr),
            r.converged,
            r.diverged,
            r.iterations,
            csv_f(r.final_loss),
            csv_f(r.final_grad_norm),
            csv_f(r.path_length),
            csv_text(&r.failure)
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// training jobs

fn default_hidden() -> Vec<usize> {
    vec![100, 100, 100]
}

fn default_limit() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DataSource {
    /// MNIST from `FOP_DATA_DIR` when all four files are there, else the synthetic set.
    #[default]
    Auto,
    Synthetic(SyntheticSpec),
    Mnist {
        /// Defaults to `FOP_DATA_DIR`.
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default = "default_limit")]
        train_limit: usize,
        #[serde(default = "default_limit")]
        test_limit: usize,
    },
}

impl DataSource {
    /// Replaces `Auto` and missing directories with what will actually be loaded.
    pub fn resolve(&self) -> Result<DataSource> {
        Ok(match self {
            DataSource::Auto => match mnist_dir_from_env() {
                Some(dir) => DataSource::Mnist { dir: Some(dir), train_limit: default_limit(), test_limit: default_limit() },
                None => DataSource::Synthetic(SyntheticSpec::default()),
            },
            DataSource::Mnist { dir: None, train_limit, test_limit } => {
                let dir = mnist_dir_from_env().ok_or_else(|| {
                    FopError::Config(format!("FOP_DATA_DIR must name a directory holding {}", MNIST_FILES.join(", ")))
                })?;
                DataSource::Mnist { dir: Some(dir), train_limit: *train_limit, test_limit: *test_limit }
            }
            other => other.clone(),
        })
    }

    /// `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self.resolve()? {
            DataSource::Synthetic(spec) => synthetic_blobs(&spec),
            DataSource::Mnist { dir: Some(dir), train_limit, test_limit } => {
                for f in MNIST_FILES {
                    if !dir.join(f).is_file() {
                        return Err(FopError::Config(format!("missing {}", dir.join(f).display())));
                    }
                }
                let f = |i: usize| dir.join(MNIST_FILES[i]);
                let train = load_idx(&f(0), &f(1))?.take(train_limit);
                let test = load_idx(&f(2), &f(3))?.take(test_limit);
                Ok((train, test))
            }
            DataSource::Auto | DataSource::Mnist { dir: None, .. } => unreachable!("resolved above"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    #[serde(default)]
    pub data: DataSource,
    /// Hidden layer widths.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl TrainJob {
    pub fn new(data: DataSource, hidden: Vec<usize>, train: TrainConfig) -> Self {
        Self { data, hidden, activation: Activation::Tanh, train }
    }
}

/// Builds the model for `job` from its seed; weights use a stream separate from shuffling.
pub fn build_model(job: &TrainJob, input_dim: usize, classes: usize) -> Result<MlpModel> {
    let mut sizes = vec![input_dim];
    sizes.extend(&job.hidden);
    sizes.push(classes);
    MlpModel::new(&sizes, job.activation, &mut Rng::new(job.train.seed).fork(0))
}

/// Trains on already-loaded data and returns the run record.
pub fn train_on(job: &TrainJob, data: &(Dataset, Dataset)) -> Result<RunRecord> {
    let (train_set, test_set) = data;
    let mut model = build_model(job, train_set.dim(), train_set.classes)?;
    let mut out = train(&mut model, train_set, Some(test_set), &job.train)?;
    out.record.config = serde_json::to_value(job)?;
    Ok(out.record)
}

pub fn run_train(job: &TrainJob) -> Result<RunRecord> {
    let resolved = TrainJob { data: job.data.resolve()?, ..job.clone() };
    let data = resolved.data.load()?;
    train_on(&resolved, &data)
}

// ---------------------------------------------------------------------------
// sweeps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SweepTask {
    Toy {
        problem: ToyProblem,
        #[serde(default)]
        init: Option<Vec<f64>>,
        #[serde(default = "default_max_iters")]
        max_iters: u64,
        #[serde(default = "default_tol")]
        tol: f64,
    },
    Train {
        #[serde(default)]
        data: DataSource,
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default)]
        activation: Activation,
        epochs: usize,
        batch_size: usize,
    },
}

/// Second grid axis besides the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Momentum coefficient (momentum, or FOP on a momentum base).
    Alpha,
    /// Hypergradient step (FOP, S-HD, PP-HD).
    HyperLr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub task: SweepTask,
    /// Template; the swept fields are overwritten per cell.
    pub optimizer: OptimizerKind,
    pub lrs: Vec<f64>,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    NotConverged,
    Diverged,
    Error,
}

impl CellStatus {
    fn as_str(self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::NotConverged => "not_converged",
            CellStatus::Diverged => "diverged",
            CellStatus::Error => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRun {
    pub lr: f64,
    pub value: f64,
    pub seed: u64,
    pub status: CellStatus,
    pub iterations: u64,
    pub final_loss: f64,
    /// Test accuracy for training tasks.
    pub accuracy: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub lr: f64,
    pub value: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    /// Mean and sample standard deviation over successful seeds.
    pub final_loss_mean: f64,
    pub final_loss_std: f64,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub runs: Vec<SweepRun>,
    pub summaries: Vec<SweepSummary>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn sweep_cell(cfg: &SweepConfig, data: Option<&(Dataset, Dataset)>, lr: f64, value: f64, seed: u64) -> SweepRun {
    let run = || -> Result<SweepRun> {
        let kind = match cfg.axis {
            SweepAxis::Alpha => with_alpha(&cfg.optimizer, value)?,
            SweepAxis::HyperLr => {
                if hyper_lr_of(&cfg.optimizer).is_none() {
                    return Err(FopError::Config(format!(
                        "optimizer {} has no hypergradient step to sweep",
                        cfg.optimizer.name()
                    )));
                }
                with_hyper_lr(&cfg.optimizer, value)
            }
        };
        let optimizer = OptimizerConfig::new(kind, lr);
        let (status, iterations, final_loss, accuracy, failure) = match &cfg.task {
            SweepTask::Toy { problem, init, max_iters, tol } => {
                let toy = ToyConfig {
                    problem: *problem,
                    optimizer,
                    init: init.clone(),
                    max_iters: *max_iters,
                    tol: *tol,
                    seed,
                    snapshot_every: 0,
                };
                let o = toy_outcome(&toy)?;
                let status = if o.diverged {
                    CellStatus::Diverged
                } else if o.converged {
                    CellStatus::Ok
                } else {
                    CellStatus::NotConverged
                };
                (status, o.iterations, o.final_loss, None, o.failure)
            }
            SweepTask::Train { hidden, activation, epochs, batch_size, .. } => {
                let mut train = TrainConfig::new(*epochs, *batch_size, optimizer);
                train.seed = seed;
                train.snapshot_every = 0;
                let job = TrainJob { data: DataSource::Auto, hidden: hidden.clone(), activation: *activation, train };
                let rec = train_on(&job, data.expect("training data loaded"))?;
                let s = rec.summary;
                let status = if s.diverged { CellStatus::Diverged } else { CellStatus::Ok };
                (status, s.iterations, s.final_loss, s.final_accuracy, s.failure)
            }
        };
        Ok(SweepRun { lr, value, seed, status, iterations, final_loss, accuracy, failure })
    };
    run().unwrap_or_else(|e| SweepRun {
        lr,
        value,
        seed,
        status: CellStatus::Error,
        iterations: 0,
        final_loss: f64::NAN,
        accuracy: None,
        failure: Some(e.to_string()),
    })
}

/// Runs every `lr × value × seed` cell independently; failed cells are marked, not fatal.
pub fn run_sweep(cfg: &SweepConfig, jobs: usize) -> Result<SweepResult> {
    if cfg.lrs.is_empty() || cfg.values.is_empty() || cfg.seeds.is_empty() {
        return Err(FopError::Config("sweep needs at least one lr, one axis value and one seed".into()));
    }
    let data = match &cfg.task {
        SweepTask::Train { data, .. } => Some(data.load()?),
        SweepTask::Toy { .. } => None,
    };
    let mut cells = Vec::new();
    for &lr in &cfg.lrs {
        for &value in &cfg.values {
            for &seed in &cfg.seeds {
                cells.push((lr, value, seed));
            }
        }
    }
    let runs: Vec<SweepRun> = with_pool(jobs, || {
        cells.par_iter().map(|&(lr, v, s)| sweep_cell(cfg, data.as_ref(), lr, v, s)).collect()
    })?;

    let mut summaries = Vec::new();
    for &lr in &cfg.lrs {
        for &value in &cfg.values {
            let cell: Vec<&SweepRun> = runs.iter().filter(|r| r.lr == lr && r.value == value).collect();
            let ok: Vec<&&SweepRun> = cell.iter().filter(|r| r.status == CellStatus::Ok).collect();
            let (final_loss_mean, final_loss_std) = mean_std(&ok.iter().map(|r| r.final_loss).collect::<Vec<_>>());
            let acc: Vec<f64> = ok.iter().filter_map(|r| r.accuracy).collect();
            let (am, asd) = mean_std(&acc);
            summaries.push(SweepSummary {
                lr,
                value,
                n_ok: ok.len(),
                n_failed: cell.len() - ok.len(),
                final_loss_mean,
                final_loss_std,
                accuracy_mean: (!acc.is_empty()).then_some(am),
                accuracy_std: (!acc.is_empty()).then_some(asd),
            });
        }
    }
    Ok(SweepResult { runs, summaries })
}

pub fn sweep_csv(result: &SweepResult) -> String {
    let mut out = String::from(
        "row,lr,value,seed,status,iterations,final_loss,accuracy,n_ok,n_failed,final_loss_std,accuracy_std,failure\n",
    );
    for r in &result.runs {
        out.push_str(&format!(
            "run,{},{},{},{},{},{},{},,,,,{}\n",
            csv_f(r.lr),
            csv_f(r.value),
            r.seed,
            r.status.as_str(),
            r.iterations,
            csv_f(r.final_loss),
            csv_opt(r.accuracy),
            csv_text(&r.failure)
        ));
    }
    for s in &result.summaries {
        let status = match (s.n_ok, s.n_failed) {
            (_, 0) => "ok",
            (0, _) => "failed",
            _ => "partial",
        };
        out.push_str(&format!(
            "summary,{},{},,{status},,{},{},{},{},{},{},\n",
            csv_f(s.lr),
            csv_f(s.value),
            csv_f(s.final_loss_mean),
            csv_opt(s.accuracy_mean),
            s.n_ok,
            s.n_failed,
            csv_f(s.final_loss_std),
            csv_opt(s.accuracy_std)
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// analysis

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeOutput {
    pub spectrum_csv: String,
    pub angles_csv: String,
    pub norms_csv: String,
    /// Snapshots whose norm exceeded the growth bound.
    pub norm_violations: usize,
}

/// Spectra of every snapshot, the recorded rotation angles and the norm trace.
pub fn analyze(record: &RunRecord) -> Result<AnalyzeOutput> {
    if record.snapshots.is_empty() {
        return Err(FopError::MissingSnapshots {
            what: "preconditioner snapshots".into(),
            hint: "a FOP optimizer and --snapshot-every > 0".into(),
        });
    }
    let reports: Vec<_> = record
        .snapshots
        .par_iter()
        .map(|s| {
            let r = spectrum(s.layer, &s.matrix()?)?;
            Ok((s, r))
        })
        .collect::<Result<_>>()?;
    let mut spectrum_csv = String::from("t,layer,mode,min,max,determinant,uniformity,eigenvalues...\n");
    for (s, r) in reports {
        spectrum_csv.push_str(&format!(
            "{},{},{},{},{},{},{}",
            s.t,
            s.layer,
            s.mode,
            csv_f(r.min),
            csv_f(r.max),
            csv_f(r.determinant),
            csv_f(r.uniformity)
        ));
        for v in &r.eigenvalues {
            spectrum_csv.push(',');
            spectrum_csv.push_str(&csv_f(*v));
        }
        spectrum_csv.push('\n');
    }
    let mut angles_csv = String::from("t,layer,angle\n");
    for a in &record.angles {
        angles_csv.push_str(&format!("{},{},{}\n", a.t, a.layer, csv_f(a.angle)));
    }
    let norms = norm_trace(record)?;
    let mut norms_csv = String::from("t,layer,spectral,frobenius,bound,violated\n");
    for n in &norms {
        norms_csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            n.t,
            n.layer,
            csv_f(n.spectral),
            csv_f(n.frobenius),
            csv_f(n.bound),
            n.violated
        ));
    }
    Ok(AnalyzeOutput {
        spectrum_csv,
        angles_csv,
        norms_csv,
        norm_violations: norms.iter().filter(|n| n.violated).count(),
    })
}

/// Runs [`analyze`] and writes `spectrum.csv`, `angles.csv` and `norms.csv` into `out_dir`.
pub fn run_analyze(record: &RunRecord, out_dir: &Path, jobs: usize) -> Result<AnalyzeOutput> {
    let out = with_pool(jobs, || analyze(record))??;
    std::fs::create_dir_all(out_dir)?;
    write_atomic(&out_dir.join("spectrum.csv"), out.spectrum_csv.as_bytes())?;
    write_atomic(&out_dir.join("angles.csv"), out.angles_csv.as_bytes())?;
    write_atomic(&out_dir.join("norms.csv"), out.norms_csv.as_bytes())?;
    Ok(out)
}
