//! Learned first-order preconditioning of gradient descent.
//!
//! Each weight matrix gets a learnable matrix `M`. Its preconditioner
//! `P = M Mᵀ` (or a low-rank, normalized or stabilized variant) transforms
//! the gradient before the base update rule sees it. `M` itself follows the
//! hypergradient of the training loss. The crate also includes the baseline
//! optimizers, toy objectives, a small MLP trainer, analysis tools and a run
//! harness.

pub mod analysis;
pub mod error;
pub mod harness;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod precond;
pub mod record;
pub mod tensor;

pub use error::{FopError, Result};
pub use optim::{BaseKind, Optimizer, OptimizerConfig, OptimizerKind, ParamSpec};
pub use precond::{HyperOptimizer, PrecondMode, Preconditioner, PreconditionerConfig};
pub use record::RunRecord;
pub use tensor::{Mat, Rng};
