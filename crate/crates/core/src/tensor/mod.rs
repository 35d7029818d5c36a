//! Dense linear algebra, seeded randomness and kernel reshaping.

mod eigen;
mod kernel;
mod mat;
mod rng;

pub use eigen::{spectral_norm_psd, sym_eigendecompose, sym_eigenvalues, EigenResult};
pub use kernel::{reshape_kernel_bwd, reshape_kernel_fwd, KernelTensor};
pub use mat::{dot, frobenius_norm, norm2, Mat};
pub use rng::Rng;

use crate::error::{FopError, Result};

/// Matrix with i.i.d. `N(0, σ²)` entries.
pub fn gaussian_mat(rows: usize, cols: usize, sigma: f64, rng: &mut Rng) -> Result<Mat> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(FopError::Config(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let data = (0..rows * cols).map(|_| sigma * rng.normal()).collect();
    Ok(Mat::from_parts(rows, cols, data))
}
