//! Convolution-kernel reshaping for spatial preconditioning.
//!
//! A kernel tensor of shape `k × k × I × O` is viewed as a `k² × (I·O)` matrix
//! so that a `k² × k²` preconditioner can left-multiply it. Element
//! `(a, b, i, o)` maps to row `a·k + b`, column `i·O + o`. With row-major
//! storage on both sides the two layouts coincide, so the reshape moves no data.

use super::mat::Mat;
use crate::error::{FopError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KernelTensor {
    pub k: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Row-major over `(a, b, i, o)`.
    pub data: Vec<f64>,
}

impl KernelTensor {
    pub fn new(k: usize, in_channels: usize, out_channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != k * k * in_channels * out_channels {
            return Err(FopError::Contract(format!(
                "{k}x{k}x{in_channels}x{out_channels} kernel needs {} values, got {}",
                k * k * in_channels * out_channels,
                data.len()
            )));
        }
        Ok(Self {
            k,
            in_channels,
            out_channels,
            data,
        })
    }

    pub fn get(&self, a: usize, b: usize, i: usize, o: usize) -> f64 {
        let k = self.k;
        self.data[((a * k + b) * self.in_channels + i) * self.out_channels + o]
    }
}

pub fn reshape_kernel_fwd(t: &KernelTensor) -> Mat {
    Mat::from_parts(t.k * t.k, t.in_channels * t.out_channels, t.data.clone())
}

pub fn reshape_kernel_bwd(
    m: &Mat,
    k: usize,
    in_channels: usize,
    out_channels: usize,
) -> Result<KernelTensor> {
    if m.shape() != (k * k, in_channels * out_channels) {
        return Err(crate::error::shape_err(
            "reshape_kernel_bwd",
            (k * k, in_channels * out_channels),
            m.shape(),
        ));
    }
    KernelTensor::new(k, in_channels, out_channels, m.data().to_vec())
}
