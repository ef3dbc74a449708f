//! Deformable multi-head attention (DMHA) and the DAT++ hierarchical vision
//! backbone, implemented from scratch in 64-bit floating point with analytic
//! backward passes for every kernel, an exact FLOPs/parameter accountant, a
//! finite-difference gradient checker, attention-importance analysis, and a
//! toy-scale trainer.

pub mod analysis;
pub mod backbone;
pub mod blocks;
pub mod dmha;
pub mod error;
pub mod offsetnet;
pub mod sampling;
pub mod tensor;

pub use error::{DatError, Result};
pub use tensor::{DualTensor, GradStore, Tensor};

#[cfg(test)]
pub(crate) mod testutil {
    /// Finite-difference comparison: relative error with the conventional
    /// denominator, plus an absolute floor for coordinates whose true
    /// gradient is zero by symmetry (central differences only resolve those
    /// down to machine-noise / step, about 1e-8).
    pub fn assert_grad_close(analytic: f64, numeric: f64, rel_tol: f64, label: &str) {
        if (analytic - numeric).abs() <= 1e-7 {
            return;
        }
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(
            rel <= rel_tol,
            "{label}: analytic {analytic}, numeric {numeric}, rel {rel}"
        );
    }
}
