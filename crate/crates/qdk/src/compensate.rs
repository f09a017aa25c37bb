//! Closed-form weight updates that compensate activation quantization error.
//!
//! For a layer `y = W x`, replacing `x` with its quantized reconstruction
//! `x̂` perturbs the output. The update minimizing
//! `‖W X − (W + ΔW) X̂‖_F²` over calibration columns is
//!
//! ```text
//! ΔW = W (X − X̂) X̂ᵀ (X̂ X̂ᵀ + λI)⁻¹
//! ```
//!
//! with `λ = damp_ratio · mean(diag(X̂X̂ᵀ))` keeping the Gram matrix
//! well-posed on small calibration sets. The solve goes through a Cholesky
//! factorization of the dampened Gram matrix; no inverse is materialized.

use crate::error::{QdkError, Result};
use crate::tensor::{matmul, Tensor};
use nalgebra::{Cholesky, DMatrix};

/// Default dampening ratio: 1% of the mean Gram diagonal.
pub const DEFAULT_DAMP_RATIO: f64 = 0.01;

/// One layer-wise compensation problem.
///
/// `activations` and `quantized_activations` hold calibration inputs as
/// columns (in × n).
#[derive(Debug, Clone)]
pub struct CompensationProblem<'a> {
    pub weights: &'a Tensor,
    pub activations: &'a Tensor,
    pub quantized_activations: &'a Tensor,
    pub damp_ratio: f64,
}

impl<'a> CompensationProblem<'a> {
    fn validate(&self) -> Result<()> {
        if self.weights.rank() != 2
            || self.activations.rank() != 2
            || self.quantized_activations.rank() != 2
        {
            return Err(QdkError::Shape(
                "compensation expects rank-2 weights and activation matrices".into(),
            ));
        }
        if self.activations.shape() != self.quantized_activations.shape() {
            return Err(QdkError::Shape(format!(
                "activation shapes differ: {:?} vs {:?}",
                self.activations.shape(),
                self.quantized_activations.shape()
            )));
        }
        if self.weights.shape()[1] != self.activations.shape()[0] {
            return Err(QdkError::Shape(format!(
                "weights expect {} inputs, activations provide {}",
                self.weights.shape()[1],
                self.activations.shape()[0]
            )));
        }
        if self.damp_ratio < 0.0 {
            return Err(QdkError::Domain(format!(
                "negative damp ratio {}",
                self.damp_ratio
            )));
        }
        Ok(())
    }
}

/// Solve one compensation problem, returning ΔW (out × in).
pub fn compensate(p: &CompensationProblem) -> Result<Tensor> {
    p.validate()?;
    let x = p.activations;
    let xh = p.quantized_activations;
    let dim_in = x.shape()[0];

    // B = W (X − X̂) X̂ᵀ, right-hand side of the normal equations.
    let diff = x.sub(xh)?;
    let wdiff = matmul(p.weights, &diff)?;
    let rhs = matmul(&wdiff, &xh.transpose2()?)?;

    // Dampened Gram matrix G = X̂X̂ᵀ + λI.
    let gram = matmul(xh, &xh.transpose2()?)?;
    let mean_diag = (0..dim_in).map(|i| gram.at2(i, i)).sum::<f64>() / dim_in as f64;
    let lambda = p.damp_ratio * mean_diag;
    let mut g = DMatrix::<f64>::from_row_slice(dim_in, dim_in, gram.data());
    for i in 0..dim_in {
        g[(i, i)] += lambda;
    }

    let chol = Cholesky::new(g).ok_or_else(|| {
        QdkError::Solver(
            "Gram matrix X̂X̂ᵀ is singular; raise damp_ratio to regularize the solve".into(),
        )
    })?;

    // Solve ΔW G = B row by row: G (ΔWᵀ) = Bᵀ with G symmetric.
    let out = p.weights.shape()[0];
    let rhs_t = DMatrix::<f64>::from_row_slice(out, dim_in, rhs.data()).transpose();
    let solved = chol.solve(&rhs_t); // in × out
    let mut delta = Tensor::zeros(vec![out, dim_in]);
    for r in 0..out {
        for c in 0..dim_in {
            delta.set2(r, c, solved[(c, r)]);
        }
    }
    Ok(delta)
}

/// Compensation for a convolution kernel via its im2col lowering.
///
/// `x_cols` and `xhat_cols` are (I·kh·kw) × positions patch matrices; the
/// result is reshaped back to the OIHW kernel layout.
pub fn compensate_conv(
    kernel: &Tensor,
    x_cols: &Tensor,
    xhat_cols: &Tensor,
    damp_ratio: f64,
) -> Result<Tensor> {
    if kernel.rank() != 4 {
        return Err(QdkError::Shape(format!(
            "compensate_conv expects OIHW kernel, got {:?}",
            kernel.shape()
        )));
    }
    let o = kernel.shape()[0];
    let patch: usize = kernel.shape()[1..].iter().product();
    let weights = kernel.reshape(vec![o, patch])?;
    let delta = compensate(&CompensationProblem {
        weights: &weights,
        activations: x_cols,
        quantized_activations: xhat_cols,
        damp_ratio,
    })?;
    delta.reshape(kernel.shape().to_vec())
}
