//! Kronecker-factored layer Fisher approximation.
//!
//! A layer's Fisher block is approximated as `F = G ⊗ A` with
//! `G = (1/√S) Σ g gᵀ` over output gradients and `A = (1/√S) Σ x̂ x̂ᵀ` over
//! (quantized) input activations, so the Kronecker product carries the 1/S
//! expectation overall. Weight perturbations are flattened row-major, which
//! makes `vec(dW)ᵀ (G ⊗ A) vec(dW) = trace(G · dW A dWᵀ)` — the quadratic
//! loss is evaluated through that trace without ever materializing `G ⊗ A`.

use crate::error::{QdkError, Result};
use crate::tensor::{matmul, Tensor};

/// Per-layer Kronecker factors of the Fisher approximation.
#[derive(Debug, Clone)]
pub struct KfacFactors {
    /// Gradient second-moment factor, out × out.
    pub g: Tensor,
    /// Activation second-moment factor, in × in.
    pub a: Tensor,
    /// Number of samples the factors were accumulated over.
    pub sample_count: usize,
}

impl KfacFactors {
    pub fn new(g: Tensor, a: Tensor, sample_count: usize) -> Result<Self> {
        let f = Self {
            g,
            a,
            sample_count,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn out_dim(&self) -> usize {
        self.g.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.a.shape()[0]
    }

    fn validate(&self) -> Result<()> {
        for (name, m) in [("G", &self.g), ("A", &self.a)] {
            if m.rank() != 2 || m.shape()[0] != m.shape()[1] {
                return Err(QdkError::Shape(format!(
                    "{name} factor must be square, got {:?}",
                    m.shape()
                )));
            }
            let n = m.shape()[0];
            let scale = m.frob_norm().max(1.0);
            for i in 0..n {
                for j in (i + 1)..n {
                    if (m.at2(i, j) - m.at2(j, i)).abs() > 1e-10 * scale {
                        return Err(QdkError::Domain(format!(
                            "{name} factor is not symmetric at ({i},{j})"
                        )));
                    }
                }
            }
        }
        if self.sample_count == 0 {
            return Err(QdkError::Domain("sample count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Accumulate Kronecker factors from paired gradient / activation samples.
///
/// Each entry of `gradients` is a rank-1 output-gradient vector and the
/// matching entry of `activations` the rank-1 (quantized) input vector for
/// the same sample. Convolution callers flatten (image, spatial position)
/// pairs into this sample list. The factors are normalized by
/// `1/sqrt(sample_count)`.
pub fn accumulate_kfac(
    gradients: &[Tensor],
    activations: &[Tensor],
    sample_count: usize,
) -> Result<KfacFactors> {
    if gradients.is_empty() || gradients.len() != activations.len() {
        return Err(QdkError::Shape(format!(
            "need matching non-empty sample lists, got {} gradients and {} activations",
            gradients.len(),
            activations.len()
        )));
    }
    if sample_count == 0 {
        return Err(QdkError::Domain("sample count must be >= 1".into()));
    }
    let out = gradients[0].len();
    let dim_in = activations[0].len();
    let mut g = Tensor::zeros(vec![out, out]);
    let mut a = Tensor::zeros(vec![dim_in, dim_in]);
    for (gv, xv) in gradients.iter().zip(activations) {
        if gv.len() != out || xv.len() != dim_in {
            return Err(QdkError::Shape(
                "inconsistent sample dimensions in KFAC accumulation".into(),
            ));
        }
        outer_add(&mut g, gv.data());
        outer_add(&mut a, xv.data());
    }
    let norm = 1.0 / (sample_count as f64).sqrt();
    Ok(KfacFactors {
        g: g.scale(norm),
        a: a.scale(norm),
        sample_count,
    })
}

fn outer_add(acc: &mut Tensor, v: &[f64]) {
    let n = v.len();
    let data = acc.data_mut();
    for i in 0..n {
        let vi = v[i];
        if vi == 0.0 {
            continue;
        }
        let row = &mut data[i * n..(i + 1) * n];
        for j in 0..n {
            row[j] += vi * v[j];
        }
    }
}

/// Quadratic form `vec(dW)ᵀ (G ⊗ A) vec(dW)` evaluated as
/// `trace(G · dW A dWᵀ)`.
pub fn quadratic_loss(dw: &Tensor, f: &KfacFactors) -> Result<f64> {
    check_dw(dw, f)?;
    let m = matmul(dw, &f.a)?; // out × in
    // trace(G · (dW A) dWᵀ) = Σ_ij G_ij · (dW A dWᵀ)_ji; both factors are
    // symmetric so the double sum can run directly over rows.
    let out = f.out_dim();
    let dim_in = f.in_dim();
    let mut total = 0.0;
    for i in 0..out {
        for j in 0..out {
            let gij = f.g.at2(i, j);
            if gij == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for c in 0..dim_in {
                dot += m.data()[j * dim_in + c] * dw.data()[i * dim_in + c];
            }
            total += gij * dot;
        }
    }
    Ok(total)
}

/// Gradient of [`quadratic_loss`] with respect to `dW`: `2 · G dW A`.
pub fn quadratic_grad(dw: &Tensor, f: &KfacFactors) -> Result<Tensor> {
    check_dw(dw, f)?;
    Ok(matmul(&matmul(&f.g, dw)?, &f.a)?.scale(2.0))
}

fn check_dw(dw: &Tensor, f: &KfacFactors) -> Result<()> {
    if dw.rank() != 2 || dw.shape()[0] != f.out_dim() || dw.shape()[1] != f.in_dim() {
        return Err(QdkError::Shape(format!(
            "dW shape {:?} does not match factors ({} x {})",
            dw.shape(),
            f.out_dim(),
            f.in_dim()
        )));
    }
    Ok(())
}

/// Materialize `G ⊗ A` explicitly; test oracle for small factors.
pub fn kronecker(g: &Tensor, a: &Tensor) -> Result<Tensor> {
    if g.rank() != 2 || a.rank() != 2 {
        return Err(QdkError::Shape("kronecker expects rank-2 factors".into()));
    }
    let (gr, gc) = (g.shape()[0], g.shape()[1]);
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let mut out = Tensor::zeros(vec![gr * ar, gc * ac]);
    for i in 0..gr {
        for j in 0..gc {
            let gij = g.at2(i, j);
            for k in 0..ar {
                for l in 0..ac {
                    out.set2(i * ar + k, j * ac + l, gij * a.at2(k, l));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec_tensor(v: Vec<f64>) -> Tensor {
        let n = v.len();
        Tensor::new(vec![n], v).unwrap()
    }

    fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        let m = Tensor::new(
            vec![n, n],
            (0..n * n).map(|_| rng.random::<f64>() - 0.5).collect(),
        )
        .unwrap();
        matmul(&m.transpose2().unwrap(), &m).unwrap()
    }

    #[test]
    fn single_sample_factors() {
        let f = accumulate_kfac(
            &[vec_tensor(vec![1.0, 0.0])],
            &[vec_tensor(vec![2.0])],
            1,
        )
        .unwrap();
        assert_eq!(f.g.data(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(f.a.data(), &[4.0]);
    }

    #[test]
    fn repeated_samples_scale_by_sqrt_s() {
        let s = 9;
        let g = vec_tensor(vec![0.5, -1.5]);
        let x = vec_tensor(vec![1.0, 2.0, 3.0]);
        let grads: Vec<Tensor> = (0..s).map(|_| g.clone()).collect();
        let acts: Vec<Tensor> = (0..s).map(|_| x.clone()).collect();
        let f = accumulate_kfac(&grads, &acts, s).unwrap();
        // S identical samples: G = sqrt(S) · g gᵀ.
        let expect = (s as f64).sqrt();
        assert_abs_diff_eq!(f.g.at2(0, 0), expect * 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(f.g.at2(0, 1), expect * -0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(f.a.at2(2, 2), expect * 9.0, epsilon = 1e-12);
    }

    #[test]
    fn kronecker_definition_check() {
        // G ⊗ A must equal (1/S) (Σ ggᵀ) ⊗ (Σ x̂x̂ᵀ) exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let s = 8;
        let grads: Vec<Tensor> = (0..s)
            .map(|_| vec_tensor((0..3).map(|_| rng.random::<f64>() - 0.5).collect()))
            .collect();
        let acts: Vec<Tensor> = (0..s)
            .map(|_| vec_tensor((0..4).map(|_| rng.random::<f64>() - 0.5).collect()))
            .collect();
        let f = accumulate_kfac(&grads, &acts, s).unwrap();
        let mut sum_g = Tensor::zeros(vec![3, 3]);
        let mut sum_a = Tensor::zeros(vec![4, 4]);
        for (g, x) in grads.iter().zip(&acts) {
            super::outer_add(&mut sum_g, g.data());
            super::outer_add(&mut sum_a, x.data());
        }
        let lhs = kronecker(&f.g, &f.a).unwrap();
        let rhs = kronecker(&sum_g, &sum_a).unwrap().scale(1.0 / s as f64);
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn accumulation_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let grads: Vec<Tensor> = (0..6)
            .map(|_| vec_tensor((0..3).map(|_| rng.random::<f64>()).collect()))
            .collect();
        let acts: Vec<Tensor> = (0..6)
            .map(|_| vec_tensor((0..2).map(|_| rng.random::<f64>()).collect()))
            .collect();
        let f1 = accumulate_kfac(&grads, &acts, 6).unwrap();
        let gr: Vec<Tensor> = grads.iter().rev().cloned().collect();
        let ar: Vec<Tensor> = acts.iter().rev().cloned().collect();
        let f2 = accumulate_kfac(&gr, &ar, 6).unwrap();
        for (a, b) in f1.g.data().iter().zip(f2.g.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        for (a, b) in f1.a.data().iter().zip(f2.a.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn quadratic_loss_zero_and_identity() {
        let f = KfacFactors::new(Tensor::identity(3), Tensor::identity(4), 1).unwrap();
        let zero = Tensor::zeros(vec![3, 4]);
        assert_eq!(quadratic_loss(&zero, &f).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let dw = Tensor::new(
            vec![3, 4],
            (0..12).map(|_| rng.random::<f64>() - 0.5).collect(),
        )
        .unwrap();
        let expected = dw.frob_norm().powi(2);
        assert_abs_diff_eq!(quadratic_loss(&dw, &f).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn quadratic_loss_matches_materialized_kronecker() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..50 {
            let out = 2 + (rng.random::<u32>() % 5) as usize;
            let dim_in = 2 + (rng.random::<u32>() % 5) as usize;
            let f = KfacFactors::new(
                random_psd(&mut rng, out),
                random_psd(&mut rng, dim_in),
                1,
            )
            .unwrap();
            let dw = Tensor::new(
                vec![out, dim_in],
                (0..out * dim_in).map(|_| rng.random::<f64>() - 0.5).collect(),
            )
            .unwrap();
            let fast = quadratic_loss(&dw, &f).unwrap();
            // Row-major vec against the explicit (out·in)² Kronecker matrix.
            let big = kronecker(&f.g, &f.a).unwrap();
            let v = dw.data();
            let n = v.len();
            let mut slow = 0.0;
            for i in 0..n {
                for j in 0..n {
                    slow += v[i] * big.at2(i, j) * v[j];
                }
            }
            assert_abs_diff_eq!(fast, slow, epsilon = 1e-10 * slow.abs().max(1.0));
            assert!(fast >= -1e-12);
        }
    }

    #[test]
    fn quadratic_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let f = KfacFactors::new(random_psd(&mut rng, 3), random_psd(&mut rng, 4), 1).unwrap();
        let dw = Tensor::new(
            vec![3, 4],
            (0..12).map(|_| rng.random::<f64>() - 0.5).collect(),
        )
        .unwrap();
        let grad = quadratic_grad(&dw, &f).unwrap();
        let h = 1e-6;
        for idx in 0..12 {
            let mut plus = dw.clone();
            plus.data_mut()[idx] += h;
            let mut minus = dw.clone();
            minus.data_mut()[idx] -= h;
            let fd = (quadratic_loss(&plus, &f).unwrap() - quadratic_loss(&minus, &f).unwrap())
                / (2.0 * h);
            assert_abs_diff_eq!(grad.data()[idx], fd, epsilon = 1e-5 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn asymmetric_factor_rejected() {
        let bad = Tensor::new(vec![2, 2], vec![1.0, 0.5, -0.5, 1.0]).unwrap();
        assert!(KfacFactors::new(bad, Tensor::identity(2), 1).is_err());
    }

    #[test]
    fn mismatched_sample_dims_rejected() {
        let g = vec![vec_tensor(vec![1.0, 2.0]), vec_tensor(vec![1.0])];
        let a = vec![vec_tensor(vec![1.0]), vec_tensor(vec![1.0])];
        assert!(accumulate_kfac(&g, &a, 2).is_err());
    }
}
