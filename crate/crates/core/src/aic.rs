//! Information-consistency regularizer: the reverter reconstructs initial
//! features from adapted ones, and a squared-error loss ties the
//! reconstruction back to the inputs so adaptation cannot discard what the
//! frozen encoder knew.

use ndarray::Array2;

use crate::adapter::{adapt_backward, adapt_forward, revert_forward, AdapterParams, ReverterParams};
use crate::error::{Error, Result};
use crate::featstore::FeatureSet;

/// Squared-error reconstruction value and its gradient w.r.t. the
/// reconstructed matrix (2 * (x_hat - x)).
#[derive(Debug, Clone)]
pub struct ReconLoss {
    pub value: f64,
    pub grad_recon: Array2<f64>,
}

/// `sum_i |x_i - xhat_i|^2` over aligned record rows.
pub fn reconstruction_loss(x: &Array2<f64>, xhat: &Array2<f64>) -> Result<ReconLoss> {
    if x.dim() != xhat.dim() {
        return Err(Error::ReconstructionShapeMismatch {
            left: format!("{:?}", x.dim()),
            right: format!("{:?}", xhat.dim()),
        });
    }
    let mut value = 0.0f64;
    let mut grad = Array2::zeros(x.dim());
    // fixed iteration order; cheap enough to stay sequential
    for ((g, &a), &b) in grad.iter_mut().zip(xhat.iter()).zip(x.iter()) {
        let diff = a - b;
        value += diff * diff;
        *g = 2.0 * diff;
    }
    Ok(ReconLoss { value, grad_recon: grad })
}

/// Feature-set wrapper over [`reconstruction_loss`]; record order must align.
pub fn reconstruction_loss_sets(x: &FeatureSet, xhat: &FeatureSet) -> Result<ReconLoss> {
    if x.dim() != xhat.dim() || x.len() != xhat.len() {
        return Err(Error::ReconstructionShapeMismatch {
            left: format!("{}x{}", x.len(), x.dim()),
            right: format!("{}x{}", xhat.len(), xhat.dim()),
        });
    }
    reconstruction_loss(&x.to_matrix(), &xhat.to_matrix())
}

/// Reconstruction loss and its gradients w.r.t. both parameter blocks for a
/// single feature matrix: the reverter gradient is the least-squares term
/// `2 (X_hat - X)^T Z`, and the adapter gradient flows back through the
/// reverter and the output normalization.
#[derive(Debug, Clone)]
pub struct AicGrads {
    pub loss: f64,
    pub grad_adapter: Array2<f64>,
    pub grad_reverter: Array2<f64>,
}

pub fn aic_grads(
    x: &Array2<f64>,
    params: &AdapterParams,
    rev: &ReverterParams,
) -> Result<AicGrads> {
    if rev.input_dim() != params.output_dim() || rev.output_dim() != params.input_dim() {
        return Err(Error::ReconstructionShapeMismatch {
            left: format!("adapter {}x{}", params.output_dim(), params.input_dim()),
            right: format!("reverter {}x{}", rev.output_dim(), rev.input_dim()),
        });
    }
    let fwd = adapt_forward(params, x)?;
    let xhat = revert_forward(rev, &fwd.z)?;
    let recon = reconstruction_loss(x, &xhat)?;
    let grad_reverter = recon.grad_recon.t().dot(&fwd.z);
    let grad_z = recon.grad_recon.dot(rev.weights());
    let grad_adapter = adapt_backward(params, x, &fwd, &grad_z);
    Ok(AicGrads {
        loss: recon.value,
        grad_adapter,
        grad_reverter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{init_params_with_noise, AdapterArch};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_reconstruction_is_zero() {
        let x = array![[0.5, -0.25], [1.0, 2.0]];
        let loss = reconstruction_loss(&x, &x).unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(loss.grad_recon.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn unit_displacement() {
        let x = array![[1.0, 0.0]];
        let xhat = array![[0.0, 0.0]];
        let loss = reconstruction_loss(&x, &xhat).unwrap();
        assert!((loss.value - 1.0).abs() < 1e-15);
        assert!((loss.grad_recon[[0, 0]] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn matches_direct_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_fn((20, 16), |_| rng.gen_range(-2.0..2.0));
        let xhat = Array2::from_shape_fn((20, 16), |_| rng.gen_range(-2.0..2.0));
        let loss = reconstruction_loss(&x, &xhat).unwrap();
        let mut expected = 0.0f64;
        for i in 0..20 {
            for c in 0..16 {
                expected += (x[[i, c]] - xhat[[i, c]]).powi(2);
            }
        }
        assert!((loss.value - expected).abs() / expected < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let x = array![[1.0, 0.0]];
        let y = array![[1.0, 0.0, 0.0]];
        assert!(matches!(
            reconstruction_loss(&x, &y),
            Err(Error::ReconstructionShapeMismatch { .. })
        ));
    }

    #[test]
    fn identity_setup_has_zero_gradients() {
        // W = V = I with unit inputs: z = x, x_hat = x, everything flat
        let (params, rev) = init_params_with_noise(4, 4, AdapterArch::Plain, 0, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = Array2::zeros((5, 4));
        for i in 0..5 {
            let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v = crate::featstore::l2_normalize(&v).unwrap();
            for (j, &val) in v.iter().enumerate() {
                x[[i, j]] = val;
            }
        }
        let grads = aic_grads(&x, &params, &rev).unwrap();
        assert!(grads.loss < 1e-24);
        assert!(grads.grad_adapter.iter().all(|&g| g.abs() < 1e-11));
        assert!(grads.grad_reverter.iter().all(|&g| g.abs() < 1e-11));
    }

    #[test]
    fn grad_reverter_matches_outer_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (params, _) = init_params_with_noise(6, 4, AdapterArch::Plain, 3, 0.1).unwrap();
        let v = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-0.5..0.5));
        let rev = ReverterParams::new(v.clone()).unwrap();
        let mut x = Array2::zeros((5, 6));
        for i in 0..5 {
            let raw: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let unit = crate::featstore::l2_normalize(&raw).unwrap();
            for (j, &val) in unit.iter().enumerate() {
                x[[i, j]] = val;
            }
        }
        let grads = aic_grads(&x, &params, &rev).unwrap();
        // oracle: 2 (x_hat - x)^T Z computed elementwise
        let fwd = adapt_forward(&params, &x).unwrap();
        let xhat = revert_forward(&rev, &fwd.z).unwrap();
        for r in 0..6 {
            for c in 0..4 {
                let mut acc = 0.0;
                for i in 0..5 {
                    acc += 2.0 * (xhat[[i, r]] - x[[i, r]]) * fwd.z[[i, c]];
                }
                assert!(
                    (grads.grad_reverter[[r, c]] - acc).abs() < 1e-10,
                    "[{r},{c}]"
                );
            }
        }
    }

    #[test]
    fn gradcheck_finite_differences() {
        // random 5 x (6 -> 4) instance, absolute tolerance 1e-6
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-0.5..0.5));
        let v = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-0.5..0.5));
        let params = AdapterParams::new(AdapterArch::Plain, w.clone()).unwrap();
        let rev = ReverterParams::new(v.clone()).unwrap();
        let mut x = Array2::zeros((5, 6));
        for i in 0..5 {
            let raw: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let unit = crate::featstore::l2_normalize(&raw).unwrap();
            for (j, &val) in unit.iter().enumerate() {
                x[[i, j]] = val;
            }
        }
        let grads = aic_grads(&x, &params, &rev).unwrap();
        let h = 1e-5;
        let loss_at = |w: &Array2<f64>, v: &Array2<f64>| {
            let p = AdapterParams::new(AdapterArch::Plain, w.clone()).unwrap();
            let r = ReverterParams::new(v.clone()).unwrap();
            aic_grads(&x, &p, &r).unwrap().loss
        };
        for r in 0..4 {
            for c in 0..6 {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[[r, c]] += h;
                wm[[r, c]] -= h;
                let fd = (loss_at(&wp, &v) - loss_at(&wm, &v)) / (2.0 * h);
                assert!(
                    (grads.grad_adapter[[r, c]] - fd).abs() < 1e-6,
                    "W[{r},{c}]: {} vs {fd}",
                    grads.grad_adapter[[r, c]]
                );
            }
        }
        for r in 0..6 {
            for c in 0..4 {
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[[r, c]] += h;
                vm[[r, c]] -= h;
                let fd = (loss_at(&w, &vp) - loss_at(&w, &vm)) / (2.0 * h);
                assert!(
                    (grads.grad_reverter[[r, c]] - fd).abs() < 1e-6,
                    "V[{r},{c}]: {} vs {fd}",
                    grads.grad_reverter[[r, c]]
                );
            }
        }
    }

    #[test]
    fn recon_symmetric_under_record_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Array2::from_shape_fn((7, 3), |_| rng.gen_range(-1.0..1.0));
        let xhat = Array2::from_shape_fn((7, 3), |_| rng.gen_range(-1.0..1.0));
        let base = reconstruction_loss(&x, &xhat).unwrap().value;
        let perm: Vec<usize> = (0..7).rev().collect();
        let mut xp = Array2::zeros((7, 3));
        let mut xhp = Array2::zeros((7, 3));
        for (new_i, &old_i) in perm.iter().enumerate() {
            for c in 0..3 {
                xp[[new_i, c]] = x[[old_i, c]];
                xhp[[new_i, c]] = xhat[[old_i, c]];
            }
        }
        let permuted = reconstruction_loss(&xp, &xhp).unwrap().value;
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn descent_on_reverter_is_monotone() {
        // fixed Z: gradient descent on V alone is linear least squares
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (params, _) = init_params_with_noise(5, 3, AdapterArch::Plain, 1, 0.2).unwrap();
        let mut v = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-0.5..0.5));
        let mut x = Array2::zeros((6, 5));
        for i in 0..6 {
            let raw: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let unit = crate::featstore::l2_normalize(&raw).unwrap();
            for (j, &val) in unit.iter().enumerate() {
                x[[i, j]] = val;
            }
        }
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let rev = ReverterParams::new(v.clone()).unwrap();
            let grads = aic_grads(&x, &params, &rev).unwrap();
            assert!(grads.loss <= prev + 1e-12, "{} > {prev}", grads.loss);
            prev = grads.loss;
            v = &v - &(0.01 * &grads.grad_reverter);
        }
    }
}
