//! Plain SGD and the central-finite-difference gradient checker used to
//! validate every hand-written backward pass.

use crate::error::{Error, Result};

/// In-place SGD: p <- p - lr * (g + weight_decay * p).
///
/// Callers pass `weight_decay = 0` for bias parameters.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "sgd over {} params with {} grads",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * (g + weight_decay * *p);
    }
    Ok(())
}

/// Compares `analytic` against central differences of `loss` around
/// `params`, returning the max relative error
/// |analytic - fd| / max(|analytic|, |fd|, 1e-8). Empty parameter sets
/// return 0.
pub fn grad_check<F>(mut loss: F, params: &[f64], analytic: &[f64], eps: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = loss(&probe);
        probe[i] = orig - eps;
        let down = loss(&probe);
        probe[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{cross_entropy, softmax, ClassDistribution};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sgd_formula_values() {
        let mut p = [1.0];
        sgd_step(&mut p, &[1.0], 0.1, 0.0).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);

        let mut p = [1.0];
        sgd_step(&mut p, &[0.0], 0.1, 0.5).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15);

        let mut p = [0.3, -0.7];
        let before = p;
        sgd_step(&mut p, &[1.0, 2.0], 0.0, 0.9).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_rejects_mismatched_shapes() {
        let mut p = [1.0, 2.0];
        assert!(sgd_step(&mut p, &[1.0], 0.1, 0.0).is_err());
    }

    #[test]
    fn grad_check_zero_parameter_network_is_zero() {
        let err = grad_check(|_| 1.0, &[], &[], 1e-4);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn linear_softmax_cross_entropy_passes_grad_check() {
        // single linear layer (3 classes x 5 inputs) + softmax + cross entropy
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let input: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..15).map(|_| rng.random_range(-0.5..0.5)).collect();
        let target = ClassDistribution::one_hot(3, 1);

        let loss_of = |w: &[f64]| {
            let logits: Vec<f64> = (0..3)
                .map(|a| (0..5).map(|j| w[a * 5 + j] * input[j]).sum())
                .collect();
            cross_entropy(&softmax(&logits).unwrap(), &target).unwrap()
        };

        let logits: Vec<f64> = (0..3)
            .map(|a| (0..5).map(|j| w[a * 5 + j] * input[j]).sum())
            .collect();
        let pred = softmax(&logits).unwrap();
        // d loss / d logit_a = pred_a - target_a, chain through w
        let mut analytic = vec![0.0; 15];
        for a in 0..3 {
            let d = pred.probs()[a] - target.probs()[a];
            for j in 0..5 {
                analytic[a * 5 + j] = d * input[j];
            }
        }
        let err = grad_check(loss_of, &w, &analytic, 1e-4);
        assert!(err < 1e-6, "rel err {err}");
    }
}
