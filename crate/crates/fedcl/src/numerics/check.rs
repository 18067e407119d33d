//! Finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::numerics::loss::softmax_cross_entropy;
use crate::numerics::net::{GradBundle, Mlp};
use crate::numerics::tensor::Tensor;

/// Gradient entries below this magnitude on both sides are treated as
/// matching; relative error is meaningless against finite-difference noise
/// at that scale.
const TINY_GRAD: f64 = 1e-5;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale <= TINY_GRAD {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Largest per-entry relative error between two shape-matched bundles.
pub fn max_rel_error(analytic: &GradBundle, numeric: &GradBundle) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.tensors().iter().zip(numeric.tensors()) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            worst = worst.max(rel_error(x, y));
        }
    }
    worst
}

/// Central finite differences of a scalar loss over every network parameter.
///
/// The parameters are perturbed in place and restored; the closure must be a
/// deterministic function of the network.
pub fn numeric_grads<F>(net: &mut Mlp, eps: f64, mut loss: F) -> Result<GradBundle>
where
    F: FnMut(&Mlp) -> Result<f64>,
{
    let n_tensors = net.params().len();
    let mut grads = Vec::with_capacity(n_tensors);
    for ti in 0..n_tensors {
        let shape = net.params()[ti].shape().to_vec();
        let len = net.params()[ti].len();
        let mut g = vec![0.0; len];
        for (ei, slot) in g.iter_mut().enumerate() {
            let orig = net.params()[ti].data()[ei];
            net.params_mut()[ti].data_mut()[ei] = orig + eps;
            let plus = loss(net)?;
            net.params_mut()[ti].data_mut()[ei] = orig - eps;
            let minus = loss(net)?;
            net.params_mut()[ti].data_mut()[ei] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        grads.push(Tensor::new(shape, g)?);
    }
    Ok(GradBundle::from_tensors(grads))
}

/// Checks every analytic parameter gradient of an MLP classifier against
/// central finite differences. Returns the max relative error.
pub fn grad_check(net: &mut Mlp, input: &Tensor, label: usize, eps: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "grad_check eps must be in [1e-7, 1e-3], got {eps}"
        )));
    }
    let (logits, cache) = net.forward(input)?;
    let (loss, d_logits) = softmax_cross_entropy(&logits, label)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    let (analytic, _) = net.backward(&cache, &d_logits)?;
    let numeric = numeric_grads(net, eps, |n| {
        let out = n.output(input)?;
        Ok(softmax_cross_entropy(&out, label)?.0)
    })?;
    Ok(max_rel_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layer::AffineLayer;
    use crate::rng;
    use rand::Rng;

    fn random_input<R: Rng>(dim: usize, r: &mut R) -> Tensor {
        Tensor::vector((0..dim).map(|_| r.random::<f64>() * 2.0 - 1.0).collect())
    }

    #[test]
    fn two_layer_mlp_passes() {
        let mut r = rng::stream(0, &[rng::salt::ENCODER_INIT]);
        let mut net = Mlp::from_dims(&[4, 8, 3], &mut r).unwrap();
        let x = random_input(4, &mut r);
        let err = grad_check(&mut net, &x, 1, 1e-5).unwrap();
        assert!(err < 1e-4, "max rel error {err}");
    }

    // Analytic gradients match central differences at 100 random points for
    // every layer shape the simulator uses (single affine, deep ReLU chains).
    // Biases are nudged off zero so no pre-activation sits exactly on the
    // ReLU kink, where central differences see the average of both slopes.
    #[test]
    fn gradcheck_property_100_random_points() {
        let shapes: [&[usize]; 3] = [&[3, 2], &[4, 6, 3], &[5, 4, 4, 2]];
        for (si, dims) in shapes.iter().enumerate() {
            for point in 0..34 {
                let mut r = rng::stream(1000 + point, &[si as u64]);
                let mut net = Mlp::from_dims(dims, &mut r).unwrap();
                for (i, p) in net.params_mut().into_iter().enumerate() {
                    if i % 2 == 1 {
                        for v in p.data_mut() {
                            *v = 0.05;
                        }
                    }
                }
                let x = random_input(dims[0], &mut r);
                let label = (point as usize) % dims[dims.len() - 1];
                let err = grad_check(&mut net, &x, label, 1e-5).unwrap();
                assert!(err < 1e-4, "dims {dims:?} point {point}: rel error {err}");
            }
        }
    }

    #[test]
    fn linear_network_quadratic_loss_is_exact() {
        // Central differences are exact (up to roundoff) for quadratics.
        let mut r = rng::stream(17, &[2]);
        let layer = AffineLayer::glorot(3, 2, &mut r).unwrap();
        let mut net = Mlp::from_layers(vec![layer]).unwrap();
        let x = Tensor::vector(vec![0.4, -1.2, 0.9]);
        let target = Tensor::vector(vec![0.5, -0.5]);

        let (y, cache) = net.forward(&x).unwrap();
        let d_out = y.sub(&target).unwrap();
        let (analytic, _) = net.backward(&cache, &d_out).unwrap();
        let numeric = numeric_grads(&mut net, 1e-4, |n| {
            let out = n.output(&x)?;
            Ok(0.5 * out.sub(&target)?.sq_norm())
        })
        .unwrap();
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-9, "quadratic loss should check near machine precision: {err}");
    }

    #[test]
    fn zero_parameter_network_is_vacuous() {
        let mut net = Mlp::identity(3);
        let x = Tensor::vector(vec![0.2, 0.1, -0.4]);
        let err = grad_check(&mut net, &x, 0, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn eps_range_enforced() {
        let mut net = Mlp::identity(2);
        let x = Tensor::vector(vec![0.0, 0.0]);
        assert!(grad_check(&mut net, &x, 0, 1e-2).is_err());
        assert!(grad_check(&mut net, &x, 0, 1e-8).is_err());
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let mut r = rng::stream(21, &[3]);
        let mut net = Mlp::from_dims(&[3, 4, 2], &mut r).unwrap();
        let x = random_input(3, &mut r);
        let (logits, cache) = net.forward(&x).unwrap();
        let (_, d_logits) = softmax_cross_entropy(&logits, 0).unwrap();
        let (mut analytic, _) = net.backward(&cache, &d_logits).unwrap();
        // Fault injection: flip the sign of one weight gradient.
        analytic.tensors_mut()[0].data_mut()[0] *= -1.0;
        let numeric = numeric_grads(&mut net, 1e-5, |n| {
            let out = n.output(&x)?;
            Ok(softmax_cross_entropy(&out, 0)?.0)
        })
        .unwrap();
        let err = max_rel_error(&analytic, &numeric);
        assert!(err > 1e-4, "corruption must be flagged, got {err}");
    }
}
