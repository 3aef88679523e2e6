//! Central finite-difference gradient verification for any [`Layer`].

use crate::error::Result;
use crate::nn::layers::Layer;
use crate::nn::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Scalar objective used by the checker: a fixed random linear functional
/// of the layer output, so dloss/dout is a constant tensor.
fn loss_and_grad(out: &Tensor, coeffs: &[f64]) -> (f64, Tensor) {
    let loss = out.data.iter().zip(coeffs.iter()).map(|(o, c)| o * c).sum();
    (
        loss,
        Tensor { shape: out.shape.clone(), data: coeffs[..out.data.len()].to_vec() },
    )
}

/// Maximum relative error between the layer's analytic input gradient and
/// central finite differences.
pub fn check_input_gradient(
    layer: &mut dyn Layer,
    input: &Tensor,
    train: bool,
    coeffs: &[f64],
    h: f64,
) -> Result<f64> {
    let out = layer.forward_t(input, train)?;
    assert!(coeffs.len() >= out.numel(), "need one coefficient per output element");
    let (_, grad_out) = loss_and_grad(&out, coeffs);
    let analytic = layer.backward_t(&grad_out)?;

    let mut worst: f64 = 0.0;
    let mut probe = input.clone();
    for i in 0..input.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let (lp, _) = loss_and_grad(&layer.forward_t(&probe, train)?, coeffs);
        probe.data[i] = orig - h;
        let (lm, _) = loss_and_grad(&layer.forward_t(&probe, train)?, coeffs);
        probe.data[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data[i], fd));
    }
    Ok(worst)
}

/// Maximum relative error between accumulated parameter gradients and
/// central finite differences, over every parameter element.
pub fn check_param_gradients(
    layer: &mut dyn Layer,
    input: &Tensor,
    train: bool,
    coeffs: &[f64],
    h: f64,
) -> Result<f64> {
    // Fresh analytic gradients.
    for p in layer.params_mut() {
        p.zero_grad();
    }
    let out = layer.forward_t(input, train)?;
    let (_, grad_out) = loss_and_grad(&out, coeffs);
    layer.backward_t(&grad_out)?;
    let analytic: Vec<Vec<f64>> = layer.params_mut().iter().map(|p| p.grad.data.clone()).collect();

    let mut worst: f64 = 0.0;
    let n_params = analytic.len();
    for pi in 0..n_params {
        let n_elems = analytic[pi].len();
        for ei in 0..n_elems {
            let orig = layer.params_mut()[pi].value.data[ei];
            layer.params_mut()[pi].value.data[ei] = orig + h;
            let (lp, _) = loss_and_grad(&layer.forward_t(input, train)?, coeffs);
            layer.params_mut()[pi].value.data[ei] = orig - h;
            let (lm, _) = loss_and_grad(&layer.forward_t(input, train)?, coeffs);
            layer.params_mut()[pi].value.data[ei] = orig;
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max(relative_error(analytic[pi][ei], fd));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{BatchNorm, Conv2d, Fc, Flatten, Gap, Relu6};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: rand_vec(numel, rng) }
    }

    fn assert_layer_ok(layer: &mut dyn Layer, input: &Tensor, train: bool, rng: &mut ChaCha8Rng) {
        let coeffs = rand_vec(4096, rng);
        let e_in = check_input_gradient(layer, input, train, &coeffs, DEFAULT_STEP).unwrap();
        assert!(e_in < DEFAULT_TOLERANCE, "input gradient error {e_in}");
        let e_p = check_param_gradients(layer, input, train, &coeffs, DEFAULT_STEP).unwrap();
        assert!(e_p < DEFAULT_TOLERANCE, "param gradient error {e_p}");
    }

    #[test]
    fn square_function_gradient() {
        // f(x) = x^2 at x = 3 via the fc machinery: d(x*x)/dx from finite
        // differences must be 6; sanity for the checker itself.
        let f = |x: f64| x * x;
        let h = DEFAULT_STEP;
        let fd = (f(3.0 + h) - f(3.0 - h)) / (2.0 * h);
        assert!(relative_error(fd, 6.0) < 1e-8);
    }

    #[test]
    fn conv_layers_pass_finite_difference_check() {
        for seed in 0..7u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = rand_tensor(&[2, 3, 5, 5], &mut rng);
            let mut sc = Conv2d::standard(3, 2, 3, if seed % 2 == 0 { 1 } else { 2 }, 1, &mut rng);
            assert_layer_ok(&mut sc, &input, true, &mut rng);
            let mut dw = Conv2d::depthwise(3, 3, 2, 1, &mut rng);
            assert_layer_ok(&mut dw, &input, true, &mut rng);
            let mut pw = Conv2d::pointwise(3, 4, &mut rng);
            assert_layer_ok(&mut pw, &input, true, &mut rng);
        }
    }

    #[test]
    fn batchnorm_passes_finite_difference_check() {
        for seed in 0..7u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let input = rand_tensor(&[4, 3, 3, 3], &mut rng);
            let mut bn = BatchNorm::new(3);
            bn.gamma.value = rand_tensor(&[3], &mut rng);
            bn.beta.value = rand_tensor(&[3], &mut rng);
            assert_layer_ok(&mut bn, &input, true, &mut rng);
            // infer mode too (running stats at defaults)
            assert_layer_ok(&mut bn, &input, false, &mut rng);
        }
    }

    #[test]
    fn pointwise_layers_pass_finite_difference_check() {
        for seed in 0..7u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            // keep values away from the ReLU6 kinks at 0 and 6
            let input = Tensor {
                shape: vec![2, 2, 3, 3],
                data: (0..36)
                    .map(|_| {
                        let v: f64 = rng.gen_range(0.2..5.8);
                        if rng.gen_bool(0.3) {
                            -v
                        } else {
                            v
                        }
                    })
                    .collect(),
            };
            let mut relu = Relu6::default();
            assert_layer_ok(&mut relu, &input, true, &mut rng);
            let mut gap = Gap::default();
            assert_layer_ok(&mut gap, &input, true, &mut rng);
            let mut flat = Flatten::default();
            assert_layer_ok(&mut flat, &input, true, &mut rng);
        }
    }

    #[test]
    fn fc_passes_finite_difference_check() {
        for seed in 0..6u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let input = rand_tensor(&[3, 7], &mut rng);
            let mut fc = Fc::new(7, 4, &mut rng);
            assert_layer_ok(&mut fc, &input, true, &mut rng);
        }
    }

    #[test]
    fn unconnected_activation_gets_zero_gradient() {
        // A pointwise conv with a zero weight row: inputs feeding only that
        // output channel must receive zero gradient when the loss looks only
        // at that channel.
        let mut rng = ChaCha8Rng::seed_from_u64(400);
        let mut pw = Conv2d::pointwise(2, 2, &mut rng);
        // out channel 0 reads only in channel 0; channel 1 disconnected
        pw.weight.value = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let input = rand_tensor(&[1, 2, 2, 2], &mut rng);
        let out = pw.forward_t(&input, true).unwrap();
        // loss depends only on output channel 0
        let mut grad_out = Tensor::zeros(&out.shape);
        for k in 0..4 {
            grad_out.data[k] = 1.0;
        }
        let gin = pw.backward_t(&grad_out).unwrap();
        assert!(gin.data[4..8].iter().all(|&g| g == 0.0));
    }
}
