//! Finite-difference gradient checks for every layer kind.

#![cfg(test)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_tensor(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Tensor {
    Tensor::from_shape_simple_fn(shape, || rng.gen_range(-1.0f32..1.0))
}

/// Checks d(sum(r * f(x)))/dx against central differences.
fn check_input_gradient(layer: &mut dyn Layer, x: &Tensor, tol: f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let y = layer.forward(x);
    let r = Tensor::from_shape_simple_fn(y.raw_dim(), || rng.gen_range(-1.0f32..1.0));
    let gx = layer.backward(&r);

    let eps = 1e-2f32;
    let n = x.len();
    let stride = (n / 24).max(1); // probe a spread of coordinates
    for idx in (0..n).step_by(stride) {
        let mut xp = x.clone();
        xp.as_slice_mut().unwrap()[idx] += eps;
        let mut xm = x.clone();
        xm.as_slice_mut().unwrap()[idx] -= eps;
        let lp: f32 = (&layer.forward(&xp) * &r).sum();
        let lm: f32 = (&layer.forward(&xm) * &r).sum();
        layer.backward(&r); // clear cache for layers that require pairing
        let fd = (lp - lm) / (2.0 * eps);
        let analytic = gx.as_slice().unwrap()[idx];
        assert!(
            (fd - analytic).abs() < tol * (1.0 + fd.abs().max(analytic.abs())),
            "input grad mismatch at {idx}: fd {fd} vs analytic {analytic}"
        );
    }
}

/// Checks parameter gradients for the first parameter slot.
fn check_param_gradient(layer: &mut dyn Layer, x: &Tensor, tol: f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let y = layer.forward(x);
    let r = Tensor::from_shape_simple_fn(y.raw_dim(), || rng.gen_range(-1.0f32..1.0));
    layer.zero_grad();
    layer.backward(&r);

    let mut grads: Vec<Vec<f32>> = Vec::new();
    layer.visit_params(&mut |_p, g| grads.push(g.to_vec()));

    let eps = 1e-2f32;
    for slot in 0..grads.len() {
        let len = grads[slot].len();
        let stride = (len / 12).max(1);
        for idx in (0..len).step_by(stride) {
            let perturb = |layer: &mut dyn Layer, delta: f32| {
                let mut s = 0usize;
                layer.visit_params(&mut |p, _g| {
                    if s == slot {
                        p[idx] += delta;
                    }
                    s += 1;
                });
            };
            perturb(layer, eps);
            let lp: f32 = (&layer.forward(x) * &r).sum();
            layer.backward(&r);
            perturb(layer, -2.0 * eps);
            let lm: f32 = (&layer.forward(x) * &r).sum();
            layer.backward(&r);
            perturb(layer, eps);
            let fd = (lp - lm) / (2.0 * eps);
            let analytic = grads[slot][idx];
            assert!(
                (fd - analytic).abs() < tol * (1.0 + fd.abs().max(analytic.abs())),
                "param grad mismatch slot {slot} idx {idx}: fd {fd} vs analytic {analytic}"
            );
        }
    }
}

fn seeded_conv(stride: (usize, usize), pad: (usize, usize), kernel: (usize, usize)) -> Conv2d {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    init::conv2d(&mut rng, 3, 4, kernel, stride, pad)
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, (2, 3, 6, 6));
    let mut conv = seeded_conv((1, 1), (1, 1), (3, 3));
    check_input_gradient(&mut conv, &x, 2e-2);
    check_param_gradient(&mut conv, &x, 2e-2);
}

#[test]
fn strided_rect_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&mut rng, (2, 3, 9, 9));
    let mut conv = seeded_conv((2, 2), (0, 3), (1, 7));
    check_input_gradient(&mut conv, &x, 2e-2);
    check_param_gradient(&mut conv, &x, 2e-2);
}

#[test]
fn maxpool_gradients() {
    // distinct, well-separated values so a +/-eps probe cannot flip an argmax
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 2 * 3 * 7 * 7;
    let mut values: Vec<f32> = (0..n).map(|i| i as f32 * 0.1).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        values.swap(i, j);
    }
    let x = Tensor::from_shape_vec((2, 3, 7, 7), values).unwrap();
    let mut pool = MaxPool2d::new(3, 2, 1);
    check_input_gradient(&mut pool, &x, 2e-2);
}

#[test]
fn avgpool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random_tensor(&mut rng, (2, 3, 7, 7));
    let mut pool = AvgPool2d::new(3, 1, 1);
    check_input_gradient(&mut pool, &x, 2e-2);
    let mut strided = AvgPool2d::new(3, 2, 0);
    check_input_gradient(&mut strided, &x, 2e-2);
}

#[test]
fn gap_flatten_relu_upsample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, (2, 3, 4, 4));
    check_input_gradient(&mut GlobalAvgPool::new(), &x, 2e-2);
    check_input_gradient(&mut Flatten::new(), &x, 2e-2);
    // keep values away from the kink at zero
    let away = x.mapv(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    check_input_gradient(&mut Relu::new(), &away, 2e-2);
    check_input_gradient(&mut UpsampleNearest2x::new(), &x, 2e-2);
}

#[test]
fn batchnorm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&mut rng, (3, 4, 5, 5));
    let mut bn = BatchNorm2d::new(4);
    check_input_gradient(&mut bn, &x, 3e-2);
    check_param_gradient(&mut bn, &x, 3e-2);
}

#[test]
fn residual_and_concat_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_tensor(&mut rng, (2, 3, 6, 6));

    // smooth main path: finite differences near a ReLU kink are unreliable
    let main = Sequential::new(vec![Box::new(init::conv2d_square(&mut rng, 3, 3, 3, 1, 1)) as _]);
    let mut res = Residual::new(main, None);
    check_input_gradient(&mut res, &x, 2e-2);
    check_param_gradient(&mut res, &x, 2e-2);

    let b1 = Sequential::new(vec![Box::new(init::conv2d_square(&mut rng, 3, 2, 1, 1, 0))]);
    let b2 = Sequential::new(vec![Box::new(init::conv2d_square(&mut rng, 3, 4, 3, 1, 1))]);
    let mut cat = Concat::new(vec![b1, b2]);
    check_input_gradient(&mut cat, &x, 2e-2);
    check_param_gradient(&mut cat, &x, 2e-2);
}

#[test]
fn infer_matches_forward_for_stateless_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(&mut rng, (2, 3, 8, 8));
    let mut conv = seeded_conv((2, 2), (1, 1), (3, 3));
    assert_eq!(conv.infer(&x), conv.forward(&x));
    let mut pool = MaxPool2d::new(2, 2, 0);
    assert_eq!(pool.infer(&x), pool.forward(&x));
}

/// Regression test: channel concatenation must hand downstream convolutions
/// a standard-layout tensor even for batches larger than one. (A plain
/// `ndarray::concatenate` along the channel axis does not, and single-image
/// tests never notice.)
#[test]
fn batched_concat_feeds_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_tensor(&mut rng, (3, 3, 6, 6));
    let b1 = graph::Sequential::new(vec![Box::new(init::conv2d_square(&mut rng, 3, 2, 1, 1, 0))]);
    let b2 = graph::Sequential::new(vec![Box::new(init::conv2d_square(&mut rng, 3, 3, 3, 1, 1))]);
    let mut net = graph::Sequential::new(vec![
        Box::new(Concat::new(vec![b1, b2])),
        Box::new(init::conv2d_square(&mut rng, 5, 4, 3, 1, 1)),
    ]);
    let y = net.forward(&x);
    assert_eq!(y.shape(), &[3, 4, 6, 6]);
    check_input_gradient(&mut net, &x, 2e-2);

    let joined = graph::concat_channels(&[
        &random_tensor(&mut rng, (4, 2, 5, 5)),
        &random_tensor(&mut rng, (4, 3, 5, 5)),
    ]);
    assert!(joined.is_standard_layout());
}

#[test]
fn conv_output_shapes() {
    let x = Tensor::zeros((1, 3, 224, 224));
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let conv = init::conv2d_square(&mut rng, 3, 8, 3, 2, 0);
    let y = conv.infer(&x);
    assert_eq!(y.shape(), &[1, 8, 111, 111]);
    let pool = MaxPool2d::new(3, 2, 0);
    assert_eq!(pool.infer(&y).shape(), &[1, 8, 55, 55]);
}

#[test]
fn adam_reduces_quadratic_loss() {
    // minimize ||conv(x) - target||^2 on a fixed input
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_tensor(&mut rng, (1, 2, 4, 4));
    let target = random_tensor(&mut rng, (1, 3, 4, 4));
    let mut conv = init::conv2d_square(&mut rng, 2, 3, 3, 1, 1);
    let mut adam = optim::Adam::new(0.05);
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..60 {
        let y = conv.forward(&x);
        let diff = &y - &target;
        let loss: f32 = diff.iter().map(|d| d * d).sum();
        let grad = diff.mapv(|d| 2.0 * d);
        conv.zero_grad();
        conv.backward(&grad);
        adam.step(&mut conv);
        first.get_or_insert(loss);
        last = loss;
    }
    assert!(last < first.unwrap() * 0.05, "loss {last} vs {first:?}");
}

#[test]
fn state_round_trip_preserves_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_tensor(&mut rng, (1, 3, 6, 6));
    let net = Sequential::new(vec![
        Box::new(init::conv2d_square(&mut rng, 3, 4, 3, 1, 1)),
        Box::new(Relu::new()),
        Box::new(init::conv2d_square(&mut rng, 4, 2, 1, 1, 0)),
    ]);
    let y = net.infer(&x);
    let mut state = Vec::new();
    net.export_state(&mut state);

    let mut rng2 = ChaCha8Rng::seed_from_u64(99);
    let mut net2 = Sequential::new(vec![
        Box::new(init::conv2d_square(&mut rng2, 3, 4, 3, 1, 1)),
        Box::new(Relu::new()),
        Box::new(init::conv2d_square(&mut rng2, 4, 2, 1, 1, 0)),
    ]);
    let mut it = state.into_iter();
    net2.import_state(&mut it).unwrap();
    assert_eq!(net2.infer(&x), y);
}

#[test]
fn softmax_projection_consistency() {
    // adding a constant to both scores leaves probabilities unchanged
    let logits = Array2::from_shape_vec((1, 2), vec![0.4f32, -1.1]).unwrap();
    let shifted = logits.mapv(|v| v + 17.5);
    let p0 = loss::softmax_rows(&logits);
    let p1 = loss::softmax_rows(&shifted);
    assert!((p0[[0, 0]] - p1[[0, 0]]).abs() < 1e-6);
}
