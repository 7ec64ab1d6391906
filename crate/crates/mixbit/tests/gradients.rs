//! 64-bit central finite-difference verification of every differentiable
//! primitive, plus exact-oracle checks of the quantizer gradients and a
//! finite-difference check of the full quantized layer backward against the
//! round-frozen clip-linear surrogate.

use mixbit::quant::{
    bounds_for, lsq_grad_scale, quantize_backward, quantize_round, ste_grad_input, QuantBounds,
    TensorKind,
};
use mixbit::rng::{Rng, Stream};
use mixbit::tensor::{
    conv2d_backward, conv2d_forward, finite_difference_check, fully_connected,
    fully_connected_backward, global_avg_pool, global_avg_pool_backward, kl_divergence,
    kl_divergence_backward, relu, relu_backward, softmax_cross_entropy,
    softmax_cross_entropy_backward, softmax_rows, BnState, Mode, Tensor,
};

const FD_TOL: f64 = 1e-4;

fn weighted_sum(y: &Tensor<f64>, weights: &[f64]) -> f64 {
    y.data().iter().zip(weights).map(|(a, b)| a * b).sum()
}

#[test]
fn conv_input_and_weight_gradients() {
    let mut rng = Rng::new(21, Stream::Test);
    for trial in 0..10 {
        let stride = 1 + (trial % 2);
        let x = Tensor::<f64>::randn(&[2, 2, 5, 5], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 0.5, &mut rng);
        let y = conv2d_forward(&x, &w, stride, 1).unwrap();
        let coefs: Vec<f64> = (0..y.numel()).map(|_| rng.gaussian()).collect();
        let dy = Tensor::new(y.shape().to_vec(), coefs.clone()).unwrap();
        let (dx, dw) = conv2d_backward(&x, &w, stride, 1, &dy).unwrap();

        let f_x = |probe: &Tensor<f64>| {
            weighted_sum(&conv2d_forward(probe, &w, stride, 1).unwrap(), &coefs)
        };
        assert!(finite_difference_check(f_x, &x, &dx, 1e-5) < FD_TOL);

        let f_w = |probe: &Tensor<f64>| {
            weighted_sum(&conv2d_forward(&x, probe, stride, 1).unwrap(), &coefs)
        };
        let err = finite_difference_check(f_w, &w, &dw, 1e-5);
        assert!(err < FD_TOL, "conv weight gradient error {err}");
    }
}

#[test]
fn bn_gradients() {
    let mut rng = Rng::new(22, Stream::Test);
    for _ in 0..10 {
        let mut bn = BnState::<f64>::new(3);
        bn.gamma.value = Tensor::randn(&[3], 1.0, &mut rng).map(|v: f64| v + 2.0);
        bn.beta.value = Tensor::randn(&[3], 0.5, &mut rng);
        let x = Tensor::<f64>::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let (y, cache) = bn.clone().forward(&x, Mode::Train).unwrap();
        let coefs: Vec<f64> = (0..y.numel()).map(|_| rng.gaussian()).collect();
        let dy = Tensor::new(y.shape().to_vec(), coefs.clone()).unwrap();
        let mut bn_work = bn.clone();
        let dx = bn_work.backward(&cache, &dy);

        let bn_f = bn.clone();
        let f_x = move |probe: &Tensor<f64>| {
            let mut b = bn_f.clone();
            let (out, _) = b.forward(probe, Mode::Train).unwrap();
            weighted_sum(&out, &coefs)
        };
        let err = finite_difference_check(f_x, &x, &dx, 1e-5);
        assert!(err < FD_TOL, "bn input gradient error {err}");

        // Gamma and beta via the recorded parameter gradients.
        let dgamma = Tensor::new(vec![3], bn_work.gamma.value.grad().unwrap().to_vec()).unwrap();
        let coefs2: Vec<f64> = dy.data().to_vec();
        let bn_g = bn.clone();
        let x_g = x.clone();
        let f_gamma = move |probe: &Tensor<f64>| {
            let mut b = bn_g.clone();
            b.gamma.value = probe.clone();
            let (out, _) = b.forward(&x_g, Mode::Train).unwrap();
            weighted_sum(&out, &coefs2)
        };
        let err = finite_difference_check(f_gamma, &bn.gamma.value, &dgamma, 1e-5);
        assert!(err < FD_TOL, "bn gamma gradient error {err}");

        let dbeta = Tensor::new(vec![3], bn_work.beta.value.grad().unwrap().to_vec()).unwrap();
        let coefs3: Vec<f64> = dy.data().to_vec();
        let bn_b = bn.clone();
        let x_b = x.clone();
        let f_beta = move |probe: &Tensor<f64>| {
            let mut b = bn_b.clone();
            b.beta.value = probe.clone();
            let (out, _) = b.forward(&x_b, Mode::Train).unwrap();
            weighted_sum(&out, &coefs3)
        };
        let err = finite_difference_check(f_beta, &bn.beta.value, &dbeta, 1e-5);
        assert!(err < FD_TOL, "bn beta gradient error {err}");
    }
}

#[test]
fn relu_gradient_away_from_kinks() {
    let mut rng = Rng::new(23, Stream::Test);
    for _ in 0..10 {
        // Rejection: keep |x| > 1e-3.
        let x = Tensor::<f64>::from_fn(&[40], |_| loop {
            let v = rng.gaussian();
            if v.abs() > 1e-3 {
                break v;
            }
        });
        let coefs: Vec<f64> = (0..40).map(|_| rng.gaussian()).collect();
        let dy = Tensor::new(vec![40], coefs.clone()).unwrap();
        let dx = relu_backward(&x, &dy);
        let err = finite_difference_check(
            |probe| weighted_sum(&relu(probe), &coefs),
            &x,
            &dx,
            1e-5,
        );
        assert!(err < FD_TOL, "relu gradient error {err}");
    }
}

#[test]
fn gap_and_fc_gradients() {
    let mut rng = Rng::new(24, Stream::Test);
    for _ in 0..10 {
        let x = Tensor::<f64>::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let pooled = global_avg_pool(&x).unwrap();
        let coefs: Vec<f64> = (0..pooled.numel()).map(|_| rng.gaussian()).collect();
        let dy = Tensor::new(pooled.shape().to_vec(), coefs.clone()).unwrap();
        let dx = global_avg_pool_backward(x.shape(), &dy);
        let err = finite_difference_check(
            |probe| weighted_sum(&global_avg_pool(probe).unwrap(), &coefs),
            &x,
            &dx,
            1e-5,
        );
        assert!(err < FD_TOL, "gap gradient error {err}");

        let w = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[5], 1.0, &mut rng);
        let y = fully_connected(&pooled, &w, &b).unwrap();
        let coefs: Vec<f64> = (0..y.numel()).map(|_| rng.gaussian()).collect();
        let dy = Tensor::new(y.shape().to_vec(), coefs.clone()).unwrap();
        let (dx, dw, db) = fully_connected_backward(&pooled, &w, &dy);
        let err = finite_difference_check(
            |probe| weighted_sum(&fully_connected(probe, &w, &b).unwrap(), &coefs),
            &pooled,
            &dx,
            1e-5,
        );
        assert!(err < FD_TOL, "fc input gradient error {err}");
        let err = finite_difference_check(
            |probe| weighted_sum(&fully_connected(&pooled, probe, &b).unwrap(), &coefs),
            &w,
            &dw,
            1e-5,
        );
        assert!(err < FD_TOL, "fc weight gradient error {err}");
        let err = finite_difference_check(
            |probe| weighted_sum(&fully_connected(&pooled, &w, probe).unwrap(), &coefs),
            &b,
            &db,
            1e-5,
        );
        assert!(err < FD_TOL, "fc bias gradient error {err}");
    }
}

#[test]
fn loss_gradients() {
    let mut rng = Rng::new(25, Stream::Test);
    for _ in 0..10 {
        let logits = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let labels: Vec<usize> = (0..4).map(|_| rng.below(6) as usize).collect();
        let (_, probs) = softmax_cross_entropy(&logits, &labels).unwrap();
        let d = softmax_cross_entropy_backward(&probs, &labels);
        let labels2 = labels.clone();
        let err = finite_difference_check(
            |probe| softmax_cross_entropy(probe, &labels2).unwrap().0,
            &logits,
            &d,
            1e-6,
        );
        assert!(err < FD_TOL, "ce gradient error {err}");

        let teacher = softmax_rows(&Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng));
        let (_, student_probs) = kl_divergence(&teacher, &logits).unwrap();
        let d = kl_divergence_backward(&student_probs, &teacher);
        let teacher2 = teacher.clone();
        let err = finite_difference_check(
            |probe| kl_divergence(&teacher2, probe).unwrap().0,
            &logits,
            &d,
            1e-6,
        );
        assert!(err < FD_TOL, "kl gradient error {err}");
    }
}

/// conv + BN + relu + CE composite, resampled until every relu
/// pre-activation is safely away from the kink.
#[test]
fn composite_conv_bn_relu_ce_gradient() {
    let mut rng = Rng::new(26, Stream::Test);
    let mut done = 0;
    let mut attempts = 0;
    while done < 5 && attempts < 100 {
        attempts += 1;
        let x = Tensor::<f64>::randn(&[3, 2, 5, 5], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[4, 2, 3, 3], 0.5, &mut rng);
        let mut bn = BnState::<f64>::new(4);
        bn.gamma.value = Tensor::randn(&[4], 0.2, &mut rng).map(|v: f64| v + 1.0);
        bn.beta.value = Tensor::randn(&[4], 0.3, &mut rng);
        let labels: Vec<usize> = (0..3).map(|_| rng.below(7) as usize).collect();
        let head_w = Tensor::<f64>::randn(&[7, 4], 1.0, &mut rng);
        let head_b = Tensor::<f64>::randn(&[7], 0.1, &mut rng);

        let forward = |x: &Tensor<f64>, w: &Tensor<f64>| -> (f64, Tensor<f64>) {
            let conv = conv2d_forward(x, w, 1, 1).unwrap();
            let (z, _) = bn.clone().forward(&conv, Mode::Train).unwrap();
            let h = relu(&z);
            let pooled = global_avg_pool(&h).unwrap();
            let logits = fully_connected(&pooled, &head_w, &head_b).unwrap();
            let (loss, _) = softmax_cross_entropy(&logits, &labels).unwrap();
            (loss, z)
        };
        let (_, z) = forward(&x, &w);
        if z.data().iter().any(|v| v.abs() <= 5e-3) {
            continue;
        }
        done += 1;

        // Analytic gradients.
        let conv = conv2d_forward(&x, &w, 1, 1).unwrap();
        let mut bn_work = bn.clone();
        let (z, cache) = bn_work.forward(&conv, Mode::Train).unwrap();
        let h = relu(&z);
        let pooled = global_avg_pool(&h).unwrap();
        let logits = fully_connected(&pooled, &head_w, &head_b).unwrap();
        let (_, probs) = softmax_cross_entropy(&logits, &labels).unwrap();
        let dlogits = softmax_cross_entropy_backward(&probs, &labels);
        let (dpool, _, _) = fully_connected_backward(&pooled, &head_w, &dlogits);
        let dh = global_avg_pool_backward(h.shape(), &dpool);
        let dz = relu_backward(&z, &dh);
        let dconv = bn_work.backward(&cache, &dz);
        let (dx, dw) = conv2d_backward(&x, &w, 1, 1, &dconv).unwrap();

        let err = finite_difference_check(|probe| forward(probe, &w).0, &x, &dx, 1e-3);
        assert!(err < FD_TOL, "composite input gradient error {err}");
        let err = finite_difference_check(|probe| forward(&x, probe).0, &w, &dw, 1e-3);
        assert!(err < FD_TOL, "composite weight gradient error {err}");
    }
    assert_eq!(done, 5, "could not build 5 kink-free instances in {attempts} attempts");
}

// ---------------------------------------------------------------------------
// Quantizer gradients.
// ---------------------------------------------------------------------------

/// Independently coded straight-through mask.
fn oracle_ste(v: f64, s: f64, bounds: QuantBounds) -> f64 {
    let u = v / s;
    if u < bounds.lo as f64 || u > bounds.hi as f64 {
        0.0
    } else {
        1.0
    }
}

/// Independently coded per-element step gradient.
fn oracle_step_elem(v: f64, s: f64, bounds: QuantBounds) -> f64 {
    let u = v / s;
    if u < bounds.lo as f64 {
        bounds.lo as f64
    } else if u > bounds.hi as f64 {
        bounds.hi as f64
    } else {
        let fl = u.floor();
        let frac = u - fl;
        let r = if frac > 0.5 {
            fl + 1.0
        } else if frac < 0.5 {
            fl
        } else if u > 0.0 {
            fl + 1.0
        } else {
            fl
        };
        r - u
    }
}

#[test]
fn quantizer_backward_matches_closed_form_oracle_exactly() {
    let mut rng = Rng::new(27, Stream::Test);
    for _ in 0..200 {
        let b = [2u8, 3, 4, 8][rng.below(4) as usize];
        let kind = if rng.below(2) == 0 { TensorKind::Weights } else { TensorKind::Activations };
        let bounds = bounds_for(b, kind).unwrap();
        let s = rng.range_f64(0.05, 1.2);
        let t = Tensor::<f64>::from_fn(&[33], |_| rng.gaussian() * 3.0);
        let dy = Tensor::<f64>::from_fn(&[33], |_| rng.gaussian());

        let mask = ste_grad_input(&t, s, bounds).unwrap();
        for (i, &v) in t.data().iter().enumerate() {
            assert_eq!(mask.data()[i], oracle_ste(v, s, bounds), "ste mismatch at {v}");
        }

        let (dt, ds) = quantize_backward(&t, s, bounds, &dy).unwrap();
        let g = lsq_grad_scale::<f64>(t.numel(), bounds);
        let mut expect_ds = 0.0;
        for i in 0..t.numel() {
            let m = oracle_ste(t.data()[i], s, bounds);
            assert_eq!(dt.data()[i], dy.data()[i] * m, "input grad mismatch");
            expect_ds += dy.data()[i] * oracle_step_elem(t.data()[i], s, bounds);
        }
        // Same formula, different code paths; identical op order on the
        // accumulator makes this an exact comparison.
        assert!(
            (ds - expect_ds * g).abs() <= 1e-12 * expect_ds.abs().max(1.0),
            "step grad {ds} vs {}",
            expect_ds * g
        );
    }
}

/// Clip-linear surrogate with the round offset frozen at the base point.
fn surrogate_quantize(t: &Tensor<f64>, s: f64, bounds: QuantBounds, offsets: &[f64]) -> Tensor<f64> {
    Tensor::from_fn(t.shape(), |i| {
        let u = (t.data()[i] / s).max(bounds.lo as f64).min(bounds.hi as f64);
        s * (u + offsets[i])
    })
}

fn frozen_offsets(t: &Tensor<f64>, s: f64, bounds: QuantBounds) -> Vec<f64> {
    t.data()
        .iter()
        .map(|&v| {
            let u = (v / s).max(bounds.lo as f64).min(bounds.hi as f64);
            u.round() - u
        })
        .collect()
}

/// Nudges elements away from half-grid and clip-boundary discontinuities.
fn nudge_off_discontinuities(t: &mut Tensor<f64>, s: f64, bounds: QuantBounds) {
    let margin = 2e-2;
    for v in t.data_mut() {
        loop {
            let u = *v / s;
            let frac = (u - u.floor() - 0.5).abs();
            let near_lo = (u - bounds.lo as f64).abs() < margin;
            let near_hi = (u - bounds.hi as f64).abs() < margin;
            if frac > margin && !near_lo && !near_hi {
                break;
            }
            *v += 0.05 * s;
        }
    }
}

/// Full quantized layer (quantize activations and weights, conv, BN, relu,
/// CE): the analytic STE/LSQ backward matches finite differences of the
/// surrogate chain.
#[test]
fn quant_layer_backward_matches_surrogate_fd() {
    let mut rng = Rng::new(28, Stream::Test);
    for trial in 0..5 {
        let b = [2u8, 3, 4][trial % 3];
        let wbounds = bounds_for(b, TensorKind::Weights).unwrap();
        let abounds = bounds_for(b, TensorKind::Activations).unwrap();
        let s_w = rng.range_f64(0.1, 0.4);
        let s_x = rng.range_f64(0.1, 0.4);
        let mut x = Tensor::<f64>::from_fn(&[2, 2, 5, 5], |_| rng.gaussian().abs());
        let mut w = Tensor::<f64>::from_fn(&[3, 2, 3, 3], |_| rng.gaussian() * 0.4);
        nudge_off_discontinuities(&mut x, s_x, abounds);
        nudge_off_discontinuities(&mut w, s_w, wbounds);
        let mut bn = BnState::<f64>::new(3);
        bn.gamma.value = Tensor::randn(&[3], 0.2, &mut rng).map(|v: f64| v + 1.0);
        let labels: Vec<usize> = (0..2).map(|_| rng.below(4) as usize).collect();
        let head_w = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let head_b = Tensor::<f64>::zeros(&[4]);

        let tail = |x_q: &Tensor<f64>, w_q: &Tensor<f64>| -> f64 {
            let conv = conv2d_forward(x_q, w_q, 1, 1).unwrap();
            let (z, _) = bn.clone().forward(&conv, Mode::Train).unwrap();
            let h = relu(&z);
            let pooled = global_avg_pool(&h).unwrap();
            let logits = fully_connected(&pooled, &head_w, &head_b).unwrap();
            softmax_cross_entropy(&logits, &labels).unwrap().0
        };

        // Check relu pre-activations are off the kink at the base point.
        {
            let x_q = quantize_round(&x, s_x, abounds).unwrap();
            let w_q = quantize_round(&w, s_w, wbounds).unwrap();
            let conv = conv2d_forward(&x_q, &w_q, 1, 1).unwrap();
            let (z, _) = bn.clone().forward(&conv, Mode::Train).unwrap();
            if z.data().iter().any(|v| v.abs() <= 5e-3) {
                continue;
            }
        }

        // Analytic backward through the real (rounded) forward.
        let x_q = quantize_round(&x, s_x, abounds).unwrap();
        let w_q = quantize_round(&w, s_w, wbounds).unwrap();
        let conv = conv2d_forward(&x_q, &w_q, 1, 1).unwrap();
        let mut bn_work = bn.clone();
        let (z, cache) = bn_work.forward(&conv, Mode::Train).unwrap();
        let h = relu(&z);
        let pooled = global_avg_pool(&h).unwrap();
        let logits = fully_connected(&pooled, &head_w, &head_b).unwrap();
        let (_, probs) = softmax_cross_entropy(&logits, &labels).unwrap();
        let dlogits = softmax_cross_entropy_backward(&probs, &labels);
        let (dpool, _, _) = fully_connected_backward(&pooled, &head_w, &dlogits);
        let dh = global_avg_pool_backward(h.shape(), &dpool);
        let dz = relu_backward(&z, &dh);
        let dconv = bn_work.backward(&cache, &dz);
        let (dx_q, dw_q) = conv2d_backward(&x_q, &w_q, 1, 1, &dconv).unwrap();
        let (dx, ds_x) = quantize_backward(&x, s_x, abounds, &dx_q).unwrap();
        let (dw, ds_w) = quantize_backward(&w, s_w, wbounds, &dw_q).unwrap();

        // Finite differences of the surrogate chain.
        let x_off = frozen_offsets(&x, s_x, abounds);
        let w_off = frozen_offsets(&w, s_w, wbounds);
        let f_x = |probe: &Tensor<f64>| {
            let xq = surrogate_quantize(probe, s_x, abounds, &x_off);
            let wq = surrogate_quantize(&w, s_w, wbounds, &w_off);
            tail(&xq, &wq)
        };
        let err = finite_difference_check(f_x, &x, &dx, 1e-5);
        assert!(err < FD_TOL, "quant layer input gradient error {err}");

        let f_w = |probe: &Tensor<f64>| {
            let xq = surrogate_quantize(&x, s_x, abounds, &x_off);
            let wq = surrogate_quantize(probe, s_w, wbounds, &w_off);
            tail(&xq, &wq)
        };
        let err = finite_difference_check(f_w, &w, &dw, 1e-5);
        assert!(err < FD_TOL, "quant layer weight gradient error {err}");

        // Step sizes: analytic gradients carry the LSQ scale g, the true
        // derivative does not; compare FD * g against the analytic value.
        let eps = 1e-6;
        let fd_sx = {
            let f = |s: f64| {
                let xq = surrogate_quantize(&x, s, abounds, &x_off);
                let wq = surrogate_quantize(&w, s_w, wbounds, &w_off);
                tail(&xq, &wq)
            };
            (f(s_x + eps) - f(s_x - eps)) / (2.0 * eps)
        };
        let g_x = lsq_grad_scale::<f64>(x.numel(), abounds);
        let rel = (fd_sx * g_x - ds_x).abs() / ds_x.abs().max(1e-8);
        assert!(rel < FD_TOL, "activation step gradient error {rel}");

        let fd_sw = {
            let f = |s: f64| {
                let xq = surrogate_quantize(&x, s_x, abounds, &x_off);
                let wq = surrogate_quantize(&w, s, wbounds, &w_off);
                tail(&xq, &wq)
            };
            (f(s_w + eps) - f(s_w - eps)) / (2.0 * eps)
        };
        let g_w = lsq_grad_scale::<f64>(w.numel(), wbounds);
        let rel = (fd_sw * g_w - ds_w).abs() / ds_w.abs().max(1e-8);
        assert!(rel < FD_TOL, "weight step gradient error {rel}");
    }
}
