//! Reusable gradient-check drivers (f64, central differences). Each
//! returns the worst relative error observed over the requested number of
//! accepted seeds; piecewise ops resample deterministically until the
//! decision margins are far larger than the step.

use std::cell::RefCell;

use sln_screen::gradcheck::{central_difference, check, compare, DEFAULT_STEP};
use sln_screen::nn::{build_model, ForwardMode, Model, ModelConfig};
use sln_screen::ops;
use sln_screen::{ConvSpec, Padding, Tensor};

use super::Xorshift;

/// Decision margin required before finite-differencing a piecewise op.
pub const MARGIN: f64 = 1e-3;

pub fn dense_layer_worst(seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 7..7 + seeds {
        let mut rng = Xorshift::new(seed);
        let (n, m) = (5, 3);
        let input: Vec<f64> = (0..n).map(|_| rng.next_unit()).collect();
        let weights: Vec<f64> = (0..n * m).map(|_| rng.next_unit()).collect();
        let bias: Vec<f64> = (0..m).map(|_| rng.next_unit()).collect();
        let c: Vec<f64> = (0..m).map(|_| rng.next_unit()).collect();

        let loss = |x: &[f64]| -> f64 {
            let input = Tensor::new(&[n], x[..n].to_vec()).unwrap();
            let weights = Tensor::new(&[n, m], x[n..n + n * m].to_vec()).unwrap();
            let bias = Tensor::new(&[m], x[n + n * m..].to_vec()).unwrap();
            let out = ops::dense(&input, &weights, &bias).unwrap();
            out.data().iter().zip(&c).map(|(o, w)| o * w).sum()
        };

        let grads = ops::dense_backward(
            &Tensor::new(&[n], input.clone()).unwrap(),
            &Tensor::new(&[n, m], weights.clone()).unwrap(),
            &Tensor::new(&[m], c.clone()).unwrap(),
        )
        .unwrap();
        let mut analytic = grads.input.into_data();
        analytic.extend(grads.weights.into_data());
        analytic.extend(grads.bias.into_data());

        let mut x = input;
        x.extend(weights);
        x.extend(bias);
        let report = check(loss, &x, &analytic, DEFAULT_STEP).unwrap();
        worst = worst.max(report.max_rel_error);
    }
    worst
}

pub fn conv_layer_worst(seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 7..7 + seeds {
        for padding in [Padding::Same, Padding::Valid] {
            let mut rng = Xorshift::new(seed * 2 + (padding == Padding::Valid) as u64);
            let (h, w, cin, cout, k) = (6, 6, 2, 3, 3);
            let spec = ConvSpec {
                kernel_h: k,
                kernel_w: k,
                in_channels: cin,
                out_channels: cout,
                stride: 1,
                padding,
            };
            let (oh, ow) = spec.output_hw(h, w).unwrap();
            let n_in = h * w * cin;
            let n_k = k * k * cin * cout;
            let input: Vec<f64> = (0..n_in).map(|_| rng.next_unit()).collect();
            let kernels: Vec<f64> = (0..n_k).map(|_| rng.next_unit()).collect();
            let bias: Vec<f64> = (0..cout).map(|_| rng.next_unit()).collect();
            let c: Vec<f64> = (0..oh * ow * cout).map(|_| rng.next_unit()).collect();
            let c_tensor = Tensor::new(&[oh, ow, cout], c.clone()).unwrap();

            let loss = |x: &[f64]| -> f64 {
                let input = Tensor::new(&[h, w, cin], x[..n_in].to_vec()).unwrap();
                let kernels = Tensor::new(&[k, k, cin, cout], x[n_in..n_in + n_k].to_vec()).unwrap();
                let bias = Tensor::new(&[cout], x[n_in + n_k..].to_vec()).unwrap();
                let out = ops::conv2d(&input, &spec, &kernels, &bias).unwrap();
                out.data().iter().zip(&c).map(|(o, w)| o * w).sum()
            };

            let grads = ops::conv2d_backward(
                &Tensor::new(&[h, w, cin], input.clone()).unwrap(),
                &spec,
                &Tensor::new(&[k, k, cin, cout], kernels.clone()).unwrap(),
                &c_tensor,
            )
            .unwrap();
            let mut analytic = grads.input.into_data();
            analytic.extend(grads.kernels.into_data());
            analytic.extend(grads.bias.into_data());

            let mut x = input;
            x.extend(kernels);
            x.extend(bias);
            let report = check(loss, &x, &analytic, DEFAULT_STEP).unwrap();
            worst = worst.max(report.max_rel_error);
        }
    }
    worst
}

pub fn relu_worst(seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 7..7 + seeds {
        let mut rng = Xorshift::new(seed * 31);
        let n = 24;
        // keep every coordinate at least MARGIN away from the kink at 0
        let input: Vec<f64> = (0..n)
            .map(|_| {
                let v = rng.next_unit();
                v.signum() * (MARGIN + v.abs())
            })
            .collect();
        let c: Vec<f64> = (0..n).map(|_| rng.next_unit()).collect();
        let input_t = Tensor::new(&[n], input.clone()).unwrap();
        let analytic = ops::relu_backward(&input_t, &Tensor::new(&[n], c.clone()).unwrap())
            .unwrap()
            .into_data();
        let loss = |x: &[f64]| -> f64 {
            let t = Tensor::new(&[n], x.to_vec()).unwrap();
            ops::relu(&t).data().iter().zip(&c).map(|(o, w)| o * w).sum()
        };
        let report = check(loss, &input, &analytic, DEFAULT_STEP).unwrap();
        worst = worst.max(report.max_rel_error);
    }
    worst
}

pub fn softmax_ce_worst(seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 7..7 + seeds {
        let mut rng = Xorshift::new(seed * 67);
        let k = 4;
        let logits: Vec<f64> = (0..k).map(|_| 3.0 * rng.next_unit()).collect();
        let target = (rng.next_u64() % k as u64) as usize;

        let probs = ops::softmax(&Tensor::new(&[k], logits.clone()).unwrap());
        let analytic = ops::softmax_cross_entropy_grad(&probs, target).unwrap().into_data();
        let loss = |x: &[f64]| -> f64 {
            let p = ops::softmax(&Tensor::new(&[k], x.to_vec()).unwrap());
            ops::cross_entropy(&p, target).unwrap()
        };
        let report = check(loss, &logits, &analytic, DEFAULT_STEP).unwrap();
        worst = worst.max(report.max_rel_error);
    }
    worst
}

/// Smallest winner/runner-up gap over all pool windows.
fn pool_margin(input: &[f64], dims: (usize, usize, usize), window: usize, stride: usize) -> f64 {
    let (h, w, c) = dims;
    let out_h = (h - window) / stride + 1;
    let out_w = (w - window) / stride + 1;
    let mut gap = f64::INFINITY;
    for oy in 0..out_h {
        for ox in 0..out_w {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut second = f64::NEG_INFINITY;
                for ky in 0..window {
                    for kx in 0..window {
                        let v = input[((oy * stride + ky) * w + (ox * stride + kx)) * c + ch];
                        if v > best {
                            second = best;
                            best = v;
                        } else if v > second {
                            second = v;
                        }
                    }
                }
                if second.is_finite() {
                    gap = gap.min(best - second);
                }
            }
        }
    }
    gap
}

/// Finite differences plus the routing property: gradient lands only on
/// argmax cells.
pub fn maxpool_worst(seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut accepted = 0;
    let mut candidate = 0u64;
    while accepted < seeds {
        candidate += 1;
        let mut rng = Xorshift::new(candidate * 131);
        let (h, w, c) = (6, 6, 2);
        let input: Vec<f64> = (0..h * w * c).map(|_| rng.next_unit()).collect();
        if pool_margin(&input, (h, w, c), 2, 2) < MARGIN {
            continue;
        }
        accepted += 1;

        let t = Tensor::new(&[h, w, c], input.clone()).unwrap();
        let (out, argmax) = ops::maxpool2d(&t, 2, 2).unwrap();
        let c_up: Vec<f64> = (0..out.len()).map(|_| rng.next_unit()).collect();
        let grad_out = Tensor::new(out.shape(), c_up.clone()).unwrap();
        let d_input = ops::maxpool2d_backward(&argmax, &grad_out, &[h, w, c]).unwrap();

        for (i, &g) in d_input.data().iter().enumerate() {
            if !argmax.contains(&i) {
                assert_eq!(g, 0.0, "non-winning cell {i} received gradient");
            }
        }

        let loss = |x: &[f64]| -> f64 {
            let t = Tensor::new(&[h, w, c], x.to_vec()).unwrap();
            let (out, _) = ops::maxpool2d(&t, 2, 2).unwrap();
            out.data().iter().zip(&c_up).map(|(o, w)| o * w).sum()
        };
        let report = check(loss, &input, d_input.data(), DEFAULT_STEP).unwrap();
        worst = worst.max(report.max_rel_error);
    }
    worst
}

fn reduced_config(seed: u64) -> ModelConfig {
    ModelConfig::with_input([12, 12, 3], &[2, 4], 16, 0.25, seed)
}

/// Mean cross-entropy of the model on a fixed batch, as a function of the
/// flattened parameter vector.
fn batch_loss(
    model: &RefCell<Model<f64>>,
    flat: &[f64],
    batch: &Tensor<f64>,
    targets: &[usize],
    dropout_seed: u64,
) -> f64 {
    let mut m = model.borrow_mut();
    m.set_flat_params(flat).unwrap();
    let probs = m.forward_batch(batch, ForwardMode::Train { dropout_seed }).unwrap();
    let k = probs.shape()[1];
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = Tensor::new(&[k], probs.data()[i * k..(i + 1) * k].to_vec()).unwrap();
        total += ops::cross_entropy(&row, t).unwrap();
    }
    total / targets.len() as f64
}

/// Whole reduced model (conv/relu/pool blocks, fused dense, dropout,
/// head) against central differences over all parameters.
pub fn whole_model_worst(seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut accepted = 0;
    let mut candidate = 0u64;
    while accepted < seeds {
        candidate += 1;
        let config = reduced_config(candidate);
        let model: Model<f64> = build_model(&config).unwrap();
        let mut rng = Xorshift::new(candidate * 7919);
        let batch = Tensor::from_fn(&[2, 12, 12, 3], |_| 0.5 + 0.5 * rng.next_unit());
        let targets = [(rng.next_u64() % 4) as usize, (rng.next_u64() % 4) as usize];

        // reject draws whose relu/pool decisions sit near a boundary
        let mut margin = f64::INFINITY;
        for i in 0..2 {
            let sample = Tensor::new(&[12, 12, 3], batch.data()[i * 432..(i + 1) * 432].to_vec()).unwrap();
            margin = margin.min(model.decision_margin(&sample).unwrap());
        }
        if margin < MARGIN {
            continue;
        }
        accepted += 1;

        let dropout_seed = candidate * 3 + 1;
        let (grads, _) = model.backward_batch(&batch, &targets, Some(dropout_seed)).unwrap();
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();

        let flat = model.flat_params();
        let cell = RefCell::new(model);
        let numeric = central_difference(
            |x| batch_loss(&cell, x, &batch, &targets, dropout_seed),
            &flat,
            DEFAULT_STEP,
        );
        let report = compare(&analytic, &numeric).unwrap();
        worst = worst.max(report.max_rel_error);
    }
    worst
}
