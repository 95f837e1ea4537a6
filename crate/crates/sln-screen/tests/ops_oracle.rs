//! Forward operations against independent nested-loop oracles.

mod common;

use common::{conv2d_oracle, dense_oracle, maxpool2d_oracle, OraclePadding, Xorshift};
use sln_screen::ops::{conv2d, dense, maxpool2d};
use sln_screen::{ConvSpec, Padding, Tensor};

#[test]
fn conv_diagonal_kernel_fixture() {
    // 3x3 input, 2x2 identity-diagonal kernel, valid padding, stride 1.
    let input = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
    let kernel = [1.0, 0.0, 0.0, 1.0];
    let oracle = conv2d_oracle(&input, (3, 3, 1), &kernel, (2, 2, 1), &[0.0], 1, OraclePadding::Valid);
    // frozen from the oracle
    assert_eq!(oracle.data, vec![6.0, 8.0, 12.0, 14.0]);

    let spec = ConvSpec {
        kernel_h: 2,
        kernel_w: 2,
        in_channels: 1,
        out_channels: 1,
        stride: 1,
        padding: Padding::Valid,
    };
    let got = conv2d(
        &Tensor::new(&[3, 3, 1], input.iter().map(|&v| v as f32).collect()).unwrap(),
        &spec,
        &Tensor::new(&[2, 2, 1, 1], kernel.iter().map(|&v| v as f32).collect()).unwrap(),
        &Tensor::zeros(&[1]),
    )
    .unwrap();
    assert_eq!(got.shape(), &[2, 2, 1]);
    assert_eq!(got.data(), &[6.0, 8.0, 12.0, 14.0]);
}

#[test]
fn maxpool_random_5x5_matches_oracle() {
    let mut rng = Xorshift::new(55);
    let input32: Vec<f32> = (0..25).map(|_| rng.next_unit() as f32).collect();
    let input: Vec<f64> = input32.iter().map(|&v| v as f64).collect();
    let (want, want_arg, (oh, ow)) = maxpool2d_oracle(&input, (5, 5, 1), 2, 2);
    assert_eq!((oh, ow), (2, 2));

    let t = Tensor::new(&[5, 5, 1], input32).unwrap();
    let (got, got_arg) = maxpool2d(&t, 2, 2).unwrap();
    assert_eq!(got_arg, want_arg);
    for (g, o) in got.data().iter().zip(&want) {
        assert_eq!(*g as f64, *o);
    }
}

#[test]
fn dense_random_3_to_2_matches_oracle() {
    let mut rng = Xorshift::new(32);
    let input: Vec<f64> = (0..3).map(|_| rng.next_unit()).collect();
    let weights: Vec<f64> = (0..6).map(|_| rng.next_unit()).collect();
    let bias: Vec<f64> = (0..2).map(|_| rng.next_unit()).collect();
    let want = dense_oracle(&input, &weights, &bias);

    let got = dense(
        &Tensor::new(&[3], input.iter().map(|&v| v as f32).collect()).unwrap(),
        &Tensor::new(&[3, 2], weights.iter().map(|&v| v as f32).collect()).unwrap(),
        &Tensor::new(&[2], bias.iter().map(|&v| v as f32).collect()).unwrap(),
    )
    .unwrap();
    for (g, o) in got.data().iter().zip(&want) {
        assert!((*g as f64 - o).abs() < 1e-6);
    }
}

#[test]
fn exhaustive_small_shape_sweeps() {
    let (conv_cases, conv_worst) = common::conv_sweep_vs_oracle();
    assert!(conv_cases > 5000, "conv sweep ran {conv_cases} cases");
    assert!(conv_worst < 1e-5, "conv worst rel diff {conv_worst}");

    let (pool_cases, pool_worst) = common::maxpool_sweep_vs_oracle();
    assert!(pool_cases > 1000, "pool sweep ran {pool_cases} cases");
    assert_eq!(pool_worst, 0.0, "pool must copy window maxima exactly");

    let (dense_cases, dense_worst) = common::dense_sweep_vs_oracle();
    assert!(dense_cases > 150, "dense sweep ran {dense_cases} cases");
    assert!(dense_worst < 1e-5, "dense worst rel diff {dense_worst}");
}
