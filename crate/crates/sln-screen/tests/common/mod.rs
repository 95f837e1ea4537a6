//! Shared test support: independent nested-loop oracles for the forward
//! operations, and a deterministic value generator. The oracles compute
//! every output element by direct summation and never touch the library's
//! im2col/matmul path.

#![allow(dead_code)]

pub mod gradsuite;

pub struct Xorshift(u64);

impl Xorshift {
    pub fn new(seed: u64) -> Self {
        Xorshift(seed.wrapping_mul(0x9e3779b97f4a7c15) | 1)
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }

    /// Uniform in [-1, 1).
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum OraclePadding {
    Same,
    Valid,
}

pub struct OracleConv {
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub data: Vec<f64>,
}

/// Direct-summation convolution over an HWC input with HWIO kernels.
pub fn conv2d_oracle(
    input: &[f64],
    (h, w, cin): (usize, usize, usize),
    kernels: &[f64],
    (kh, kw, cout): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    padding: OraclePadding,
) -> OracleConv {
    assert_eq!(input.len(), h * w * cin);
    assert_eq!(kernels.len(), kh * kw * cin * cout);
    assert_eq!(bias.len(), cout);
    let (out_h, out_w, pad_top, pad_left) = match padding {
        OraclePadding::Valid => ((h - kh) / stride + 1, (w - kw) / stride + 1, 0isize, 0isize),
        OraclePadding::Same => {
            let out_h = h.div_ceil(stride);
            let out_w = w.div_ceil(stride);
            let pad_h = ((out_h - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((out_w - 1) * stride + kw).saturating_sub(w);
            (out_h, out_w, (pad_h / 2) as isize, (pad_w / 2) as isize)
        }
    };
    let mut data = vec![0.0; out_h * out_w * cout];
    for oy in 0..out_h {
        for ox in 0..out_w {
            for oc in 0..cout {
                let mut sum = bias[oc];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - pad_top;
                        let ix = (ox * stride + kx) as isize - pad_left;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ic in 0..cin {
                            let iv = input[(iy as usize * w + ix as usize) * cin + ic];
                            let kv = kernels[((ky * kw + kx) * cin + ic) * cout + oc];
                            sum += iv * kv;
                        }
                    }
                }
                data[(oy * out_w + ox) * cout + oc] = sum;
            }
        }
    }
    OracleConv {
        out_h,
        out_w,
        out_c: cout,
        data,
    }
}

/// Brute-force window scan max pooling; returns values and winning flat
/// indices (first occurrence on ties).
pub fn maxpool2d_oracle(
    input: &[f64],
    (h, w, c): (usize, usize, usize),
    window: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, (usize, usize)) {
    let out_h = (h - window) / stride + 1;
    let out_w = (w - window) / stride + 1;
    let mut values = Vec::with_capacity(out_h * out_w * c);
    let mut argmax = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        for ox in 0..out_w {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for ky in 0..window {
                    for kx in 0..window {
                        let idx = ((oy * stride + ky) * w + (ox * stride + kx)) * c + ch;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                values.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (values, argmax, (out_h, out_w))
}

/// Naive two-loop vector-matrix multiply.
pub fn dense_oracle(input: &[f64], weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = input.len();
    let m = bias.len();
    assert_eq!(weights.len(), n * m);
    let mut out = bias.to_vec();
    for (j, o) in out.iter_mut().enumerate() {
        for (i, &x) in input.iter().enumerate() {
            *o += x * weights[i * m + j];
        }
    }
    out
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Sweep the convolution over every small geometry (extents <= 8) and
/// return (cases run, worst relative difference vs the oracle).
pub fn conv_sweep_vs_oracle() -> (usize, f64) {
    use sln_screen::ops::conv2d;
    use sln_screen::{ConvSpec, Padding, Tensor};

    let mut rng = Xorshift::new(0xC0FFEE);
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for h in 1..=8usize {
        for w in 1..=8usize {
            for kh in 1..=3usize {
                for kw in 1..=3usize {
                    for &cin in &[1usize, 3] {
                        for &cout in &[1usize, 2] {
                            for stride in 1..=2usize {
                                for &padding in &[Padding::Valid, Padding::Same] {
                                    if padding == Padding::Valid && (kh > h || kw > w) {
                                        continue;
                                    }
                                    let input32: Vec<f32> =
                                        (0..h * w * cin).map(|_| rng.next_unit() as f32).collect();
                                    let kernels32: Vec<f32> =
                                        (0..kh * kw * cin * cout).map(|_| rng.next_unit() as f32).collect();
                                    let bias32: Vec<f32> = (0..cout).map(|_| rng.next_unit() as f32).collect();
                                    let input: Vec<f64> = input32.iter().map(|&v| v as f64).collect();
                                    let kernels: Vec<f64> = kernels32.iter().map(|&v| v as f64).collect();
                                    let bias: Vec<f64> = bias32.iter().map(|&v| v as f64).collect();

                                    let spec = ConvSpec {
                                        kernel_h: kh,
                                        kernel_w: kw,
                                        in_channels: cin,
                                        out_channels: cout,
                                        stride,
                                        padding,
                                    };
                                    let got = conv2d(
                                        &Tensor::new(&[h, w, cin], input32.clone()).unwrap(),
                                        &spec,
                                        &Tensor::new(&[kh, kw, cin, cout], kernels32.clone()).unwrap(),
                                        &Tensor::new(&[cout], bias32.clone()).unwrap(),
                                    )
                                    .unwrap();
                                    let oracle_pad = match padding {
                                        Padding::Same => OraclePadding::Same,
                                        Padding::Valid => OraclePadding::Valid,
                                    };
                                    let want = conv2d_oracle(
                                        &input,
                                        (h, w, cin),
                                        &kernels,
                                        (kh, kw, cout),
                                        &bias,
                                        stride,
                                        oracle_pad,
                                    );
                                    assert_eq!(got.shape(), &[want.out_h, want.out_w, want.out_c]);
                                    for (g, o) in got.data().iter().zip(&want.data) {
                                        worst = worst.max(rel_diff(*g as f64, *o));
                                    }
                                    cases += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (cases, worst)
}

/// Sweep max pooling over every small geometry (extents <= 8); values
/// must match the oracle exactly and argmax indices must agree.
pub fn maxpool_sweep_vs_oracle() -> (usize, f64) {
    use sln_screen::ops::maxpool2d;
    use sln_screen::Tensor;

    let mut rng = Xorshift::new(0xBEEF);
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for h in 1..=8usize {
        for w in 1..=8usize {
            for &c in &[1usize, 3] {
                for window in 1..=h.min(w) {
                    for stride in 1..=3usize {
                        let input32: Vec<f32> = (0..h * w * c).map(|_| rng.next_unit() as f32).collect();
                        let input: Vec<f64> = input32.iter().map(|&v| v as f64).collect();
                        let t = Tensor::new(&[h, w, c], input32).unwrap();
                        let (got, got_arg) = maxpool2d(&t, window, stride).unwrap();
                        let (want, want_arg, (oh, ow)) = maxpool2d_oracle(&input, (h, w, c), window, stride);
                        assert_eq!(got.shape(), &[oh, ow, c]);
                        assert_eq!(got_arg, want_arg);
                        for (g, o) in got.data().iter().zip(&want) {
                            worst = worst.max(rel_diff(*g as f64, *o));
                        }
                        cases += 1;
                    }
                }
            }
        }
    }
    (cases, worst)
}

/// Sweep the dense layer over every small geometry (extents <= 8).
pub fn dense_sweep_vs_oracle() -> (usize, f64) {
    use sln_screen::ops::dense;
    use sln_screen::Tensor;

    let mut rng = Xorshift::new(0xD00D);
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for n in 1..=8usize {
        for m in 1..=8usize {
            for _rep in 0..3 {
                let input32: Vec<f32> = (0..n).map(|_| rng.next_unit() as f32).collect();
                let weights32: Vec<f32> = (0..n * m).map(|_| rng.next_unit() as f32).collect();
                let bias32: Vec<f32> = (0..m).map(|_| rng.next_unit() as f32).collect();
                let input: Vec<f64> = input32.iter().map(|&v| v as f64).collect();
                let weights: Vec<f64> = weights32.iter().map(|&v| v as f64).collect();
                let bias: Vec<f64> = bias32.iter().map(|&v| v as f64).collect();
                let got = dense(
                    &Tensor::new(&[n], input32).unwrap(),
                    &Tensor::new(&[n, m], weights32.clone()).unwrap(),
                    &Tensor::new(&[m], bias32.clone()).unwrap(),
                )
                .unwrap();
                let want = dense_oracle(&input, &weights, &bias);
                for (g, o) in got.data().iter().zip(&want) {
                    worst = worst.max(rel_diff(*g as f64, *o));
                }
                cases += 1;
            }
        }
    }
    (cases, worst)
}
