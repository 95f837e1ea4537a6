//! Forward operations of the network and their analytic gradients.
//!
//! Convolution runs as im2col followed by a matrix multiply; the direct
//! nested-loop form lives in the test suite as an independent oracle.

use crate::error::{Error, Result};
use crate::matmul;
use crate::tensor::{ConvSpec, Scalar, Tensor};

fn shape_err(context: &str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        context: context.into(),
        left: format!("{left:?}"),
        right: format!("{right:?}"),
    }
}

/// Unfold conv windows of an HWC image into a (out_h*out_w) x (kh*kw*c)
/// row-major matrix, zero-filling out-of-bounds taps.
fn im2col<T: Scalar>(
    input: &[T],
    h: usize,
    w: usize,
    c: usize,
    spec: &ConvSpec,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let k = spec.kernel_h * spec.kernel_w * c;
    let (pad_top, pad_left) = spec.pad_top_left(h, w);
    let mut cols = vec![T::zero(); out_h * out_w * k];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = (oy * out_w + ox) * k;
            for ky in 0..spec.kernel_h {
                let iy = (oy * spec.stride + ky) as isize - pad_top as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..spec.kernel_w {
                    let ix = (ox * spec.stride + kx) as isize - pad_left as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = row + (ky * spec.kernel_w + kx) * c;
                    cols[dst..dst + c].copy_from_slice(&input[src..src + c]);
                }
            }
        }
    }
    cols
}

/// Scatter-add of an im2col-layout gradient back onto the input image.
fn col2im_acc<T: Scalar>(
    d_cols: &[T],
    h: usize,
    w: usize,
    c: usize,
    spec: &ConvSpec,
    out_h: usize,
    out_w: usize,
    d_input: &mut [T],
) {
    let k = spec.kernel_h * spec.kernel_w * c;
    let (pad_top, pad_left) = spec.pad_top_left(h, w);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = (oy * out_w + ox) * k;
            for ky in 0..spec.kernel_h {
                let iy = (oy * spec.stride + ky) as isize - pad_top as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..spec.kernel_w {
                    let ix = (ox * spec.stride + kx) as isize - pad_left as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let src = row + (ky * spec.kernel_w + kx) * c;
                    for ch in 0..c {
                        d_input[dst + ch] += d_cols[src + ch];
                    }
                }
            }
        }
    }
}

fn conv_check_shapes<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    if input.rank() != 3 {
        return Err(shape_err("conv2d input (want HxWxC)", input.shape(), &[]));
    }
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if c != spec.in_channels {
        return Err(shape_err(
            "conv2d input channels vs spec",
            input.shape(),
            &[spec.in_channels],
        ));
    }
    if kernels.shape() != spec.kernel_shape() {
        return Err(shape_err(
            "conv2d kernels vs spec",
            kernels.shape(),
            &spec.kernel_shape(),
        ));
    }
    if bias.shape() != [spec.out_channels] {
        return Err(shape_err(
            "conv2d bias vs spec",
            bias.shape(),
            &[spec.out_channels],
        ));
    }
    Ok((h, w, c))
}

/// 2-D convolution over an HWC input: every output element is the dot
/// product of the kernel with the aligned input window, plus bias.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w, c) = conv_check_shapes(input, spec, kernels, bias)?;
    let (out_h, out_w) = spec.output_hw(h, w)?;
    let m = out_h * out_w;
    let k = spec.kernel_h * spec.kernel_w * c;
    let n = spec.out_channels;

    let cols = im2col(input.data(), h, w, c, spec, out_h, out_w);
    let mut out = vec![T::zero(); m * n];
    for row in out.chunks_exact_mut(n) {
        row.copy_from_slice(bias.data());
    }
    matmul::matmul_acc(&cols, kernels.data(), m, k, n, &mut out);
    Tensor::new(&[out_h, out_w, n], out)
}

pub struct ConvGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of `conv2d` with respect to input, kernels, and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (out_h, out_w) = spec.output_hw(h, w)?;
    if grad_out.shape() != [out_h, out_w, spec.out_channels] {
        return Err(shape_err(
            "conv2d_backward grad",
            grad_out.shape(),
            &[out_h, out_w, spec.out_channels],
        ));
    }
    let m = out_h * out_w;
    let k = spec.kernel_h * spec.kernel_w * c;
    let n = spec.out_channels;
    let g = grad_out.data();

    let mut d_bias = vec![T::zero(); n];
    for row in g.chunks_exact(n) {
        for (b, &gv) in d_bias.iter_mut().zip(row) {
            *b += gv;
        }
    }

    let cols = im2col(input.data(), h, w, c, spec, out_h, out_w);
    let mut d_kernels = vec![T::zero(); k * n];
    matmul::matmul_at_b_acc(&cols, g, m, k, n, &mut d_kernels);

    // d_cols = g (m x n) * kernels^T (n x k), then fold back onto the image.
    let kt = matmul::transpose(kernels.data(), k, n);
    let mut d_cols = vec![T::zero(); m * k];
    matmul::matmul_acc(g, &kt, m, n, k, &mut d_cols);
    let mut d_input = vec![T::zero(); input.len()];
    col2im_acc(&d_cols, h, w, c, spec, out_h, out_w, &mut d_input);

    Ok(ConvGrads {
        input: Tensor::new(input.shape(), d_input)?,
        kernels: Tensor::new(&spec.kernel_shape(), d_kernels)?,
        bias: Tensor::new(&[n], d_bias)?,
    })
}

/// Max pooling with floor semantics: trailing partial windows are dropped.
/// Returns the pooled map and, per output element, the flat input index
/// that won (first occurrence on ties, row-major scan order).
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if input.rank() != 3 {
        return Err(shape_err("maxpool2d input (want HxWxC)", input.shape(), &[]));
    }
    if window == 0 || stride == 0 {
        return Err(Error::InvalidTensor("pool window and stride must be >= 1".into()));
    }
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if window > h || window > w {
        return Err(Error::WindowTooLarge {
            window,
            extent: h.min(w),
        });
    }
    let out_h = (h - window) / stride + 1;
    let out_w = (w - window) / stride + 1;
    let data = input.data();
    let mut out = vec![T::zero(); out_h * out_w * c];
    let mut argmax = vec![0usize; out_h * out_w * c];
    for oy in 0..out_h {
        for ox in 0..out_w {
            for ch in 0..c {
                let mut best_idx = (oy * stride * w + ox * stride) * c + ch;
                let mut best = data[best_idx];
                for ky in 0..window {
                    let iy = oy * stride + ky;
                    for kx in 0..window {
                        let ix = ox * stride + kx;
                        let idx = (iy * w + ix) * c + ch;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (oy * out_w + ox) * c + ch;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok((Tensor::new(&[out_h, out_w, c], out)?, argmax))
}

/// Routes each upstream gradient onto the input cell that won its window.
pub fn maxpool2d_backward<T: Scalar>(
    argmax: &[usize],
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(shape_err(
            "maxpool2d_backward argmax vs grad",
            &[argmax.len()],
            grad_out.shape(),
        ));
    }
    let mut d_input = Tensor::zeros(input_shape);
    let d = d_input.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(d_input)
}

/// Fully connected layer: out[j] = sum_i input[i] * weights[i,j] + bias[j].
pub fn dense<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rank() != 1 || weights.rank() != 2 || weights.shape()[0] != input.len() {
        return Err(shape_err("dense input vs weights", input.shape(), weights.shape()));
    }
    let m = weights.shape()[1];
    if bias.shape() != [m] {
        return Err(shape_err("dense bias", bias.shape(), &[m]));
    }
    let mut out = bias.data().to_vec();
    matmul::matmul_acc(input.data(), weights.data(), 1, input.len(), m, &mut out);
    Tensor::new(&[m], out)
}

pub struct DenseGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let n = input.len();
    let m = weights.shape()[1];
    if grad_out.shape() != [m] {
        return Err(shape_err("dense_backward grad", grad_out.shape(), &[m]));
    }
    let g = grad_out.data();
    let mut d_weights = vec![T::zero(); n * m];
    matmul::matmul_at_b_acc(input.data(), g, 1, n, m, &mut d_weights);
    let d_input: Vec<T> = (0..n)
        .map(|i| matmul::dot(&weights.data()[i * m..(i + 1) * m], g))
        .collect();
    Ok(DenseGrads {
        input: Tensor::new(&[n], d_input)?,
        weights: Tensor::new(weights.shape(), d_weights)?,
        bias: Tensor::new(&[m], g.to_vec())?,
    })
}

/// Elementwise max(0, x).
pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient passes only where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(shape_err("relu_backward", input.shape(), grad_out.shape()));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data)
}

/// Numerically safe softmax (max subtraction before exponentiation).
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let max = logits
        .data()
        .iter()
        .cloned()
        .fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.data().iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().cloned().sum();
    Tensor::new(logits.shape(), exps.into_iter().map(|e| e / sum).collect())
        .expect("softmax preserves shape")
}

const PROB_FLOOR: f64 = 1e-12;

/// Negative log-likelihood of the target class; probabilities are clamped
/// to 1e-12 before the log.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, target: usize) -> Result<T> {
    if target >= probs.len() {
        return Err(Error::TargetOutOfRange {
            target,
            classes: probs.len(),
        });
    }
    let p = probs.data()[target].max(T::from_f64(PROB_FLOOR));
    Ok(-p.ln())
}

/// Gradient of cross-entropy at the logits when probs came from softmax:
/// probs - onehot(target).
pub fn softmax_cross_entropy_grad<T: Scalar>(probs: &Tensor<T>, target: usize) -> Result<Tensor<T>> {
    if target >= probs.len() {
        return Err(Error::TargetOutOfRange {
            target,
            classes: probs.len(),
        });
    }
    let mut grad = probs.clone();
    grad.data_mut()[target] -= T::one();
    Ok(grad)
}
