//! Forward-mode numeric kernels: convolution, depthwise convolution, dense,
//! batch normalization, activations, pooling, elementwise add.
//!
//! Convolutions run as patch-flattening plus matrix multiply. Accumulation
//! stays in f32 throughout.

use crate::tensor::{
    conv_out_dim, same_padding, ActivationKind, BatchNormParams, ConvParams, Padding, PoolKind,
    Tensor, TensorError,
};

const MR: usize = 4;
const NR: usize = 64;

/// C += A * B for row-major A (m x k), B (k x n), C (m x n).
///
/// Register-tiled main region with plain accumulation loops on the edges.
pub(crate) fn gemm_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let m_main = m - m % MR;
    let n_main = n - n % NR;

    for i0 in (0..m_main).step_by(MR) {
        for j0 in (0..n_main).step_by(NR) {
            let mut acc = [[0.0f32; NR]; MR];
            for kk in 0..k {
                let b_row = &b[kk * n + j0..kk * n + j0 + NR];
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * k + kk];
                    for (dst, &bv) in acc_r.iter_mut().zip(b_row) {
                        *dst += av * bv;
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                let row = (i0 + r) * n + j0;
                for (dst, &v) in c[row..row + NR].iter_mut().zip(acc_r) {
                    *dst += v;
                }
            }
        }
        if n_main < n {
            for r in 0..MR {
                let i = i0 + r;
                axpy_row(
                    &a[i * k..i * k + k],
                    b,
                    &mut c[i * n..(i + 1) * n],
                    n,
                    n_main,
                );
            }
        }
    }
    for i in m_main..m {
        axpy_row(&a[i * k..i * k + k], b, &mut c[i * n..(i + 1) * n], n, 0);
    }
}

fn axpy_row(a_row: &[f32], b: &[f32], c_row: &mut [f32], n: usize, j0: usize) {
    for (kk, &av) in a_row.iter().enumerate() {
        let b_row = &b[kk * n + j0..(kk + 1) * n];
        for (cv, &bv) in c_row[j0..].iter_mut().zip(b_row) {
            *cv += av * bv;
        }
    }
}

/// Flattens receptive fields of one NHWC image into a (oh*ow) x (kh*kw*c)
/// patch matrix, zero-filling out-of-bounds taps.
#[allow(clippy::too_many_arguments)]
fn im2col(
    img: &[f32],
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    out_hw: (usize, usize),
    col: &mut [f32],
) {
    let (oh, ow) = out_hw;
    let (pad_top, pad_left) = pad;
    let patch = kh * kw * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let dst0 = (oy * ow + ox) * patch;
            for ky in 0..kh {
                let iy = (oy * stride.0 + ky) as isize - pad_top as isize;
                let dst_row = dst0 + ky * kw * c;
                if iy < 0 || iy >= h as isize {
                    col[dst_row..dst_row + kw * c].fill(0.0);
                    continue;
                }
                let iy = iy as usize;
                for kx in 0..kw {
                    let ix = (ox * stride.1 + kx) as isize - pad_left as isize;
                    let dst = dst_row + kx * c;
                    if ix < 0 || ix >= w as isize {
                        col[dst..dst + c].fill(0.0);
                    } else {
                        let src = (iy * w + ix as usize) * c;
                        col[dst..dst + c].copy_from_slice(&img[src..src + c]);
                    }
                }
            }
        }
    }
}

fn check_bias(op: &'static str, bias: Option<&[f32]>, cout: usize) -> Result<(), TensorError> {
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(TensorError::ShapeMismatch {
                op,
                left: vec![b.len()],
                right: vec![cout],
            });
        }
    }
    Ok(())
}

fn fill_bias(out: &mut [f32], bias: Option<&[f32]>, cout: usize) {
    match bias {
        Some(b) => {
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(b);
            }
        }
        None => out.fill(0.0),
    }
}

/// 2-D convolution of NHWC input with a [KH, KW, Cin, Cout] kernel.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&[f32]>,
    params: &ConvParams,
) -> Result<Tensor, TensorError> {
    if input.rank() != 4 {
        return Err(TensorError::Rank {
            op: "conv2d",
            expected: 4,
            shape: input.shape().to_vec(),
        });
    }
    if kernel.rank() != 4 {
        return Err(TensorError::Rank {
            op: "conv2d",
            expected: 4,
            shape: kernel.shape().to_vec(),
        });
    }
    let [n, h, w, cin] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let [kh, kw, kcin, cout] = [
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    ];
    if cin != kcin {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: input.shape().to_vec(),
            right: kernel.shape().to_vec(),
        });
    }
    check_bias("conv2d", bias, cout)?;
    let empty = || TensorError::EmptyOutput {
        op: "conv2d",
        input: input.shape().to_vec(),
        kernel: kernel.shape().to_vec(),
        stride: params.stride,
    };
    let oh = conv_out_dim(h, kh, params.stride.0, params.padding).ok_or_else(empty)?;
    let ow = conv_out_dim(w, kw, params.stride.1, params.padding).ok_or_else(empty)?;

    let mut out = Tensor::zeros(vec![n, oh, ow, cout]);
    let img_len = h * w * cin;
    let out_len = oh * ow * cout;
    let m = oh * ow;
    let patch = kh * kw * cin;

    // A 1x1 stride-1 kernel reads the input as the patch matrix directly.
    let pointwise = kh == 1 && kw == 1 && params.stride == (1, 1);
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![0.0f32; m * patch]
    };
    let pad = match params.padding {
        Padding::Same => (
            same_padding(h, kh, params.stride.0).0,
            same_padding(w, kw, params.stride.1).0,
        ),
        Padding::Valid => (0, 0),
    };

    for i in 0..n {
        let img = &input.data()[i * img_len..(i + 1) * img_len];
        let dst = &mut out.data_mut()[i * out_len..(i + 1) * out_len];
        fill_bias(dst, bias, cout);
        if pointwise {
            gemm_acc(img, kernel.data(), dst, m, cin, cout);
        } else {
            im2col(
                img,
                h,
                w,
                cin,
                kh,
                kw,
                params.stride,
                pad,
                (oh, ow),
                &mut col,
            );
            gemm_acc(&col, kernel.data(), dst, m, patch, cout);
        }
    }
    Ok(out)
}

/// Depthwise convolution: channel c of the output convolves only channel c
/// of the input. Kernel layout [KH, KW, C, 1].
pub fn depthwise_conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&[f32]>,
    params: &ConvParams,
) -> Result<Tensor, TensorError> {
    if input.rank() != 4 || kernel.rank() != 4 {
        return Err(TensorError::Rank {
            op: "depthwise_conv2d",
            expected: 4,
            shape: if input.rank() != 4 {
                input.shape().to_vec()
            } else {
                kernel.shape().to_vec()
            },
        });
    }
    let [n, h, w, c] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let [kh, kw, kc, mult] = [
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    ];
    if kc != c || mult != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "depthwise_conv2d",
            left: input.shape().to_vec(),
            right: kernel.shape().to_vec(),
        });
    }
    check_bias("depthwise_conv2d", bias, c)?;
    let empty = || TensorError::EmptyOutput {
        op: "depthwise_conv2d",
        input: input.shape().to_vec(),
        kernel: kernel.shape().to_vec(),
        stride: params.stride,
    };
    let oh = conv_out_dim(h, kh, params.stride.0, params.padding).ok_or_else(empty)?;
    let ow = conv_out_dim(w, kw, params.stride.1, params.padding).ok_or_else(empty)?;
    let (pad_top, pad_left) = match params.padding {
        Padding::Same => (
            same_padding(h, kh, params.stride.0).0,
            same_padding(w, kw, params.stride.1).0,
        ),
        Padding::Valid => (0, 0),
    };

    let mut out = Tensor::zeros(vec![n, oh, ow, c]);
    let img_len = h * w * c;
    let out_len = oh * ow * c;
    for i in 0..n {
        let img = &input.data()[i * img_len..(i + 1) * img_len];
        let dst = &mut out.data_mut()[i * out_len..(i + 1) * out_len];
        fill_bias(dst, bias, c);
        for oy in 0..oh {
            for ox in 0..ow {
                let acc = &mut dst[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                for ky in 0..kh {
                    let iy = (oy * params.stride.0 + ky) as isize - pad_top as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * params.stride.1 + kx) as isize - pad_left as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = (iy as usize * w + ix as usize) * c;
                        let tap = (ky * kw + kx) * c;
                        let img_row = &img[src..src + c];
                        let ker_row = &kernel.data()[tap..tap + c];
                        for ((a, &x), &k) in acc.iter_mut().zip(img_row).zip(ker_row) {
                            *a += x * k;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Affine map: out[N, Out] = input[N, In] . weight[In, Out] + bias.
pub fn dense(input: &Tensor, weight: &Tensor, bias: Option<&[f32]>) -> Result<Tensor, TensorError> {
    if input.rank() != 2 || weight.rank() != 2 {
        return Err(TensorError::Rank {
            op: "dense",
            expected: 2,
            shape: if input.rank() != 2 {
                input.shape().to_vec()
            } else {
                weight.shape().to_vec()
            },
        });
    }
    let (n, d_in) = (input.shape()[0], input.shape()[1]);
    let (w_in, d_out) = (weight.shape()[0], weight.shape()[1]);
    if d_in != w_in {
        return Err(TensorError::ShapeMismatch {
            op: "dense",
            left: input.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    check_bias("dense", bias, d_out)?;
    let mut out = Tensor::zeros(vec![n, d_out]);
    fill_bias(out.data_mut(), bias, d_out);
    gemm_acc(input.data(), weight.data(), out.data_mut(), n, d_in, d_out);
    Ok(out)
}

/// Inference-mode batch norm over the channel (last) axis:
/// gamma * (x - mean) / sqrt(variance + eps) + beta.
pub fn batch_norm_inference(input: &Tensor, p: &BatchNormParams) -> Result<Tensor, TensorError> {
    p.validate()?;
    let c = input.channels();
    if c != p.channels() {
        return Err(TensorError::ShapeMismatch {
            op: "batch_norm",
            left: input.shape().to_vec(),
            right: vec![p.channels()],
        });
    }
    let scale: Vec<f32> = p
        .gamma
        .iter()
        .zip(&p.variance)
        .map(|(&g, &v)| g / (v + p.epsilon).sqrt())
        .collect();
    let shift: Vec<f32> = p
        .beta
        .iter()
        .zip(&p.mean)
        .zip(&scale)
        .map(|((&b, &m), &s)| b - m * s)
        .collect();
    let mut out = input.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        for ((x, &s), &b) in row.iter_mut().zip(&scale).zip(&shift) {
            *x = *x * s + b;
        }
    }
    Ok(out)
}

/// Elementwise relu / relu6, or softmax over the last axis.
pub fn activation(input: &Tensor, kind: ActivationKind) -> Tensor {
    match kind {
        ActivationKind::Relu => input.map(|x| x.max(0.0)),
        ActivationKind::Relu6 => input.map(|x| x.clamp(0.0, 6.0)),
        ActivationKind::Softmax => {
            let c = *input.shape().last().unwrap();
            let mut out = input.clone();
            for row in out.data_mut().chunks_exact_mut(c) {
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                for x in row.iter_mut() {
                    *x /= sum;
                }
            }
            out
        }
    }
}

/// Max pooling (valid semantics) or global average pooling.
///
/// Global average ignores window/stride and flattens to [N, C].
pub fn pool(
    input: &Tensor,
    kind: PoolKind,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor, TensorError> {
    if input.rank() != 4 {
        return Err(TensorError::Rank {
            op: "pool",
            expected: 4,
            shape: input.shape().to_vec(),
        });
    }
    let [n, h, w, c] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    match kind {
        PoolKind::GlobalAvg => {
            let mut out = Tensor::zeros(vec![n, c]);
            let inv = 1.0 / (h * w) as f32;
            for i in 0..n {
                let img = &input.data()[i * h * w * c..(i + 1) * h * w * c];
                let dst = &mut out.data_mut()[i * c..(i + 1) * c];
                for row in img.chunks_exact(c) {
                    for (d, &x) in dst.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                for d in dst.iter_mut() {
                    *d *= inv;
                }
            }
            Ok(out)
        }
        PoolKind::Max => {
            if window.0 > h || window.1 > w {
                return Err(TensorError::ShapeMismatch {
                    op: "max_pool",
                    left: input.shape().to_vec(),
                    right: vec![window.0, window.1],
                });
            }
            let oh = (h - window.0) / stride.0 + 1;
            let ow = (w - window.1) / stride.1 + 1;
            let mut out = Tensor::zeros(vec![n, oh, ow, c]);
            for i in 0..n {
                let img = &input.data()[i * h * w * c..(i + 1) * h * w * c];
                let dst = &mut out.data_mut()[i * oh * ow * c..(i + 1) * oh * ow * c];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let cell = &mut dst[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                        cell.fill(f32::NEG_INFINITY);
                        for ky in 0..window.0 {
                            for kx in 0..window.1 {
                                let src = ((oy * stride.0 + ky) * w + ox * stride.1 + kx) * c;
                                for (m, &x) in cell.iter_mut().zip(&img[src..src + c]) {
                                    *m = m.max(x);
                                }
                            }
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Elementwise sum of two same-shape tensors.
pub fn residual_add(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "residual_add",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = a.clone();
    for (x, &y) in out.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let input = Tensor::filled(vec![1, 3, 3, 1], 1.0);
        let kernel = t(vec![1, 1, 1, 1], vec![1.0]);
        let out = conv2d(&input, &kernel, None, &ConvParams::new(1, Padding::Valid)).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3, 1]);
        assert!(out.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn conv_same_stride2_shape() {
        let input = Tensor::zeros(vec![1, 224, 224, 3]);
        let kernel = Tensor::zeros(vec![3, 3, 3, 32]);
        let out = conv2d(&input, &kernel, None, &ConvParams::new(2, Padding::Same)).unwrap();
        assert_eq!(out.shape(), &[1, 112, 112, 32]);
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let input = Tensor::zeros(vec![1, 4, 4, 3]);
        let kernel = Tensor::zeros(vec![3, 3, 2, 8]);
        let err = conv2d(&input, &kernel, None, &ConvParams::new(1, Padding::Same)).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("[1, 4, 4, 3]") && msg.contains("[3, 3, 2, 8]"),
            "{msg}"
        );
    }

    #[test]
    fn conv_empty_output_is_error() {
        let input = Tensor::zeros(vec![1, 2, 2, 1]);
        let kernel = Tensor::zeros(vec![3, 3, 1, 1]);
        let err = conv2d(&input, &kernel, None, &ConvParams::new(1, Padding::Valid)).unwrap_err();
        assert!(matches!(err, TensorError::EmptyOutput { .. }));
    }

    #[test]
    fn depthwise_all_ones_center() {
        let input = Tensor::filled(vec![1, 3, 3, 2], 1.0);
        let kernel = Tensor::filled(vec![3, 3, 2, 1], 1.0);
        let out =
            depthwise_conv2d(&input, &kernel, None, &ConvParams::new(1, Padding::Same)).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3, 2]);
        // center output position sees the full 3x3 window of ones
        let center = (3 + 1) * 2;
        assert_eq!(out.data()[center], 9.0);
        assert_eq!(out.data()[center + 1], 9.0);
    }

    #[test]
    fn depthwise_equals_conv_for_single_channel() {
        let data: Vec<f32> = (0..25).map(|i| (i as f32 * 0.37).sin()).collect();
        let input = t(vec![1, 5, 5, 1], data);
        let kdata: Vec<f32> = (0..9).map(|i| (i as f32 * 0.81).cos()).collect();
        let kernel = t(vec![3, 3, 1, 1], kdata);
        let p = ConvParams::new(1, Padding::Same);
        let a = conv2d(&input, &kernel, None, &p).unwrap();
        let b = depthwise_conv2d(&input, &kernel, None, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dense_identity_and_bias() {
        let input = t(vec![1, 3], vec![1.0, 2.0, 3.0]);
        let eye = t(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        );
        let out = dense(&input, &eye, None).unwrap();
        assert_eq!(out.data(), input.data());

        let input = t(vec![1, 2], vec![1.0, 2.0]);
        let eye = t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let out = dense(&input, &eye, Some(&[10.0, 20.0])).unwrap();
        assert_eq!(out.data(), &[11.0, 22.0]);
    }

    #[test]
    fn batch_norm_forced_arithmetic() {
        // gamma 3 * (4 - 2) / sqrt(4) + 1 = 4; tiny epsilon shifts it below 1e-6
        let input = t(vec![1, 1], vec![4.0]);
        let p = BatchNormParams {
            mean: vec![2.0],
            variance: vec![4.0],
            gamma: vec![3.0],
            beta: vec![1.0],
            epsilon: 1e-12,
        };
        let out = batch_norm_inference(&input, &p).unwrap();
        assert!((out.data()[0] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn batch_norm_identity_params() {
        let input = t(vec![1, 4], vec![-1.0, 0.5, 2.0, 3.5]);
        let p = BatchNormParams::identity(4, 1e-5);
        let out = batch_norm_inference(&input, &p).unwrap();
        for (&y, &x) in out.data().iter().zip(input.data()) {
            assert!((y - x / (1.0f32 + 1e-5).sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_length_mismatch() {
        let input = t(vec![1, 4], vec![0.0; 4]);
        let p = BatchNormParams::identity(3, 1e-5);
        assert!(batch_norm_inference(&input, &p).is_err());
    }

    #[test]
    fn relu_and_relu6() {
        let input = t(vec![1, 3], vec![-1.0, 0.0, 2.5]);
        assert_eq!(
            activation(&input, ActivationKind::Relu).data(),
            &[0.0, 0.0, 2.5]
        );
        let input = t(vec![1, 1], vec![7.2]);
        assert_eq!(activation(&input, ActivationKind::Relu6).data(), &[6.0]);
    }

    #[test]
    fn softmax_uniform() {
        let input = t(vec![1, 3], vec![0.0, 0.0, 0.0]);
        let out = activation(&input, ActivationKind::Softmax);
        for &p in out.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn global_avg_pool() {
        let input = t(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let out = pool(&input, PoolKind::GlobalAvg, (0, 0), (1, 1)).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data()[0], 2.5);
    }

    #[test]
    fn max_pool_2x2() {
        let input = t(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let out = pool(&input, PoolKind::Max, (2, 2), (2, 2)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data()[0], 4.0);
    }

    #[test]
    fn max_pool_window_too_large() {
        let input = Tensor::zeros(vec![1, 2, 2, 1]);
        assert!(pool(&input, PoolKind::Max, (3, 3), (1, 1)).is_err());
    }

    #[test]
    fn add_identity_and_values() {
        let a = t(vec![1, 2], vec![1.0, 2.0]);
        let z = Tensor::zeros(vec![1, 2]);
        assert_eq!(residual_add(&a, &z).unwrap(), a);
        let b = t(vec![1, 2], vec![3.0, 4.0]);
        assert_eq!(residual_add(&a, &b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn add_shape_mismatch() {
        let a = Tensor::zeros(vec![1, 2]);
        let b = Tensor::zeros(vec![2, 2]);
        assert!(residual_add(&a, &b).is_err());
    }
}
