#![allow(dead_code)]

//! Independent reference implementations used as oracles. These are kept
//! deliberately naive (direct nested loops) and share no code with the
//! kernels they check.

use qnet::tensor::{conv_out_dim, same_padding, ConvParams, Padding, Tensor};

/// Direct six-loop convolution over NHWC input and [KH,KW,Cin,Cout] kernel.
pub fn conv2d_reference(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&[f32]>,
    params: &ConvParams,
) -> Tensor {
    let [n, h, w, cin] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let [kh, kw, _, cout] = [
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    ];
    let oh = conv_out_dim(h, kh, params.stride.0, params.padding).unwrap();
    let ow = conv_out_dim(w, kw, params.stride.1, params.padding).unwrap();
    let (pad_top, pad_left) = match params.padding {
        Padding::Same => (
            same_padding(h, kh, params.stride.0).0,
            same_padding(w, kw, params.stride.1).0,
        ),
        Padding::Valid => (0, 0),
    };
    let mut out = Tensor::zeros(vec![n, oh, ow, cout]);
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for oc in 0..cout {
                    let mut acc = bias.map(|b| b[oc]).unwrap_or(0.0);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * params.stride.0 + ky) as isize - pad_top as isize;
                            let ix = (ox * params.stride.1 + kx) as isize - pad_left as isize;
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                continue;
                            }
                            for ic in 0..cin {
                                let x = input.data()
                                    [((img * h + iy as usize) * w + ix as usize) * cin + ic];
                                let k = kernel.data()[((ky * kw + kx) * cin + ic) * cout + oc];
                                acc += x * k;
                            }
                        }
                    }
                    out.data_mut()[((img * oh + oy) * ow + ox) * cout + oc] = acc;
                }
            }
        }
    }
    out
}

/// Per-channel direct depthwise convolution ([KH,KW,C,1] kernel).
pub fn depthwise_reference(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&[f32]>,
    params: &ConvParams,
) -> Tensor {
    let [n, h, w, c] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    let oh = conv_out_dim(h, kh, params.stride.0, params.padding).unwrap();
    let ow = conv_out_dim(w, kw, params.stride.1, params.padding).unwrap();
    let (pad_top, pad_left) = match params.padding {
        Padding::Same => (
            same_padding(h, kh, params.stride.0).0,
            same_padding(w, kw, params.stride.1).0,
        ),
        Padding::Valid => (0, 0),
    };
    let mut out = Tensor::zeros(vec![n, oh, ow, c]);
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut acc = bias.map(|b| b[ch]).unwrap_or(0.0);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * params.stride.0 + ky) as isize - pad_top as isize;
                            let ix = (ox * params.stride.1 + kx) as isize - pad_left as isize;
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let x =
                                input.data()[((img * h + iy as usize) * w + ix as usize) * c + ch];
                            let k = kernel.data()[(ky * kw + kx) * c + ch];
                            acc += x * k;
                        }
                    }
                    out.data_mut()[((img * oh + oy) * ow + ox) * c + ch] = acc;
                }
            }
        }
    }
    out
}

/// Triple-loop matrix multiply with optional bias.
pub fn matmul_reference(input: &Tensor, weight: &Tensor, bias: Option<&[f32]>) -> Tensor {
    let (n, d_in) = (input.shape()[0], input.shape()[1]);
    let d_out = weight.shape()[1];
    let mut out = Tensor::zeros(vec![n, d_out]);
    for i in 0..n {
        for j in 0..d_out {
            let mut acc = bias.map(|b| b[j]).unwrap_or(0.0);
            for k in 0..d_in {
                acc += input.data()[i * d_in + k] * weight.data()[k * d_out + j];
            }
            out.data_mut()[i * d_out + j] = acc;
        }
    }
    out
}

pub fn max_rel_error(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f32::max)
}

pub fn random_tensor(shape: Vec<usize>, rng: &mut impl rand::Rng) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}
