//! Real-valued feature maps and the layer kernels of the U-Net.
//!
//! Convolutions go through im2col and a single GEMM per direction.

use matrixmultiply::dgemm;

pub const LEAKY_SLOPE: f64 = 0.01;

/// `C x H x W` real feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Feature {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Feature {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn same_shape(&self, other: &Feature) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

/// Geometry of one convolution layer inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub weight: usize,
    pub bias: usize,
}

impl ConvShape {
    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.fan_in()
    }
}

fn im2col(input: &Feature, kernel: usize) -> Vec<f64> {
    let (h, w) = (input.height, input.width);
    if kernel == 1 {
        return input.data.clone();
    }
    let pad = (kernel / 2) as isize;
    let n = h * w;
    let mut col = vec![0.0; input.channels * kernel * kernel * n];
    for ci in 0..input.channels {
        let src = &input.data[ci * n..(ci + 1) * n];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = &mut col[((ci * kernel + ky) * kernel + kx) * n..][..n];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    row[y * w + x0..y * w + x1].copy_from_slice(&src[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], channels: usize, h: usize, w: usize, kernel: usize) -> Feature {
    let mut out = Feature::zeros(channels, h, w);
    if kernel == 1 {
        out.data.copy_from_slice(col);
        return out;
    }
    let pad = (kernel / 2) as isize;
    let n = h * w;
    for ci in 0..channels {
        let dst = &mut out.data[ci * n..(ci + 1) * n];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = &col[((ci * kernel + ky) * kernel + kx) * n..][..n];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    for (d, s) in dst[sy * w + sx0..sy * w + sx0 + (x1 - x0)]
                        .iter_mut()
                        .zip(&row[y * w + x0..y * w + x1])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

/// `C = alpha * A * B + beta * C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides index within `a` (m x k), `b` (k x n) and `c` (m x n,
    // row-major), whose lengths the callers construct from the same dimensions.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Same-size convolution (zero padding `kernel / 2`) plus bias.
pub fn conv_forward(params: &[f64], shape: &ConvShape, input: &Feature) -> Feature {
    debug_assert_eq!(input.channels, shape.cin);
    let n = input.plane();
    let k = shape.fan_in();
    let col = im2col(input, shape.kernel);
    let mut out = Feature::zeros(shape.cout, input.height, input.width);
    for (co, plane) in out.data.chunks_exact_mut(n).enumerate() {
        plane.fill(params[shape.bias + co]);
    }
    let weight = &params[shape.weight..shape.weight + shape.weight_len()];
    gemm(shape.cout, k, n, weight, (k, 1), &col, (n, 1), 1.0, &mut out.data);
    out
}

/// Accumulates parameter gradients; returns the input gradient when requested.
pub fn conv_backward(
    params: &[f64],
    shape: &ConvShape,
    input: &Feature,
    grad_out: &Feature,
    grads: &mut [f64],
    need_input_grad: bool,
) -> Option<Feature> {
    let n = input.plane();
    let k = shape.fan_in();
    let col = im2col(input, shape.kernel);
    for (co, plane) in grad_out.data.chunks_exact(n).enumerate() {
        grads[shape.bias + co] += plane.iter().sum::<f64>();
    }
    {
        let gw = &mut grads[shape.weight..shape.weight + shape.weight_len()];
        gemm(shape.cout, n, k, &grad_out.data, (n, 1), &col, (1, n), 1.0, gw);
    }
    if !need_input_grad {
        return None;
    }
    let weight = &params[shape.weight..shape.weight + shape.weight_len()];
    let mut gcol = vec![0.0; k * n];
    gemm(k, shape.cout, n, weight, (1, k), &grad_out.data, (n, 1), 0.0, &mut gcol);
    Some(col2im(&gcol, shape.cin, input.height, input.width, shape.kernel))
}

pub fn leaky_relu(pre: &Feature) -> Feature {
    Feature {
        data: pre
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
            .collect(),
        ..*pre
    }
}

pub fn leaky_relu_backward(pre: &Feature, grad: &mut Feature) {
    for (g, &v) in grad.data.iter_mut().zip(&pre.data) {
        if v <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

/// 2x2 average pooling.
pub fn avg_pool(input: &Feature) -> Feature {
    let (h, w) = (input.height / 2, input.width / 2);
    let mut out = Feature::zeros(input.channels, h, w);
    let iw = input.width;
    for c in 0..input.channels {
        let src = &input.data[c * input.plane()..(c + 1) * input.plane()];
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * iw + 2 * x;
                dst[y * w + x] = 0.25 * (src[i] + src[i + 1] + src[i + iw] + src[i + iw + 1]);
            }
        }
    }
    out
}

pub fn avg_pool_backward(grad: &Feature) -> Feature {
    let (h, w) = (grad.height * 2, grad.width * 2);
    let mut out = Feature::zeros(grad.channels, h, w);
    for c in 0..grad.channels {
        let src = &grad.data[c * grad.plane()..(c + 1) * grad.plane()];
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = 0.25 * src[(y / 2) * grad.width + x / 2];
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample(input: &Feature) -> Feature {
    let (h, w) = (input.height * 2, input.width * 2);
    let mut out = Feature::zeros(input.channels, h, w);
    for c in 0..input.channels {
        let src = &input.data[c * input.plane()..(c + 1) * input.plane()];
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / 2) * input.width + x / 2];
            }
        }
    }
    out
}

pub fn upsample_backward(grad: &Feature) -> Feature {
    let (h, w) = (grad.height / 2, grad.width / 2);
    let mut out = Feature::zeros(grad.channels, h, w);
    for c in 0..grad.channels {
        let src = &grad.data[c * grad.plane()..(c + 1) * grad.plane()];
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..grad.height {
            for x in 0..grad.width {
                dst[(y / 2) * w + x / 2] += src[y * grad.width + x];
            }
        }
    }
    out
}

/// Channel concatenation `[a; b]`.
pub fn concat(a: &Feature, b: &Feature) -> Feature {
    debug_assert_eq!((a.height, a.width), (b.height, b.width));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Feature {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        data,
    }
}

/// Splits a concatenated gradient back into its `a` and `b` parts.
pub fn split(grad: &Feature, a_channels: usize) -> (Feature, Feature) {
    let cut = a_channels * grad.plane();
    (
        Feature {
            channels: a_channels,
            height: grad.height,
            width: grad.width,
            data: grad.data[..cut].to_vec(),
        },
        Feature {
            channels: grad.channels - a_channels,
            height: grad.height,
            width: grad.width,
            data: grad.data[cut..].to_vec(),
        },
    )
}
