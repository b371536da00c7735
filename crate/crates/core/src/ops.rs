//! Numeric operations of the reconstruction pipeline, each paired with an
//! analytic backward pass so the attention math can be gradient-checked.
//!
//! Reductions use a fixed left-to-right summation order, so results are
//! run-to-run deterministic.

use crate::error::{Error, Result};
use crate::motion::FlowField;
use crate::tensor::Tensor;

/// Stabilizer of channel normalization.
pub const CHANNEL_NORM_EPS: f32 = 1e-3;

/// Matrix product of `a: m x k` and `b: k x n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = matmul_dims(a, b)?;
    let mut out = vec![0.0f32; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for kk in 0..k {
            let av = ad[i * k + kk];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * bd[kk * n + j];
            }
        }
    }
    Tensor::new(vec![m, n], out)?.check_finite("matmul")
}

/// Gradients of `matmul` with respect to both inputs.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k, n) = matmul_dims(a, b)?;
    if grad_out.shape() != [m, n] {
        return Err(Error::shape(format!(
            "matmul cotangent shape {:?}, expected [{m}, {n}]",
            grad_out.shape()
        )));
    }
    let g = grad_out.data();
    let ad = a.data();
    let bd = b.data();
    // da = g . b^T
    let mut da = vec![0.0f32; m * k];
    for i in 0..m {
        for kk in 0..k {
            let mut acc = 0.0f32;
            for j in 0..n {
                acc += g[i * n + j] * bd[kk * n + j];
            }
            da[i * k + kk] = acc;
        }
    }
    // db = a^T . g
    let mut db = vec![0.0f32; k * n];
    for kk in 0..k {
        for i in 0..m {
            let av = ad[i * k + kk];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                db[kk * n + j] += av * g[i * n + j];
            }
        }
    }
    Ok((Tensor::new(vec![m, k], da)?, Tensor::new(vec![k, n], db)?))
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape(format!(
            "matmul expects rank-2 tensors, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(format!(
            "matmul inner extents disagree: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((a.shape()[0], a.shape()[1], b.shape()[1]))
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::arg(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

/// Softmax along `axis`, with per-slice max subtraction for stability.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let xd = x.data();
    let mut out = vec![0.0f32; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f32::NEG_INFINITY;
            for k in 0..len {
                max = max.max(xd[base + k * inner]);
            }
            let mut sum = 0.0f32;
            for k in 0..len {
                let e = (xd[base + k * inner] - max).exp();
                out[base + k * inner] = e;
                sum += e;
            }
            for k in 0..len {
                out[base + k * inner] /= sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Backward pass of softmax given its forward output `y`.
pub fn softmax_backward(y: &Tensor, grad_out: &Tensor, axis: usize) -> Result<Tensor> {
    if y.shape() != grad_out.shape() {
        return Err(Error::shape("softmax cotangent shape mismatch"));
    }
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let yd = y.data();
    let gd = grad_out.data();
    let mut dx = vec![0.0f32; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0f32;
            for k in 0..len {
                dot += gd[base + k * inner] * yd[base + k * inner];
            }
            for k in 0..len {
                let idx = base + k * inner;
                dx[idx] = yd[idx] * (gd[idx] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), dx)
}

fn conv_dims(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
) -> Result<(usize, usize, usize, usize, usize)> {
    if input.rank() != 3 {
        return Err(Error::shape("conv2d input must be c_in x H x W"));
    }
    if kernel.rank() != 4 || kernel.shape()[2] != kernel.shape()[3] {
        return Err(Error::shape("conv2d kernel must be c_out x c_in x k x k"));
    }
    let k = kernel.shape()[2];
    if k != 1 && k != 3 {
        return Err(Error::arg(format!(
            "unsupported kernel size {k}, expected 1 or 3"
        )));
    }
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if kernel.shape()[1] != c_in {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: kernel expects {}, input has {c_in}",
            kernel.shape()[1]
        )));
    }
    let c_out = kernel.shape()[0];
    if bias.shape() != [c_out] {
        return Err(Error::shape(format!(
            "conv2d bias shape {:?}, expected [{c_out}]",
            bias.shape()
        )));
    }
    Ok((c_in, c_out, h, w, k))
}

/// Same-padded 2D convolution with zero fill; kernel size 1 or 3.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c_in, c_out, h, w, k) = conv_dims(input, kernel, bias)?;
    let pad = (k / 2) as isize;
    let xd = input.data();
    let kd = kernel.data();
    let bd = bias.data();
    let plane = h * w;
    let mut out = vec![0.0f32; c_out * plane];
    for co in 0..c_out {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bd[co];
                for ci in 0..c_in {
                    for ky in 0..k {
                        let iy = y as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = x as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += kd[((co * c_in + ci) * k + ky) * k + kx]
                                * xd[ci * plane + iy as usize * w + ix as usize];
                        }
                    }
                }
                out[co * plane + y * w + x] = acc;
            }
        }
    }
    Tensor::new(vec![c_out, h, w], out)?.check_finite("conv2d")
}

/// Gradients of `conv2d` with respect to input, kernel, and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let c_out = kernel.shape()[0];
    let bias = Tensor::zeros(vec![c_out]);
    let (c_in, c_out, h, w, k) = conv_dims(input, kernel, &bias)?;
    if grad_out.shape() != [c_out, h, w] {
        return Err(Error::shape(format!(
            "conv2d cotangent shape {:?}, expected [{c_out}, {h}, {w}]",
            grad_out.shape()
        )));
    }
    let pad = (k / 2) as isize;
    let xd = input.data();
    let kd = kernel.data();
    let gd = grad_out.data();
    let plane = h * w;
    let mut dx = vec![0.0f32; c_in * plane];
    let mut dk = vec![0.0f32; kernel.len()];
    let mut db = vec![0.0f32; c_out];
    for co in 0..c_out {
        for y in 0..h {
            for x in 0..w {
                let g = gd[co * plane + y * w + x];
                db[co] += g;
                if g == 0.0 {
                    continue;
                }
                for ci in 0..c_in {
                    for ky in 0..k {
                        let iy = y as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = x as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let kidx = ((co * c_in + ci) * k + ky) * k + kx;
                            let xidx = ci * plane + iy as usize * w + ix as usize;
                            dx[xidx] += kd[kidx] * g;
                            dk[kidx] += xd[xidx] * g;
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![c_in, h, w], dx)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
        Tensor::new(vec![c_out], db)?,
    ))
}

/// Convert a normalized coordinate to a (clamped) pixel coordinate on an axis
/// with `n = extent - 1`.
///
/// The conversion runs in f64, where it is exact for any f32 input, and snaps
/// to the nearest integer within the f32 quantization radius of the grid
/// (`n * 2^-23`). Grid coordinates produced from pixel indices therefore land
/// on exact integers and bilinear weights degenerate to {0, 1}.
fn to_pixel(x: f32, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let mut px = (x as f64 + 1.0) * 0.5 * nf;
    let nearest = px.round();
    if (px - nearest).abs() <= nf * f32::EPSILON as f64 {
        px = nearest;
    }
    px.clamp(0.0, nf)
}

/// Bilinear sampling of `input: c x H x W` at the flow grid's normalized
/// coordinates; out-of-range samples clamp to the border. Output spatial
/// extents follow the grid, which also allows resampling to a new resolution.
pub fn bilinear_sample(input: &Tensor, flow: &FlowField) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(Error::shape("bilinear_sample input must be c x H x W"));
    }
    let (c, h_in, w_in) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (h_out, w_out) = (flow.height(), flow.width());
    let xd = input.data();
    let in_plane = h_in * w_in;
    let out_plane = h_out * w_out;
    let mut out = vec![0.0f32; c * out_plane];
    for i in 0..h_out {
        for j in 0..w_out {
            let [sx, sy] = flow.at(i, j);
            let px = to_pixel(sx, w_in - 1);
            let py = to_pixel(sy, h_in - 1);
            let x0 = px.floor() as usize;
            let y0 = py.floor() as usize;
            let x1 = (x0 + 1).min(w_in - 1);
            let y1 = (y0 + 1).min(h_in - 1);
            let fx = (px - x0 as f64) as f32;
            let fy = (py - y0 as f64) as f32;
            let w00 = (1.0 - fx) * (1.0 - fy);
            let w01 = fx * (1.0 - fy);
            let w10 = (1.0 - fx) * fy;
            let w11 = fx * fy;
            for ch in 0..c {
                let base = ch * in_plane;
                out[ch * out_plane + i * w_out + j] = w00 * xd[base + y0 * w_in + x0]
                    + w01 * xd[base + y0 * w_in + x1]
                    + w10 * xd[base + y1 * w_in + x0]
                    + w11 * xd[base + y1 * w_in + x1];
            }
        }
    }
    Tensor::new(vec![c, h_out, w_out], out)
}

/// Gradient of `bilinear_sample` with respect to the input values (the
/// sampling weights scatter back to their source pixels).
pub fn bilinear_sample_backward(
    flow: &FlowField,
    grad_out: &Tensor,
    input_height: usize,
    input_width: usize,
) -> Result<Tensor> {
    if grad_out.rank() != 3 {
        return Err(Error::shape("bilinear cotangent must be c x H x W"));
    }
    let (c, h_out, w_out) = (
        grad_out.shape()[0],
        grad_out.shape()[1],
        grad_out.shape()[2],
    );
    if flow.height() != h_out || flow.width() != w_out {
        return Err(Error::shape("flow grid does not match cotangent extents"));
    }
    let gd = grad_out.data();
    let in_plane = input_height * input_width;
    let out_plane = h_out * w_out;
    let mut dx = vec![0.0f32; c * in_plane];
    for i in 0..h_out {
        for j in 0..w_out {
            let [sx, sy] = flow.at(i, j);
            let px = to_pixel(sx, input_width - 1);
            let py = to_pixel(sy, input_height - 1);
            let x0 = px.floor() as usize;
            let y0 = py.floor() as usize;
            let x1 = (x0 + 1).min(input_width - 1);
            let y1 = (y0 + 1).min(input_height - 1);
            let fx = (px - x0 as f64) as f32;
            let fy = (py - y0 as f64) as f32;
            let w00 = (1.0 - fx) * (1.0 - fy);
            let w01 = fx * (1.0 - fy);
            let w10 = (1.0 - fx) * fy;
            let w11 = fx * fy;
            for ch in 0..c {
                let g = gd[ch * out_plane + i * w_out + j];
                let base = ch * in_plane;
                dx[base + y0 * input_width + x0] += w00 * g;
                dx[base + y0 * input_width + x1] += w01 * g;
                dx[base + y1 * input_width + x0] += w10 * g;
                dx[base + y1 * input_width + x1] += w11 * g;
            }
        }
    }
    Tensor::new(vec![c, input_height, input_width], dx)
}

/// Per-spatial-location channel standardization with learned affine.
pub fn channel_norm(x: &Tensor, scale: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    let (c, plane) = channel_norm_dims(x, scale, bias, eps)?;
    let xd = x.data();
    let sd = scale.data();
    let bd = bias.data();
    let mut out = vec![0.0f32; xd.len()];
    for p in 0..plane {
        let mut mean = 0.0f32;
        for ch in 0..c {
            mean += xd[ch * plane + p];
        }
        mean /= c as f32;
        let mut var = 0.0f32;
        for ch in 0..c {
            let d = xd[ch * plane + p] - mean;
            var += d * d;
        }
        var /= c as f32;
        let inv_std = 1.0 / (var + eps).sqrt();
        for ch in 0..c {
            out[ch * plane + p] = sd[ch] * (xd[ch * plane + p] - mean) * inv_std + bd[ch];
        }
    }
    Tensor::new(x.shape().to_vec(), out)?.check_finite("channel_norm")
}

/// Gradients of `channel_norm` with respect to input, scale, and bias.
pub fn channel_norm_backward(
    x: &Tensor,
    scale: &Tensor,
    eps: f32,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let bias = Tensor::zeros(vec![scale.shape()[0]]);
    let (c, plane) = channel_norm_dims(x, scale, &bias, eps)?;
    if grad_out.shape() != x.shape() {
        return Err(Error::shape("channel_norm cotangent shape mismatch"));
    }
    let xd = x.data();
    let sd = scale.data();
    let gd = grad_out.data();
    let mut dx = vec![0.0f32; xd.len()];
    let mut dscale = vec![0.0f32; c];
    let mut dbias = vec![0.0f32; c];
    let cf = c as f32;
    for p in 0..plane {
        let mut mean = 0.0f32;
        for ch in 0..c {
            mean += xd[ch * plane + p];
        }
        mean /= cf;
        let mut var = 0.0f32;
        for ch in 0..c {
            let d = xd[ch * plane + p] - mean;
            var += d * d;
        }
        var /= cf;
        let inv_std = 1.0 / (var + eps).sqrt();

        let mut g_mean = 0.0f32;
        let mut gx_mean = 0.0f32;
        for ch in 0..c {
            let idx = ch * plane + p;
            let xhat = (xd[idx] - mean) * inv_std;
            let g = gd[idx] * sd[ch];
            dscale[ch] += gd[idx] * xhat;
            dbias[ch] += gd[idx];
            g_mean += g;
            gx_mean += g * xhat;
        }
        g_mean /= cf;
        gx_mean /= cf;
        for ch in 0..c {
            let idx = ch * plane + p;
            let xhat = (xd[idx] - mean) * inv_std;
            dx[idx] = (gd[idx] * sd[ch] - g_mean - xhat * gx_mean) * inv_std;
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dscale)?,
        Tensor::new(vec![c], dbias)?,
    ))
}

fn channel_norm_dims(
    x: &Tensor,
    scale: &Tensor,
    bias: &Tensor,
    eps: f32,
) -> Result<(usize, usize)> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::arg(format!(
            "channel_norm eps must be positive, got {eps}"
        )));
    }
    if x.rank() != 3 {
        return Err(Error::shape("channel_norm input must be c x H x W"));
    }
    let c = x.shape()[0];
    if scale.shape() != [c] || bias.shape() != [c] {
        return Err(Error::shape(format!(
            "channel_norm affine shapes {:?}/{:?}, expected [{c}]",
            scale.shape(),
            bias.shape()
        )));
    }
    Ok((c, x.shape()[1] * x.shape()[2]))
}

/// Reduction mode for [`reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceMode {
    Max,
    Mean,
}

/// Reduce along `axis`, removing it. Mean sums left to right.
pub fn reduce(x: &Tensor, axis: usize, mode: ReduceMode) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let xd = x.data();
    let mut out = vec![0.0f32; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let v = match mode {
                ReduceMode::Max => {
                    let mut m = f32::NEG_INFINITY;
                    for k in 0..len {
                        m = m.max(xd[base + k * inner]);
                    }
                    m
                }
                ReduceMode::Mean => {
                    let mut s = 0.0f32;
                    for k in 0..len {
                        s += xd[base + k * inner];
                    }
                    s / len as f32
                }
            };
            out[o * inner + i] = v;
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::new(shape, out)
}

/// Gradient of mean-reduction: the cotangent spreads evenly along the axis.
pub fn reduce_mean_backward(
    input_shape: &[usize],
    axis: usize,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(input_shape, axis)?;
    if grad_out.len() != outer * inner {
        return Err(Error::shape("reduce cotangent size mismatch"));
    }
    let gd = grad_out.data();
    let mut dx = vec![0.0f32; outer * len * inner];
    let inv = 1.0 / len as f32;
    for o in 0..outer {
        for i in 0..inner {
            let g = gd[o * inner + i] * inv;
            for k in 0..len {
                dx[o * len * inner + k * inner + i] = g;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("relu preserves finiteness")
}

pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(Error::shape("relu cotangent shape mismatch"));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// 2x2 average-pool downsampling; extents must be even.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::shape("avg_pool2 input must be c x H x W"));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::arg(format!(
            "avg_pool2 requires even extents, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0f32; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for xo in 0..wo {
                let base = ch * h * w + 2 * y * w + 2 * xo;
                out[ch * ho * wo + y * wo + xo] =
                    (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]) / 4.0;
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

/// 2x bilinear upsampling (corner-aligned).
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::shape("upsample2 input must be c x H x W"));
    }
    let grid = FlowField::identity(x.shape()[1] * 2, x.shape()[2] * 2);
    bilinear_sample(x, &grid)
}

/// Clamp every value into `[0, 1]`.
pub fn clamp01(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.clamp(0.0, 1.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("clamp preserves finiteness")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&i2, &a).unwrap(), a);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let ab = matmul(&a, &b).unwrap();
        assert_eq!(ab.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_zero_left_factor() {
        let z = Tensor::zeros(vec![3, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Tensor::random(vec![2, 5], &mut rng, 1.0);
        let out = matmul(&z, &b).unwrap();
        assert_eq!(out.shape(), &[3, 5]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_rejects_shape_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[2], &[0.0, 0.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax(&t(&[2], &[0.0, 3f32.ln()]), 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-6);
        assert!((s.data()[1] - 0.75).abs() < 1e-6);

        let s = softmax(&t(&[1], &[123.0]), 0).unwrap();
        assert_eq!(s.data(), &[1.0]);
    }

    #[test]
    fn softmax_is_stable_at_large_magnitude() {
        // Max subtraction keeps the sum exact even at magnitude 1e4 (a raw
        // exp would overflow); entries whose gap exceeds the f32 exp range
        // underflow to zero, so positivity is asserted at moderate scale.
        let s = softmax(&t(&[3], &[1e4, -1e4, 9.9e3]), 0).unwrap();
        let sum: f32 = s.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);

        let s = softmax(&t(&[3], &[4.0, -3.0, 0.5]), 0).unwrap();
        let sum: f32 = s.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(s.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        assert!(softmax(&t(&[2], &[0.0, 0.0]), 1).is_err());
    }

    #[test]
    fn conv1x1_equals_per_pixel_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = Tensor::random(vec![3, 4, 5], &mut rng, 1.0);
        let kernel = Tensor::random(vec![2, 3, 1, 1], &mut rng, 1.0);
        let bias = Tensor::random(vec![2], &mut rng, 1.0);
        let out = conv2d(&input, &kernel, &bias).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                for co in 0..2 {
                    let mut acc = bias.at(&[co]);
                    for ci in 0..3 {
                        acc += kernel.at(&[co, ci, 0, 0]) * input.at(&[ci, y, x]);
                    }
                    assert!((out.at(&[co, y, x]) - acc).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn conv3x3_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = Tensor::random(vec![1, 4, 4], &mut rng, 1.0);
        let mut k = vec![0.0f32; 9];
        k[4] = 1.0;
        let kernel = t(&[1, 1, 3, 3], &k);
        let out = conv2d(&input, &kernel, &Tensor::zeros(vec![1])).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv3x3_all_ones_on_constant_matches_direct_summation() {
        let input = Tensor::filled(vec![1, 5, 5], 2.0).unwrap();
        let kernel = Tensor::filled(vec![1, 1, 3, 3], 1.0).unwrap();
        let out = conv2d(&input, &kernel, &Tensor::zeros(vec![1])).unwrap();
        // Direct summation oracle over the zero-padded window.
        for y in 0..5i32 {
            for x in 0..5i32 {
                let mut acc = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (iy, ix) = (y + dy, x + dx);
                        if (0..5).contains(&iy) && (0..5).contains(&ix) {
                            acc += 2.0;
                        }
                    }
                }
                assert_eq!(out.at(&[0, y as usize, x as usize]), acc);
            }
        }
        // Interior pixels see the full 3x3 window.
        assert_eq!(out.at(&[0, 2, 2]), 18.0);
    }

    #[test]
    fn conv_rejects_bad_kernel() {
        let input = Tensor::zeros(vec![2, 4, 4]);
        let k5 = Tensor::zeros(vec![1, 2, 5, 5]);
        assert!(conv2d(&input, &k5, &Tensor::zeros(vec![1])).is_err());
        let wrong_c = Tensor::zeros(vec![1, 3, 3, 3]);
        assert!(conv2d(&input, &wrong_c, &Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn bilinear_identity_is_bitwise_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(h, w) in &[(2usize, 2usize), (4, 7), (13, 3), (64, 64)] {
            let input = Tensor::random(vec![2, h, w], &mut rng, 1.0);
            let out = bilinear_sample(&input, &FlowField::identity(h, w)).unwrap();
            assert_eq!(out, input, "{h}x{w}");
        }
    }

    #[test]
    fn bilinear_center_of_2x2_is_mean() {
        let input = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let flow = FlowField::new(1, 1, vec![[0.0, 0.0]]).unwrap();
        let out = bilinear_sample(&input, &flow).unwrap();
        assert_eq!(out.data(), &[2.5]);
    }

    #[test]
    fn bilinear_one_pixel_shift_clamps_border() {
        // 4x4 ramp image v(y, x) = 4y + x; shift sampling one pixel right.
        let data: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let input = t(&[1, 4, 4], &data);
        let mut coords = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                coords.push([
                    crate::motion::grid_coordinate(j + 1, 3),
                    crate::motion::grid_coordinate(i, 3),
                ]);
            }
        }
        let flow = FlowField::new(4, 4, coords).unwrap();
        let out = bilinear_sample(&input, &flow).unwrap();
        // Index-arithmetic oracle: out(y, x) = v(y, min(x + 1, 3)).
        for y in 0..4 {
            for x in 0..4 {
                let expected = (4 * y + (x + 1).min(3)) as f32;
                assert_eq!(out.at(&[0, y, x]), expected, "({y}, {x})");
            }
        }
    }

    #[test]
    fn channel_norm_examples() {
        // Constant channel vector: numerator zero, output equals bias.
        let x = Tensor::filled(vec![3, 1, 1], 5.0).unwrap();
        let ones = Tensor::filled(vec![3], 1.0).unwrap();
        let zeros = Tensor::zeros(vec![3]);
        let out = channel_norm(&x, &ones, &zeros, CHANNEL_NORM_EPS).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        // [1, -1] is already zero-mean unit-variance up to eps.
        let x = t(&[2, 1, 1], &[1.0, -1.0]);
        let ones2 = Tensor::filled(vec![2], 1.0).unwrap();
        let zeros2 = Tensor::zeros(vec![2]);
        let out = channel_norm(&x, &ones2, &zeros2, 1e-8).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-4);
        assert!((out.data()[1] + 1.0).abs() < 1e-4);
        // Closed form with the default eps: 1 / sqrt(1 + eps).
        let out = channel_norm(&x, &ones2, &zeros2, CHANNEL_NORM_EPS).unwrap();
        let expected = 1.0 / (1.0f32 + CHANNEL_NORM_EPS).sqrt();
        assert!((out.data()[0] - expected).abs() < 1e-6);

        // Zero scale annihilates the input; output is the bias everywhere.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::random(vec![2, 3, 3], &mut rng, 2.0);
        let bias = t(&[2], &[0.25, -0.75]);
        let out = channel_norm(&x, &Tensor::zeros(vec![2]), &bias, CHANNEL_NORM_EPS).unwrap();
        for ch in 0..2 {
            for p in 0..9 {
                assert_eq!(out.data()[ch * 9 + p], bias.data()[ch]);
            }
        }
    }

    #[test]
    fn reduce_examples() {
        let x = t(&[2, 2], &[1.0, 5.0, 3.0, 2.0]);
        let m = reduce(&x, 0, ReduceMode::Max).unwrap();
        assert_eq!(m.data(), &[3.0, 5.0]);

        let x = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let m = reduce(&x, 0, ReduceMode::Mean).unwrap();
        assert_eq!(m.data(), &[1.0, 2.0, 3.0]);

        let x = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        let m = reduce(&x, 0, ReduceMode::Mean).unwrap();
        assert_eq!(m.data(), &[2.5]);

        assert!(reduce(&x, 1, ReduceMode::Max).is_err());
    }

    // Single-seed directional gradient sanity checks; the full 100-seed
    // suites live in the acceptance tests.

    fn directional_fd(f: impl Fn(&[f32]) -> f64, x: &[f32], dir: &[f32], h: f32) -> f64 {
        let plus: Vec<f32> = x.iter().zip(dir).map(|(a, d)| a + h * d).collect();
        let minus: Vec<f32> = x.iter().zip(dir).map(|(a, d)| a - h * d).collect();
        (f(&plus) - f(&minus)) / (2.0 * h as f64)
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-3 * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn matmul_gradient_sanity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Tensor::random(vec![3, 2], &mut rng, 1.0);
        let b = Tensor::random(vec![2, 4], &mut rng, 1.0);
        let cot = Tensor::random(vec![3, 4], &mut rng, 1.0);
        let dir = Tensor::random(vec![3, 2], &mut rng, 1.0);
        let (da, _) = matmul_backward(&a, &b, &cot).unwrap();
        let analytic: f64 = da
            .data()
            .iter()
            .zip(dir.data())
            .map(|(&g, &d)| g as f64 * d as f64)
            .sum();
        let f = |xs: &[f32]| -> f64 {
            let at = Tensor::new(vec![3, 2], xs.to_vec()).unwrap();
            matmul(&at, &b)
                .unwrap()
                .data()
                .iter()
                .zip(cot.data())
                .map(|(&o, &c)| o as f64 * c as f64)
                .sum()
        };
        let fd = directional_fd(f, a.data(), dir.data(), 1e-3);
        assert!(close(analytic, fd), "{analytic} vs {fd}");
    }

    #[test]
    fn channel_norm_gradient_sanity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::random(vec![3, 2, 2], &mut rng, 1.0);
        let scale = Tensor::random(vec![3], &mut rng, 1.0);
        let bias = Tensor::random(vec![3], &mut rng, 1.0);
        let cot = Tensor::random(vec![3, 2, 2], &mut rng, 1.0);
        let dir = Tensor::random(vec![3, 2, 2], &mut rng, 1.0);
        let (dx, _, _) = channel_norm_backward(&x, &scale, CHANNEL_NORM_EPS, &cot).unwrap();
        let analytic: f64 = dx
            .data()
            .iter()
            .zip(dir.data())
            .map(|(&g, &d)| g as f64 * d as f64)
            .sum();
        let f = |xs: &[f32]| -> f64 {
            let xt = Tensor::new(vec![3, 2, 2], xs.to_vec()).unwrap();
            channel_norm(&xt, &scale, &bias, CHANNEL_NORM_EPS)
                .unwrap()
                .data()
                .iter()
                .zip(cot.data())
                .map(|(&o, &c)| o as f64 * c as f64)
                .sum()
        };
        let fd = directional_fd(f, x.data(), dir.data(), 1e-3);
        assert!(close(analytic, fd), "{analytic} vs {fd}");
    }

    #[test]
    fn pooling_helpers_roundtrip_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::random(vec![3, 6, 8], &mut rng, 1.0);
        let down = avg_pool2(&x).unwrap();
        assert_eq!(down.shape(), &[3, 3, 4]);
        let up = upsample2(&down).unwrap();
        assert_eq!(up.shape(), &[3, 6, 8]);
        assert!(avg_pool2(&Tensor::zeros(vec![1, 5, 4])).is_err());
    }

    #[test]
    fn avg_pool_of_constant_is_constant() {
        let x = Tensor::filled(vec![2, 4, 4], 0.7).unwrap();
        let down = avg_pool2(&x).unwrap();
        assert!(down.data().iter().all(|&v| v == 0.7));
        let up = upsample2(&down).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }
}
