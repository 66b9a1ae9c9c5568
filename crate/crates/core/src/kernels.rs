//! Forward and backward kernels for every differentiable primitive.
//!
//! These functions operate on plain [`Tensor`]s and know nothing about the
//! tape; [`crate::graph`] records them and calls the matching backward kernel.
//! Feature maps are `(N, C, H, W)`; convolution weights are `(Cout, Cin, kh, kw)`.

use crate::tensor::same_shape;
use crate::{Error, LabelMap, Result, Tensor};

/// Smoothing constant of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-6;

// ---------------------------------------------------------------------------
// GEMM
// ---------------------------------------------------------------------------

/// `c = a · b + beta · c` for row-major operands; `a` is logically `m × k` and
/// `b` is `k × n`. A transposed operand is stored as the row-major transpose.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    // SAFETY: the slices cover exactly the m×k, k×n and m×n index ranges
    // implied by the strides above (asserted in debug builds).
    unsafe {
        matrixmultiply::dgemm(
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

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let [batch, in_channels, height, width] = input.dims4()?;
        let [out_channels, w_in, kernel_h, kernel_w] = <[usize; 4]>::try_from(weight.shape())
            .map_err(|_| {
                Error::shape(format!(
                    "conv2d weight must be (Cout, Cin, kh, kw), got {:?}",
                    weight.shape()
                ))
            })?;
        if w_in != in_channels {
            return Err(Error::shape(format!(
                "conv2d: input has {in_channels} channels but weight {:?} expects {w_in}",
                weight.shape()
            )));
        }
        if kernel_h % 2 == 0 || kernel_w % 2 == 0 {
            return Err(Error::shape(format!(
                "conv2d: kernel {kernel_h}x{kernel_w} must have odd extents"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d: stride must be at least 1"));
        }
        let extent = |size: usize, kernel: usize, axis: &str| -> Result<usize> {
            let padded = size + 2 * padding;
            if padded < kernel || !(padded - kernel).is_multiple_of(stride) {
                return Err(Error::shape(format!(
                    "conv2d: {axis} {size} with padding {padding}, kernel {kernel}, stride {stride} \
                     gives a non-integer output extent"
                )));
            }
            Ok((padded - kernel) / stride + 1)
        };
        let out_h = extent(height, kernel_h, "height")?;
        let out_w = extent(width, kernel_w, "width")?;
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Source row for output row `oy` under kernel row `ky`, if inside the image.
    fn source(&self, out: usize, k: usize, size: usize) -> Option<usize> {
        (out * self.stride + k)
            .checked_sub(self.padding)
            .filter(|&i| i < size)
    }

    /// Unfolds one sample into a `(Cin·kh·kw) × (out_h·out_w)` patch matrix.
    fn im2col(&self, src: &[f64], col: &mut [f64]) {
        let pixels = self.out_pixels();
        let plane = self.height * self.width;
        for ci in 0..self.in_channels {
            let channel = &src[ci * plane..(ci + 1) * plane];
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (ci * self.kernel_h + ky) * self.kernel_w + kx;
                    let dst = &mut col[row * pixels..(row + 1) * pixels];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        let Some(iy) = self.source(oy, ky, self.height) else {
                            line.fill(0.0);
                            continue;
                        };
                        for (ox, v) in line.iter_mut().enumerate() {
                            *v = match self.source(ox, kx, self.width) {
                                Some(ix) => channel[iy * self.width + ix],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    /// Folds a patch-matrix gradient back onto one input sample (accumulating).
    fn col2im(&self, col: &[f64], dst: &mut [f64]) {
        let pixels = self.out_pixels();
        let plane = self.height * self.width;
        for ci in 0..self.in_channels {
            let channel = &mut dst[ci * plane..(ci + 1) * plane];
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (ci * self.kernel_h + ky) * self.kernel_w + kx;
                    let src = &col[row * pixels..(row + 1) * pixels];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source(oy, ky, self.height) else {
                            continue;
                        };
                        for ox in 0..self.out_w {
                            if let Some(ix) = self.source(ox, kx, self.width) {
                                channel[iy * self.width + ix] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip) with symmetric zero padding.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input, weight, stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.out_channels] {
            return Err(Error::shape(format!(
                "conv2d: bias shape {:?} does not match {} output channels",
                b.shape(),
                g.out_channels
            )));
        }
    }
    let pixels = g.out_pixels();
    let k = g.patch_len();
    let out_plane = g.out_channels * pixels;
    let mut out = vec![0.0; g.batch * out_plane];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * pixels]
    };
    for n in 0..g.batch {
        let src = &input.data()[n * g.in_plane()..(n + 1) * g.in_plane()];
        let dst = &mut out[n * out_plane..(n + 1) * out_plane];
        let patches = if g.is_pointwise() {
            src
        } else {
            g.im2col(src, &mut col);
            &col
        };
        gemm(
            g.out_channels,
            k,
            pixels,
            weight.data(),
            false,
            patches,
            false,
            0.0,
            dst,
        );
        if let Some(b) = bias {
            for (plane, &bv) in dst.chunks_exact_mut(pixels).zip(b.data()) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(vec![g.batch, g.out_channels, g.out_h, g.out_w], out)
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    with_bias: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input, weight, stride, padding)?;
    same_shape(
        grad_out.shape(),
        &[g.batch, g.out_channels, g.out_h, g.out_w],
        "conv2d backward",
    )?;
    let pixels = g.out_pixels();
    let k = g.patch_len();
    let out_plane = g.out_channels * pixels;
    let mut grad_in = vec![0.0; input.len()];
    let mut grad_w = vec![0.0; weight.len()];
    let mut grad_b = vec![0.0; g.out_channels];
    let pointwise = g.is_pointwise();
    let mut col = vec![0.0; if pointwise { 0 } else { k * pixels }];
    let mut dcol = vec![0.0; if pointwise { 0 } else { k * pixels }];
    for n in 0..g.batch {
        let src = &input.data()[n * g.in_plane()..(n + 1) * g.in_plane()];
        let gout = &grad_out.data()[n * out_plane..(n + 1) * out_plane];
        let gin = &mut grad_in[n * g.in_plane()..(n + 1) * g.in_plane()];
        if pointwise {
            gemm(
                g.out_channels,
                pixels,
                k,
                gout,
                false,
                src,
                true,
                1.0,
                &mut grad_w,
            );
            gemm(
                k,
                g.out_channels,
                pixels,
                weight.data(),
                true,
                gout,
                false,
                0.0,
                gin,
            );
        } else {
            g.im2col(src, &mut col);
            gemm(
                g.out_channels,
                pixels,
                k,
                gout,
                false,
                &col,
                true,
                1.0,
                &mut grad_w,
            );
            gemm(
                k,
                g.out_channels,
                pixels,
                weight.data(),
                true,
                gout,
                false,
                0.0,
                &mut dcol,
            );
            g.col2im(&dcol, gin);
        }
        if with_bias {
            for (gb, plane) in grad_b.iter_mut().zip(gout.chunks_exact(pixels)) {
                *gb += plane.iter().sum::<f64>();
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), grad_in)?,
        weight: Tensor::new(weight.shape().to_vec(), grad_w)?,
        bias: if with_bias {
            Some(Tensor::new(vec![g.out_channels], grad_b)?)
        } else {
            None
        },
    })
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

fn linear_dims(x: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    let &[out_dim, in_dim] = weight.shape() else {
        return Err(Error::shape(format!(
            "fully_connected weight must be (Dout, Din), got {:?}",
            weight.shape()
        )));
    };
    if x.shape().last() != Some(&in_dim) {
        return Err(Error::shape(format!(
            "fully_connected: input {:?} does not end in Din = {in_dim}",
            x.shape()
        )));
    }
    Ok((x.len() / in_dim, in_dim, out_dim))
}

/// `y = x · weightᵀ + bias` over the last axis of `x`.
pub fn fully_connected(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (rows, in_dim, out_dim) = linear_dims(x, weight)?;
    if let Some(b) = bias {
        if b.shape() != [out_dim] {
            return Err(Error::shape(format!(
                "fully_connected: bias {:?} does not match Dout = {out_dim}",
                b.shape()
            )));
        }
    }
    let mut out = vec![0.0; rows * out_dim];
    gemm(
        rows,
        in_dim,
        out_dim,
        x.data(),
        false,
        weight.data(),
        true,
        0.0,
        &mut out,
    );
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(out_dim) {
            row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = out_dim;
    Tensor::new(shape, out)
}

pub fn fully_connected_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    with_bias: bool,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let (rows, in_dim, out_dim) = linear_dims(x, weight)?;
    if grad_out.len() != rows * out_dim {
        return Err(Error::shape(
            "fully_connected backward: gradient size mismatch",
        ));
    }
    let mut gx = vec![0.0; x.len()];
    gemm(
        rows,
        out_dim,
        in_dim,
        grad_out.data(),
        false,
        weight.data(),
        false,
        0.0,
        &mut gx,
    );
    let mut gw = vec![0.0; weight.len()];
    gemm(
        out_dim,
        rows,
        in_dim,
        grad_out.data(),
        true,
        x.data(),
        false,
        0.0,
        &mut gw,
    );
    let gb = with_bias.then(|| {
        let mut gb = vec![0.0; out_dim];
        for row in grad_out.data().chunks_exact(out_dim) {
            gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        Tensor::new(vec![out_dim], gb)
    });
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(weight.shape().to_vec(), gw)?,
        gb.transpose()?,
    ))
}

// ---------------------------------------------------------------------------
// Pooling and resampling
// ---------------------------------------------------------------------------

/// Argmax positions recorded by [`max_pool2d`]: for every pooled cell of an
/// `(N, C, h, w)` output, the row-major offset `dy·k + dx` inside its window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    shape: [usize; 4],
    offsets: Vec<u32>,
}

impl PoolIndices {
    pub fn new(shape: [usize; 4], offsets: Vec<u32>) -> Result<Self> {
        if shape.iter().product::<usize>() != offsets.len() {
            return Err(Error::shape(format!(
                "pool indices of shape {shape:?} need {} offsets, got {}",
                shape.iter().product::<usize>(),
                offsets.len()
            )));
        }
        Ok(Self { shape, offsets })
    }

    /// Shape of the pooled tensor these indices belong to.
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn offsets(&self) -> &[u32] {
        &self.offsets
    }

    /// Window position `(dy, dx)` of pooled cell `i`.
    pub fn position(&self, i: usize, k: usize) -> (usize, usize) {
        let o = self.offsets[i] as usize;
        (o / k, o % k)
    }
}

/// Non-overlapping `k × k` max pooling. Ties go to the first window position
/// in row-major order.
pub fn max_pool2d(input: &Tensor, k: usize) -> Result<(Tensor, PoolIndices)> {
    let [n, c, h, w] = input.dims4()?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::shape(format!(
            "max_pool2d: spatial extent {h}x{w} is not divisible by window {k}"
        )));
    }
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut offsets = Vec::with_capacity(n * c * oh * ow);
    for plane in input.data().chunks_exact(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = 0;
                for dy in 0..k {
                    let row = &plane[(oy * k + dy) * w + ox * k..][..k];
                    for (dx, &v) in row.iter().enumerate() {
                        // strict comparison keeps the first maximum; NaN is never selected
                        if v > best || (dy == 0 && dx == 0) {
                            best = v;
                            best_at = dy * k + dx;
                        }
                    }
                }
                out.push(best);
                offsets.push(best_at as u32);
            }
        }
    }
    let shape = [n, c, oh, ow];
    Ok((
        Tensor::new(shape.to_vec(), out)?,
        PoolIndices::new(shape, offsets)?,
    ))
}

/// Pooling with the window choice taken from `indices` instead of the input.
pub fn pool_at(input: &Tensor, indices: &PoolIndices, k: usize) -> Result<Tensor> {
    max_unpool2d_backward(indices, k, input)
}

pub fn max_pool2d_backward(
    input_shape: &[usize],
    indices: &PoolIndices,
    k: usize,
    grad_out: &Tensor,
) -> Result<Tensor> {
    same_shape(grad_out.shape(), &indices.shape, "max_pool2d backward")?;
    let mut grad = Tensor::zeros(input_shape);
    scatter_windows(grad.data_mut(), indices, k, grad_out.data());
    Ok(grad)
}

/// Writes `values[i]` at the argmax position of pooled cell `i` in `dst`.
fn scatter_windows(dst: &mut [f64], indices: &PoolIndices, k: usize, values: &[f64]) {
    let [_, _, oh, ow] = indices.shape;
    let w = ow * k;
    let plane_out = oh * ow;
    let plane_in = plane_out * k * k;
    for (i, &v) in values.iter().enumerate() {
        let (plane, cell) = (i / plane_out, i % plane_out);
        let (dy, dx) = indices.position(i, k);
        let y = (cell / ow) * k + dy;
        let x = (cell % ow) * k + dx;
        dst[plane * plane_in + y * w + x] += v;
    }
}

/// Scatters each value to the argmax position recorded in `indices`; zeros elsewhere.
pub fn max_unpool2d(input: &Tensor, indices: &PoolIndices, k: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    if indices.shape != [n, c, h, w] {
        return Err(Error::shape(format!(
            "max_unpool2d: input {:?} does not match pooling indices {:?}",
            input.shape(),
            indices.shape
        )));
    }
    if k == 0 {
        return Err(Error::shape("max_unpool2d: window must be at least 1"));
    }
    if let Some(i) = indices.offsets.iter().position(|&o| o as usize >= k * k) {
        return Err(Error::shape(format!(
            "max_unpool2d: index {} at cell {i} lies outside a {k}x{k} window",
            indices.offsets[i]
        )));
    }
    let mut out = Tensor::zeros(&[n, c, h * k, w * k]);
    scatter_windows(out.data_mut(), indices, k, input.data());
    Ok(out)
}

pub fn max_unpool2d_backward(indices: &PoolIndices, k: usize, grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = indices.shape;
    same_shape(
        grad_out.shape(),
        &[n, c, h * k, w * k],
        "max_unpool2d backward",
    )?;
    let (ow, plane_out) = (w, h * w);
    let plane_in = plane_out * k * k;
    let src = grad_out.data();
    let data = (0..indices.offsets.len())
        .map(|i| {
            let (plane, cell) = (i / plane_out, i % plane_out);
            let (dy, dx) = indices.position(i, k);
            let y = (cell / ow) * k + dy;
            let x = (cell % ow) * k + dx;
            src[plane * plane_in + y * w * k + x]
        })
        .collect();
    Tensor::new(indices.shape.to_vec(), data)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(input: &Tensor, k: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    if k == 0 {
        return Err(Error::shape("upsample_nearest: factor must be at least 1"));
    }
    let (oh, ow) = (h * k, w * k);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in input.data().chunks_exact(h * w) {
        for y in 0..oh {
            let row = &plane[(y / k) * w..(y / k + 1) * w];
            for x in 0..ow {
                out.push(row[x / k]);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn upsample_nearest_backward(
    input_shape: &[usize],
    k: usize,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let mut grad = Tensor::zeros(input_shape);
    let [_, _, h, w] = grad.dims4()?;
    let (oh, ow) = (h * k, w * k);
    let dst = grad.data_mut();
    for (p, plane) in grad_out.data().chunks_exact(oh * ow).enumerate() {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                dst[base + (y / k) * w + x / k] += plane[y * ow + x];
            }
        }
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Activations and channel softmax
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn activation(kind: Activation, x: &Tensor) -> Tensor {
    match kind {
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::Sigmoid => x.map(sigmoid),
    }
}

/// Gradient through an activation, expressed via its output `y`.
pub fn activation_backward(kind: Activation, y: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| match kind {
            Activation::Relu => {
                if y > 0.0 {
                    g
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => g * y * (1.0 - y),
        })
        .collect();
    Tensor::new(y.shape().to_vec(), data).expect("same shape")
}

/// Per-pixel softmax over the channel axis of `(N, K, H, W)` logits.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let [n, k, h, w] = logits.dims4()?;
    if k < 2 {
        return Err(Error::shape("softmax_channels needs at least two channels"));
    }
    let plane = h * w;
    let mut out = vec![0.0; logits.len()];
    let src = logits.data();
    for b in 0..n {
        let base = b * k * plane;
        for p in 0..plane {
            let at = |c: usize| base + c * plane + p;
            let max = (0..k).map(|c| src[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..k {
                let e = (src[at(c)] - max).exp();
                out[at(c)] = e;
                total += e;
            }
            for c in 0..k {
                out[at(c)] /= total;
            }
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

pub fn softmax_channels_backward(probs: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let [n, k, h, w] = probs.dims4()?;
    let plane = h * w;
    let (y, g) = (probs.data(), grad_out.data());
    let mut out = vec![0.0; probs.len()];
    for b in 0..n {
        let base = b * k * plane;
        for p in 0..plane {
            let at = |c: usize| base + c * plane + p;
            let dot: f64 = (0..k).map(|c| y[at(c)] * g[at(c)]).sum();
            for c in 0..k {
                out[at(c)] = y[at(c)] * (g[at(c)] - dot);
            }
        }
    }
    Tensor::new(probs.shape().to_vec(), out)
}

// ---------------------------------------------------------------------------
// Channel concatenation
// ---------------------------------------------------------------------------

/// Concatenates feature maps along the channel axis, in order.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_channels needs at least one input"))?;
    let [n, _, h, w] = first.dims4()?;
    let mut channels = 0;
    for t in parts {
        let [tn, tc, th, tw] = t.dims4()?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::shape(format!(
                "concat_channels: {:?} and {:?} differ outside the channel axis",
                first.shape(),
                t.shape()
            )));
        }
        channels += tc;
    }
    let mut out = Vec::with_capacity(n * channels * h * w);
    for b in 0..n {
        for t in parts {
            let block = t.len() / n;
            out.extend_from_slice(&t.data()[b * block..(b + 1) * block]);
        }
    }
    Tensor::new(vec![n, channels, h, w], out)
}

/// Splits a channel-concatenated gradient back into per-part gradients.
pub fn split_channels(grad: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let [n, c, h, w] = grad.dims4()?;
    if channels.iter().sum::<usize>() != c {
        return Err(Error::shape("split_channels: channel counts do not add up"));
    }
    let plane = h * w;
    let mut parts: Vec<Vec<f64>> = channels
        .iter()
        .map(|&pc| Vec::with_capacity(n * pc * plane))
        .collect();
    for sample in grad.data().chunks_exact(c * plane) {
        let mut start = 0;
        for (part, &pc) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&sample[start * plane..(start + pc) * plane]);
            start += pc;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(data, &pc)| Tensor::new(vec![n, pc, h, w], data))
        .collect()
}

// ---------------------------------------------------------------------------
// Squeeze and gating primitives
// ---------------------------------------------------------------------------

/// Global average pooling: `(N, C, H, W) -> (N, C)`.
pub fn spatial_mean(u: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = u.dims4()?;
    let scale = 1.0 / (h * w) as f64;
    let data = u
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().sum::<f64>() * scale)
        .collect();
    Tensor::new(vec![n, c], data)
}

pub fn spatial_mean_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let mut grad = Tensor::zeros(input_shape);
    let [_, _, h, w] = grad.dims4()?;
    let scale = 1.0 / (h * w) as f64;
    for (plane, &g) in grad.data_mut().chunks_exact_mut(h * w).zip(grad_out.data()) {
        plane.fill(g * scale);
    }
    Ok(grad)
}

/// `out[n, c, :, :] = gate[n, c] · u[n, c, :, :]`.
pub fn channel_scale(u: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = u.dims4()?;
    same_shape(gate.shape(), &[n, c], "channel_scale gate")?;
    let mut out = u.clone();
    for (plane, &g) in out.data_mut().chunks_exact_mut(h * w).zip(gate.data()) {
        plane.iter_mut().for_each(|v| *v *= g);
    }
    Ok(out)
}

pub fn channel_scale_backward(
    u: &Tensor,
    gate: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let [_, _, h, w] = u.dims4()?;
    let gu = channel_scale(grad_out, gate)?;
    let gg = u
        .data()
        .chunks_exact(h * w)
        .zip(grad_out.data().chunks_exact(h * w))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum())
        .collect();
    Ok((gu, Tensor::new(gate.shape().to_vec(), gg)?))
}

/// `out[n, c, i, j] = gate[n, 0, i, j] · u[n, c, i, j]`.
pub fn pixel_scale(u: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = u.dims4()?;
    same_shape(gate.shape(), &[n, 1, h, w], "pixel_scale gate")?;
    let plane = h * w;
    let mut out = u.clone();
    for (b, sample) in out.data_mut().chunks_exact_mut(c * plane).enumerate() {
        let g = &gate.data()[b * plane..(b + 1) * plane];
        for ch in sample.chunks_exact_mut(plane) {
            ch.iter_mut().zip(g).for_each(|(v, gv)| *v *= gv);
        }
    }
    Ok(out)
}

pub fn pixel_scale_backward(
    u: &Tensor,
    gate: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let [n, c, h, w] = u.dims4()?;
    let plane = h * w;
    let gu = pixel_scale(grad_out, gate)?;
    let mut gg = vec![0.0; n * plane];
    for b in 0..n {
        let acc = &mut gg[b * plane..(b + 1) * plane];
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (us, gs) = (
                &u.data()[off..off + plane],
                &grad_out.data()[off..off + plane],
            );
            for ((a, x), y) in acc.iter_mut().zip(us).zip(gs) {
                *a += x * y;
            }
        }
    }
    Ok((gu, Tensor::new(vec![n, 1, h, w], gg)?))
}

// ---------------------------------------------------------------------------
// Segmentation losses
// ---------------------------------------------------------------------------

fn check_labels(scores: &Tensor, labels: &LabelMap) -> Result<[usize; 4]> {
    let [n, k, h, w] = scores.dims4()?;
    if labels.shape() != [n, h, w] {
        return Err(Error::shape(format!(
            "labels {:?} do not match scores {:?}",
            labels.shape(),
            scores.shape()
        )));
    }
    labels.check_range(k)?;
    Ok([n, k, h, w])
}

/// Mean over pixels of `w[y] · (−log softmax(logits)[y])`, plus its gradient
/// w.r.t. the logits.
pub fn weighted_cross_entropy(
    logits: &Tensor,
    labels: &LabelMap,
    weights: &[f64],
) -> Result<(f64, Tensor)> {
    let [n, k, h, w] = check_labels(logits, labels)?;
    if weights.len() != k {
        return Err(Error::shape(format!(
            "{} class weights for {k} classes",
            weights.len()
        )));
    }
    let probs = softmax_channels(logits)?;
    let plane = h * w;
    let pixels = (n * plane) as f64;
    let (x, p) = (logits.data(), probs.data());
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for b in 0..n {
        let base = b * k * plane;
        for i in 0..plane {
            let at = |c: usize| base + c * plane + i;
            let y = labels.data()[b * plane + i] as usize;
            let max = (0..k).map(|c| x[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..k).map(|c| (x[at(c)] - max).exp()).sum::<f64>().ln();
            total += weights[y] * (lse - x[at(y)]);
            for c in 0..k {
                let target = if c == y { 1.0 } else { 0.0 };
                grad[at(c)] = weights[y] * (p[at(c)] - target) / pixels;
            }
        }
    }
    Ok((total / pixels, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Soft Dice loss `1 − mean_c (2·I_c + ε) / (P_c + G_c + ε)` and its gradient
/// w.r.t. the probabilities.
pub fn soft_dice(probs: &Tensor, labels: &LabelMap) -> Result<(f64, Tensor)> {
    let [n, k, h, w] = check_labels(probs, labels)?;
    let plane = h * w;
    let p = probs.data();
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut gsum = vec![0.0; k];
    for b in 0..n {
        for i in 0..plane {
            let y = labels.data()[b * plane + i] as usize;
            gsum[y] += 1.0;
            for c in 0..k {
                let v = p[(b * k + c) * plane + i];
                psum[c] += v;
                if c == y {
                    inter[c] += v;
                }
            }
        }
    }
    let num: Vec<f64> = inter.iter().map(|i| 2.0 * i + DICE_EPS).collect();
    let den: Vec<f64> = (0..k).map(|c| psum[c] + gsum[c] + DICE_EPS).collect();
    let mean_dice = (0..k).map(|c| num[c] / den[c]).sum::<f64>() / k as f64;
    let mut grad = vec![0.0; probs.len()];
    for b in 0..n {
        for i in 0..plane {
            let y = labels.data()[b * plane + i] as usize;
            for c in 0..k {
                let hit = if c == y { 2.0 } else { 0.0 };
                grad[(b * k + c) * plane + i] =
                    -(hit * den[c] - num[c]) / (den[c] * den[c] * k as f64);
            }
        }
    }
    Ok((1.0 - mean_dice, Tensor::new(probs.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_copies_input() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 - 4.0);
        let y = conv2d(&x, &t(&[1, 1, 1, 1], &[1.0]), None, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let x = Tensor::from_fn(&[2, 3, 4, 4], |i| (i as f64).sin());
        let w = Tensor::zeros(&[5, 3, 3, 3]);
        let b = Tensor::zeros(&[5]);
        let y = conv2d(&x, &w, Some(&b), 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 5, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), None, 1, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2]), None, 1, 0).is_err());
        // (4 + 0 - 3) / 2 is not an integer
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), None, 2, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), None, 0, 1).is_err());
    }

    #[test]
    fn strided_conv_output_extent() {
        let x = Tensor::zeros(&[1, 1, 5, 5]);
        let y = conv2d(&x, &Tensor::zeros(&[2, 1, 3, 3]), None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 3]);
    }

    #[test]
    fn fully_connected_hand_case() {
        let x = t(&[2], &[1.0, 2.0]);
        let w = t(&[2, 2], &[1.0, 1.0, 1.0, -1.0]);
        assert_eq!(fully_connected(&x, &w, None).unwrap().data(), &[3.0, -1.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(fully_connected(&x, &eye, None).unwrap(), x);
        let zero = Tensor::zeros(&[3, 2]);
        assert_eq!(fully_connected(&x, &zero, None).unwrap().data(), &[0.0; 3]);
        assert!(fully_connected(&x, &Tensor::zeros(&[2, 3]), None).is_err());
    }

    #[test]
    fn max_pool_hand_case_and_ties() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (y, idx) = max_pool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx.position(0, 2), (1, 1));

        let c = Tensor::full(&[1, 2, 4, 4], 7.0);
        let (y, idx) = max_pool2d(&c, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        assert!(idx.offsets().iter().all(|&o| o == 0));

        assert!(max_pool2d(&Tensor::zeros(&[1, 1, 3, 4]), 2).is_err());
    }

    #[test]
    fn unpool_hand_case() {
        let x = t(&[1, 1, 1, 1], &[5.0]);
        let idx = PoolIndices::new([1, 1, 1, 1], vec![2]).unwrap();
        let y = max_unpool2d(&x, &idx, 2).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 5.0, 0.0]);

        let bad = PoolIndices::new([1, 1, 1, 1], vec![4]).unwrap();
        assert!(max_unpool2d(&x, &bad, 2).is_err());

        let zero = Tensor::zeros(&[1, 1, 1, 1]);
        assert!(max_unpool2d(&zero, &idx, 2)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn unpool_of_pool_keeps_only_maxima() {
        let x = Tensor::from_fn(&[2, 3, 4, 6], |i| {
            ((i * 37) % 11) as f64 - 5.0 + i as f64 * 1e-3
        });
        let (pooled, idx) = max_pool2d(&x, 2).unwrap();
        let back = max_unpool2d(&pooled, &idx, 2).unwrap();
        let nonzero = back.data().iter().filter(|&&v| v != 0.0).count();
        assert!(nonzero <= pooled.len());
        for (b, orig) in back.data().iter().zip(x.data()) {
            assert!(*b == 0.0 || b == orig);
        }
        let mut kept: Vec<f64> = back.data().iter().copied().filter(|&v| v != 0.0).collect();
        let mut maxima: Vec<f64> = pooled
            .data()
            .iter()
            .copied()
            .filter(|&v| v != 0.0)
            .collect();
        kept.sort_by(f64::total_cmp);
        maxima.sort_by(f64::total_cmp);
        assert_eq!(kept, maxima);
    }

    #[test]
    fn upsample_replicates() {
        let x = t(&[1, 1, 1, 1], &[3.0]);
        assert_eq!(upsample_nearest(&x, 2).unwrap().data(), &[3.0; 4]);
        let y = Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64);
        assert_eq!(upsample_nearest(&y, 1).unwrap(), y);
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid(0.0), 0.5);
        let r = activation(Activation::Relu, &t(&[2], &[-1.0, 2.0]));
        assert_eq!(r.data(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_cases() {
        let eq = Tensor::full(&[1, 4, 2, 2], 0.3);
        assert!(softmax_channels(&eq)
            .unwrap()
            .data()
            .iter()
            .all(|&p| p == 0.25));

        let two = t(&[1, 2, 1, 1], &[0.0, 3f64.ln()]);
        let p = softmax_channels(&two).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);

        assert!(softmax_channels(&Tensor::zeros(&[1, 1, 2, 2])).is_err());
    }

    #[test]
    fn concat_shapes_and_single_part() {
        let a = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64);
        let b = Tensor::from_fn(&[1, 3, 4, 4], |i| -(i as f64));
        assert_eq!(concat_channels(&[&a, &b]).unwrap().shape(), &[1, 5, 4, 4]);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        assert!(concat_channels(&[&a, &Tensor::zeros(&[1, 3, 2, 4])]).is_err());
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let labels = LabelMap::new(vec![1, 1, 1], vec![1]).unwrap();
        let logits = t(&[1, 2, 1, 1], &[0.0, 3f64.ln()]);
        let (loss, _) = weighted_cross_entropy(&logits, &labels, &[1.0, 2.0]).unwrap();
        assert!((loss - 2.0 * -(0.75f64.ln())).abs() < 1e-14);
        assert!((loss - 0.5754).abs() < 1e-4);

        let uniform = Tensor::zeros(&[2, 3, 2, 2]);
        let labels = LabelMap::new(vec![2, 2, 2], vec![0, 1, 2, 0, 1, 2, 2, 1]).unwrap();
        let (loss, _) = weighted_cross_entropy(&uniform, &labels, &[1.0; 3]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-14);

        let bad = LabelMap::new(vec![1, 1, 1], vec![2]).unwrap();
        assert!(weighted_cross_entropy(&logits, &bad, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn saturated_prediction_has_no_loss() {
        let labels = LabelMap::new(vec![1, 1, 2], vec![0, 2]).unwrap();
        let logits = t(&[1, 3, 1, 2], &[40.0, 0.0, 0.0, 0.0, 0.0, 40.0]);
        let (loss, _) = weighted_cross_entropy(&logits, &labels, &[1.0; 3]).unwrap();
        assert!(loss <= 1e-12, "{loss}");
    }

    #[test]
    fn soft_dice_cases() {
        let labels = LabelMap::new(vec![1, 1, 2], vec![0, 1]).unwrap();
        let uniform = Tensor::full(&[1, 2, 1, 2], 0.5);
        let (loss, _) = soft_dice(&uniform, &labels).unwrap();
        let per_class = (1.0 + DICE_EPS) / (2.0 + DICE_EPS);
        assert!((loss - (1.0 - per_class)).abs() < 1e-15);
        assert!((loss - 0.5).abs() < 1e-6);

        let exact = t(&[1, 2, 1, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert!(soft_dice(&exact, &labels).unwrap().0 <= 1e-5);

        let wrong = t(&[1, 2, 1, 2], &[0.0, 1.0, 1.0, 0.0]);
        assert!((soft_dice(&wrong, &labels).unwrap().0 - 1.0).abs() < 1e-5);
    }
}
