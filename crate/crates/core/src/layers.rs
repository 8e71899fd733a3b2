//! Convolution, transposed convolution and PReLU with hand-written backward
//! passes.
//!
//! Convolutions lower to `im2col` + GEMM per sample. The transposed
//! convolution runs the same machinery in reverse (GEMM then `col2im`), so it
//! is exactly the adjoint of a strided convolution with the same kernel.
//!
//! Samples of a batch are processed independently (in parallel when a rayon
//! pool has more than one thread); parameter gradients are reduced in sample
//! order afterwards, which makes every result independent of the thread
//! count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{axpy, Tensor};

/// Row-major `C = A * B + beta * C` with arbitrary strides on `A` and `B`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + n - 1 < c.len());
    // SAFETY: the asserts above bound every element sgemm touches.
    unsafe {
        matrixmultiply::sgemm(
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
            rsc as isize,
            1,
        )
    }
}

/// Sliding-window geometry of a convolution over one `(c, h, w)` sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(Error::shape("kernel and stride must be positive"));
        }
        if height + 2 * pad < kernel || width + 2 * pad < kernel {
            return Err(Error::shape(format!(
                "{height}x{width} input with padding {pad} is smaller than kernel {kernel}"
            )));
        }
        Ok(Geometry {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output indices `o` in `[lo, hi)` whose source `o * stride + tap - pad`
    /// lies inside `[0, len)`.
    fn valid_range(&self, tap: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as i64;
        let shift = tap as i64 - self.pad as i64;
        // smallest o with o*s + shift >= 0
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        // largest o with o*s + shift <= len - 1
        let top = len as i64 - 1 - shift;
        let hi = if top < 0 { 0 } else { top / s + 1 };
        let lo = lo.clamp(0, out_len as i64) as usize;
        let hi = hi.clamp(0, out_len as i64) as usize;
        (lo, hi.max(lo))
    }
}

/// Unrolls a `(c, h, w)` sample into a `(c*k*k, out_h*out_w)` matrix.
pub(crate) fn im2col(src: &[f32], g: &Geometry, col: &mut [f32]) {
    let (k, s) = (g.kernel, g.stride);
    let plane = g.height * g.width;
    let cols = g.col_cols();
    col[..g.col_rows() * cols].fill(0.0);
    for c in 0..g.channels {
        let src_plane = &src[c * plane..(c + 1) * plane];
        for ky in 0..k {
            let (oy0, oy1) = g.valid_range(ky, g.height, g.out_h);
            for kx in 0..k {
                let (ox0, ox1) = g.valid_range(kx, g.width, g.out_w);
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - g.pad;
                    let src_row = &src_plane[iy * g.width..(iy + 1) * g.width];
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if s == 1 {
                        let ix0 = ox0 + kx - g.pad;
                        dst_row[ox0..ox1].copy_from_slice(&src_row[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            dst_row[ox] = src_row[ox * s + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `(c, h, w)`.
pub(crate) fn col2im(col: &[f32], g: &Geometry, dst: &mut [f32]) {
    let (k, s) = (g.kernel, g.stride);
    let plane = g.height * g.width;
    let cols = g.col_cols();
    for c in 0..g.channels {
        let dst_plane = &mut dst[c * plane..(c + 1) * plane];
        for ky in 0..k {
            let (oy0, oy1) = g.valid_range(ky, g.height, g.out_h);
            for kx in 0..k {
                let (ox0, ox1) = g.valid_range(kx, g.width, g.out_w);
                let row = (c * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - g.pad;
                    let dst_row = &mut dst_plane[iy * g.width..(iy + 1) * g.width];
                    let src_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    if s == 1 {
                        let ix0 = ox0 + kx - g.pad;
                        for (d, &v) in dst_row[ix0..ix0 + (ox1 - ox0)]
                            .iter_mut()
                            .zip(&src_row[ox0..ox1])
                        {
                            *d += v;
                        }
                    } else {
                        for ox in ox0..ox1 {
                            dst_row[ox * s + kx - g.pad] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// `Conv(f, n, c)`: `n` filters of size `f x f` over `c` input channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `(out_channels, in_channels, f, f)`.
    pub weights: Tensor,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub pad: usize,
}

/// Gradients of a convolution-like layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub grad_in: Tensor,
    pub grad_w: Tensor,
    pub grad_b: Vec<f32>,
}

/// Parameter gradients plus an optional input gradient, used internally when
/// the input gradient is not needed (first layer, frozen prefix).
pub(crate) struct ParamGrads {
    pub grad_in: Option<Tensor>,
    pub grad_w: Tensor,
    pub grad_b: Vec<f32>,
}

impl ParamGrads {
    fn into_full(self) -> ConvGrads {
        ConvGrads {
            grad_in: self.grad_in.expect("input gradient requested"),
            grad_w: self.grad_w,
            grad_b: self.grad_b,
        }
    }
}

/// Sequentially sums per-sample parameter gradients in sample order.
fn reduce_samples(
    parts: Vec<(Vec<f32>, Vec<f32>, Vec<f32>)>,
    grad_in: Option<&mut Tensor>,
    w_shape: [usize; 4],
    n_bias: usize,
) -> (Tensor, Vec<f32>) {
    let mut grad_w = Tensor::zeros(w_shape);
    let mut grad_b = vec![0.0f32; n_bias];
    let mut grad_in = grad_in;
    for (b, (gin, gw, gb)) in parts.into_iter().enumerate() {
        axpy(grad_w.data_mut(), 1.0, &gw);
        axpy(&mut grad_b, 1.0, &gb);
        if let Some(t) = grad_in.as_deref_mut() {
            t.sample_mut(b).copy_from_slice(&gin);
        }
    }
    (grad_w, grad_b)
}

impl ConvLayer {
    /// Zero-initialised stride-1 layer with "same" zero padding `f / 2`.
    pub fn new(filter: usize, filters: usize, channels: usize) -> Self {
        ConvLayer {
            weights: Tensor::zeros([filters, channels, filter, filter]),
            bias: vec![0.0; filters],
            stride: 1,
            pad: filter / 2,
        }
    }

    pub fn with_params(weights: Tensor, bias: Vec<f32>, stride: usize, pad: usize) -> Result<Self> {
        let [o, _, kh, kw] = weights.shape();
        if kh != kw {
            return Err(Error::shape(format!("kernel {kh}x{kw} is not square")));
        }
        if bias.len() != o {
            return Err(Error::shape(format!("{} biases for {o} filters", bias.len())));
        }
        if stride == 0 {
            return Err(Error::shape("stride must be positive"));
        }
        Ok(ConvLayer {
            weights,
            bias,
            stride,
            pad,
        })
    }

    pub fn filter_size(&self) -> usize {
        self.weights.height()
    }

    pub fn out_channels(&self) -> usize {
        self.weights.batch()
    }

    pub fn in_channels(&self) -> usize {
        self.weights.channels()
    }

    fn geometry(&self, input: &Tensor) -> Result<Geometry> {
        if input.channels() != self.in_channels() {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels(),
                input.channels()
            )));
        }
        Geometry::new(
            input.channels(),
            input.height(),
            input.width(),
            self.filter_size(),
            self.stride,
            self.pad,
        )
    }

    pub fn output_shape(&self, input: &Tensor) -> Result<[usize; 4]> {
        let g = self.geometry(input)?;
        Ok([input.batch(), self.out_channels(), g.out_h, g.out_w])
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let g = self.geometry(input)?;
        let oc = self.out_channels();
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let mut out = Tensor::zeros([input.batch(), oc, g.out_h, g.out_w]);
        if out.is_empty() {
            return Ok(out);
        }
        let w = self.weights.data();
        out.data_mut()
            .par_chunks_mut(oc * cols)
            .enumerate()
            .for_each_init(Vec::new, |col, (b, dst)| {
                for (o, plane) in dst.chunks_mut(cols).enumerate() {
                    plane.fill(self.bias[o]);
                }
                let x = input.sample(b);
                let col_ref: &[f32] = if g.is_pointwise() {
                    x
                } else {
                    col.resize(rows * cols, 0.0);
                    im2col(x, &g, col);
                    col
                };
                gemm(oc, rows, cols, w, rows, 1, col_ref, cols, 1, 1.0, dst, cols);
            });
        Ok(out)
    }

    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
        Ok(self.backward_impl(input, grad_out, true)?.into_full())
    }

    pub(crate) fn backward_impl(
        &self,
        input: &Tensor,
        grad_out: &Tensor,
        need_grad_in: bool,
    ) -> Result<ParamGrads> {
        let expected = self.output_shape(input)?;
        if grad_out.shape() != expected {
            return Err(Error::shape(format!(
                "conv grad_out {:?}, forward output {expected:?}",
                grad_out.shape()
            )));
        }
        let g = self.geometry(input)?;
        let oc = self.out_channels();
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let w = self.weights.data();
        let parts: Vec<_> = (0..input.batch())
            .into_par_iter()
            .map(|b| {
                let x = input.sample(b);
                let gy = grad_out.sample(b);
                let owned;
                let col: &[f32] = if g.is_pointwise() {
                    x
                } else {
                    let mut c = vec![0.0; rows * cols];
                    im2col(x, &g, &mut c);
                    owned = c;
                    &owned
                };
                // dW = dY (oc x P) * col^T (P x rows)
                let mut gw = vec![0.0; oc * rows];
                gemm(oc, cols, rows, gy, cols, 1, col, 1, cols, 0.0, &mut gw, rows);
                let gb: Vec<f32> = gy
                    .chunks(cols)
                    .map(|p| p.iter().map(|&v| v as f64).sum::<f64>() as f32)
                    .collect();
                let gin = if need_grad_in {
                    // dcol = W^T (rows x oc) * dY (oc x P)
                    let mut dcol = vec![0.0; rows * cols];
                    gemm(rows, oc, cols, w, 1, rows, gy, cols, 1, 0.0, &mut dcol, cols);
                    if g.is_pointwise() {
                        dcol
                    } else {
                        let mut gin = vec![0.0; input.sample_len()];
                        col2im(&dcol, &g, &mut gin);
                        gin
                    }
                } else {
                    Vec::new()
                };
                (gin, gw, gb)
            })
            .collect();
        let mut grad_in = need_grad_in.then(|| Tensor::zeros(input.shape()));
        let (grad_w, grad_b) =
            reduce_samples(parts, grad_in.as_mut(), self.weights.shape(), oc);
        Ok(ParamGrads {
            grad_in,
            grad_w,
            grad_b,
        })
    }
}

/// `DeConv(f, n, c)`: transposed convolution upsampling by `stride`, with
/// `crop` pixels removed from every side of the full output.
#[derive(Clone, Debug, PartialEq)]
pub struct DeconvLayer {
    /// `(in_channels, out_channels, f, f)`.
    pub weights: Tensor,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub crop: usize,
}

impl DeconvLayer {
    /// Zero-initialised layer; the crop is `f / 2` so an `h`-pixel input maps
    /// to `stride * h - stride + 1` pixels for odd `f`.
    pub fn new(filter: usize, filters: usize, channels: usize, stride: usize) -> Self {
        DeconvLayer {
            weights: Tensor::zeros([channels, filters, filter, filter]),
            bias: vec![0.0; filters],
            stride,
            crop: filter / 2,
        }
    }

    pub fn with_params(weights: Tensor, bias: Vec<f32>, stride: usize, crop: usize) -> Result<Self> {
        let [_, o, kh, kw] = weights.shape();
        if kh != kw {
            return Err(Error::shape(format!("kernel {kh}x{kw} is not square")));
        }
        if bias.len() != o {
            return Err(Error::shape(format!("{} biases for {o} filters", bias.len())));
        }
        if stride == 0 || 2 * crop >= kh + stride {
            return Err(Error::shape(format!(
                "stride {stride} / crop {crop} invalid for kernel {kh}"
            )));
        }
        Ok(DeconvLayer {
            weights,
            bias,
            stride,
            crop,
        })
    }

    pub fn filter_size(&self) -> usize {
        self.weights.height()
    }

    pub fn in_channels(&self) -> usize {
        self.weights.batch()
    }

    pub fn out_channels(&self) -> usize {
        self.weights.channels()
    }

    /// Output side for an input side of `len` pixels.
    pub fn output_len(&self, len: usize) -> usize {
        (self.stride * (len.max(1) - 1) + self.filter_size()).saturating_sub(2 * self.crop)
    }

    /// Geometry of the strided convolution this layer is the transpose of:
    /// it maps the deconvolution's output back onto its input grid.
    fn geometry(&self, input: &Tensor) -> Result<Geometry> {
        if input.channels() != self.in_channels() {
            return Err(Error::shape(format!(
                "deconv expects {} input channels, got {}",
                self.in_channels(),
                input.channels()
            )));
        }
        if input.height() == 0 || input.width() == 0 {
            return Err(Error::shape("deconv input has an empty spatial extent"));
        }
        let g = Geometry::new(
            self.out_channels(),
            self.output_len(input.height()),
            self.output_len(input.width()),
            self.filter_size(),
            self.stride,
            self.crop,
        )?;
        debug_assert_eq!((g.out_h, g.out_w), (input.height(), input.width()));
        Ok(g)
    }

    pub fn output_shape(&self, input: &Tensor) -> Result<[usize; 4]> {
        let g = self.geometry(input)?;
        Ok([input.batch(), self.out_channels(), g.height, g.width])
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let g = self.geometry(input)?;
        let ic = self.in_channels();
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let out_plane = g.height * g.width;
        let mut out = Tensor::zeros([input.batch(), self.out_channels(), g.height, g.width]);
        let w = self.weights.data();
        out.data_mut()
            .par_chunks_mut(self.out_channels() * out_plane)
            .enumerate()
            .for_each_init(Vec::new, |col, (b, dst)| {
                col.resize(rows * cols, 0.0);
                // col = W^T (oc*k*k x ic) * x (ic x hw)
                gemm(rows, ic, cols, w, 1, rows, input.sample(b), cols, 1, 0.0, col, cols);
                col2im(col, &g, dst);
                for (o, plane) in dst.chunks_mut(out_plane).enumerate() {
                    plane.iter_mut().for_each(|v| *v += self.bias[o]);
                }
            });
        Ok(out)
    }

    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
        Ok(self.backward_impl(input, grad_out, true)?.into_full())
    }

    pub(crate) fn backward_impl(
        &self,
        input: &Tensor,
        grad_out: &Tensor,
        need_grad_in: bool,
    ) -> Result<ParamGrads> {
        let expected = self.output_shape(input)?;
        if grad_out.shape() != expected {
            return Err(Error::shape(format!(
                "deconv grad_out {:?}, forward output {expected:?}",
                grad_out.shape()
            )));
        }
        let g = self.geometry(input)?;
        let (ic, oc) = (self.in_channels(), self.out_channels());
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let out_plane = g.height * g.width;
        let w = self.weights.data();
        let parts: Vec<_> = (0..input.batch())
            .into_par_iter()
            .map(|b| {
                let gy = grad_out.sample(b);
                let mut col = vec![0.0; rows * cols];
                im2col(gy, &g, &mut col);
                // dW = x (ic x hw) * col^T (hw x rows)
                let mut gw = vec![0.0; ic * rows];
                gemm(ic, cols, rows, input.sample(b), cols, 1, &col, 1, cols, 0.0, &mut gw, rows);
                let gb: Vec<f32> = gy
                    .chunks(out_plane)
                    .map(|p| p.iter().map(|&v| v as f64).sum::<f64>() as f32)
                    .collect();
                let gin = if need_grad_in {
                    let mut gin = vec![0.0; ic * cols];
                    gemm(ic, rows, cols, w, rows, 1, &col, cols, 1, 0.0, &mut gin, cols);
                    gin
                } else {
                    Vec::new()
                };
                (gin, gw, gb)
            })
            .collect();
        let mut grad_in = need_grad_in.then(|| Tensor::zeros(input.shape()));
        let (grad_w, grad_b) =
            reduce_samples(parts, grad_in.as_mut(), self.weights.shape(), oc);
        Ok(ParamGrads {
            grad_in,
            grad_w,
            grad_b,
        })
    }

    /// The strided convolution whose transpose this layer computes (no bias).
    pub fn transposed_conv(&self) -> ConvLayer {
        ConvLayer {
            weights: self.weights.clone(),
            bias: vec![0.0; self.in_channels()],
            stride: self.stride,
            pad: self.crop,
        }
    }
}

/// Per-channel parametric ReLU, `max(x, 0) + a * min(x, 0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PReluLayer {
    pub slopes: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PReluGrads {
    pub grad_in: Tensor,
    pub grad_a: Vec<f32>,
}

impl PReluLayer {
    pub fn new(channels: usize, slope: f32) -> Self {
        PReluLayer {
            slopes: vec![slope; channels],
        }
    }

    fn check(&self, input: &Tensor) -> Result<()> {
        if input.channels() != self.slopes.len() {
            return Err(Error::shape(format!(
                "{} PReLU slopes for {} channels",
                self.slopes.len(),
                input.channels()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check(input)?;
        let mut out = input.clone();
        let plane = input.height() * input.width();
        if plane == 0 {
            return Ok(out);
        }
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let a = self.slopes[i % self.slopes.len()];
            for v in chunk {
                if *v < 0.0 {
                    *v *= a;
                }
            }
        }
        Ok(out)
    }

    /// The gradient at exactly zero takes the positive branch.
    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<PReluGrads> {
        self.check(input)?;
        if grad_out.shape() != input.shape() {
            return Err(Error::shape(format!(
                "PReLU grad_out {:?} vs input {:?}",
                grad_out.shape(),
                input.shape()
            )));
        }
        let c = self.slopes.len();
        let plane = input.height() * input.width();
        let mut grad_in = grad_out.clone();
        let mut acc = vec![0.0f64; c];
        if plane > 0 {
            for (i, (gchunk, xchunk)) in grad_in
                .data_mut()
                .chunks_mut(plane)
                .zip(input.data().chunks(plane))
                .enumerate()
            {
                let ch = i % c;
                let a = self.slopes[ch];
                for (g, &x) in gchunk.iter_mut().zip(xchunk) {
                    if x < 0.0 {
                        acc[ch] += *g as f64 * x as f64;
                        *g *= a;
                    }
                }
            }
        }
        Ok(PReluGrads {
            grad_in,
            grad_a: acc.into_iter().map(|v| v as f32).collect(),
        })
    }
}
