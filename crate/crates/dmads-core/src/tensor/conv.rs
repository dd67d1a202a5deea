//! 2-D convolution kernels: an im2col + matmul fast path for the forward
//! pass and the matching input/weight/bias gradient kernels.
//!
//! Everything here is single-threaded and iterates in a fixed order, so
//! results are bitwise reproducible run to run.

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Geometry of a 2-D convolution. `dilation >= 1`; padding is zero-padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
            dilation: 1,
            bias: true,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    /// A stride-1 `k x k` convolution padded to preserve the spatial size.
    /// For dilation `d` the preserving padding of a 3x3 kernel is `d`.
    pub fn same(in_channels: usize, out_channels: usize, k: usize, dilation: usize) -> Self {
        ConvSpec::new(in_channels, out_channels, (k, k))
            .with_dilation(dilation)
            .with_padding(dilation * (k - 1) / 2)
    }

    /// Expected weight tensor shape `(out, in, kh, kw)`.
    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels,
            self.kernel.0,
            self.kernel.1,
        )
    }

    fn out_extent(&self, input: usize, kernel: usize, dimension: &'static str) -> Result<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input as i64 + 2 * self.padding as i64;
        let size = (padded - span as i64).div_euclid(self.stride as i64) + 1;
        if size < 1 {
            return Err(Error::EmptyConvOutput {
                dimension,
                size,
                input,
                kernel,
                stride: self.stride,
                padding: self.padding,
                dilation: self.dilation,
            });
        }
        Ok(size as usize)
    }

    /// Output spatial size for an `h x w` input, or an error when it would
    /// collapse below one pixel.
    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            self.out_extent(h, self.kernel.0, "height")?,
            self.out_extent(w, self.kernel.1, "width")?,
        ))
    }

    /// Multiply-accumulate count for one forward pass over an `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        match self.out_dims(h, w) {
            Ok((oh, ow)) => {
                (oh * ow * self.out_channels) as u64
                    * (self.in_channels * self.kernel.0 * self.kernel.1) as u64
            }
            Err(_) => 0,
        }
    }

    /// Learnable element count (weights plus optional bias).
    pub fn param_count(&self) -> u64 {
        let w = self.weight_shape().numel() as u64;
        if self.bias {
            w + self.out_channels as u64
        } else {
            w
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilation < 1 || self.stride < 1 {
            return Err(Error::InvalidConfig {
                op: "conv2d",
                reason: format!(
                    "stride ({}) and dilation ({}) must be >= 1",
                    self.stride, self.dilation
                ),
            });
        }
        if self.kernel.0 < 1 || self.kernel.1 < 1 || self.in_channels < 1 || self.out_channels < 1
        {
            return Err(Error::InvalidConfig {
                op: "conv2d",
                reason: "kernel and channel extents must be >= 1".to_string(),
            });
        }
        Ok(())
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == 1 && self.padding == 0
    }
}

/// `C[m, :] += sum_k A[m, k] * B[k, :]` over row-major slices.
///
/// The k-inner/j-innermost ordering streams both `B` rows and the output row,
/// which vectorizes well; it is the hot loop of the whole crate.
pub(crate) fn matmul_acc<T: Element>(
    c: &mut [T],
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// `C[m, :] += sum_k A[k, m] * B[k, :]` (A consumed transposed).
pub(crate) fn matmul_at_b_acc<T: Element>(
    c: &mut [T],
    a: &[T],
    b: &[T],
    k: usize,
    m: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += a_pi * bv;
            }
        }
    }
}

/// `C[m, n] += sum_j A[m, j] * B[n, j]` (B consumed transposed).
pub(crate) fn matmul_a_bt_acc<T: Element>(
    c: &mut [T],
    a: &[T],
    b: &[T],
    m: usize,
    j: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * j);
    debug_assert_eq!(b.len(), n * j);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * j..(i + 1) * j];
        for q in 0..n {
            let b_row = &b[q * j..(q + 1) * j];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc += av * bv;
            }
            c[i * n + q] += acc;
        }
    }
}

/// Expanded patch matrix for one batch item: `(C*kh*kw) x (oh*ow)`.
///
/// Out-of-bounds taps read as zero (zero padding). The row for `(c, kh, kw)`
/// is contiguous over output positions, matching `matmul_acc`'s layout.
pub(crate) fn im2col<T: Element>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let (kh, kw) = spec.kernel;
    debug_assert_eq!(cols.len(), c_in * kh * kw * oh * ow);
    let mut row = 0;
    for c in 0..c_in {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let dy = (ky * spec.dilation) as i64 - spec.padding as i64;
                let dx = (kx * spec.dilation) as i64 - spec.padding as i64;
                let out_row = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as i64 * spec.stride as i64 + dy;
                    let dst = &mut out_row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as i64 {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as i64 * spec.stride as i64 + dx;
                        *d = if ix < 0 || ix >= w as i64 {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add a column matrix back onto the input layout (adjoint of
/// [`im2col`]). Used for the input gradient.
pub(crate) fn col2im_acc<T: Element>(
    cols: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let (kh, kw) = spec.kernel;
    let mut row = 0;
    for c in 0..c_in {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let dy = (ky * spec.dilation) as i64 - spec.padding as i64;
                let dx = (kx * spec.dilation) as i64 - spec.padding as i64;
                let src_row = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as i64 * spec.stride as i64 + dy;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = ox as i64 * spec.stride as i64 + dx;
                        if ix >= 0 && ix < w as i64 {
                            dst[ix as usize] += src_row[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution over a full batch. Shapes were validated by the caller.
pub(crate) fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let ishape = input.shape();
    let (oh, ow) = spec.out_dims(ishape.h, ishape.w)?;
    let oshape = Shape::new(ishape.n, spec.out_channels, oh, ow);
    let mut out = vec![T::zero(); oshape.numel()];

    let k = spec.in_channels * spec.kernel.0 * spec.kernel.1;
    let l = oh * ow;
    let in_plane = ishape.c * ishape.h * ishape.w;
    let out_plane = spec.out_channels * l;

    if spec.is_pointwise() {
        // 1x1 stride-1 unpadded: the input already is the column matrix.
        for n in 0..ishape.n {
            let x = &input.data()[n * in_plane..(n + 1) * in_plane];
            let y = &mut out[n * out_plane..(n + 1) * out_plane];
            matmul_acc(y, weight.data(), x, spec.out_channels, k, l);
        }
    } else {
        let mut cols = vec![T::zero(); k * l];
        for n in 0..ishape.n {
            let x = &input.data()[n * in_plane..(n + 1) * in_plane];
            im2col(x, ishape.c, ishape.h, ishape.w, spec, oh, ow, &mut cols);
            let y = &mut out[n * out_plane..(n + 1) * out_plane];
            matmul_acc(y, weight.data(), &cols, spec.out_channels, k, l);
        }
    }

    if let Some(b) = bias {
        for n in 0..ishape.n {
            for oc in 0..spec.out_channels {
                let bv = b.data()[oc];
                let start = n * out_plane + oc * l;
                for v in &mut out[start..start + l] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(oshape, out)
}

/// Gradients of a convolution given the upstream output gradient.
/// Returns `(d_input, d_weight, d_bias)`.
pub(crate) fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let ishape = input.shape();
    let gshape = grad_out.shape();
    let (oh, ow) = (gshape.h, gshape.w);
    let k = spec.in_channels * spec.kernel.0 * spec.kernel.1;
    let l = oh * ow;
    let in_plane = ishape.c * ishape.h * ishape.w;
    let out_plane = spec.out_channels * l;

    let mut d_input = vec![T::zero(); ishape.numel()];
    let mut d_weight = vec![T::zero(); weight.shape().numel()];
    let mut d_bias = has_bias.then(|| vec![T::zero(); spec.out_channels]);

    let pointwise = spec.is_pointwise();
    let (mut cols, mut d_cols) = if pointwise {
        (Vec::new(), Vec::new())
    } else {
        (vec![T::zero(); k * l], vec![T::zero(); k * l])
    };

    for n in 0..ishape.n {
        let x = &input.data()[n * in_plane..(n + 1) * in_plane];
        let gy = &grad_out.data()[n * out_plane..(n + 1) * out_plane];

        // dW += gY . cols^T
        if pointwise {
            matmul_a_bt_acc(&mut d_weight, gy, x, spec.out_channels, l, k);
        } else {
            im2col(x, ishape.c, ishape.h, ishape.w, spec, oh, ow, &mut cols);
            matmul_a_bt_acc(&mut d_weight, gy, &cols, spec.out_channels, l, k);
        }

        // dX += col2im(W^T . gY)
        let dx = &mut d_input[n * in_plane..(n + 1) * in_plane];
        if pointwise {
            matmul_at_b_acc(dx, weight.data(), gy, spec.out_channels, k, l);
        } else {
            d_cols.fill(T::zero());
            matmul_at_b_acc(&mut d_cols, weight.data(), gy, spec.out_channels, k, l);
            col2im_acc(&d_cols, ishape.c, ishape.h, ishape.w, spec, oh, ow, dx);
        }

        if let Some(db) = d_bias.as_mut() {
            for oc in 0..spec.out_channels {
                let mut acc = T::zero();
                for &g in &gy[oc * l..(oc + 1) * l] {
                    acc += g;
                }
                db[oc] += acc;
            }
        }
    }
    (d_input, d_weight, d_bias)
}
