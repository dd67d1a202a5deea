//! Slow, obviously-correct reference kernels.
//!
//! These exist to cross-check the production paths in tests and benchmarks.
//! They share no code with the im2col implementation: the convolution below
//! is the plain seven-loop definition evaluated directly.

use crate::error::Result;
use crate::tensor::{ConvSpec, Element, Shape, Tensor};

/// Direct nested-loop 2-D convolution (cross-correlation, zero padding).
pub fn naive_conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let xs = input.shape();
    let (oh, ow) = spec.out_dims(xs.h, xs.w)?;
    let os = Shape::new(xs.n, spec.out_channels, oh, ow);
    let mut out = vec![T::zero(); os.numel()];
    for n in 0..xs.n {
        for oc in 0..spec.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(T::zero(), |b| b.data()[oc]);
                    for ic in 0..spec.in_channels {
                        for ky in 0..spec.kernel.0 {
                            for kx in 0..spec.kernel.1 {
                                let iy = (oy * spec.stride + ky * spec.dilation) as i64
                                    - spec.padding as i64;
                                let ix = (ox * spec.stride + kx * spec.dilation) as i64
                                    - spec.padding as i64;
                                if iy < 0 || iy >= xs.h as i64 || ix < 0 || ix >= xs.w as i64 {
                                    continue;
                                }
                                acc += input.at(n, ic, iy as usize, ix as usize)
                                    * weight.at(oc, ic, ky, kx);
                            }
                        }
                    }
                    out[os.offset(n, oc, oy, ox)] = acc;
                }
            }
        }
    }
    Tensor::new(os, out)
}

/// Direct evaluation of the 2x bilinear interpolation formula: output pixel
/// `i` samples source coordinate `(i + 0.5)/2 - 0.5`, clamped to the edges.
pub fn bilinear_upsample2x_reference<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let xs = input.shape();
    let os = Shape::new(xs.n, xs.c, 2 * xs.h, 2 * xs.w);
    let sample = |len: usize, coord: f64| -> (usize, usize, f64) {
        let floor = coord.floor();
        let t = coord - floor;
        let i0 = (floor.max(0.0) as usize).min(len - 1);
        let i1 = ((floor + 1.0).max(0.0) as usize).min(len - 1);
        (i0, i1, t)
    };
    Tensor::from_fn(os, |flat| {
        let ox = flat % os.w;
        let oy = (flat / os.w) % os.h;
        let c = (flat / (os.w * os.h)) % os.c;
        let n = flat / (os.w * os.h * os.c);
        let sy = (oy as f64 + 0.5) * 0.5 - 0.5;
        let sx = (ox as f64 + 0.5) * 0.5 - 0.5;
        let (y0, y1, ty) = sample(xs.h, sy);
        let (x0, x1, tx) = sample(xs.w, sx);
        let v00 = input.at(n, c, y0, x0).as_f64();
        let v01 = input.at(n, c, y0, x1).as_f64();
        let v10 = input.at(n, c, y1, x0).as_f64();
        let v11 = input.at(n, c, y1, x1).as_f64();
        let top = v00 * (1.0 - tx) + v01 * tx;
        let bot = v10 * (1.0 - tx) + v11 * tx;
        T::from_f64(top * (1.0 - ty) + bot * ty)
    })
}
