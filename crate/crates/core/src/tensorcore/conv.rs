//! Direct-summation 3-D convolution kernels expressed as im2col/col2im
//! around a GEMM.
//!
//! Output arithmetic (per spatial axis, input extent `n`, kernel `k`,
//! stride `s`, zero padding `p`):
//!
//! * convolution: `out = (n + 2p - k) / s + 1` (floor division)
//! * transposed convolution: the adjoint of the convolution that maps the
//!   requested output extent back onto the input extent; any output extent
//!   `o` with `(o + 2p - k) / s + 1 == n` is admissible
//! * average pooling with window `w`: `out = ceil(n / w)`; windows running
//!   past the border average only the voxels they cover

use crate::error::{Error, Result};

/// Geometry shared by a convolution and its transpose. `big` is the extent
/// the kernel slides over, `small` the extent it produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub big: [usize; 3],
    pub small: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn conv(input: [usize; 3], kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        let mut small = [0; 3];
        for ax in 0..3 {
            let span = input[ax] + 2 * pad;
            if span < kernel {
                return Err(Error::shape(
                    "conv3d",
                    format!(
                        "axis {ax}: extent {} with padding {pad} is smaller than kernel {kernel}",
                        input[ax]
                    ),
                ));
            }
            small[ax] = (span - kernel) / stride + 1;
        }
        Ok(ConvGeom {
            big: input,
            small,
            kernel,
            stride,
            pad,
        })
    }

    /// Transposed convolution producing `output` from `input`.
    pub fn transpose(
        input: [usize; 3],
        output: [usize; 3],
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let g = ConvGeom::conv(output, kernel, stride, pad)?;
        if g.small != input {
            return Err(Error::shape(
                "conv_transpose3d",
                format!(
                    "input extent {:?} cannot produce output {:?} with kernel {kernel}, stride {stride}, padding {pad} (expects input {:?})",
                    input, output, g.small
                ),
            ));
        }
        Ok(g)
    }

    pub fn big_len(&self) -> usize {
        self.big.iter().product()
    }

    pub fn small_len(&self) -> usize {
        self.small.iter().product()
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }
}

/// `x`: `channels x big` -> `col`: `(channels * taps) x small`.
pub fn im2col(x: &[f64], channels: usize, g: &ConvGeom, col: &mut [f64]) {
    let [bd, bh, bw] = g.big;
    let [sd, sh, sw] = g.small;
    let k = g.kernel;
    let p_small = g.small_len();
    debug_assert_eq!(col.len(), channels * g.taps() * p_small);
    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * bd * bh * bw..(c + 1) * bd * bh * bw];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let out = &mut col[row * p_small..(row + 1) * p_small];
                    for od in 0..sd {
                        let id = (od * g.stride + kd) as isize - g.pad as isize;
                        for oh in 0..sh {
                            let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                            let base = (od * sh + oh) * sw;
                            if id < 0 || id >= bd as isize || ih < 0 || ih >= bh as isize {
                                out[base..base + sw].fill(0.0);
                                continue;
                            }
                            let xrow = &xc[(id as usize * bh + ih as usize) * bw..];
                            for ow in 0..sw {
                                let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                                out[base + ow] = if iw < 0 || iw >= bw as isize {
                                    0.0
                                } else {
                                    xrow[iw as usize]
                                };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` into `x` (which is not cleared).
pub fn col2im(col: &[f64], channels: usize, g: &ConvGeom, x: &mut [f64]) {
    let [bd, bh, bw] = g.big;
    let [sd, sh, sw] = g.small;
    let k = g.kernel;
    let p_small = g.small_len();
    let mut row = 0;
    for c in 0..channels {
        let xc = &mut x[c * bd * bh * bw..(c + 1) * bd * bh * bw];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let src = &col[row * p_small..(row + 1) * p_small];
                    for od in 0..sd {
                        let id = (od * g.stride + kd) as isize - g.pad as isize;
                        if id < 0 || id >= bd as isize {
                            continue;
                        }
                        for oh in 0..sh {
                            let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                            if ih < 0 || ih >= bh as isize {
                                continue;
                            }
                            let base = (od * sh + oh) * sw;
                            let xrow = &mut xc[(id as usize * bh + ih as usize) * bw..];
                            for ow in 0..sw {
                                let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                                if iw >= 0 && iw < bw as isize {
                                    xrow[iw as usize] += src[base + ow];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Ceil-mode average pooling geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub window: usize,
}

impl PoolGeom {
    pub fn new(input: [usize; 3], window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::shape("avgpool3d", "window must be >= 1"));
        }
        let output = input.map(|n| n.div_ceil(window));
        Ok(PoolGeom {
            input,
            output,
            window,
        })
    }

    /// Calls `f(in_flat, out_flat, 1/count)` for every covered voxel.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, f64)) {
        let [id, ih, iw] = self.input;
        let [od, oh, ow] = self.output;
        let w = self.window;
        for a in 0..od {
            let da = (a * w..((a + 1) * w).min(id)).len();
            for b in 0..oh {
                let db = (b * w..((b + 1) * w).min(ih)).len();
                for c in 0..ow {
                    let dc = (c * w..((c + 1) * w).min(iw)).len();
                    let inv = 1.0 / (da * db * dc) as f64;
                    let o = (a * oh + b) * ow + c;
                    for x in a * w..((a + 1) * w).min(id) {
                        for y in b * w..((b + 1) * w).min(ih) {
                            for z in c * w..((c + 1) * w).min(iw) {
                                f((x * ih + y) * iw + z, o, inv);
                            }
                        }
                    }
                }
            }
        }
    }
}
