use rayon::prelude::*;

use super::{matmul_into, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], bias: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        if input[1] != kernel[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        if bias != [kernel[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: kernel.to_vec(),
                rhs: bias.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be at least 1"));
        }
        let (h, w, kh, kw) = (input[2], input[3], kernel[2], kernel[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::ShapeMismatch {
                op: "conv2d window larger than padded input",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        Ok(Self {
            n: input[0],
            c: input[1],
            h,
            w,
            k: kernel[0],
            kh,
            kw,
            stride,
            pad,
            oh: conv_output_size(h, kh, stride, pad),
            ow: conv_output_size(w, kw, stride, pad),
        })
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.k, self.oh, self.ow]
    }
}

pub fn conv_output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let d = &mut dx[base + ix as usize];
                            *d = *d + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Direct convolution through patch unrolling and a dense product.
/// Batch items are independent, so results do not depend on the thread count.
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    input_shape: &[usize],
    kernel: &[T],
    kernel_shape: &[usize],
    bias: &[T],
    stride: usize,
    pad: usize,
) -> Result<(Vec<usize>, Vec<T>)> {
    let g = ConvGeom::new(input_shape, kernel_shape, &[bias.len()], stride, pad)?;
    let out = conv_forward_geom(&g, input, kernel, bias);
    Ok((g.out_shape(), out))
}

pub(crate) fn conv_forward_geom<T: Scalar>(g: &ConvGeom, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let in_item = g.c * g.h * g.w;
    let out_item = g.k * g.out_plane();
    let mut out = vec![T::zero(); g.n * out_item];
    let plane = g.out_plane();
    out.par_chunks_mut(out_item.max(1))
        .zip(input.par_chunks(in_item.max(1)))
        .for_each_init(
            || vec![T::zero(); g.patch_len() * plane],
            |cols, (y, x)| {
                im2col(g, x, cols);
                for (kk, row) in y.chunks_mut(plane).enumerate() {
                    row.iter_mut().for_each(|v| *v = bias[kk]);
                }
                matmul_into(kernel, cols, g.k, g.patch_len(), plane, false, false, y, true);
            },
        );
    out
}

/// Returns (d_input, d_kernel, d_bias).
pub(crate) fn conv_backward_geom<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let in_item = g.c * g.h * g.w;
    let out_item = g.k * g.out_plane();
    let plane = g.out_plane();
    let plen = g.patch_len();
    let mut dx = vec![T::zero(); g.n * in_item];
    let partials: Vec<(Vec<T>, Vec<T>)> = dx
        .par_chunks_mut(in_item.max(1))
        .zip(input.par_chunks(in_item.max(1)))
        .zip(dout.par_chunks(out_item.max(1)))
        .map_init(
            || (vec![T::zero(); plen * plane], vec![T::zero(); plen * plane]),
            |(cols, dcols), ((dxi, x), dy)| {
                im2col(g, x, cols);
                let mut dk = vec![T::zero(); g.k * plen];
                matmul_into(dy, cols, g.k, plane, plen, false, true, &mut dk, false);
                let db: Vec<T> = dy.chunks(plane).map(|r| r.iter().copied().sum()).collect();
                matmul_into(kernel, dy, plen, g.k, plane, true, false, dcols, false);
                col2im(g, dcols, dxi);
                (dk, db)
            },
        )
        .collect();
    let mut dk = vec![T::zero(); g.k * plen];
    let mut db = vec![T::zero(); g.k];
    for (pk, pb) in partials {
        dk.iter_mut().zip(&pk).for_each(|(a, &b)| *a = *a + b);
        db.iter_mut().zip(&pb).for_each(|(a, &b)| *a = *a + b);
    }
    (dx, dk, db)
}
