//! Patch extraction for strided, zero-padded 2-D convolution.

use super::tensor::Real;

/// Spatial geometry of one convolution, seen from the "dense" side
/// (`h x w` input, `out_h x out_w` output of the forward convolution).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output length of a strided convolution, or `None` if the kernel does not
/// fit the padded input.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Output length of a transposed convolution.
pub fn conv_transpose_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || len == 0 {
        return None;
    }
    ((len - 1) * stride + kernel).checked_sub(2 * pad).filter(|v| *v > 0)
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Calls `f(col_index, input_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let cols = self.col_cols();
        for c in 0..self.channels {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    for oh in 0..self.out_h {
                        let ih = (oh * self.stride + i) as isize - self.pad as isize;
                        if ih < 0 || ih as usize >= self.h {
                            continue;
                        }
                        let in_row = (c * self.h + ih as usize) * self.w;
                        let col_row = row * cols + oh * self.out_w;
                        for ow in 0..self.out_w {
                            let iw = (ow * self.stride + j) as isize - self.pad as isize;
                            if iw < 0 || iw as usize >= self.w {
                                continue;
                            }
                            f(col_row + ow, in_row + iw as usize);
                        }
                    }
                }
            }
        }
    }

    /// `cols[(c, i, j), (oh, ow)] = x[c, oh*s - p + i, ow*s - p + j]`.
    pub fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        cols.iter_mut().for_each(|v| *v = T::zero());
        self.for_each_tap(|ci, xi| cols[ci] = x[xi]);
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters columns back, summing
    /// overlapping taps into `x`.
    pub fn col2im_add<T: Real>(&self, cols: &[T], x: &mut [T]) {
        self.for_each_tap(|ci, xi| x[xi] += cols[ci]);
    }
}
