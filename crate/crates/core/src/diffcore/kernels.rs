//! Raw numeric kernels shared by the tape and by relevance propagation.
//!
//! All image-like buffers are NHWC row-major: `[batch, height, width, depth]`.
//! Convolution kernels are `[kh, kw, d_in, d_out]`; depthwise kernels are
//! `[kh, kw, d_in, multiplier]` with output channel `c = d_in_index * multiplier + m`.

use crate::diffcore::Scalar;
use crate::error::{bail, Result};
use crate::parallel;

/// Spatial padding mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    Valid,
    /// Explicit zero padding of `(rows, cols)` on each side.
    Zero(usize, usize),
}

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub d_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub d_out: usize,
    /// Depth multiplier for depthwise convolutions, 0 for dense convolutions.
    pub multiplier: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

fn out_extent(axis: &str, n: usize, pad: usize, k: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        bail!(Config, "stride along {} must be positive", axis);
    }
    if k > n + 2 * pad {
        bail!(
            Dimension,
            "kernel extent {} exceeds padded input extent {} along {}",
            k,
            n + 2 * pad,
            axis
        );
    }
    Ok((n + 2 * pad - k) / stride + 1)
}

impl ConvGeom {
    pub fn conv(
        input: &[usize],
        kernel: &[usize],
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Self> {
        Self::build(input, kernel, stride, padding, false)
    }

    pub fn depthwise(
        input: &[usize],
        kernel: &[usize],
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Self> {
        Self::build(input, kernel, stride, padding, true)
    }

    fn build(
        input: &[usize],
        kernel: &[usize],
        stride: (usize, usize),
        padding: Padding,
        depthwise: bool,
    ) -> Result<Self> {
        if input.len() != 4 {
            bail!(Dimension, "input must be [B,H,W,D], got {:?}", input);
        }
        if kernel.len() != 4 {
            bail!(Dimension, "kernel must be 4-D, got {:?}", kernel);
        }
        if kernel[2] != input[3] {
            bail!(
                Dimension,
                "kernel depth axis (2) is {} but input depth axis (3) is {}",
                kernel[2],
                input[3]
            );
        }
        let (ph, pw) = match padding {
            Padding::Valid => (0, 0),
            Padding::Zero(a, b) => (a, b),
        };
        let oh = out_extent("height (axis 1)", input[1], ph, kernel[0], stride.0)?;
        let ow = out_extent("width (axis 2)", input[2], pw, kernel[1], stride.1)?;
        let (d_out, multiplier) = if depthwise {
            if kernel[3] < 1 {
                bail!(Config, "depth multiplier must be >= 1");
            }
            (input[3] * kernel[3], kernel[3])
        } else {
            (kernel[3], 0)
        };
        Ok(Self {
            batch: input[0],
            h: input[1],
            w: input[2],
            d_in: input[3],
            kh: kernel[0],
            kw: kernel[1],
            d_out,
            multiplier,
            sh: stride.0,
            sw: stride.1,
            ph,
            pw,
            oh,
            ow,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.oh, self.ow, self.d_out]
    }

    fn in_sample(&self) -> usize {
        self.h * self.w * self.d_in
    }

    fn out_sample(&self) -> usize {
        self.oh * self.ow * self.d_out
    }

    /// Input row for output row `o` and kernel row `k`, if inside the unpadded input.
    #[inline]
    fn in_row(&self, o: usize, k: usize) -> Option<usize> {
        (o * self.sh + k)
            .checked_sub(self.ph)
            .filter(|&r| r < self.h)
    }

    #[inline]
    fn in_col(&self, o: usize, k: usize) -> Option<usize> {
        (o * self.sw + k)
            .checked_sub(self.pw)
            .filter(|&c| c < self.w)
    }
}

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

#[inline]
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut s = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        s = s + a * b;
    }
    s
}

/// Strided view of a matrix inside a slice: `(offset, rows, cols, row_stride, col_stride)`.
#[derive(Clone, Copy)]
struct View {
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl View {
    fn new(off: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        Self {
            off,
            rows,
            cols,
            rs,
            cs,
        }
    }

    fn last(&self) -> usize {
        self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// `c[cv] += a[av] * b[bv]`. Views must be non-empty; `cv` must not self-alias.
fn gemm_acc<T: Scalar>(a: &[T], av: View, b: &[T], bv: View, c: &mut [T], cv: View) {
    assert!(av.cols == bv.rows && av.rows == cv.rows && bv.cols == cv.cols);
    if av.rows == 0 || av.cols == 0 || bv.cols == 0 {
        return;
    }
    assert!(av.last() < a.len() && bv.last() < b.len() && cv.last() < c.len());
    // SAFETY: bounds checked above; `c` is a unique borrow distinct from `a`, `b`,
    // and callers pass row/column strides that address distinct elements.
    unsafe {
        T::gemm_acc(
            av.rows,
            av.cols,
            bv.cols,
            a.as_ptr().add(av.off),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.off),
            bv.rs as isize,
            bv.cs as isize,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

impl ConvGeom {
    /// No column padding and unit column stride: every output row is a GEMM
    /// over overlapping contiguous input windows.
    fn row_gemm(&self) -> bool {
        self.pw == 0 && self.sw == 1
    }
}

/// Sum per-sample partial buffers in sample order.
fn ordered_sum<T: Scalar>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a = *a + v;
        }
    }
    acc
}

pub fn conv2d_forward<T: Scalar>(x: &[T], k: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_sample()];
    let (din, dout) = (g.d_in, g.d_out);
    parallel::for_each_chunk(&mut out, g.out_sample(), |b, o| {
        let xs = &x[b * g.in_sample()..(b + 1) * g.in_sample()];
        if g.row_gemm() {
            let kk = g.kw * din;
            for oh in 0..g.oh {
                for kh in 0..g.kh {
                    let Some(ih) = g.in_row(oh, kh) else { continue };
                    gemm_acc(
                        xs,
                        View::new(ih * g.w * din, g.ow, kk, din, 1),
                        k,
                        View::new(kh * kk * dout, kk, dout, dout, 1),
                        o,
                        View::new(oh * g.ow * dout, g.ow, dout, dout, 1),
                    );
                }
            }
            return;
        }
        for oh in 0..g.oh {
            for ow in 0..g.ow {
                let ocell = &mut o[(oh * g.ow + ow) * dout..][..dout];
                for kh in 0..g.kh {
                    let Some(ih) = g.in_row(oh, kh) else { continue };
                    for kw in 0..g.kw {
                        let Some(iw) = g.in_col(ow, kw) else { continue };
                        let inp = &xs[(ih * g.w + iw) * din..][..din];
                        let kb = (kh * g.kw + kw) * din * dout;
                        for (di, &xv) in inp.iter().enumerate() {
                            axpy(xv, &k[kb + di * dout..][..dout], ocell);
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv2d_backward_input<T: Scalar>(gout: &[T], k: &[T], g: &ConvGeom) -> Vec<T> {
    let mut gin = vec![T::zero(); g.batch * g.in_sample()];
    let (din, dout) = (g.d_in, g.d_out);
    parallel::for_each_chunk(&mut gin, g.in_sample(), |b, gi| {
        let go = &gout[b * g.out_sample()..(b + 1) * g.out_sample()];
        if g.row_gemm() {
            for oh in 0..g.oh {
                for kh in 0..g.kh {
                    let Some(ih) = g.in_row(oh, kh) else { continue };
                    for kw in 0..g.kw {
                        gemm_acc(
                            go,
                            View::new(oh * g.ow * dout, g.ow, dout, dout, 1),
                            k,
                            View::new((kh * g.kw + kw) * din * dout, dout, din, 1, dout),
                            gi,
                            View::new((ih * g.w + kw) * din, g.ow, din, din, 1),
                        );
                    }
                }
            }
            return;
        }
        for oh in 0..g.oh {
            for ow in 0..g.ow {
                let gcell = &go[(oh * g.ow + ow) * dout..][..dout];
                for kh in 0..g.kh {
                    let Some(ih) = g.in_row(oh, kh) else { continue };
                    for kw in 0..g.kw {
                        let Some(iw) = g.in_col(ow, kw) else { continue };
                        let kb = (kh * g.kw + kw) * din * dout;
                        let cell = &mut gi[(ih * g.w + iw) * din..][..din];
                        for (di, c) in cell.iter_mut().enumerate() {
                            *c = *c + dot(gcell, &k[kb + di * dout..][..dout]);
                        }
                    }
                }
            }
        }
    });
    gin
}

pub fn conv2d_backward_kernel<T: Scalar>(x: &[T], gout: &[T], g: &ConvGeom) -> Vec<T> {
    let klen = g.kh * g.kw * g.d_in * g.d_out;
    let (din, dout) = (g.d_in, g.d_out);
    let parts = parallel::map_indexed(g.batch, |b| {
        let mut gk = vec![T::zero(); klen];
        let xs = &x[b * g.in_sample()..(b + 1) * g.in_sample()];
        let go = &gout[b * g.out_sample()..(b + 1) * g.out_sample()];
        if g.row_gemm() {
            let kk = g.kw * din;
            for oh in 0..g.oh {
                for kh in 0..g.kh {
                    let Some(ih) = g.in_row(oh, kh) else { continue };
                    gemm_acc(
                        xs,
                        View::new(ih * g.w * din, kk, g.ow, 1, din),
                        go,
                        View::new(oh * g.ow * dout, g.ow, dout, dout, 1),
                        &mut gk,
                        View::new(kh * kk * dout, kk, dout, dout, 1),
                    );
                }
            }
            return gk;
        }
        for oh in 0..g.oh {
            for ow in 0..g.ow {
                let gcell = &go[(oh * g.ow + ow) * dout..][..dout];
                for kh in 0..g.kh {
                    let Some(ih) = g.in_row(oh, kh) else { continue };
                    for kw in 0..g.kw {
                        let Some(iw) = g.in_col(ow, kw) else { continue };
                        let inp = &xs[(ih * g.w + iw) * din..][..din];
                        let kb = (kh * g.kw + kw) * din * dout;
                        for (di, &xv) in inp.iter().enumerate() {
                            axpy(xv, gcell, &mut gk[kb + di * dout..][..dout]);
                        }
                    }
                }
            }
        }
        gk
    });
    ordered_sum(parts, klen)
}

pub fn depthwise_forward<T: Scalar>(x: &[T], k: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_sample()];
    let (din, m, dout) = (g.d_in, g.multiplier, g.d_out);
    parallel::for_each_chunk(&mut out, g.out_sample(), |b, o| {
        let xs = &x[b * g.in_sample()..(b + 1) * g.in_sample()];
        for oh in 0..g.oh {
            for ow in 0..g.ow {
                let ocell = &mut o[(oh * g.ow + ow) * dout..][..dout];
                for kh in 0..g.kh {
                    let Some(ih) = g.in_row(oh, kh) else { continue };
                    for kw in 0..g.kw {
                        let Some(iw) = g.in_col(ow, kw) else { continue };
                        let inp = &xs[(ih * g.w + iw) * din..][..din];
                        let kb = (kh * g.kw + kw) * din * m;
                        for (di, &xv) in inp.iter().enumerate() {
                            axpy(xv, &k[kb + di * m..][..m], &mut ocell[di * m..][..m]);
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn depthwise_backward_input<T: Scalar>(gout: &[T], k: &[T], g: &ConvGeom) -> Vec<T> {
    let mut gin = vec![T::zero(); g.batch * g.in_sample()];
    let (din, m, dout) = (g.d_in, g.multiplier, g.d_out);
    parallel::for_each_chunk(&mut gin, g.in_sample(), |b, gi| {
        let go = &gout[b * g.out_sample()..(b + 1) * g.out_sample()];
        for oh in 0..g.oh {
            for ow in 0..g.ow {
                let gcell = &go[(oh * g.ow + ow) * dout..][..dout];
                for kh in 0..g.kh {
                    let Some(ih) = g.in_row(oh, kh) else { continue };
                    for kw in 0..g.kw {
                        let Some(iw) = g.in_col(ow, kw) else { continue };
                        let kb = (kh * g.kw + kw) * din * m;
                        let cell = &mut gi[(ih * g.w + iw) * din..][..din];
                        for (di, c) in cell.iter_mut().enumerate() {
                            *c = *c + dot(&gcell[di * m..][..m], &k[kb + di * m..][..m]);
                        }
                    }
                }
            }
        }
    });
    gin
}

pub fn depthwise_backward_kernel<T: Scalar>(x: &[T], gout: &[T], g: &ConvGeom) -> Vec<T> {
    let (din, m, dout) = (g.d_in, g.multiplier, g.d_out);
    let klen = g.kh * g.kw * din * m;
    let parts = parallel::map_indexed(g.batch, |b| {
        let mut gk = vec![T::zero(); klen];
        let xs = &x[b * g.in_sample()..(b + 1) * g.in_sample()];
        let go = &gout[b * g.out_sample()..(b + 1) * g.out_sample()];
        for oh in 0..g.oh {
            for ow in 0..g.ow {
                let gcell = &go[(oh * g.ow + ow) * dout..][..dout];
                for kh in 0..g.kh {
                    let Some(ih) = g.in_row(oh, kh) else { continue };
                    for kw in 0..g.kw {
                        let Some(iw) = g.in_col(ow, kw) else { continue };
                        let inp = &xs[(ih * g.w + iw) * din..][..din];
                        let kb = (kh * g.kw + kw) * din * m;
                        for (di, &xv) in inp.iter().enumerate() {
                            axpy(xv, &gcell[di * m..][..m], &mut gk[kb + di * m..][..m]);
                        }
                    }
                }
            }
        }
        gk
    });
    ordered_sum(parts, klen)
}

/// Geometry of a valid max-pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub wh: usize,
    pub ww: usize,
    pub sh: usize,
    pub sw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn new(input: &[usize], window: (usize, usize), stride: (usize, usize)) -> Result<Self> {
        if input.len() != 4 {
            bail!(
                Dimension,
                "max_pool input must be [B,H,W,D], got {:?}",
                input
            );
        }
        if window.0 == 0 || window.1 == 0 {
            bail!(Config, "max_pool window {:?} is empty", window);
        }
        let oh = out_extent("height (axis 1)", input[1], 0, window.0, stride.0)?;
        let ow = out_extent("width (axis 2)", input[2], 0, window.1, stride.1)?;
        Ok(Self {
            batch: input[0],
            h: input[1],
            w: input[2],
            d: input[3],
            wh: window.0,
            ww: window.1,
            sh: stride.0,
            sw: stride.1,
            oh,
            ow,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.oh, self.ow, self.d]
    }
}

/// Max-pool forward. Returns the pooled values and, per output cell, the
/// linear input index of the selected element (ties go to the lowest index).
pub fn max_pool_forward<T: Scalar>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let n = g.batch * g.oh * g.ow * g.d;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for b in 0..g.batch {
        for oh in 0..g.oh {
            for ow in 0..g.ow {
                for d in 0..g.d {
                    let mut best = usize::MAX;
                    let mut bv = T::zero();
                    for kh in 0..g.wh {
                        for kw in 0..g.ww {
                            let idx = ((b * g.h + oh * g.sh + kh) * g.w + ow * g.sw + kw) * g.d + d;
                            if best == usize::MAX || x[idx] > bv {
                                best = idx;
                                bv = x[idx];
                            }
                        }
                    }
                    out.push(bv);
                    arg.push(best);
                }
            }
        }
    }
    (out, arg)
}

/// `[B, I] x [I, O]`.
pub fn matmul<T: Scalar>(x: &[T], w: &[T], b: usize, i: usize, o: usize) -> Vec<T> {
    let mut out = vec![T::zero(); b * o];
    gemm_acc(
        x,
        View::new(0, b, i, i, 1),
        w,
        View::new(0, i, o, o, 1),
        &mut out,
        View::new(0, b, o, o, 1),
    );
    out
}

/// `gout [B, O] x W^T -> [B, I]`.
pub fn matmul_backward_input<T: Scalar>(
    gout: &[T],
    w: &[T],
    b: usize,
    i: usize,
    o: usize,
) -> Vec<T> {
    let mut gin = vec![T::zero(); b * i];
    gemm_acc(
        gout,
        View::new(0, b, o, o, 1),
        w,
        View::new(0, o, i, 1, o),
        &mut gin,
        View::new(0, b, i, i, 1),
    );
    gin
}

/// `x^T [I, B] x gout [B, O] -> [I, O]`.
pub fn matmul_backward_weight<T: Scalar>(
    x: &[T],
    gout: &[T],
    b: usize,
    i: usize,
    o: usize,
) -> Vec<T> {
    let mut gw = vec![T::zero(); i * o];
    gemm_acc(
        x,
        View::new(0, i, b, 1, i),
        gout,
        View::new(0, b, o, o, 1),
        &mut gw,
        View::new(0, i, o, o, 1),
    );
    gw
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_temporal_conv_extent() {
        let g = ConvGeom::conv(&[1, 1, 500, 1], &[1, 10, 1, 1], (1, 1), Padding::Valid).unwrap();
        assert_eq!(g.out_shape(), [1, 1, 491, 1]);
    }

    #[test]
    fn errors_name_the_axis() {
        let e = ConvGeom::conv(&[1, 1, 5, 2], &[1, 10, 2, 1], (1, 1), Padding::Valid)
            .unwrap_err()
            .to_string();
        assert!(e.contains("width"), "{e}");
        let e = ConvGeom::conv(&[1, 1, 50, 2], &[1, 10, 3, 1], (1, 1), Padding::Valid)
            .unwrap_err()
            .to_string();
        assert!(e.contains("depth"), "{e}");
    }

    #[test]
    fn zero_padding_extent() {
        let g = ConvGeom::conv(&[1, 4, 4, 1], &[3, 3, 1, 1], (1, 1), Padding::Zero(1, 1)).unwrap();
        assert_eq!(g.out_shape(), [1, 4, 4, 1]);
        let g = ConvGeom::conv(&[1, 4, 9, 1], &[1, 3, 1, 1], (1, 2), Padding::Valid).unwrap();
        assert_eq!(g.ow, 4);
    }

    #[test]
    fn pool_ties_pick_lowest_index() {
        let x = vec![1.0f64; 6];
        let g = PoolGeom::new(&[1, 1, 6, 1], (1, 3), (1, 3)).unwrap();
        let (v, a) = max_pool_forward(&x, &g);
        assert_eq!(v, vec![1.0, 1.0]);
        assert_eq!(a, vec![0, 3]);
    }
}
