//! Raw slice kernels behind the tape operations. Every kernel is a plain loop
//! with a fixed iteration order so results are bitwise reproducible.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

#[inline]
pub(crate) fn axpy<T: Real>(dst: &mut [T], alpha: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + alpha * s;
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Output positions `o` in `[lo, hi)` whose input index `o*stride + off` lands inside `0..extent`.
    #[inline]
    fn valid(&self, off: isize, extent: usize, extent_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let last = extent as isize - 1 - off;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(extent_out as isize) };
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }

    #[inline]
    fn tap_offset(&self, tap: usize) -> isize {
        (tap * self.dilation) as isize - self.padding as isize
    }

    /// Visits every (output row, input row, output column range, input column start) for one kernel tap.
    #[inline]
    fn for_each_row(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let offy = self.tap_offset(ky);
        let offx = self.tap_offset(kx);
        let (oy_lo, oy_hi) = self.valid(offy, self.h, self.h_out);
        let (ox_lo, ox_hi) = self.valid(offx, self.w, self.w_out);
        if ox_lo >= ox_hi {
            return;
        }
        for oy in oy_lo..oy_hi {
            let iy = (oy as isize * self.stride as isize + offy) as usize;
            let ix0 = (ox_lo as isize * self.stride as isize + offx) as usize;
            f(oy, iy, ox_lo, ox_hi, ix0);
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let plane_in = g.h * g.w;
    let plane_out = g.h_out * g.w_out;
    let kk = g.k * g.k;
    let mut y = vec![T::zero(); g.batch * g.c_out * plane_out];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let out = &mut y[(b * g.c_out + co) * plane_out..][..plane_out];
            out.fill(bias[co]);
            for ci in 0..g.c_in {
                let inp = &x[(b * g.c_in + ci) * plane_in..][..plane_in];
                let wk = &w[(co * g.c_in + ci) * kk..][..kk];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = wk[ky * g.k + kx];
                        g.for_each_row(ky, kx, |oy, iy, lo, hi, ix0| {
                            let dst = &mut out[oy * g.w_out + lo..oy * g.w_out + hi];
                            let row = &inp[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                axpy(dst, wv, &row[ix0..ix0 + (hi - lo)]);
                            } else {
                                for (n, d) in dst.iter_mut().enumerate() {
                                    *d = *d + wv * row[ix0 + n * g.stride];
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    y
}

/// Gradient with respect to the input.
pub(crate) fn conv2d_backward_input<T: Real>(g: &ConvGeom, dy: &[T], w: &[T]) -> Vec<T> {
    let plane_in = g.h * g.w;
    let plane_out = g.h_out * g.w_out;
    let kk = g.k * g.k;
    let mut dx = vec![T::zero(); g.batch * g.c_in * plane_in];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let gout = &dy[(b * g.c_out + co) * plane_out..][..plane_out];
            for ci in 0..g.c_in {
                let gin = &mut dx[(b * g.c_in + ci) * plane_in..][..plane_in];
                let wk = &w[(co * g.c_in + ci) * kk..][..kk];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = wk[ky * g.k + kx];
                        g.for_each_row(ky, kx, |oy, iy, lo, hi, ix0| {
                            let src = &gout[oy * g.w_out + lo..oy * g.w_out + hi];
                            let row = &mut gin[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                axpy(&mut row[ix0..ix0 + (hi - lo)], wv, src);
                            } else {
                                for (n, &s) in src.iter().enumerate() {
                                    let d = &mut row[ix0 + n * g.stride];
                                    *d = *d + wv * s;
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    dx
}

/// Gradients with respect to the weight and bias.
pub(crate) fn conv2d_backward_params<T: Real>(g: &ConvGeom, dy: &[T], x: &[T]) -> (Vec<T>, Vec<T>) {
    let plane_in = g.h * g.w;
    let plane_out = g.h_out * g.w_out;
    let kk = g.k * g.k;
    let mut dw = vec![T::zero(); g.c_out * g.c_in * kk];
    let mut db = vec![T::zero(); g.c_out];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let gout = &dy[(b * g.c_out + co) * plane_out..][..plane_out];
            db[co] = db[co] + gout.iter().copied().sum::<T>();
            for ci in 0..g.c_in {
                let inp = &x[(b * g.c_in + ci) * plane_in..][..plane_in];
                let gw = &mut dw[(co * g.c_in + ci) * kk..][..kk];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let mut acc = T::zero();
                        g.for_each_row(ky, kx, |oy, iy, lo, hi, ix0| {
                            let src = &gout[oy * g.w_out + lo..oy * g.w_out + hi];
                            let row = &inp[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                acc = acc + dot(src, &row[ix0..ix0 + (hi - lo)]);
                            } else {
                                for (n, &s) in src.iter().enumerate() {
                                    acc = acc + s * row[ix0 + n * g.stride];
                                }
                            }
                        });
                        gw[ky * g.k + kx] = gw[ky * g.k + kx] + acc;
                    }
                }
            }
        }
    }
    (dw, db)
}

/// Offset into a broadcast right-hand operand for every element of the left operand.
///
/// The right shape must have the same rank with each extent equal to the left one or 1.
pub(crate) fn broadcast_offsets(lhs: &[usize], rhs: &[usize]) -> Option<Vec<usize>> {
    if lhs.len() != rhs.len() {
        return None;
    }
    if lhs.iter().zip(rhs).any(|(&l, &r)| r != l && r != 1) {
        return None;
    }
    let rank = lhs.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for ax in (0..rank).rev() {
        strides[ax] = if rhs[ax] == 1 { 0 } else { acc };
        acc *= rhs[ax];
    }
    let numel: usize = lhs.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < lhs[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Some(out)
}

/// Splits `shape` around `axis` into (outer, extent, inner) counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_rows<T: Real>(x: &[T], n: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for (row, out) in x.chunks(n).zip(y.chunks_mut(n)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - max).exp();
            total = total + *o;
        }
        let inv = T::one() / total;
        for o in out.iter_mut() {
            *o = *o * inv;
        }
    }
    y
}

pub(crate) fn transpose_last_two<T: Real>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(m * n).zip(out.chunks_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

/// Row-major batched matrix product `[L, M, K] x [L, K, N] -> [L, M, N]`.
pub(crate) fn bmm<T: Real>(a: &[T], b: &[T], l: usize, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); l * m * n];
    for s in 0..l {
        let am = &a[s * m * k..][..m * k];
        let bm = &b[s * k * n..][..k * n];
        let om = &mut out[s * m * n..][..m * n];
        for i in 0..m {
            let orow = &mut om[i * n..(i + 1) * n];
            for t in 0..k {
                axpy(orow, am[i * k + t], &bm[t * n..(t + 1) * n]);
            }
        }
    }
    out
}

/// Pixel-shuffle index map: output element → input element.
pub(crate) fn pixel_shuffle_map(b: usize, c_out: usize, h: usize, w: usize, s: usize) -> Vec<usize> {
    let c_in = c_out * s * s;
    let (oh, ow) = (h * s, w * s);
    let mut map = Vec::with_capacity(b * c_out * oh * ow);
    for bi in 0..b {
        for c in 0..c_out {
            for y in 0..oh {
                for x in 0..ow {
                    let ic = c * s * s + (y % s) * s + (x % s);
                    map.push(((bi * c_in + ic) * h + y / s) * w + x / s);
                }
            }
        }
    }
    map
}
