//! Raw convolution kernels over NCHW slices.
//!
//! Pointwise (1x1, stride 1) convolutions run as per-group GEMMs; all other
//! shapes use the direct loop. Both paths accumulate in a fixed order, so
//! results do not depend on the rayon pool size.

use rayon::prelude::*;

use crate::error::{config_err, Result};
use crate::scalar::Scalar;

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        let [n, c, h, w] = x_shape[..] else {
            return Err(config_err!("conv2d input must be [N,C,H,W], got {x_shape:?}"));
        };
        let [o, cg, kh, kw] = w_shape[..] else {
            return Err(config_err!("conv2d weight must be [O,C/g,K,K], got {w_shape:?}"));
        };
        if groups == 0 || c % groups != 0 || o % groups != 0 {
            return Err(config_err!(
                "conv2d groups={groups} must divide input channels {c} and output channels {o}"
            ));
        }
        if cg != c / groups {
            return Err(config_err!(
                "conv2d weight expects {cg} channels per group, input provides {} (C={c}, groups={groups})",
                c / groups
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(config_err!("conv2d kernel must be odd and square, got {kh}x{kw}"));
        }
        if !(stride == 1 || stride == 2) {
            return Err(config_err!("conv2d stride must be 1 or 2, got {stride}"));
        }
        if pad != (kh - 1) / 2 {
            return Err(config_err!(
                "conv2d padding must be (K-1)/2 = {}, got {pad}",
                (kh - 1) / 2
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(config_err!("conv2d input {h}x{w} smaller than kernel {kh}"));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            k: kh,
            stride,
            pad,
            groups,
            oh,
            ow,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.o, self.oh, self.ow]
    }

    fn cg(&self) -> usize {
        self.c / self.groups
    }

    fn og(&self) -> usize {
        self.o / self.groups
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn macs(&self) -> usize {
        self.n * self.o * self.oh * self.ow * self.cg() * self.k * self.k
    }
}

/// Output positions `o` in `0..out_len` whose tap `o*stride + off - pad`
/// lands inside `0..in_len`.
#[inline]
fn valid_range(off: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > off {
        (pad - off).div_ceil(stride).min(out_len)
    } else {
        0
    };
    // largest o with o*stride + off - pad <= in_len - 1
    let top = in_len + pad - 1;
    let hi = if top >= off {
        ((top - off) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d_forward<S: Scalar>(g: &ConvGeom, x: &[S], w: &[S]) -> Vec<S> {
    let plane = g.oh * g.ow;
    let mut out = vec![S::zero(); g.n * g.o * plane];
    if g.is_pointwise() {
        pointwise_forward(g, x, w, &mut out);
        return out;
    }
    let run = |(idx, dst): (usize, &mut [S])| {
        let n = idx / g.o;
        let o = idx % g.o;
        direct_plane_forward(g, x, w, n, o, dst);
    };
    if g.macs() >= PAR_THRESHOLD {
        out.par_chunks_mut(plane).enumerate().for_each(run);
    } else {
        out.chunks_mut(plane).enumerate().for_each(run);
    }
    out
}

fn direct_plane_forward<S: Scalar>(g: &ConvGeom, x: &[S], w: &[S], n: usize, o: usize, dst: &mut [S]) {
    let (cg, k) = (g.cg(), g.k);
    let group = o / g.og();
    for ci in 0..cg {
        let c = group * cg + ci;
        let src = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
        let wk = &w[(o * cg + ci) * k * k..][..k * k];
        for kh in 0..k {
            let (oh_lo, oh_hi) = valid_range(kh, g.pad, g.stride, g.h, g.oh);
            for kw in 0..k {
                let wv = wk[kh * k + kw];
                let (ow_lo, ow_hi) = valid_range(kw, g.pad, g.stride, g.w, g.ow);
                if ow_lo == ow_hi {
                    continue;
                }
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + kh - g.pad;
                    let row = &src[ih * g.w..][..g.w];
                    let out_row = &mut dst[oh * g.ow..][..g.ow];
                    if g.stride == 1 {
                        let iw0 = ow_lo + kw - g.pad;
                        let len = ow_hi - ow_lo;
                        for (d, s) in out_row[ow_lo..ow_hi].iter_mut().zip(&row[iw0..iw0 + len]) {
                            *d += wv * *s;
                        }
                    } else {
                        for ow in ow_lo..ow_hi {
                            out_row[ow] += wv * row[ow * g.stride + kw - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn pointwise_forward<S: Scalar>(g: &ConvGeom, x: &[S], w: &[S], out: &mut [S]) {
    let (cg, og, hw) = (g.cg(), g.og(), g.h * g.w);
    for n in 0..g.n {
        for grp in 0..g.groups {
            let a = &w[grp * og * cg..][..og * cg];
            let b = &x[(n * g.c + grp * cg) * hw..][..cg * hw];
            let c = &mut out[(n * g.o + grp * og) * hw..][..og * hw];
            // SAFETY: slices bound the extents passed to gemm.
            unsafe {
                S::gemm(
                    og,
                    cg,
                    hw,
                    S::one(),
                    a.as_ptr(),
                    cg as isize,
                    1,
                    b.as_ptr(),
                    hw as isize,
                    1,
                    S::zero(),
                    c.as_mut_ptr(),
                    hw as isize,
                    1,
                );
            }
        }
    }
}

pub fn conv2d_backward_input<S: Scalar>(g: &ConvGeom, w: &[S], dy: &[S]) -> Vec<S> {
    let plane = g.h * g.w;
    let mut dx = vec![S::zero(); g.n * g.c * plane];
    if g.is_pointwise() {
        let (cg, og, hw) = (g.cg(), g.og(), plane);
        for n in 0..g.n {
            for grp in 0..g.groups {
                let a = &w[grp * og * cg..][..og * cg];
                let b = &dy[(n * g.o + grp * og) * hw..][..og * hw];
                let c = &mut dx[(n * g.c + grp * cg) * hw..][..cg * hw];
                // SAFETY: W^T is read through swapped strides of the same slice.
                unsafe {
                    S::gemm(
                        cg,
                        og,
                        hw,
                        S::one(),
                        a.as_ptr(),
                        1,
                        cg as isize,
                        b.as_ptr(),
                        hw as isize,
                        1,
                        S::zero(),
                        c.as_mut_ptr(),
                        hw as isize,
                        1,
                    );
                }
            }
        }
        return dx;
    }
    let run = |(idx, dst): (usize, &mut [S])| {
        let n = idx / g.c;
        let c = idx % g.c;
        direct_plane_backward_input(g, w, dy, n, c, dst);
    };
    if g.macs() >= PAR_THRESHOLD {
        dx.par_chunks_mut(plane).enumerate().for_each(run);
    } else {
        dx.chunks_mut(plane).enumerate().for_each(run);
    }
    dx
}

fn direct_plane_backward_input<S: Scalar>(
    g: &ConvGeom,
    w: &[S],
    dy: &[S],
    n: usize,
    c: usize,
    dst: &mut [S],
) {
    let (cg, og, k) = (g.cg(), g.og(), g.k);
    let group = c / cg;
    let ci = c % cg;
    for o in group * og..(group + 1) * og {
        let src = &dy[(n * g.o + o) * g.oh * g.ow..][..g.oh * g.ow];
        let wk = &w[(o * cg + ci) * k * k..][..k * k];
        for kh in 0..k {
            let (oh_lo, oh_hi) = valid_range(kh, g.pad, g.stride, g.h, g.oh);
            for kw in 0..k {
                let wv = wk[kh * k + kw];
                let (ow_lo, ow_hi) = valid_range(kw, g.pad, g.stride, g.w, g.ow);
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + kh - g.pad;
                    let drow = &mut dst[ih * g.w..][..g.w];
                    let srow = &src[oh * g.ow..][..g.ow];
                    for ow in ow_lo..ow_hi {
                        drow[ow * g.stride + kw - g.pad] += wv * srow[ow];
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward_weight<S: Scalar>(g: &ConvGeom, x: &[S], dy: &[S]) -> Vec<S> {
    let (cg, k) = (g.cg(), g.k);
    let per_o = cg * k * k;
    let mut dw = vec![S::zero(); g.o * per_o];
    if g.is_pointwise() {
        let (og, hw) = (g.og(), g.h * g.w);
        for n in 0..g.n {
            for grp in 0..g.groups {
                let a = &dy[(n * g.o + grp * og) * hw..][..og * hw];
                let b = &x[(n * g.c + grp * cg) * hw..][..cg * hw];
                let c = &mut dw[grp * og * cg..][..og * cg];
                // SAFETY: X^T is read through swapped strides; C accumulates.
                unsafe {
                    S::gemm(
                        og,
                        hw,
                        cg,
                        S::one(),
                        a.as_ptr(),
                        hw as isize,
                        1,
                        b.as_ptr(),
                        1,
                        hw as isize,
                        S::one(),
                        c.as_mut_ptr(),
                        cg as isize,
                        1,
                    );
                }
            }
        }
        return dw;
    }
    let run = |(o, dst): (usize, &mut [S])| {
        let group = o / g.og();
        for n in 0..g.n {
            let src_dy = &dy[(n * g.o + o) * g.oh * g.ow..][..g.oh * g.ow];
            for ci in 0..cg {
                let c = group * cg + ci;
                let src_x = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                for kh in 0..k {
                    let (oh_lo, oh_hi) = valid_range(kh, g.pad, g.stride, g.h, g.oh);
                    for kw in 0..k {
                        let (ow_lo, ow_hi) = valid_range(kw, g.pad, g.stride, g.w, g.ow);
                        let mut acc = S::zero();
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + kh - g.pad;
                            let xrow = &src_x[ih * g.w..][..g.w];
                            let drow = &src_dy[oh * g.ow..][..g.ow];
                            for ow in ow_lo..ow_hi {
                                acc += drow[ow] * xrow[ow * g.stride + kw - g.pad];
                            }
                        }
                        dst[(ci * k + kh) * k + kw] += acc;
                    }
                }
            }
        }
    };
    if g.macs() >= PAR_THRESHOLD {
        dw.par_chunks_mut(per_o).enumerate().for_each(run);
    } else {
        dw.chunks_mut(per_o).enumerate().for_each(run);
    }
    dw
}

/// Reference convolution used to cross-check the fast paths.
#[cfg(test)]
pub(crate) fn conv2d_naive<S: Scalar>(g: &ConvGeom, x: &[S], w: &[S]) -> Vec<S> {
    let (cg, og, k) = (g.cg(), g.og(), g.k);
    let mut out = vec![S::zero(); g.n * g.o * g.oh * g.ow];
    for n in 0..g.n {
        for o in 0..g.o {
            let grp = o / og;
            for oh in 0..g.oh {
                for ow in 0..g.ow {
                    let mut acc = S::zero();
                    for ci in 0..cg {
                        let c = grp * cg + ci;
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                                let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                                if ih < 0 || iw < 0 || ih >= g.h as isize || iw >= g.w as isize {
                                    continue;
                                }
                                acc += w[((o * cg + ci) * k + kh) * k + kw]
                                    * x[((n * g.c + c) * g.h + ih as usize) * g.w + iw as usize];
                            }
                        }
                    }
                    out[((n * g.o + o) * g.oh + oh) * g.ow + ow] = acc;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn valid_range_matches_bruteforce() {
        for in_len in 1..9 {
            for k in [1usize, 3, 5] {
                let pad = (k - 1) / 2;
                for stride in [1usize, 2] {
                    if in_len + 2 * pad < k {
                        continue;
                    }
                    let out_len = (in_len + 2 * pad - k) / stride + 1;
                    for off in 0..k {
                        let (lo, hi) = valid_range(off, pad, stride, in_len, out_len);
                        let brute: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let i = (o * stride + off) as isize - pad as isize;
                                i >= 0 && i < in_len as isize
                            })
                            .collect();
                        let fast: Vec<usize> = (lo..hi).collect();
                        assert_eq!(fast, brute, "in={in_len} k={k} s={stride} off={off}");
                    }
                }
            }
        }
    }

    #[test]
    fn fast_paths_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases = [
            // (n, c, h, o, k, stride, groups)
            (2, 4, 6, 6, 1, 1, 1),
            (2, 4, 6, 6, 1, 1, 2),
            (1, 4, 7, 4, 3, 2, 4),
            (2, 6, 5, 6, 5, 1, 6),
            (1, 3, 8, 5, 3, 2, 1),
            (1, 4, 4, 4, 1, 2, 2),
        ];
        for &(n, c, h, o, k, stride, groups) in &cases {
            let g = ConvGeom::new(&[n, c, h, h], &[o, c / groups, k, k], stride, (k - 1) / 2, groups)
                .unwrap();
            let x = rand_vec(n * c * h * h, &mut rng);
            let w = rand_vec(o * (c / groups) * k * k, &mut rng);
            let fast = conv2d_forward(&g, &x, &w);
            let slow = conv2d_naive(&g, &x, &w);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b} for {g:?}");
            }
        }
    }

    #[test]
    fn rejects_bad_groups_and_padding() {
        assert!(ConvGeom::new(&[1, 3, 4, 4], &[4, 1, 3, 3], 1, 1, 3).is_err());
        assert!(ConvGeom::new(&[1, 4, 4, 4], &[4, 2, 3, 3], 1, 1, 3).is_err());
        assert!(ConvGeom::new(&[1, 4, 4, 4], &[4, 4, 3, 3], 1, 0, 1).is_err());
        assert!(ConvGeom::new(&[1, 4, 4, 4], &[4, 4, 4, 4], 1, 1, 1).is_err());
        assert!(ConvGeom::new(&[1, 4, 4, 4], &[4, 4, 3, 3], 3, 1, 1).is_err());
    }
}
