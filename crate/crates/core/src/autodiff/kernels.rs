//! Raw loops behind the graph ops. All buffers are row-major `[C, H, W]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.k_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.k_w) / self.stride + 1
    }

    fn in_per_group(&self) -> usize {
        self.in_c / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_c / self.groups
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + kx - padding` is in range.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let ow = self.out_w();
        let (s, p) = (self.stride as isize, self.padding as isize);
        let kx = kx as isize;
        let lo = (p - kx + s - 1).div_euclid(s).max(0) as usize;
        let hi_incl = (self.in_w as isize - 1 + p - kx).div_euclid(s);
        let hi = ((hi_incl + 1).max(0) as usize).min(ow);
        (lo.min(hi), hi)
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        (iy >= 0 && (iy as usize) < self.in_h).then_some(iy as usize)
    }
}

pub fn conv_forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (cig, cog) = (g.in_per_group(), g.out_per_group());
    let plane_in = g.in_h * g.in_w;
    let mut out = vec![T::zero(); g.out_c * oh * ow];
    for oc in 0..g.out_c {
        let grp = oc / cog;
        let out_plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        if let Some(b) = b {
            out_plane.iter_mut().for_each(|v| *v = b[oc]);
        }
        for icl in 0..cig {
            let ic = grp * cig + icl;
            let in_plane = &x[ic * plane_in..(ic + 1) * plane_in];
            for ky in 0..g.k_h {
                for kx in 0..g.k_w {
                    let wv = w[((oc * cig + icl) * g.k_h + ky) * g.k_w + kx];
                    let (lo, hi) = g.col_range(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let row_in = &in_plane[iy * g.in_w..(iy + 1) * g.in_w];
                        let row_out = &mut out_plane[oy * ow..(oy + 1) * ow];
                        let off = lo * g.stride + kx - g.padding;
                        if g.stride == 1 {
                            for (o, &i) in row_out[lo..hi]
                                .iter_mut()
                                .zip(&row_in[off..off + (hi - lo)])
                            {
                                *o += wv * i;
                            }
                        } else {
                            for (k, o) in row_out[lo..hi].iter_mut().enumerate() {
                                *o += wv * row_in[off + k * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_backward_input<T: Real>(dy: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (cig, cog) = (g.in_per_group(), g.out_per_group());
    let plane_in = g.in_h * g.in_w;
    let mut dx = vec![T::zero(); g.in_c * plane_in];
    for oc in 0..g.out_c {
        let grp = oc / cog;
        let dy_plane = &dy[oc * oh * ow..(oc + 1) * oh * ow];
        for icl in 0..cig {
            let ic = grp * cig + icl;
            let dx_plane = &mut dx[ic * plane_in..(ic + 1) * plane_in];
            for ky in 0..g.k_h {
                for kx in 0..g.k_w {
                    let wv = w[((oc * cig + icl) * g.k_h + ky) * g.k_w + kx];
                    let (lo, hi) = g.col_range(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let row_dx = &mut dx_plane[iy * g.in_w..(iy + 1) * g.in_w];
                        let row_dy = &dy_plane[oy * ow..(oy + 1) * ow];
                        let off = lo * g.stride + kx - g.padding;
                        if g.stride == 1 {
                            for (d, &gv) in
                                row_dx[off..off + (hi - lo)].iter_mut().zip(&row_dy[lo..hi])
                            {
                                *d += wv * gv;
                            }
                        } else {
                            for (k, &gv) in row_dy[lo..hi].iter().enumerate() {
                                row_dx[off + k * g.stride] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Returns `(dw, db)`.
pub fn conv_backward_weight<T: Real>(dy: &[T], x: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (cig, cog) = (g.in_per_group(), g.out_per_group());
    let plane_in = g.in_h * g.in_w;
    let mut dw = vec![T::zero(); g.out_c * cig * g.k_h * g.k_w];
    let mut db = vec![T::zero(); g.out_c];
    for oc in 0..g.out_c {
        let grp = oc / cog;
        let dy_plane = &dy[oc * oh * ow..(oc + 1) * oh * ow];
        db[oc] = dy_plane.iter().copied().sum();
        for icl in 0..cig {
            let ic = grp * cig + icl;
            let in_plane = &x[ic * plane_in..(ic + 1) * plane_in];
            for ky in 0..g.k_h {
                for kx in 0..g.k_w {
                    let (lo, hi) = g.col_range(kx);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = T::zero();
                    for oy in 0..oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let row_in = &in_plane[iy * g.in_w..(iy + 1) * g.in_w];
                        let row_dy = &dy_plane[oy * ow..(oy + 1) * ow];
                        let off = lo * g.stride + kx - g.padding;
                        if g.stride == 1 {
                            for (&gv, &i) in
                                row_dy[lo..hi].iter().zip(&row_in[off..off + (hi - lo)])
                            {
                                acc += gv * i;
                            }
                        } else {
                            for (k, &gv) in row_dy[lo..hi].iter().enumerate() {
                                acc += gv * row_in[off + k * g.stride];
                            }
                        }
                    }
                    dw[((oc * cig + icl) * g.k_h + ky) * g.k_w + kx] = acc;
                }
            }
        }
    }
    (dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition of cross-correlation, one output at a time.
    fn conv_naive(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let (cig, cog) = (g.in_c / g.groups, g.out_c / g.groups);
        let mut out = vec![0.0; g.out_c * oh * ow];
        for oc in 0..g.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for icl in 0..cig {
                        let ic = (oc / cog) * cig + icl;
                        for ky in 0..g.k_h {
                            for kx in 0..g.k_w {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= g.in_h as isize
                                    || ix >= g.in_w as isize
                                {
                                    continue;
                                }
                                s += w[((oc * cig + icl) * g.k_h + ky) * g.k_w + kx]
                                    * x[(ic * g.in_h + iy as usize) * g.in_w + ix as usize];
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_definition() {
        let cases = [
            (2, 5, 6, 4, 3, 1, 1, 1),
            (4, 7, 5, 4, 3, 2, 1, 2),
            (4, 8, 8, 8, 7, 1, 3, 4),
            (3, 4, 6, 6, 1, 2, 0, 3),
            (2, 3, 3, 2, 3, 2, 0, 1),
        ];
        for (ci, h, w, co, k, s, p, grp) in cases {
            let g = ConvGeom {
                in_c: ci,
                in_h: h,
                in_w: w,
                out_c: co,
                k_h: k,
                k_w: k,
                stride: s,
                padding: p,
                groups: grp,
            };
            let x: Vec<f64> = (0..ci * h * w)
                .map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1)
                .collect();
            let wt: Vec<f64> = (0..co * (ci / grp) * k * k)
                .map(|i| ((i * 17 % 7) as f64 - 3.0) * 0.2)
                .collect();
            let fast = conv_forward(&x, &wt, None, &g);
            let slow = conv_naive(&x, &wt, &g);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b} for {g:?}");
            }
        }
    }
}
