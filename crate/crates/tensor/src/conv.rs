//! 2-D convolution over NCHW tensors via im2col + GEMM.
//!
//! The column buffer is built for a band of output rows at a time so that
//! large images never materialize the full `(C·kh·kw) × (Ho·Wo)` matrix.

use crate::float::{gemm_strided, MatRef};
use crate::Float;

/// Upper bound on column-buffer elements per band.
const COL_BUDGET: usize = 1 << 16;

/// Static geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output spatial size, or `None` when the kernel does not fit.
    pub fn output_hw(&self) -> Option<(usize, usize)> {
        out_len(self.h, self.kh, self.stride, self.pad)
            .zip(out_len(self.w, self.kw, self.stride, self.pad))
    }

    fn ho_wo(&self) -> (usize, usize) {
        self.output_hw().expect("convolution kernel larger than padded input")
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn band_rows(&self) -> usize {
        let (ho, wo) = self.ho_wo();
        (COL_BUDGET / (self.k() * wo).max(1)).clamp(1, ho.max(1))
    }
}

/// Output length of a strided, zero-padded window along one axis.
pub fn out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (stride > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Range of output columns `ox` whose input column `ox*stride + kj - pad` is in bounds.
fn valid_range(out: usize, len: usize, k_off: usize, stride: usize, pad: usize) -> (usize, usize) {
    // ix = ox*stride + k_off - pad must satisfy 0 <= ix < len
    let lo = if k_off >= pad { 0 } else { (pad - k_off).div_ceil(stride) };
    let hi = if len + pad > k_off { ((len + pad - k_off - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom, rows: (usize, usize), col: &mut [T]) {
    let (_, wo) = g.ho_wo();
    let band = (rows.1 - rows.0) * wo;
    let (s, p) = (g.stride, g.pad);
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[r * band..(r + 1) * band];
                let (lo, hi) = valid_range(wo, g.w, kj, s, p);
                for oy in rows.0..rows.1 {
                    let seg = &mut dst[(oy - rows.0) * wo..(oy - rows.0 + 1) * wo];
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    seg[..lo].fill(T::zero());
                    seg[hi..].fill(T::zero());
                    let ix0 = lo * s + kj - p;
                    if s == 1 {
                        seg[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (k, v) in seg[lo..hi].iter_mut().enumerate() {
                            *v = src[ix0 + k * s];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(col: &[T], g: &ConvGeom, rows: (usize, usize), dx: &mut [T]) {
    let (_, wo) = g.ho_wo();
    let band = (rows.1 - rows.0) * wo;
    let (s, p) = (g.stride, g.pad);
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let src = &col[r * band..(r + 1) * band];
                let (lo, hi) = valid_range(wo, g.w, kj, s, p);
                if lo >= hi {
                    continue;
                }
                for oy in rows.0..rows.1 {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let seg = &src[(oy - rows.0) * wo..(oy - rows.0 + 1) * wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let ix0 = lo * s + kj - p;
                    let n = hi - lo;
                    if s == 1 {
                        for (d, &v) in dst[ix0..ix0 + n].iter_mut().zip(&seg[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[ix0..].iter_mut().step_by(s).zip(&seg[lo..hi]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn bands(g: &ConvGeom) -> impl Iterator<Item = (usize, usize)> {
    let (ho, _) = g.ho_wo();
    let step = g.band_rows();
    (0..ho).step_by(step).map(move |r| (r, (r + step).min(ho)))
}

/// Forward convolution. `x` is `(N, C, H, W)`, `weight` is `(O, C, kh, kw)`.
pub fn conv2d_forward<T: Float>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.ho_wo();
    let (k, l) = (g.k(), ho * wo);
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * l;
    let mut out = vec![T::zero(); g.batch * out_stride];
    let mut col = vec![T::zero(); k * g.band_rows() * wo];
    let wmat = MatRef::row_major(weight, g.c_out, k);
    for n in 0..g.batch {
        let xn = &x[n * in_stride..(n + 1) * in_stride];
        let on = &mut out[n * out_stride..(n + 1) * out_stride];
        for rows in bands(g) {
            let band = (rows.1 - rows.0) * wo;
            im2col(xn, g, rows, &mut col[..k * band]);
            let cmat = MatRef::row_major(&col[..k * band], k, band);
            gemm_strided(T::one(), wmat, cmat, T::zero(), &mut on[rows.0 * wo..], l);
        }
        if let Some(b) = bias {
            for (o, &bv) in b.iter().enumerate() {
                on[o * l..(o + 1) * l].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of a convolution given the upstream gradient `dy` of shape `(N, O, Ho, Wo)`.
///
/// Returns `(dx, dweight, dbias)`, each computed only when requested.
pub fn conv2d_backward<T: Float>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (ho, wo) = g.ho_wo();
    let (k, l) = (g.k(), ho * wo);
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * l;
    let mut dx = want.0.then(|| vec![T::zero(); g.batch * in_stride]);
    let mut dw = want.1.then(|| vec![T::zero(); g.c_out * k]);
    let db = want.2.then(|| {
        let mut db = vec![T::zero(); g.c_out];
        for n in 0..g.batch {
            for (o, acc) in db.iter_mut().enumerate() {
                let s = n * out_stride + o * l;
                *acc += dy[s..s + l].iter().copied().sum::<T>();
            }
        }
        db
    });
    if dx.is_none() && dw.is_none() {
        return (dx, dw, db);
    }
    let cap = k * g.band_rows() * wo;
    let mut col = vec![T::zero(); cap];
    let mut dy_band = vec![T::zero(); g.c_out * g.band_rows() * wo];
    for n in 0..g.batch {
        let dyn_ = &dy[n * out_stride..(n + 1) * out_stride];
        for rows in bands(g) {
            let band = (rows.1 - rows.0) * wo;
            // gather this band of dy into a dense (O × band) block
            for o in 0..g.c_out {
                dy_band[o * band..(o + 1) * band]
                    .copy_from_slice(&dyn_[o * l + rows.0 * wo..o * l + rows.1 * wo]);
            }
            let dmat = MatRef::row_major(&dy_band[..g.c_out * band], g.c_out, band);
            if let Some(dw) = dw.as_mut() {
                im2col(&x[n * in_stride..(n + 1) * in_stride], g, rows, &mut col[..k * band]);
                let col_t = MatRef::transposed(&col[..k * band], band, k);
                gemm_strided(T::one(), dmat, col_t, T::one(), dw, k);
            }
            if let Some(dx) = dx.as_mut() {
                let w_t = MatRef::transposed(weight, k, g.c_out);
                gemm_strided(T::one(), w_t, dmat, T::zero(), &mut col[..k * band], band);
                col2im(&col[..k * band], g, rows, &mut dx[n * in_stride..(n + 1) * in_stride]);
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution.
    fn naive(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (ho, wo) = g.output_hw().unwrap();
        let mut out = vec![0.0; g.batch * g.c_out * ho * wo];
        for n in 0..g.batch {
            for o in 0..g.c_out {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[o];
                        for c in 0..g.c_in {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += x[((n * g.c_in + c) * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((o * g.c_in + c) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                        out[((n * g.c_out + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect()
    }

    fn geoms() -> Vec<ConvGeom> {
        let g = |batch, c_in, h, w, c_out, k, stride, pad| ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh: k,
            kw: k,
            stride,
            pad,
        };
        vec![
            g(2, 3, 9, 7, 4, 7, 1, 3),
            g(1, 2, 8, 10, 3, 4, 2, 1),
            g(2, 3, 5, 6, 2, 5, 1, 2),
            g(1, 1, 4, 4, 1, 4, 1, 1),
            g(1, 2, 7, 7, 2, 3, 2, 0),
        ]
    }

    #[test]
    fn forward_matches_direct_loops() {
        for (i, g) in geoms().into_iter().enumerate() {
            let x = pseudo(g.batch * g.c_in * g.h * g.w, i as u64);
            let w = pseudo(g.c_out * g.c_in * g.kh * g.kw, 100 + i as u64);
            let b = pseudo(g.c_out, 200 + i as u64);
            let fast = conv2d_forward(&x, &w, Some(&b), &g);
            let slow = naive(&x, &w, &b, &g);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12, "geom {g:?}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <dy, conv(x)> is bilinear in (x, w): its gradients are the adjoint maps.
        for (i, g) in geoms().into_iter().enumerate() {
            let x = pseudo(g.batch * g.c_in * g.h * g.w, i as u64);
            let w = pseudo(g.c_out * g.c_in * g.kh * g.kw, 10 + i as u64);
            let zero_b = vec![0.0; g.c_out];
            let y = naive(&x, &w, &zero_b, &g);
            let dy = pseudo(y.len(), 20 + i as u64);
            let (dx, dw, db) = conv2d_backward(&x, &w, &dy, &g, (true, true, true));
            let inner: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
            let via_x: f64 = dx.unwrap().iter().zip(&x).map(|(a, b)| a * b).sum();
            let via_w: f64 = dw.unwrap().iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!((inner - via_x).abs() < 1e-10, "dx adjoint failed for {g:?}");
            assert!((inner - via_w).abs() < 1e-10, "dw adjoint failed for {g:?}");
            assert!((db.unwrap().iter().sum::<f64>() - dy.iter().sum::<f64>()).abs() < 1e-10);
        }
    }

    #[test]
    fn banded_columns_match_direct_loops() {
        // k·wo = 64·25·250 exceeds the band budget, forcing several row bands
        let g = ConvGeom { batch: 1, c_in: 64, h: 40, w: 250, c_out: 2, kh: 5, kw: 5, stride: 1, pad: 2 };
        assert!(g.band_rows() < 40);
        let x = pseudo(g.c_in * g.h * g.w, 1);
        let w = pseudo(g.c_out * g.c_in * 25, 2);
        let b = vec![0.25, -0.5];
        let fast = conv2d_forward(&x, &w, Some(&b), &g);
        let slow = naive(&x, &w, &b, &g);
        for (a, e) in fast.iter().zip(&slow) {
            assert!((a - e).abs() < 1e-10);
        }
        let dy = pseudo(fast.len(), 3);
        let (dx, dw, _) = conv2d_backward(&x, &w, &dy, &g, (true, true, false));
        let inner: f64 = slow.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>()
            - b.iter().enumerate().map(|(o, bv)| bv * dy[o * 40 * 250..(o + 1) * 40 * 250].iter().sum::<f64>()).sum::<f64>();
        let via_x: f64 = dx.unwrap().iter().zip(&x).map(|(a, b)| a * b).sum();
        let via_w: f64 = dw.unwrap().iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((inner - via_x).abs() < 1e-8 * inner.abs().max(1.0));
        assert!((inner - via_w).abs() < 1e-8 * inner.abs().max(1.0));
    }

    #[test]
    fn kernel_larger_than_padded_input_has_no_output() {
        assert_eq!(out_len(2, 4, 1, 0), None);
        assert_eq!(out_len(2, 4, 1, 1), Some(1));
        assert_eq!(out_len(70, 4, 2, 1), Some(35));
    }
}
