//! Raw loops behind the graph operators.
//!
//! Every output element is accumulated by a single closure in a fixed order,
//! so results are bit-identical regardless of how many rayon workers run.

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{invalid_config, Result};

/// Shapes of a strided, zero-padded 2-d cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if k == 0 || stride == 0 {
            return Err(invalid_config("kernel size and stride must be positive"));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if k > ph || k > pw {
            return Err(invalid_config(format!("kernel {k} larger than padded input {ph}x{pw}")));
        }
        if !(ph - k).is_multiple_of(stride) || !(pw - k).is_multiple_of(stride) {
            return Err(invalid_config(format!(
                "input {h}x{w} with kernel {k}, stride {stride}, pad {pad} gives a non-integral output size"
            )));
        }
        Ok(Self {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            oh: (ph - k) / stride + 1,
            ow: (pw - k) / stride + 1,
        })
    }

    #[inline]
    fn weight_index(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.cin + ci) * self.k + ky) * self.k + kx
    }

    /// Input row touched by output row `oy` at kernel row `ky`.
    #[inline]
    fn in_row(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }

    /// Output columns `lo..hi` whose input column `ox*stride + kx - pad` is in bounds.
    #[inline]
    fn out_col_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > kx { (self.pad - kx).div_ceil(s) } else { 0 };
        // largest ox with ox*s + kx - pad <= w - 1
        let limit = self.w + self.pad;
        let hi = if limit > kx {
            ((limit - kx - 1) / s + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// `out[co] = bias[co] + sum_ci weight[co, ci] ⋆ input[ci]`.
pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, input: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let plane_out = g.oh * g.ow;
    let plane_in = g.h * g.w;
    let mut out = vec![T::zero(); g.cout * plane_out];
    out.par_chunks_mut(plane_out).enumerate().for_each(|(co, out_c)| {
        if let Some(b) = bias {
            out_c.fill(b[co]);
        }
        for ci in 0..g.cin {
            let in_c = &input[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = weight[g.weight_index(co, ci, ky, kx)];
                    if wv == T::zero() {
                        continue;
                    }
                    let (lo, hi) = g.out_col_range(kx);
                    for oy in 0..g.oh {
                        let Some(iy) = g.in_row(oy, ky, g.h) else {
                            continue;
                        };
                        let row_in = &in_c[iy * g.w..(iy + 1) * g.w];
                        let row_out = &mut out_c[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let off = lo + kx - g.pad;
                            for (o, &i) in row_out[lo..hi].iter_mut().zip(&row_in[off..]) {
                                *o += wv * i;
                            }
                        } else {
                            for (ox, o) in row_out.iter_mut().enumerate().take(hi).skip(lo) {
                                *o += wv * row_in[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient of [`conv2d_forward`] with respect to its input. This is also the
/// forward pass of the transposed convolution.
pub(crate) fn conv2d_backward_input<T: Scalar>(g: &ConvGeom, grad_out: &[T], weight: &[T]) -> Vec<T> {
    let plane_out = g.oh * g.ow;
    let plane_in = g.h * g.w;
    let mut grad_in = vec![T::zero(); g.cin * plane_in];
    grad_in.par_chunks_mut(plane_in).enumerate().for_each(|(ci, gin_c)| {
        for co in 0..g.cout {
            let gout_c = &grad_out[co * plane_out..(co + 1) * plane_out];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = weight[g.weight_index(co, ci, ky, kx)];
                    if wv == T::zero() {
                        continue;
                    }
                    let (lo, hi) = g.out_col_range(kx);
                    for oy in 0..g.oh {
                        let Some(iy) = g.in_row(oy, ky, g.h) else {
                            continue;
                        };
                        let row_g = &gout_c[oy * g.ow..(oy + 1) * g.ow];
                        let row_in = &mut gin_c[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let off = lo + kx - g.pad;
                            for (i, &o) in row_in[off..].iter_mut().zip(&row_g[lo..hi]) {
                                *i += wv * o;
                            }
                        } else {
                            for (ox, &o) in row_g.iter().enumerate().take(hi).skip(lo) {
                                row_in[ox * g.stride + kx - g.pad] += wv * o;
                            }
                        }
                    }
                }
            }
        }
    });
    grad_in
}

/// Gradient of [`conv2d_forward`] with respect to its weights.
pub(crate) fn conv2d_backward_weight<T: Scalar>(g: &ConvGeom, grad_out: &[T], input: &[T]) -> Vec<T> {
    let plane_out = g.oh * g.ow;
    let plane_in = g.h * g.w;
    let per_co = g.cin * g.k * g.k;
    let mut grad_w = vec![T::zero(); g.cout * per_co];
    grad_w.par_chunks_mut(per_co).enumerate().for_each(|(co, gw_c)| {
        let gout_c = &grad_out[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.cin {
            let in_c = &input[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let (lo, hi) = g.out_col_range(kx);
                    let mut acc = T::zero();
                    for oy in 0..g.oh {
                        let Some(iy) = g.in_row(oy, ky, g.h) else {
                            continue;
                        };
                        let row_g = &gout_c[oy * g.ow..(oy + 1) * g.ow];
                        let row_in = &in_c[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let off = lo + kx - g.pad;
                            acc += dot_lanes(&row_g[lo..hi], &row_in[off..off + hi - lo]);
                        } else {
                            for (ox, &o) in row_g.iter().enumerate().take(hi).skip(lo) {
                                acc += o * row_in[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                    gw_c[(ci * g.k + ky) * g.k + kx] = acc;
                }
            }
        }
    });
    grad_w
}

/// Dot product with eight independent partial sums so the loop vectorises;
/// the combination order is fixed.
#[inline]
fn dot_lanes<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut total = acc.iter().fold(T::zero(), |s, &v| s + v);
    for (&x, &y) in ta.iter().zip(tb) {
        total += x * y;
    }
    total
}

/// 2×2 stride-2 max pooling. Odd extents behave as if padded with −∞.
/// Returns the pooled values and, per output element, the flat input index
/// that won (first occurrence in row-major window order on ties).
pub(crate) fn maxpool2_forward<T: Scalar>(
    c: usize,
    h: usize,
    w: usize,
    input: &[T],
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (y, x) = (2 * oy + dy, 2 * ox + dx);
                        if y < h && x < w {
                            let idx = base + y * w + x;
                            if best_idx == usize::MAX || input[idx] > best {
                                best = input[idx];
                                best_idx = idx;
                            }
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg, oh, ow)
}

/// Bilinear upsampling kernel used to initialise transposed convolutions:
/// a `channels × channels × k × k` tensor that maps channel `c` to channel
/// `c` only.
pub fn bilinear_filter<T: Scalar>(k: usize, channels: usize) -> Tensor<T> {
    assert!(k >= 1, "bilinear kernel size must be at least 1");
    let factor = k.div_ceil(2) as f64;
    let center = if k % 2 == 1 { factor - 1.0 } else { factor - 0.5 };
    let profile: Vec<f64> = (0..k).map(|i| 1.0 - (i as f64 - center).abs() / factor).collect();
    let mut out = Tensor::zeros(&[channels, channels, k, k]);
    let data = out.data_mut();
    for c in 0..channels {
        let base = (c * channels + c) * k * k;
        for (i, fi) in profile.iter().enumerate() {
            for (j, fj) in profile.iter().enumerate() {
                data[base + i * k + j] = T::cast(fi * fj);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_requires_exact_division() {
        assert!(ConvGeom::new(1, 5, 5, 1, 2, 2, 0).is_err());
        let g = ConvGeom::new(1, 6, 6, 1, 2, 2, 0).unwrap();
        assert_eq!((g.oh, g.ow), (3, 3));
        let g = ConvGeom::new(1, 7, 9, 1, 3, 1, 1).unwrap();
        assert_eq!((g.oh, g.ow), (7, 9));
    }

    #[test]
    fn column_range_matches_brute_force() {
        for (w, k, s, p) in [(7, 3, 1, 1), (8, 4, 2, 1), (9, 16, 8, 4), (5, 1, 1, 0), (6, 4, 2, 3)] {
            let Ok(g) = ConvGeom::new(1, w, w, 1, k, s, p) else {
                continue;
            };
            for kx in 0..k {
                let valid: Vec<usize> = (0..g.ow)
                    .filter(|&ox| {
                        let ix = (ox * s + kx) as isize - p as isize;
                        ix >= 0 && (ix as usize) < w
                    })
                    .collect();
                let (lo, hi) = g.out_col_range(kx);
                assert_eq!(valid, (lo..hi).collect::<Vec<_>>(), "w={w} k={k} s={s} p={p} kx={kx}");
            }
        }
    }

    #[test]
    fn bilinear_profiles() {
        let k1: Tensor<f64> = bilinear_filter(1, 1);
        assert_eq!(k1.data(), &[1.0]);
        let k4: Tensor<f64> = bilinear_filter(4, 1);
        let row: Vec<f64> = (0..4).map(|j| k4.data()[4 + j] / 0.75).collect();
        for (a, b) in row.iter().zip([0.25, 0.75, 0.75, 0.25]) {
            assert!((a - b).abs() < 1e-12);
        }
        let k3: Tensor<f64> = bilinear_filter(3, 2);
        assert_eq!(k3.data()[4], 1.0);
        // cross-channel entries are zero
        assert!(k3.data()[9..18].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_is_symmetric() {
        for k in 1..=16 {
            let f: Tensor<f64> = bilinear_filter(k, 1);
            let d = f.data();
            for i in 0..k {
                for j in 0..k {
                    assert_eq!(d[i * k + j], d[(k - 1 - i) * k + (k - 1 - j)]);
                    assert_eq!(d[i * k + j], d[j * k + i]);
                }
            }
        }
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let (out, arg, oh, ow) = maxpool2_forward(1, 2, 2, &[1.0f64, 1.0, 1.0, 1.0]);
        assert_eq!((oh, ow), (1, 1));
        assert_eq!(out, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn maxpool_odd_extent_pads() {
        let input: Vec<f64> = (0..9).map(|v| -(v as f64)).collect();
        let (out, arg, oh, ow) = maxpool2_forward(1, 3, 3, &input);
        assert_eq!((oh, ow), (2, 2));
        assert_eq!(out, vec![0.0, -2.0, -6.0, -8.0]);
        assert_eq!(arg, vec![0, 2, 6, 8]);
    }
}
