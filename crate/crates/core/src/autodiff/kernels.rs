//! Dense kernels behind the graph ops.
//!
//! Every parallel kernel partitions its *output* so that each element is
//! written by exactly one task with a fixed accumulation order; results are
//! bitwise independent of the thread schedule.

use rayon::prelude::*;

use super::Real;

const K: usize = 3;
const K3: usize = 27;

/// Output spatial length of a 3-tap, pad-1 convolution.
pub(crate) fn conv_out_len(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

/// Valid output range `[lo, hi)` for kernel tap `k` at stride 1.
#[inline]
fn stride1_range(k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = 1usize.saturating_sub(k);
    let hi = (n_in + 1 - k).min(n_out);
    (lo, hi.max(lo))
}

/// Input index of output `o` at tap `k`, if inside the zero-padded grid.
#[inline]
fn tap_index(o: usize, k: usize, stride: usize, n: usize) -> Option<usize> {
    let i = o * stride + k;
    if i == 0 || i > n {
        None
    } else {
        Some(i - 1)
    }
}

pub(crate) struct ConvGeom {
    pub ci: usize,
    pub co: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub stride: usize,
}

impl ConvGeom {
    pub fn new(ci: usize, co: usize, in_dims: [usize; 3], stride: usize) -> Self {
        let out_dims = in_dims.map(|n| conv_out_len(n, stride));
        ConvGeom {
            ci,
            co,
            in_dims,
            out_dims,
            stride,
        }
    }

    fn in_plane(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.out_dims.iter().product()
    }
}

/// `dims` are `[d, h, w]` throughout (z, y, x).
pub(crate) fn conv3d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let [d, h, wd] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let (ip, op, s) = (g.in_plane(), g.out_plane(), g.stride);
    let mut out = vec![T::zero(); g.co * op];
    out.par_chunks_mut(op).enumerate().for_each(|(o, oc)| {
        oc.fill(b[o]);
        for i in 0..g.ci {
            let xc = &x[i * ip..(i + 1) * ip];
            let wk = &w[(o * g.ci + i) * K3..(o * g.ci + i + 1) * K3];
            for kz in 0..K {
                for ky in 0..K {
                    for kx in 0..K {
                        let wv = wk[(kz * K + ky) * K + kx];
                        for oz in 0..od {
                            let Some(iz) = tap_index(oz, kz, s, d) else {
                                continue;
                            };
                            for oy in 0..oh {
                                let Some(iy) = tap_index(oy, ky, s, h) else {
                                    continue;
                                };
                                let orow = &mut oc[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                let xrow = &xc[(iz * h + iy) * wd..(iz * h + iy + 1) * wd];
                                if s == 1 {
                                    let (lo, hi) = stride1_range(kx, wd, ow);
                                    let xs = &xrow[lo + kx - 1..hi + kx - 1];
                                    for (ov, &xv) in orow[lo..hi].iter_mut().zip(xs) {
                                        *ov += wv * xv;
                                    }
                                } else {
                                    for (ox, ov) in orow.iter_mut().enumerate() {
                                        if let Some(ix) = tap_index(ox, kx, s, wd) {
                                            *ov += wv * xrow[ix];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv3d_backward_input<T: Real>(g: &ConvGeom, w: &[T], gout: &[T]) -> Vec<T> {
    let [d, h, wd] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let (ip, op, s) = (g.in_plane(), g.out_plane(), g.stride);
    let mut gx = vec![T::zero(); g.ci * ip];
    gx.par_chunks_mut(ip).enumerate().for_each(|(i, gc)| {
        for o in 0..g.co {
            let gc_out = &gout[o * op..(o + 1) * op];
            let wk = &w[(o * g.ci + i) * K3..(o * g.ci + i + 1) * K3];
            for kz in 0..K {
                for ky in 0..K {
                    for kx in 0..K {
                        let wv = wk[(kz * K + ky) * K + kx];
                        for oz in 0..od {
                            let Some(iz) = tap_index(oz, kz, s, d) else {
                                continue;
                            };
                            for oy in 0..oh {
                                let Some(iy) = tap_index(oy, ky, s, h) else {
                                    continue;
                                };
                                let orow = &gc_out[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                let grow = &mut gc[(iz * h + iy) * wd..(iz * h + iy + 1) * wd];
                                if s == 1 {
                                    let (lo, hi) = stride1_range(kx, wd, ow);
                                    let gs = &mut grow[lo + kx - 1..hi + kx - 1];
                                    for (gv, &ov) in gs.iter_mut().zip(&orow[lo..hi]) {
                                        *gv += wv * ov;
                                    }
                                } else {
                                    for (ox, &ov) in orow.iter().enumerate() {
                                        if let Some(ix) = tap_index(ox, kx, s, wd) {
                                            grow[ix] += wv * ov;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

pub(crate) fn conv3d_backward_weight<T: Real>(g: &ConvGeom, x: &[T], gout: &[T]) -> Vec<T> {
    let [d, h, wd] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let (ip, op, s) = (g.in_plane(), g.out_plane(), g.stride);
    let mut gw = vec![T::zero(); g.co * g.ci * K3];
    gw.par_chunks_mut(K3).enumerate().for_each(|(oi, gk)| {
        let (o, i) = (oi / g.ci, oi % g.ci);
        let xc = &x[i * ip..(i + 1) * ip];
        let gc_out = &gout[o * op..(o + 1) * op];
        for kz in 0..K {
            for ky in 0..K {
                for kx in 0..K {
                    let mut acc = T::zero();
                    for oz in 0..od {
                        let Some(iz) = tap_index(oz, kz, s, d) else {
                            continue;
                        };
                        for oy in 0..oh {
                            let Some(iy) = tap_index(oy, ky, s, h) else {
                                continue;
                            };
                            let orow = &gc_out[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let xrow = &xc[(iz * h + iy) * wd..(iz * h + iy + 1) * wd];
                            if s == 1 {
                                let (lo, hi) = stride1_range(kx, wd, ow);
                                for (&ov, &xv) in
                                    orow[lo..hi].iter().zip(&xrow[lo + kx - 1..hi + kx - 1])
                                {
                                    acc += ov * xv;
                                }
                            } else {
                                for (ox, &ov) in orow.iter().enumerate() {
                                    if let Some(ix) = tap_index(ox, kx, s, wd) {
                                        acc += ov * xrow[ix];
                                    }
                                }
                            }
                        }
                    }
                    gk[(kz * K + ky) * K + kx] = acc;
                }
            }
        }
    });
    gw
}

pub(crate) fn conv3d_backward_bias<T: Real>(co: usize, gout: &[T]) -> Vec<T> {
    let op = gout.len() / co;
    gout.chunks(op)
        .map(|c| c.iter().fold(T::zero(), |a, &v| a + v))
        .collect()
}

/// A 1D linear operator applied along one axis of a `[c, d, h, w]` tensor.
///
/// `taps[j]` lists `(input index, weight)` pairs contributing to output `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisTaps<T> {
    pub in_len: usize,
    pub taps: Vec<Vec<(usize, T)>>,
}

impl<T: Real> AxisTaps<T> {
    pub fn out_len(&self) -> usize {
        self.taps.len()
    }

    /// 2x linear upsampling with half-pixel centers and edge clamping.
    pub fn upsample2x(n: usize) -> Self {
        let quarter = T::from_f64(0.25).unwrap();
        let taps = (0..2 * n)
            .map(|o| {
                let k = o / 2;
                let (i0, i1, t) = if o % 2 == 0 {
                    if k == 0 {
                        (0, 0, T::zero())
                    } else {
                        (k - 1, k, T::one() - quarter)
                    }
                } else {
                    (k, (k + 1).min(n - 1), quarter)
                };
                vec![(i0, T::one() - t), (i1, t)]
            })
            .collect();
        AxisTaps { in_len: n, taps }
    }

    /// Correlation with an odd-length kernel, zero outside the grid.
    pub fn blur(n: usize, kernel: &[T]) -> Self {
        let r = kernel.len() / 2;
        let taps = (0..n)
            .map(|o| {
                kernel
                    .iter()
                    .enumerate()
                    .filter_map(|(k, &w)| {
                        let i = (o + k).checked_sub(r)?;
                        (i < n).then_some((i, w))
                    })
                    .collect()
            })
            .collect();
        AxisTaps { in_len: n, taps }
    }

    /// `out[i] = x[clamp(i + offset)]`.
    pub fn shift(n: usize, offset: isize) -> Self {
        let taps = (0..n)
            .map(|o| {
                let i = (o as isize + offset).clamp(0, n as isize - 1) as usize;
                vec![(i, T::one())]
            })
            .collect();
        AxisTaps { in_len: n, taps }
    }

    /// `out[i] = x[i + 1] - x[i]`, zero at the last index.
    pub fn forward_diff(n: usize) -> Self {
        let taps = (0..n)
            .map(|o| {
                if o + 1 < n {
                    vec![(o + 1, T::one()), (o, -T::one())]
                } else {
                    Vec::new()
                }
            })
            .collect();
        AxisTaps { in_len: n, taps }
    }
}

fn outer_inner(shape: &[usize; 4], dim: usize) -> (usize, usize) {
    (
        shape[..dim].iter().product(),
        shape[dim + 1..].iter().product(),
    )
}

pub(crate) fn apply_axis<T: Real>(
    x: &[T],
    shape: [usize; 4],
    dim: usize,
    taps: &AxisTaps<T>,
) -> Vec<T> {
    let (outer, inner) = outer_inner(&shape, dim);
    let (n, m) = (shape[dim], taps.out_len());
    let mut out = vec![T::zero(); outer * m * inner];
    out.par_chunks_mut(m * inner)
        .with_min_len(16)
        .enumerate()
        .for_each(|(o, chunk)| {
            let src = &x[o * n * inner..(o + 1) * n * inner];
            for (j, tj) in taps.taps.iter().enumerate() {
                let dst = &mut chunk[j * inner..(j + 1) * inner];
                for &(i, w) in tj {
                    for (dv, &sv) in dst.iter_mut().zip(&src[i * inner..(i + 1) * inner]) {
                        *dv += w * sv;
                    }
                }
            }
        });
    out
}

/// Adjoint of [`apply_axis`]; `in_shape` is the shape of the forward input.
pub(crate) fn apply_axis_transpose<T: Real>(
    gout: &[T],
    in_shape: [usize; 4],
    dim: usize,
    taps: &AxisTaps<T>,
) -> Vec<T> {
    let (outer, inner) = outer_inner(&in_shape, dim);
    let (n, m) = (in_shape[dim], taps.out_len());
    let mut gin = vec![T::zero(); outer * n * inner];
    gin.par_chunks_mut(n * inner)
        .with_min_len(16)
        .enumerate()
        .for_each(|(o, chunk)| {
            let src = &gout[o * m * inner..(o + 1) * m * inner];
            for (j, tj) in taps.taps.iter().enumerate() {
                let g = &src[j * inner..(j + 1) * inner];
                for &(i, w) in tj {
                    for (dv, &gv) in chunk[i * inner..(i + 1) * inner].iter_mut().zip(g) {
                        *dv += w * gv;
                    }
                }
            }
        });
    gin
}
