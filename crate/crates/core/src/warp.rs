//! Pull-warping and Jacobian analysis of displacement fields.
//!
//! Convention: `warped(x) = source(x + u(x))`, displacements in voxels.
//! Channel 0 of a field displaces along x, 1 along y, 2 along z. Sampling
//! positions outside the grid are clamped to the border.

use rayon::prelude::*;

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::volume::{Grid, LabelVolume, Volume};

/// A 3-channel volume of per-voxel displacements in voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField(Volume);

impl DisplacementField {
    pub fn new(vol: Volume) -> Result<Self> {
        if vol.channels() != 3 {
            return Err(Error::Shape(format!(
                "displacement field needs 3 channels, got {}",
                vol.channels()
            )));
        }
        Ok(DisplacementField(vol))
    }

    pub fn zeros(grid: Grid) -> Self {
        DisplacementField(Volume::zeros(grid, 3))
    }

    /// Builds a field from `f(x, y, z) -> [ux, uy, uz]`.
    pub fn from_fn(grid: Grid, f: impl Fn(usize, usize, usize) -> [f32; 3]) -> Result<Self> {
        DisplacementField::new(Volume::from_fn(grid, 3, |c, x, y, z| f(x, y, z)[c])?)
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }

    pub fn grid(&self) -> &Grid {
        self.0.grid()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.0.dims()
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    /// Largest displacement magnitude over all voxels.
    pub fn max_norm(&self) -> f32 {
        let v = self.grid().voxels();
        let d = self.data();
        (0..v)
            .map(|i| (d[i] * d[i] + d[v + i] * d[v + i] + d[2 * v + i] * d[2 * v + i]).sqrt())
            .fold(0.0, f32::max)
    }

    /// Multiplies every displacement by `s`.
    pub fn scaled(&self, s: f32) -> Result<Self> {
        DisplacementField::new(self.0.map(|v| v * s)?)
    }
}

/// Linear sampling coordinate along one axis.
#[derive(Debug, Clone, Copy)]
struct AxisSample<T> {
    i0: usize,
    i1: usize,
    t: T,
    /// d t / d position; zero where the position was clamped.
    dt: T,
}

#[inline]
fn axis_sample<T: Real>(p: T, n: usize) -> AxisSample<T> {
    if n == 1 {
        return AxisSample {
            i0: 0,
            i1: 0,
            t: T::zero(),
            dt: T::zero(),
        };
    }
    let hi = T::lit((n - 1) as f64);
    let (pc, dt) = if p < T::zero() {
        (T::zero(), T::zero())
    } else if p > hi {
        (hi, T::zero())
    } else {
        (p, T::one())
    };
    let i0 = pc.floor().to_usize().unwrap().min(n - 2);
    AxisSample {
        i0,
        i1: i0 + 1,
        t: pc - T::lit(i0 as f64),
        dt,
    }
}

#[derive(Clone, Copy)]
struct Corners<T> {
    sx: AxisSample<T>,
    sy: AxisSample<T>,
    sz: AxisSample<T>,
}

fn corners<T: Real>(field: &[T], dims: [usize; 3], v: usize) -> Corners<T> {
    let [nx, ny, nz] = dims;
    let plane = nx * ny * nz;
    let x = v % nx;
    let y = (v / nx) % ny;
    let z = v / (nx * ny);
    Corners {
        sx: axis_sample(T::lit(x as f64) + field[v], nx),
        sy: axis_sample(T::lit(y as f64) + field[plane + v], ny),
        sz: axis_sample(T::lit(z as f64) + field[2 * plane + v], nz),
    }
}

/// Trilinear pull-warp of every channel of `image` (`dims` = `[nx, ny, nz]`).
pub(crate) fn warp_linear<T: Real>(
    image: &[T],
    channels: usize,
    dims: [usize; 3],
    field: &[T],
) -> Vec<T> {
    let [nx, ny, nz] = dims;
    let plane = nx * ny * nz;
    let samples: Vec<Corners<T>> = (0..plane)
        .into_par_iter()
        .with_min_len(1024)
        .map(|v| corners(field, dims, v))
        .collect();
    let mut out = vec![T::zero(); channels * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(c, oc)| {
        let img = &image[c * plane..(c + 1) * plane];
        let at = |x: usize, y: usize, z: usize| img[(z * ny + y) * nx + x];
        for (v, o) in oc.iter_mut().enumerate() {
            let Corners { sx, sy, sz } = samples[v];
            let (wx0, wx1) = (T::one() - sx.t, sx.t);
            let (wy0, wy1) = (T::one() - sy.t, sy.t);
            let (wz0, wz1) = (T::one() - sz.t, sz.t);
            let lerp_x = |y, z| wx0 * at(sx.i0, y, z) + wx1 * at(sx.i1, y, z);
            *o = wz0 * (wy0 * lerp_x(sy.i0, sz.i0) + wy1 * lerp_x(sy.i1, sz.i0))
                + wz1 * (wy0 * lerp_x(sy.i0, sz.i1) + wy1 * lerp_x(sy.i1, sz.i1));
        }
    });
    out
}

/// Gradients of [`warp_linear`] w.r.t. the image and the field.
pub(crate) fn warp_linear_backward<T: Real>(
    image: &[T],
    channels: usize,
    dims: [usize; 3],
    field: &[T],
    gout: &[T],
    need_image: bool,
    need_field: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let [nx, ny, nz] = dims;
    let plane = nx * ny * nz;
    let samples: Vec<Corners<T>> = (0..plane)
        .into_par_iter()
        .with_min_len(1024)
        .map(|v| corners(field, dims, v))
        .collect();
    let idx = |x: usize, y: usize, z: usize| (z * ny + y) * nx + x;

    let gimg = need_image.then(|| {
        let mut gi = vec![T::zero(); channels * plane];
        gi.par_chunks_mut(plane).enumerate().for_each(|(c, gc)| {
            let g = &gout[c * plane..(c + 1) * plane];
            for (v, s) in samples.iter().enumerate() {
                let gv = g[v];
                for (iz, wz) in [(s.sz.i0, T::one() - s.sz.t), (s.sz.i1, s.sz.t)] {
                    for (iy, wy) in [(s.sy.i0, T::one() - s.sy.t), (s.sy.i1, s.sy.t)] {
                        for (ix, wx) in [(s.sx.i0, T::one() - s.sx.t), (s.sx.i1, s.sx.t)] {
                            gc[idx(ix, iy, iz)] += gv * wx * wy * wz;
                        }
                    }
                }
            }
        });
        gi
    });

    let gfield = need_field.then(|| {
        let per_voxel: Vec<[T; 3]> = (0..plane)
            .into_par_iter()
            .with_min_len(1024)
            .map(|v| {
                let Corners { sx, sy, sz } = samples[v];
                let mut acc = [T::zero(); 3];
                for c in 0..channels {
                    let img = &image[c * plane..(c + 1) * plane];
                    let at = |x, y, z| img[idx(x, y, z)];
                    let gv = gout[c * plane + v];
                    let (wx0, wx1) = (T::one() - sx.t, sx.t);
                    let (wy0, wy1) = (T::one() - sy.t, sy.t);
                    let (wz0, wz1) = (T::one() - sz.t, sz.t);
                    let (c000, c100) = (at(sx.i0, sy.i0, sz.i0), at(sx.i1, sy.i0, sz.i0));
                    let (c010, c110) = (at(sx.i0, sy.i1, sz.i0), at(sx.i1, sy.i1, sz.i0));
                    let (c001, c101) = (at(sx.i0, sy.i0, sz.i1), at(sx.i1, sy.i0, sz.i1));
                    let (c011, c111) = (at(sx.i0, sy.i1, sz.i1), at(sx.i1, sy.i1, sz.i1));
                    let ddx = wz0 * (wy0 * (c100 - c000) + wy1 * (c110 - c010))
                        + wz1 * (wy0 * (c101 - c001) + wy1 * (c111 - c011));
                    let ddy = wz0 * (wx0 * (c010 - c000) + wx1 * (c110 - c100))
                        + wz1 * (wx0 * (c011 - c001) + wx1 * (c111 - c101));
                    let ddz = wy0 * (wx0 * (c001 - c000) + wx1 * (c101 - c100))
                        + wy1 * (wx0 * (c011 - c010) + wx1 * (c111 - c110));
                    acc[0] += gv * ddx * sx.dt;
                    acc[1] += gv * ddy * sy.dt;
                    acc[2] += gv * ddz * sz.dt;
                }
                acc
            })
            .collect();
        let mut gf = vec![T::zero(); 3 * plane];
        for (v, a) in per_voxel.into_iter().enumerate() {
            for (k, val) in a.into_iter().enumerate() {
                gf[k * plane + v] = val;
            }
        }
        gf
    });
    (gimg, gfield)
}

fn check_dims(a: [usize; 3], b: [usize; 3], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "{what}: source dims {a:?} differ from field dims {b:?}"
        )));
    }
    Ok(())
}

/// Trilinear pull-warp with border clamping; channels are warped identically.
pub fn warp_trilinear(source: &Volume, field: &DisplacementField) -> Result<Volume> {
    check_dims(source.dims(), field.dims(), "warp_trilinear")?;
    let data = warp_linear(
        source.data(),
        source.channels(),
        source.dims(),
        field.data(),
    );
    Volume::new(*source.grid(), source.channels(), data)
}

/// Round half away from zero.
#[inline]
fn round_half_away(p: f32) -> f32 {
    p.round()
}

/// Nearest-neighbour pull-warp of a label map.
pub fn warp_nearest(labels: &LabelVolume, field: &DisplacementField) -> Result<LabelVolume> {
    check_dims(labels.dims(), field.dims(), "warp_nearest")?;
    let [nx, ny, nz] = labels.dims();
    let plane = nx * ny * nz;
    let u = field.data();
    let src = labels.data();
    let pick = |p: f32, n: usize| round_half_away(p).clamp(0.0, (n - 1) as f32) as usize;
    let data = (0..plane)
        .into_par_iter()
        .with_min_len(1024)
        .map(|v| {
            let x = v % nx;
            let y = (v / nx) % ny;
            let z = v / (nx * ny);
            let sx = pick(x as f32 + u[v], nx);
            let sy = pick(y as f32 + u[plane + v], ny);
            let sz = pick(z as f32 + u[2 * plane + v], nz);
            src[(sz * ny + sy) * nx + sx]
        })
        .collect();
    LabelVolume::new(*labels.grid(), data)
}

/// Determinant of `I + grad u` per voxel, forward differences with a zero
/// difference at the far boundary of each axis.
pub fn jacobian_det(field: &DisplacementField) -> Result<Volume> {
    let [nx, ny, nz] = field.dims();
    if nx < 2 || ny < 2 || nz < 2 {
        return Err(Error::Contract(format!(
            "jacobian_det needs at least 2 voxels per axis, got {:?}",
            field.dims()
        )));
    }
    let plane = nx * ny * nz;
    let u = field.data();
    let data = (0..plane)
        .into_par_iter()
        .with_min_len(1024)
        .map(|v| {
            let x = v % nx;
            let y = (v / nx) % ny;
            let z = v / (nx * ny);
            let steps = [
                (x + 1 < nx).then_some(1),
                (y + 1 < ny).then_some(nx),
                (z + 1 < nz).then_some(nx * ny),
            ];
            // j[c][a] = delta + d u_c / d a
            let mut j = [[0.0f64; 3]; 3];
            for (c, row) in j.iter_mut().enumerate() {
                let uc = &u[c * plane..(c + 1) * plane];
                for (a, step) in steps.iter().enumerate() {
                    let d = step.map_or(0.0, |s| uc[v + s] as f64 - uc[v] as f64);
                    row[a] = d + if a == c { 1.0 } else { 0.0 };
                }
            }
            (j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])) as f32
        })
        .collect();
    Volume::new(*field.grid(), 1, data)
}

/// Folding statistics of a determinant volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianStats {
    /// Fraction of voxels with determinant <= 0.
    pub folding_fraction: f64,
    /// Population standard deviation of the determinant.
    pub jac_std: f64,
}

pub fn jacobian_stats(detvol: &Volume) -> Result<JacobianStats> {
    if detvol.channels() != 1 {
        return Err(Error::Contract(format!(
            "jacobian_stats expects 1 channel, got {}",
            detvol.channels()
        )));
    }
    let d = detvol.data();
    let n = d.len() as f64;
    let folded = d.iter().filter(|&&v| v <= 0.0).count();
    let mean = d.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    Ok(JacobianStats {
        folding_fraction: folded as f64 / n,
        jac_std: var.sqrt(),
    })
}
