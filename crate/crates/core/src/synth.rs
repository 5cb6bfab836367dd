//! Synthetic multimodal phantoms with known ground-truth deformations.
//!
//! A phantom is a set of non-overlapping ellipsoids on a background. Two
//! label-to-intensity maps render it as two "modalities". Both renderings
//! share one smooth multiplicative bias field, then get independent additive
//! noise and are normalized to `[0, 1]`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{normalize_intensity, Grid, LabelVolume, Volume};
use crate::warp::{jacobian_det, jacobian_stats, warp_nearest, warp_trilinear, DisplacementField};

pub const MIN_SIZE: usize = 8;
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
const RADIUS_RANGE: (f64, f64) = (0.12, 0.25);
const BIAS_AMPLITUDE: f64 = 0.05;
const FOLD_RESCALE: f32 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub size: [usize; 3],
    pub num_blobs: usize,
    pub seed: u64,
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: [24; 3],
            num_blobs: 3,
            seed: 0,
            noise_sigma: 0.02,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        check_size(self.size)?;
        if !(1..=255).contains(&self.num_blobs) {
            return Err(Error::Validation(format!(
                "num_blobs must be in [1, 255], got {}",
                self.num_blobs
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Validation(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub control_spacing: usize,
    /// Std of control-point displacements, in voxels.
    pub amplitude: f64,
    pub max_tries: usize,
    pub seed: u64,
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec {
            control_spacing: 8,
            amplitude: 1.5,
            max_tries: 20,
            seed: 0,
        }
    }
}

impl FieldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.control_spacing < 2 {
            return Err(Error::Validation(format!(
                "control_spacing must be >= 2, got {}",
                self.control_spacing
            )));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Validation(format!(
                "amplitude must be finite and >= 0, got {}",
                self.amplitude
            )));
        }
        Ok(())
    }
}

fn check_size(size: [usize; 3]) -> Result<()> {
    if size.iter().any(|&n| n < MIN_SIZE) {
        return Err(Error::Validation(format!(
            "phantom size must be at least {MIN_SIZE} per axis, got {size:?}"
        )));
    }
    Ok(())
}

/// A generated phantom: labels plus two modality renderings.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub labels: LabelVolume,
    pub intensity_a: Volume,
    pub intensity_b: Volume,
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [usize; 3], grow: f64) -> bool {
        (0..3)
            .map(|a| {
                let d = (p[a] as f64 - self.center[a]) / (self.radii[a] + grow);
                d * d
            })
            .sum::<f64>()
            <= 1.0
    }
}

fn place_blobs(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<LabelVolume> {
    let [nx, ny, nz] = spec.size;
    let grid = Grid::new(nx, ny, nz, [1.0; 3])?;
    let mut labels = LabelVolume::zeros(grid);
    let mut placed = 0usize;
    let mut attempts = 0usize;
    while placed < spec.num_blobs {
        if attempts == MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::Generation(format!(
                "placed {placed} of {} ellipsoids in {MAX_PLACEMENT_ATTEMPTS} attempts",
                spec.num_blobs
            )));
        }
        attempts += 1;
        let mut e = Ellipsoid {
            center: [0.0; 3],
            radii: [0.0; 3],
        };
        for a in 0..3 {
            let n = spec.size[a] as f64;
            let r = (rng.gen_range(RADIUS_RANGE.0..RADIUS_RANGE.1) * n).max(1.5);
            e.radii[a] = r;
            e.center[a] = rng.gen_range(r + 1.0..=(n - 2.0 - r).max(r + 1.0));
        }
        // Reject any candidate whose one-voxel dilation touches an earlier blob.
        let mut inside = Vec::new();
        let mut clash = false;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if labels.get(x, y, z) != 0 && e.contains([x, y, z], 1.0) {
                        clash = true;
                    }
                    if e.contains([x, y, z], 0.0) {
                        inside.push(grid.offset(x, y, z));
                    }
                }
            }
        }
        if clash || inside.is_empty() {
            continue;
        }
        placed += 1;
        let data = labels.data_mut();
        for i in inside {
            data[i] = placed as u8;
        }
    }
    Ok(labels)
}

/// Renders labels through a class-to-intensity table (index 0 = background).
pub(crate) fn render(labels: &LabelVolume, levels: &[f32]) -> Result<Volume> {
    Volume::new(
        *labels.grid(),
        1,
        labels.data().iter().map(|&l| levels[l as usize]).collect(),
    )
}

fn bias_field(grid: &Grid, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let phase: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    let dims = grid.dims();
    let mut out = Vec::with_capacity(grid.voxels());
    for z in 0..grid.nz {
        for y in 0..grid.ny {
            for x in 0..grid.nx {
                let p = [x, y, z];
                let s: f64 = (0..3)
                    .map(|a| (std::f64::consts::PI * p[a] as f64 / dims[a] as f64 + phase[a]).sin())
                    .sum();
                out.push(1.0 + BIAS_AMPLITUDE * s);
            }
        }
    }
    out
}

fn modality(
    labels: &LabelVolume,
    levels: &[f32],
    bias: &[f64],
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Volume> {
    let clean = render(labels, levels)?;
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::Generation(e.to_string()))?;
    let data = clean
        .data()
        .iter()
        .zip(bias)
        .map(|(&v, &b)| (v as f64 * b + noise.sample(rng)) as f32)
        .collect();
    normalize_intensity(&Volume::new(*labels.grid(), 1, data)?)
}

/// Intensity tables of the two modalities. Map B is a non-identity
/// permutation of map A.
pub(crate) fn intensity_maps(num_blobs: usize, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<f32>) {
    let a: Vec<f32> = (0..=num_blobs)
        .map(|k| 0.1 + 0.8 * k as f32 / num_blobs as f32)
        .collect();
    let mut b = a.clone();
    b.shuffle(rng);
    if b == a {
        b.reverse();
    }
    (a, b)
}

pub fn gen_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels = place_blobs(spec, &mut rng)?;
    let (map_a, map_b) = intensity_maps(spec.num_blobs, &mut rng);
    let bias = bias_field(labels.grid(), &mut rng);
    let intensity_a = modality(&labels, &map_a, &bias, spec.noise_sigma, &mut rng)?;
    let intensity_b = modality(&labels, &map_b, &bias, spec.noise_sigma, &mut rng)?;
    Ok(Phantom {
        labels,
        intensity_a,
        intensity_b,
    })
}

/// Trilinear upsampling of a coarse control grid `[3][mz][my][mx]`.
fn upsample_controls(
    ctrl: &[f64],
    m: [usize; 3],
    cs: usize,
    grid: Grid,
) -> Result<DisplacementField> {
    let axis = |p: usize, mm: usize| {
        let t = p as f64 / cs as f64;
        let i0 = (t.floor() as usize).min(mm - 2);
        (i0, t - i0 as f64)
    };
    let [mx, my, mz] = m;
    let at = |c: usize, x: usize, y: usize, z: usize| ctrl[((c * mz + z) * my + y) * mx + x];
    DisplacementField::from_fn(grid, |x, y, z| {
        let (x0, tx) = axis(x, mx);
        let (y0, ty) = axis(y, my);
        let (z0, tz) = axis(z, mz);
        std::array::from_fn(|c| {
            let mut v = 0.0;
            for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
                for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                    for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                        v += wx * wy * wz * at(c, x0 + dx, y0 + dy, z0 + dz);
                    }
                }
            }
            v as f32
        })
    })
}

/// Smooth random field from a coarse Gaussian control grid, shrunk by 0.8
/// per retry until it is folding-free.
pub fn gen_smooth_field(spec: &FieldSpec, size: [usize; 3]) -> Result<DisplacementField> {
    spec.validate()?;
    check_size(size)?;
    let grid = Grid::new(size[0], size[1], size[2], [1.0; 3])?;
    let cs = spec.control_spacing;
    let m: [usize; 3] = std::array::from_fn(|a| (size[a] - 1).div_ceil(cs) + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.amplitude).map_err(|e| Error::Generation(e.to_string()))?;
    let ctrl: Vec<f64> = (0..3 * m[0] * m[1] * m[2])
        .map(|_| normal.sample(&mut rng))
        .collect();
    let mut field = upsample_controls(&ctrl, m, cs, grid)?;
    for _ in 0..=spec.max_tries {
        if jacobian_stats(&jacobian_det(&field)?)?.folding_fraction == 0.0 {
            return Ok(field);
        }
        field = field.scaled(FOLD_RESCALE)?;
    }
    Err(Error::Generation(format!(
        "field still folds after {} rescales",
        spec.max_tries
    )))
}

/// A registration pair with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub moving: Volume,
    pub fixed: Volume,
    pub moving_seg: LabelVolume,
    pub fixed_seg: LabelVolume,
    pub gt_field: DisplacementField,
}

/// Moving is modality A of the phantom; fixed is modality B pulled through
/// the ground-truth field.
pub fn gen_pair(pspec: &PhantomSpec, fspec: &FieldSpec) -> Result<SynthPair> {
    let phantom = gen_phantom(pspec)?;
    let gt_field = gen_smooth_field(fspec, pspec.size)?;
    let fixed = warp_trilinear(&phantom.intensity_b, &gt_field)?;
    let fixed_seg = warp_nearest(&phantom.labels, &gt_field)?;
    Ok(SynthPair {
        moving: phantom.intensity_a,
        fixed,
        moving_seg: phantom.labels,
        fixed_seg,
        gt_field,
    })
}
