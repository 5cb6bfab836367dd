//! Brute-force reference implementations and random fixtures shared by the
//! oracle tests and the acceptance suite.
#![allow(dead_code)]

use mtreg::uncertainty::McSamples;
use mtreg::volume::Grid;
use mtreg::{DisplacementField, LabelVolume, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mean and sample std from pairwise differences:
/// `var = sum_{i<j} (x_i - x_j)^2 / (n (n - 1))`.
pub fn pairwise_stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mut mean = 0.0;
    for x in xs {
        mean += x;
    }
    mean /= n;
    let mut acc = 0.0;
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            acc += (xs[i] - xs[j]) * (xs[i] - xs[j]);
        }
    }
    (mean, (acc / (n * (n - 1.0))).sqrt())
}

/// Reference maps in `(channel, z, y, x)` order: `(u_phi, u_app)`.
pub fn uncertainty_oracle(s: &McSamples, eps_phi: f64, eps_app: f64) -> (Vec<f64>, Vec<f64>) {
    let [nx, ny, nz] = s.grid().dims();
    let mut u_phi = Vec::new();
    let mut u_app = Vec::new();
    for c in 0..3 {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let xs: Vec<f64> = s
                        .fields()
                        .iter()
                        .map(|f| f.volume().get(c, x, y, z) as f64)
                        .collect();
                    let (m, sd) = pairwise_stats(&xs);
                    u_phi.push(sd / (m.abs() + eps_phi));
                }
            }
        }
    }
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let xs: Vec<f64> = s
                    .warped()
                    .iter()
                    .map(|w| w.get(0, x, y, z) as f64)
                    .collect();
                let (m, sd) = pairwise_stats(&xs);
                u_app.push(sd / (m.abs() + eps_app));
            }
        }
    }
    (u_phi, u_app)
}

/// Reference `(lambda_phi, lambda_c)` from oracle maps.
pub fn weights_oracle(
    u_phi: &[f64],
    u_app: &[f64],
    k1: f64,
    k2: f64,
    tau1: f64,
    tau2: f64,
) -> (f64, f64) {
    let mut over1 = 0usize;
    for &u in u_phi {
        if u > tau1 {
            over1 += 1;
        }
    }
    let mut over2 = 0usize;
    for &u in u_app {
        if u > tau2 {
            over2 += 1;
        }
    }
    (
        k1 * over1 as f64 / u_phi.len() as f64,
        k2 * over2 as f64 / u_app.len() as f64,
    )
}

/// N samples on an `n^3` grid; every voxel gets its own centre and spread so
/// the ratio map covers several decades around the default thresholds.
pub fn random_samples(seed: u64, n_samples: usize, n: usize) -> McSamples {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = Grid::cube(n);
    let v = grid.voxels();
    let centre: Vec<f32> = (0..4 * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let spread: Vec<f32> = (0..4 * v)
        .map(|_| 10f32.powf(rng.gen_range(-4.0..0.0)))
        .collect();
    let mut fields = Vec::new();
    let mut warped = Vec::new();
    for _ in 0..n_samples {
        let mut draw = |k: usize| centre[k] + spread[k] * rng.gen_range(-1.0f32..1.0);
        let f: Vec<f32> = (0..3 * v).map(&mut draw).collect();
        let w: Vec<f32> = (3 * v..4 * v).map(&mut draw).collect();
        fields.push(DisplacementField::new(Volume::new(grid, 3, f).unwrap()).unwrap());
        warped.push(Volume::new(grid, 1, w).unwrap());
    }
    McSamples::new(fields, warped).unwrap()
}

pub fn dice_oracle(a: &LabelVolume, b: &LabelVolume, label: u8) -> f64 {
    let [nx, ny, nz] = a.dims();
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let ia = a.get(x, y, z) == label;
                let ib = b.get(x, y, z) == label;
                if ia {
                    na += 1;
                }
                if ib {
                    nb += 1;
                }
                if ia && ib {
                    both += 1;
                }
            }
        }
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

fn boundary(m: &LabelVolume, label: u8) -> Vec<[i64; 3]> {
    let [nx, ny, nz] = m.dims().map(|d| d as i64);
    let inside = |x: i64, y: i64, z: i64| {
        x >= 0
            && y >= 0
            && z >= 0
            && x < nx
            && y < ny
            && z < nz
            && m.get(x as usize, y as usize, z as usize) == label
    };
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !inside(x, y, z) {
                    continue;
                }
                let n6 = [
                    (1, 0, 0),
                    (-1, 0, 0),
                    (0, 1, 0),
                    (0, -1, 0),
                    (0, 0, 1),
                    (0, 0, -1),
                ];
                if n6
                    .iter()
                    .any(|&(dx, dy, dz)| !inside(x + dx, y + dy, z + dz))
                {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// O(|Sa| |Sb|) symmetric average surface distance.
pub fn asd_oracle(a: &LabelVolume, b: &LabelVolume, label: u8) -> f64 {
    let sp = a.spacing().map(|s| s as f64);
    let sa = boundary(a, label);
    let sb = boundary(b, label);
    let dist = |p: &[i64; 3], q: &[i64; 3]| {
        let mut d2 = 0.0;
        for k in 0..3 {
            let d = (p[k] - q[k]) as f64 * sp[k];
            d2 += d * d;
        }
        d2.sqrt()
    };
    let mut total = 0.0;
    for p in &sa {
        total += sb.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min);
    }
    for q in &sb {
        total += sa.iter().map(|p| dist(q, p)).fold(f64::INFINITY, f64::min);
    }
    total / (sa.len() + sb.len()) as f64
}

/// Random 12^3 masks with labels {0, 1, 2}: a union of boxes and balls for
/// label 1 and salt noise for label 2, so both compact and fragmented
/// surfaces occur.
pub fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> LabelVolume {
    let grid = Grid::cube(n);
    let mut m = LabelVolume::zeros(grid);
    let shapes: Vec<([f64; 3], f64, bool)> = (0..rng.gen_range(1..4))
        .map(|_| {
            let c = [0; 3].map(|_: i32| rng.gen_range(0.0..n as f64));
            (c, rng.gen_range(1.0..n as f64 / 2.5), rng.gen_bool(0.5))
        })
        .collect();
    let noise = rng.gen_range(0.0..0.2);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = [x as f64, y as f64, z as f64];
                let hit = shapes.iter().any(|(c, r, ball)| {
                    if *ball {
                        (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>() <= r * r
                    } else {
                        (0..3).all(|k| (p[k] - c[k]).abs() <= *r)
                    }
                });
                let label = if hit {
                    1
                } else if rng.gen_bool(noise) {
                    2
                } else {
                    0
                };
                m.data_mut()[grid.offset(x, y, z)] = label;
            }
        }
    }
    m
}
