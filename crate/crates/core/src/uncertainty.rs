//! Monte Carlo dropout uncertainty of the teacher and the adaptive weights
//! derived from it.
//!
//! Maps are kept in f64 so that the statistics are not rounded before the
//! threshold test; [`Map64::to_volume`] converts them for export.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::regnet::{predict, ArchConfig, DropoutPlan, ModelParams};
use crate::volume::{Grid, Volume};
use crate::warp::{warp_trilinear, DisplacementField};

/// N stochastic teacher predictions and the moving image warped by each.
#[derive(Debug, Clone, PartialEq)]
pub struct McSamples {
    fields: Vec<DisplacementField>,
    warped: Vec<Volume>,
}

impl McSamples {
    pub fn new(fields: Vec<DisplacementField>, warped: Vec<Volume>) -> Result<Self> {
        if fields.len() < 2 || fields.len() != warped.len() {
            return Err(Error::Contract(format!(
                "need N >= 2 fields and as many warped images, got {} and {}",
                fields.len(),
                warped.len()
            )));
        }
        let grid = *fields[0].grid();
        let bad_field = fields.iter().any(|f| !f.grid().same_shape(&grid));
        let bad_image = warped
            .iter()
            .any(|w| !w.grid().same_shape(&grid) || w.channels() != 1);
        if bad_field || bad_image {
            return Err(Error::Shape(
                "MC samples must share dims and be single-channel images".into(),
            ));
        }
        Ok(McSamples { fields, warped })
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn fields(&self) -> &[DisplacementField] {
        &self.fields
    }

    pub fn warped(&self) -> &[Volume] {
        &self.warped
    }

    pub fn grid(&self) -> &Grid {
        self.fields[0].grid()
    }
}

/// Runs `n` dropout-on passes of the teacher; pass `i` uses seed `base_seed + i`.
pub fn mc_sample(
    arch: &ArchConfig,
    teacher: &ModelParams,
    fixed: &Volume,
    moving: &Volume,
    n: usize,
    base_seed: u64,
) -> Result<McSamples> {
    if n < 2 {
        return Err(Error::Contract(format!(
            "MC sampling needs n >= 2, got {n}"
        )));
    }
    let passes: Vec<(DisplacementField, Volume)> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let plan = DropoutPlan::Stochastic(base_seed.wrapping_add(i));
            let field = predict(arch, teacher, fixed, moving, plan)?;
            let warped = warp_trilinear(moving, &field)?;
            Ok((field, warped))
        })
        .collect::<Result<_>>()?;
    let (fields, warped) = passes.into_iter().unzip();
    McSamples::new(fields, warped)
}

/// A multi-channel map in f64, same layout as [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct Map64 {
    grid: Grid,
    channels: usize,
    data: Vec<f64>,
}

impl Map64 {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_volume(&self) -> Result<Volume> {
        Volume::new(
            self.grid,
            self.channels,
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMaps {
    pub u_phi: Map64,
    pub u_app: Map64,
    pub mu_phi: Map64,
    pub mu_app: Map64,
    pub sigma_phi: Map64,
    pub sigma_app: Map64,
}

/// Per-element mean, sample std (N - 1) and `sigma / (|mu| + eps)`.
fn coefficient_of_variation(
    samples: &[&[f32]],
    grid: Grid,
    channels: usize,
    eps: f64,
) -> (Map64, Map64, Map64) {
    let n = samples.len() as f64;
    let len = samples[0].len();
    let stats: Vec<(f64, f64, f64)> = (0..len)
        .into_par_iter()
        .with_min_len(1024)
        .map(|i| {
            let mu = samples.iter().map(|s| s[i] as f64).sum::<f64>() / n;
            let ss: f64 = samples
                .iter()
                .map(|s| {
                    let d = s[i] as f64 - mu;
                    d * d
                })
                .sum();
            let sigma = (ss / (n - 1.0)).sqrt();
            (mu, sigma, sigma / (mu.abs() + eps))
        })
        .collect();
    let map = |f: fn(&(f64, f64, f64)) -> f64| Map64 {
        grid,
        channels,
        data: stats.iter().map(f).collect(),
    };
    (map(|s| s.2), map(|s| s.0), map(|s| s.1))
}

pub fn uncertainty_maps(
    samples: &McSamples,
    eps_phi: f64,
    eps_app: f64,
) -> Result<UncertaintyMaps> {
    if samples.len() < 2 {
        return Err(Error::Contract(
            "uncertainty needs at least 2 samples".into(),
        ));
    }
    if !(eps_phi > 0.0 && eps_app > 0.0) {
        return Err(Error::Contract(format!(
            "eps must be positive, got eps_phi = {eps_phi}, eps_app = {eps_app}"
        )));
    }
    let grid = *samples.grid();
    let fields: Vec<&[f32]> = samples.fields.iter().map(|f| f.data()).collect();
    let images: Vec<&[f32]> = samples.warped.iter().map(|w| w.data()).collect();
    let (u_phi, mu_phi, sigma_phi) = coefficient_of_variation(&fields, grid, 3, eps_phi);
    let (u_app, mu_app, sigma_app) = coefficient_of_variation(&images, grid, 1, eps_app);
    Ok(UncertaintyMaps {
        u_phi,
        u_app,
        mu_phi,
        mu_app,
        sigma_phi,
        sigma_app,
    })
}

/// Regularization weights and the uncertain fractions they were built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveWeights {
    pub lambda_phi: f64,
    pub lambda_c: f64,
    /// Fraction of transformation-uncertainty elements strictly above tau1.
    pub frac_phi: f64,
    /// Fraction of appearance-uncertainty voxels strictly above tau2.
    pub frac_app: f64,
}

fn fraction_above(values: &[f64], tau: f64) -> f64 {
    values.iter().filter(|&&u| u > tau).count() as f64 / values.len() as f64
}

pub fn adaptive_weights(
    maps: &UncertaintyMaps,
    k1: f64,
    k2: f64,
    tau1: f64,
    tau2: f64,
) -> Result<AdaptiveWeights> {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN is rejected too
    if [k1, k2, tau1, tau2].iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Contract(format!(
            "k and tau must be >= 0, got k1 = {k1}, k2 = {k2}, tau1 = {tau1}, tau2 = {tau2}"
        )));
    }
    let frac_phi = fraction_above(&maps.u_phi.data, tau1);
    let frac_app = fraction_above(&maps.u_app.data, tau2);
    Ok(AdaptiveWeights {
        lambda_phi: k1 * frac_phi,
        lambda_c: k2 * frac_app,
        frac_phi,
        frac_app,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn samples_from(values: &[f32]) -> McSamples {
        let grid = Grid::new(1, 1, 1, [1.0; 3]).unwrap();
        let fields = values
            .iter()
            .map(|&v| DisplacementField::from_fn(grid, |_, _, _| [v; 3]).unwrap())
            .collect();
        let warped = values
            .iter()
            .map(|&v| Volume::new(grid, 1, vec![v]).unwrap())
            .collect();
        McSamples::new(fields, warped).unwrap()
    }

    fn maps_with(u_phi: Vec<f64>, u_app: Vec<f64>) -> UncertaintyMaps {
        let m = |data: Vec<f64>| Map64 {
            grid: Grid::new(data.len(), 1, 1, [1.0; 3]).unwrap(),
            channels: 1,
            data,
        };
        let z = |n| m(vec![0.0; n]);
        UncertaintyMaps {
            mu_phi: z(u_phi.len()),
            sigma_phi: z(u_phi.len()),
            mu_app: z(u_app.len()),
            sigma_app: z(u_app.len()),
            u_phi: m(u_phi),
            u_app: m(u_app),
        }
    }

    #[test]
    fn two_sample_hand_case() {
        let maps = uncertainty_maps(&samples_from(&[2.0, 4.0]), 0.01, 0.01).unwrap();
        let sigma = 2f64.sqrt();
        assert_eq!(maps.mu_app.data(), &[3.0]);
        assert_eq!(maps.sigma_app.data(), &[sigma]);
        assert_eq!(maps.u_app.data(), &[sigma / 3.01]);
        assert!((maps.u_phi.data()[2] - 0.46984).abs() < 1e-5);
    }

    #[test]
    fn identical_samples_have_zero_uncertainty() {
        let maps = uncertainty_maps(&samples_from(&[1.5; 4]), 0.01, 0.01).unwrap();
        assert!(maps
            .u_phi
            .data()
            .iter()
            .chain(maps.u_app.data())
            .all(|&u| u == 0.0));
        let w = adaptive_weights(&maps, 5.0, 1.0, 0.1, 0.01).unwrap();
        assert_eq!((w.lambda_phi, w.lambda_c), (0.0, 0.0));
    }

    #[test]
    fn sample_count_contract() {
        let grid = Grid::cube(2);
        let f = vec![DisplacementField::zeros(grid)];
        let w = vec![Volume::zeros(grid, 1)];
        assert!(matches!(McSamples::new(f, w), Err(Error::Contract(_))));
        assert!(uncertainty_maps(&samples_from(&[1.0, 2.0]), 0.0, 0.01).is_err());
    }

    #[test]
    fn weight_examples() {
        let mut u = vec![0.0; 10];
        u[..3].fill(0.5);
        let w = adaptive_weights(&maps_with(u, vec![0.0; 4]), 5.0, 1.0, 0.1, 0.01).unwrap();
        assert_eq!(w.lambda_phi, 1.5);
        assert_eq!(w.frac_phi, 0.3);
        let w =
            adaptive_weights(&maps_with(vec![1.0; 6], vec![1.0; 2]), 5.0, 1.0, 0.1, 0.01).unwrap();
        assert_eq!((w.lambda_phi, w.lambda_c), (5.0, 1.0));
        // strict inequality at the threshold
        let w =
            adaptive_weights(&maps_with(vec![0.1; 6], vec![0.01; 2]), 5.0, 1.0, 0.1, 0.01).unwrap();
        assert_eq!((w.lambda_phi, w.lambda_c), (0.0, 0.0));
        assert!(adaptive_weights(&maps_with(vec![0.0], vec![0.0]), -1.0, 1.0, 0.1, 0.01).is_err());
    }

    #[test]
    fn mc_sample_determinism_and_collapse() {
        let grid = Grid::cube(8);
        let fixed = Volume::from_fn(grid, 1, |_, x, y, z| {
            ((x * 3 + y * 5 + z * 7) % 11) as f32 / 10.0
        })
        .unwrap();
        let moving = Volume::from_fn(grid, 1, |_, x, y, z| {
            ((x * 7 + y * 3 + z) % 13) as f32 / 12.0
        })
        .unwrap();
        let arch = ArchConfig::default();
        let params = crate::regnet::init_params(&arch, 1).unwrap();
        let a = mc_sample(&arch, &params, &fixed, &moving, 3, 9).unwrap();
        assert_eq!(a, mc_sample(&arch, &params, &fixed, &moving, 3, 9).unwrap());
        assert_ne!(a.fields()[0], a.fields()[1]);
        assert!(mc_sample(&arch, &params, &fixed, &moving, 1, 9).is_err());

        let off = ArchConfig {
            dropout_rate: 0.0,
            ..arch
        };
        let s = mc_sample(&off, &params, &fixed, &moving, 4, 9).unwrap();
        assert!(s.fields().iter().all(|f| f == &s.fields()[0]));
        let maps = uncertainty_maps(&s, 0.01, 0.01).unwrap();
        let w = adaptive_weights(&maps, 5.0, 1.0, 0.1, 0.01).unwrap();
        assert_eq!((w.lambda_phi, w.lambda_c), (0.0, 0.0));
    }

    proptest! {
        #[test]
        fn weights_are_bounded_and_monotone(
            u in prop::collection::vec(0.0f64..1.0, 1..40),
            tau in 0.0f64..1.0,
            bump in 0.0f64..1.0,
            idx in any::<prop::sample::Index>(),
        ) {
            let w = adaptive_weights(&maps_with(u.clone(), u.clone()), 5.0, 1.0, tau, tau).unwrap();
            prop_assert!((0.0..=5.0).contains(&w.lambda_phi));
            prop_assert!((0.0..=1.0).contains(&w.lambda_c));
            let higher = adaptive_weights(&maps_with(u.clone(), u.clone()), 5.0, 1.0, tau + 0.1, tau).unwrap();
            prop_assert!(higher.lambda_phi <= w.lambda_phi);
            let mut raised = u.clone();
            raised[idx.index(u.len())] += bump;
            let r = adaptive_weights(&maps_with(raised, u.clone()), 5.0, 1.0, tau, tau).unwrap();
            prop_assert!(r.lambda_phi >= w.lambda_phi);
            let mut rev = u.clone();
            rev.reverse();
            let p = adaptive_weights(&maps_with(rev.clone(), rev), 5.0, 1.0, tau, tau).unwrap();
            prop_assert_eq!(p, w);
        }
    }
}
