//! Network fixtures shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use mtreg::autodiff::{grad_check_with, volume_tensor, GradCheckOptions, Graph, Op, Tensor};
use mtreg::losses::{consistency_loss, sim_loss, smoothness_loss, total_loss, MindConfig};
use mtreg::regnet::{build_network, init_params, ArchConfig, DropoutPlan};
use mtreg::volume::Grid;
use mtreg::Volume;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn smooth_image(n: usize, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f: [f32; 6] = std::array::from_fn(|_| rng.gen_range(0.5..1.5));
    Volume::from_fn(Grid::cube(n), 1, |_, x, y, z| {
        let (x, y, z) = (x as f32, y as f32, z as f32);
        0.5 + 0.25 * (f[0] * x + f[1] * y).sin()
            + 0.2 * (f[2] * z - f[3] * x).cos()
            + 0.05 * (f[4] * y * f[5]).sin()
    })
    .unwrap()
}

/// Values of every conv node, in parameter order, for one forward pass.
pub fn conv_outputs(
    arch: &ArchConfig,
    params: &[Tensor<f64>],
    fixed: &Tensor<f64>,
    moving: &Tensor<f64>,
) -> Vec<Tensor<f64>> {
    let mut g = Graph::<f64>::new();
    let ids: Vec<_> = params.iter().map(|t| g.param(t.clone())).collect();
    let f = g.constant(fixed.clone());
    let m = g.constant(moving.clone());
    let x = g.concat(&[f, m]).unwrap();
    build_network(&mut g, arch, &ids, x, DropoutPlan::Stochastic(5)).unwrap();
    g.node_ids()
        .filter(|&id| matches!(g.op(id), Op::Conv3d { .. }))
        .map(|id| g.value(id).clone())
        .collect()
}

/// Parameters with every hidden pre-activation at least `MARGIN` away from
/// the leaky-ReLU kink (every fourth channel on the negative branch) and a
/// flow layer whose displacements never cross a trilinear cell boundary.
pub fn kink_free_params(
    arch: &ArchConfig,
    fixed: &Tensor<f64>,
    moving: &Tensor<f64>,
) -> Vec<Tensor<f64>> {
    const MARGIN: f64 = 0.5;
    let mut margins = Vec::new();
    let mut ps: Vec<Tensor<f64>> = init_params(arch, 3)
        .unwrap()
        .tensors()
        .map(|t| t.cast())
        .collect();
    let convs = ps.len() / 2;
    for layer in 0..convs - 1 {
        let out = &conv_outputs(arch, &ps, fixed, moving)[layer];
        let co = out.shape()[0];
        let per = out.len() / co;
        for c in 0..co {
            let b = ps[2 * layer + 1].data()[c];
            let reach = out.data()[c * per..(c + 1) * per]
                .iter()
                .map(|v| (v - b).abs())
                .fold(0.0, f64::max);
            let sign = if c % 4 == 3 { -1.0 } else { 1.0 };
            ps[2 * layer + 1].data_mut()[c] = sign * (reach + MARGIN);
        }
        // rescale so activations stay O(1) through the depth
        let out = &conv_outputs(arch, &ps, fixed, moving)[layer];
        let peak = out.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for k in [2 * layer, 2 * layer + 1] {
            for v in ps[k].data_mut() {
                *v /= peak;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for v in ps[2 * convs - 2].data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let flow = conv_outputs(arch, &ps, fixed, moving).pop().unwrap();
    let bias = ps[2 * convs - 1].data().to_vec();
    let co = flow.shape()[0];
    let per = flow.len() / co;
    let peak = (0..flow.len()).fold(0.0f64, |a, i| a.max((flow.data()[i] - bias[i / per]).abs()));
    for v in ps[2 * convs - 2].data_mut() {
        *v *= 0.3 / peak;
    }
    // every sample point sits 0.2..0.8 voxels past a grid node
    for v in ps[2 * convs - 1].data_mut() {
        *v = 0.5;
    }
    for out in &conv_outputs(arch, &ps, fixed, moving)[..convs - 1] {
        margins.push(out.data().iter().fold(f64::INFINITY, |a, v| a.min(v.abs())));
    }
    assert!(
        margins.iter().all(|&m| m > 0.05),
        "kink margins {margins:?}"
    );
    ps
}

/// Max relative error of the analytic gradient of the full training loss
/// (similarity + smoothness + consistency, dropout on) on an 8^3 pair.
pub fn end_to_end_grad_error() -> f64 {
    let arch = ArchConfig::default();
    let fixed = volume_tensor::<f64>(&smooth_image(8, 1));
    let moving = volume_tensor::<f64>(&smooth_image(8, 2));
    let teacher = volume_tensor::<f64>(&smooth_image(8, 4));
    let inputs = kink_free_params(&arch, &fixed, &moving);

    grad_check_with(
        &inputs,
        |g, ids| {
            let f = g.constant(fixed.clone());
            let m = g.constant(moving.clone());
            let x = g.concat(&[f, m])?;
            let phi = build_network(g, &arch, ids, x, DropoutPlan::Stochastic(5))?;
            let warped = g.warp(m, phi)?;
            let sim = sim_loss(g, f, warped, &MindConfig::default())?;
            let smooth = smoothness_loss(g, phi)?;
            let cons = consistency_loss(g, warped, &teacher)?;
            total_loss(g, sim, smooth, cons, 2.0, 0.5)
        },
        GradCheckOptions {
            max_samples: 48,
            seed: 1,
        },
    )
    .unwrap()
}
