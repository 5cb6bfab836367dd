//! Central-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Axis, Graph, NodeId, OpKind, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Elements probed per input; smaller inputs are probed exhaustively.
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            max_samples: 128,
            seed: 0,
        }
    }
}

fn eval_loss<F>(inputs: &[Tensor<f64>], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    Ok(g.value(loss).item())
}

/// Max relative error between analytic and central-difference gradients of
/// the scalar built by `build` w.r.t. each of `inputs`.
///
/// The step is `1e-4 * max(1, |x|)`; the error of one element is
/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check_with<F>(inputs: &[Tensor<f64>], build: F, opts: GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let n = inputs[k].len();
        let analytic = match g.grad(*id) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; n],
        };
        let picks: Vec<usize> = if n <= opts.max_samples {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, opts.max_samples).into_vec()
        };
        for j in picks {
            let x = inputs[k].data()[j];
            let h = 1e-4 * x.abs().max(1.0);
            probe[k].data_mut()[j] = x + h;
            let plus = eval_loss(&probe, &build)?;
            probe[k].data_mut()[j] = x - h;
            let minus = eval_loss(&probe, &build)?;
            probe[k].data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[j];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero: magnitude in `[lo, hi)`, random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `mean((out - target)^2)` against a fixed random target.
fn residual_loss(g: &mut Graph<f64>, out: NodeId, target: &Tensor<f64>) -> Result<NodeId> {
    let t = g.constant(target.clone());
    let d = g.sub(out, t)?;
    let s = g.square(d)?;
    g.mean(s)
}

/// Gradient check of one op kind on random inputs drawn from `seed`.
///
/// Inputs are kept away from each op's non-differentiable points (the
/// leaky-ReLU kink, integer sampling coordinates of the warp, ties of the
/// max-type ops).
pub fn grad_check(kind: OpKind, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667);
    let opts = GradCheckOptions {
        max_samples: 128,
        seed,
    };
    let sp = [1usize, 4, 5, 3];
    macro_rules! check {
        ($inputs:expr, $out_shape:expr, |$g:ident, $ids:ident| $body:expr) => {{
            let target = normal(&mut rng, &$out_shape, 1.0);
            grad_check_with(
                &$inputs,
                |$g: &mut Graph<f64>, $ids: &[NodeId]| {
                    let out = $body?;
                    residual_loss($g, out, &target)
                },
                opts,
            )
        }};
    }
    match kind {
        OpKind::Leaf => Err(Error::Contract("leaves have no gradient rule".into())),
        OpKind::Conv3d => {
            let x = normal(&mut rng, &[2, 6, 6, 6], 1.0);
            let w = normal(&mut rng, &[3, 2, 3, 3, 3], 0.3);
            let b = normal(&mut rng, &[3], 0.5);
            let t1 = normal(&mut rng, &[3, 6, 6, 6], 1.0);
            let t2 = normal(&mut rng, &[3, 3, 3, 3], 1.0);
            grad_check_with(
                &[x, w, b],
                |g, ids| {
                    let y1 = g.conv3d(ids[0], ids[1], ids[2], 1)?;
                    let y2 = g.conv3d(ids[0], ids[1], ids[2], 2)?;
                    let l1 = residual_loss(g, y1, &t1)?;
                    let l2 = residual_loss(g, y2, &t2)?;
                    g.add(l1, l2)
                },
                opts,
            )
        }
        OpKind::LeakyRelu => {
            let x = away_from_zero(&mut rng, &[2, 4, 4, 4], 0.02, 2.0);
            check!([x], [2, 4, 4, 4], |g, ids| g.leaky_relu(ids[0], 0.2))
        }
        OpKind::Dropout => {
            let x = normal(&mut rng, &[2, 4, 4, 4], 1.0);
            let mask: Vec<f64> = (0..128)
                .map(|_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 })
                .collect();
            check!([x], [2, 4, 4, 4], |g, ids| g.dropout(
                ids[0],
                mask.clone(),
                0.8
            ))
        }
        OpKind::UpsampleTrilinear2x => {
            let x = normal(&mut rng, &[2, 3, 4, 5], 1.0);
            check!([x], [2, 6, 8, 10], |g, ids| g.upsample2x(ids[0]))
        }
        OpKind::ConcatChannels => {
            let a = normal(&mut rng, &[1, 3, 3, 3], 1.0);
            let b = normal(&mut rng, &[2, 3, 3, 3], 1.0);
            check!([a, b], [3, 3, 3, 3], |g, ids| g.concat(ids))
        }
        OpKind::Add | OpKind::Subtract => {
            let a = normal(&mut rng, &[2, 4, 5, 3], 1.0);
            let b = normal(&mut rng, &sp, 1.0);
            let c = normal(&mut rng, &[2, 4, 5, 3], 1.0);
            let s = normal(&mut rng, &[1], 1.0);
            let sub = kind == OpKind::Subtract;
            check!([a, b, c, s], [2, 4, 5, 3], |g, ids| {
                let f = |g: &mut Graph<f64>, x, y| if sub { g.sub(x, y) } else { g.add(x, y) };
                let u = f(g, ids[0], ids[1])?;
                let v = f(g, u, ids[2])?;
                f(g, v, ids[3])
            })
        }
        OpKind::Scale => {
            let x = normal(&mut rng, &[2, 3, 3, 3], 1.0);
            check!([x], [2, 3, 3, 3], |g, ids| g.scale(ids[0], -1.7))
        }
        OpKind::Exp => {
            let x = uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
            check!([x], [2, 3, 3, 3], |g, ids| g.exp(ids[0]))
        }
        OpKind::DivideEps => {
            let a = normal(&mut rng, &[2, 4, 5, 3], 1.0);
            let b = uniform(&mut rng, &sp, 0.5, 2.0);
            check!([a, b], [2, 4, 5, 3], |g, ids| g
                .divide_eps(ids[0], ids[1], 0.01))
        }
        OpKind::Square => {
            let x = normal(&mut rng, &[2, 3, 3, 3], 1.0);
            check!([x], [2, 3, 3, 3], |g, ids| g.square(ids[0]))
        }
        OpKind::Abs => {
            let x = away_from_zero(&mut rng, &[2, 3, 3, 3], 0.02, 2.0);
            check!([x], [2, 3, 3, 3], |g, ids| g.abs(ids[0]))
        }
        OpKind::ReduceMean => {
            let x = normal(&mut rng, &[2, 3, 3, 3], 1.0);
            check!([x], [1], |g, ids| g.mean(ids[0]))
        }
        OpKind::ShiftDiff | OpKind::Shift => {
            let x = normal(&mut rng, &[2, 4, 5, 6], 1.0);
            let shift = kind == OpKind::Shift;
            check!([x], [2, 4, 5, 6], |g, ids| {
                let mut acc = None;
                for (k, axis) in Axis::ALL.into_iter().enumerate() {
                    let y = if shift {
                        g.shift(ids[0], axis, if k % 2 == 0 { 1 } else { -1 })?
                    } else {
                        g.shift_diff(ids[0], axis)?
                    };
                    acc = Some(match acc {
                        None => y,
                        Some(a) => g.add(a, y)?,
                    });
                }
                Ok::<_, Error>(acc.unwrap())
            })
        }
        OpKind::GaussianBlur => {
            let x = normal(&mut rng, &[2, 4, 5, 6], 1.0);
            let kernel = crate::losses::gaussian_kernel3::<f64>(0.5);
            check!([x], [2, 4, 5, 6], |g, ids| g.blur(ids[0], kernel.clone()))
        }
        OpKind::WarpTrilinear => {
            let n = 5usize;
            let img = normal(&mut rng, &[2, n, n, n], 1.0);
            // sampling positions strictly inside cells, away from the lattice
            let mut field = vec![0.0; 3 * n * n * n];
            for c in 0..3 {
                for z in 0..n {
                    for y in 0..n {
                        for x in 0..n {
                            let own = [x, y, z][c] as f64;
                            let cell = rng.gen_range(0..n - 1) as f64;
                            let frac = rng.gen_range(0.15..0.85);
                            field[((c * n + z) * n + y) * n + x] = cell + frac - own;
                        }
                    }
                }
            }
            let field = Tensor::new(vec![3, n, n, n], field).unwrap();
            check!([img, field], [2, n, n, n], |g, ids| g.warp(ids[0], ids[1]))
        }
        OpKind::ChannelMax => {
            let (c, v) = (4usize, 27usize);
            let mut data = vec![0.0; c * v];
            for voxel in 0..v {
                let mut levels: Vec<f64> = (0..c).map(|k| k as f64 * 0.5).collect();
                levels.shuffle(&mut rng);
                for k in 0..c {
                    data[k * v + voxel] = levels[k] + rng.gen_range(-0.1..0.1);
                }
            }
            let x = Tensor::new(vec![c, 3, 3, 3], data).unwrap();
            check!([x], [1, 3, 3, 3], |g, ids| g.channel_max(ids[0]))
        }
        OpKind::Maximum => {
            let b = normal(&mut rng, &sp, 1.0);
            let gap = away_from_zero(&mut rng, &[2, 4, 5, 3], 0.05, 1.0);
            // |a - b| >= 0.05 everywhere
            let plane = 60;
            let a_data: Vec<f64> = (0..2 * plane)
                .map(|i| b.data()[i % plane] + gap.data()[i])
                .collect();
            let a = Tensor::new(vec![2, 4, 5, 3], a_data).unwrap();
            let s = Tensor::scalar(10.0);
            check!([a, b, s], [2, 4, 5, 3], |g, ids| {
                let m = g.maximum(ids[0], ids[1])?;
                // the scalar never wins; checks the scalar broadcast path
                let neg = g.scale(ids[2], -1.0)?;
                g.maximum(m, neg)
            })
        }
        OpKind::ClampMin => {
            let x = away_from_zero(&mut rng, &[2, 3, 3, 3], 0.05, 2.0);
            check!([x], [2, 3, 3, 3], |g, ids| g.clamp_min(ids[0], 0.0))
        }
    }
}
