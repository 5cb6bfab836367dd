//! Training losses: MIND similarity, field smoothness, teacher consistency.
//!
//! All losses are built as graph nodes so they differentiate through the
//! autodiff engine. The `*_value` helpers evaluate them standalone in f64.

use serde::{Deserialize, Serialize};

use crate::autodiff::{volume_tensor, Axis, Graph, NodeId, Real, Tensor};
use crate::error::{Error, Result};
use crate::volume::Volume;
use crate::warp::DisplacementField;

/// The 6-neighbourhood used for MIND self-similarity.
pub const MIND_OFFSETS: [(Axis, isize); 6] = [
    (Axis::X, 1),
    (Axis::X, -1),
    (Axis::Y, 1),
    (Axis::Y, -1),
    (Axis::Z, 1),
    (Axis::Z, -1),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MindConfig {
    /// Std of the Gaussian patch weighting, in voxels (3x3x3 support).
    pub sigma_patch: f64,
    /// Floor on the local variance estimate.
    pub variance_eps: f64,
    /// Aggregate descriptor differences by |.| instead of squares.
    pub l1: bool,
}

impl Default for MindConfig {
    fn default() -> Self {
        MindConfig {
            sigma_patch: 0.5,
            variance_eps: 1e-6,
            l1: false,
        }
    }
}

impl MindConfig {
    pub fn validate(&self) -> Result<()> {
        // written so that NaN is rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.variance_eps > 0.0) || !(self.sigma_patch > 0.0) {
            return Err(Error::Validation(format!(
                "MIND needs variance_eps > 0 and sigma_patch > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Normalized 3-tap Gaussian; the 3D patch weight is its outer product.
pub fn gaussian_kernel3<T: Real>(sigma: f64) -> Vec<T> {
    let w: Vec<f64> = [-1.0f64, 0.0, 1.0]
        .iter()
        .map(|k| (-k * k / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| T::lit(v / s)).collect()
}

fn sum_nodes<T: Real>(g: &mut Graph<T>, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n)?;
    }
    Ok(acc)
}

/// 6-channel MIND descriptor of a single-channel image node.
///
/// `D_r` is the Gaussian-weighted SSD between the patch at x and at x+r
/// (image shifts replicate the border, patch weights are zero outside the
/// grid). `V` is the mean of the six distances, floored at
/// `max(eps * mean(V), eps)`. Each voxel's `exp(-D_r / V)` is divided by its
/// channel maximum, computed as `exp(-(D_r - min_r D_r) / V)`.
pub fn mind_node<T: Real>(g: &mut Graph<T>, img: NodeId, cfg: &MindConfig) -> Result<NodeId> {
    cfg.validate()?;
    if g.value(img).shape().first() != Some(&1) || g.value(img).shape().len() != 4 {
        return Err(Error::Shape(format!(
            "MIND needs a single-channel [1,d,h,w] image, got {:?}",
            g.value(img).shape()
        )));
    }
    let kernel = gaussian_kernel3::<T>(cfg.sigma_patch);
    let mut dists = Vec::with_capacity(6);
    for (axis, offset) in MIND_OFFSETS {
        let shifted = g.shift(img, axis, offset)?;
        let diff = g.sub(img, shifted)?;
        let sq = g.square(diff)?;
        dists.push(g.blur(sq, kernel.clone())?);
    }
    let dist = g.concat(&dists)?;
    let total = sum_nodes(g, &dists)?;
    let local_var = g.scale(total, T::lit(1.0 / 6.0))?;
    let mean_var = g.mean(local_var)?;
    let rel_floor = g.scale(mean_var, T::lit(cfg.variance_eps))?;
    let floor = g.clamp_min(rel_floor, T::lit(cfg.variance_eps))?;
    let var = g.maximum(local_var, floor)?;
    let neg = g.scale(dist, -T::one())?;
    let neg_min = g.channel_max(neg)?;
    let min_dist = g.scale(neg_min, -T::one())?;
    let excess = g.sub(dist, min_dist)?;
    let ratio = g.divide_eps(excess, var, T::zero())?;
    let neg_ratio = g.scale(ratio, -T::one())?;
    g.exp(neg_ratio)
}

/// Standalone MIND descriptor, evaluated in f64.
pub fn mind_descriptor(img: &Volume, cfg: &MindConfig) -> Result<Volume> {
    if img.channels() != 1 {
        return Err(Error::Contract(format!(
            "mind_descriptor expects 1 channel, got {}",
            img.channels()
        )));
    }
    let mut g = Graph::<f64>::new();
    let x = g.constant(volume_tensor(img));
    let m = mind_node(&mut g, x, cfg)?;
    crate::autodiff::tensor_volume(g.value(m), *img.grid())
}

/// Mean over voxels and channels of the squared (or absolute) difference
/// between the MIND descriptors of `fixed` and `warped`.
pub fn sim_loss<T: Real>(
    g: &mut Graph<T>,
    fixed: NodeId,
    warped: NodeId,
    cfg: &MindConfig,
) -> Result<NodeId> {
    if g.value(fixed).shape() != g.value(warped).shape() {
        return Err(Error::Shape(format!(
            "sim_loss: fixed {:?} vs warped {:?}",
            g.value(fixed).shape(),
            g.value(warped).shape()
        )));
    }
    let mf = mind_node(g, fixed, cfg)?;
    let mw = mind_node(g, warped, cfg)?;
    let d = g.sub(mf, mw)?;
    let e = if cfg.l1 { g.abs(d)? } else { g.square(d)? };
    g.mean(e)
}

pub fn sim_loss_value(fixed: &Volume, warped: &Volume, cfg: &MindConfig) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let f = g.constant(volume_tensor(fixed));
    let w = g.constant(volume_tensor(warped));
    let l = sim_loss(&mut g, f, w, cfg)?;
    Ok(g.value(l).item())
}

/// Mean of squared forward differences over voxels, the three displacement
/// components and the three axes.
pub fn smoothness_loss<T: Real>(g: &mut Graph<T>, field: NodeId) -> Result<NodeId> {
    if g.value(field).shape().first() != Some(&3) {
        return Err(Error::Shape(format!(
            "smoothness_loss needs a 3-channel field, got {:?}",
            g.value(field).shape()
        )));
    }
    let mut per_axis = Vec::with_capacity(3);
    for axis in Axis::ALL {
        let d = g.shift_diff(field, axis)?;
        let s = g.square(d)?;
        per_axis.push(g.mean(s)?);
    }
    let total = sum_nodes(g, &per_axis)?;
    g.scale(total, T::lit(1.0 / 3.0))
}

pub fn smoothness_loss_value(field: &DisplacementField) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let f = g.constant(volume_tensor(field.volume()));
    let l = smoothness_loss(&mut g, f)?;
    Ok(g.value(l).item())
}

/// Mean squared difference to the teacher's warped image.
///
/// The teacher target enters as a constant, so no gradient reaches it.
pub fn consistency_loss<T: Real>(
    g: &mut Graph<T>,
    student_warped: NodeId,
    teacher_warped: &Tensor<T>,
) -> Result<NodeId> {
    if g.value(student_warped).shape() != teacher_warped.shape() {
        return Err(Error::Shape(format!(
            "consistency_loss: student {:?} vs teacher {:?}",
            g.value(student_warped).shape(),
            teacher_warped.shape()
        )));
    }
    let t = g.constant(teacher_warped.clone());
    let d = g.sub(student_warped, t)?;
    let s = g.square(d)?;
    g.mean(s)
}

/// `L = L_sim + lambda_phi * L_phi + lambda_c * L_c`.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    sim: NodeId,
    smooth: NodeId,
    cons: NodeId,
    lambda_phi: T,
    lambda_c: T,
) -> Result<NodeId> {
    if lambda_phi < T::zero() || lambda_c < T::zero() {
        return Err(Error::Contract(format!(
            "loss weights must be non-negative, got {lambda_phi:?}, {lambda_c:?}"
        )));
    }
    let a = g.scale(smooth, lambda_phi)?;
    let b = g.scale(cons, lambda_c)?;
    let s = g.add(sim, a)?;
    g.add(s, b)
}
