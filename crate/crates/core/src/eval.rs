//! Registration quality metrics: Dice, average surface distance and
//! Jacobian statistics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::LabelVolume;
use crate::warp::{jacobian_det, jacobian_stats, warp_nearest, DisplacementField};

fn check_pair(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "mask dims differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `2|A ∩ B| / (|A| + |B|)`; 1 when both masks are empty.
pub fn dice(a: &LabelVolume, b: &LabelVolume, label: u8) -> Result<f64> {
    check_pair(a, b)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Voxels of `label` with a 6-neighbour outside the label or on the grid border.
pub fn surface(mask: &LabelVolume, label: u8) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = mask.dims();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.get(x, y, z) != label {
                    continue;
                }
                let border =
                    x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
                let exposed = border
                    || mask.get(x - 1, y, z) != label
                    || mask.get(x + 1, y, z) != label
                    || mask.get(x, y - 1, z) != label
                    || mask.get(x, y + 1, z) != label
                    || mask.get(x, y, z - 1) != label
                    || mask.get(x, y, z + 1) != label;
                if exposed {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn sum_of_min_distances(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    let mins: Vec<f64> = from
        .par_iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    (0..3)
                        .map(|a| {
                            let d = (p[a] as f64 - q[a] as f64) * spacing[a];
                            d * d
                        })
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    mins.iter().sum()
}

/// Symmetric average surface distance in millimetres.
pub fn asd(a: &LabelVolume, b: &LabelVolume, label: u8) -> Result<f64> {
    check_pair(a, b)?;
    if a.spacing() != b.spacing() {
        return Err(Error::Shape(format!(
            "mask spacings differ: {:?} vs {:?}",
            a.spacing(),
            b.spacing()
        )));
    }
    let sa = surface(a, label);
    let sb = surface(b, label);
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::Metric(format!(
            "label {label} is absent from a mask"
        )));
    }
    let spacing = a.spacing().map(|s| s as f64);
    let total = sum_of_min_distances(&sa, &sb, spacing) + sum_of_min_distances(&sb, &sa, spacing);
    Ok(total / (sa.len() + sb.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: Vec<u8>,
    pub dice: BTreeMap<u8, f64>,
    pub asd_mm: BTreeMap<u8, f64>,
    pub folding_pct: f64,
    pub jac_std: f64,
}

impl EvalReport {
    pub fn mean_dice(&self) -> f64 {
        self.dice.values().sum::<f64>() / self.dice.len().max(1) as f64
    }

    pub fn mean_asd(&self) -> f64 {
        self.asd_mm.values().sum::<f64>() / self.asd_mm.len().max(1) as f64
    }
}

/// Warps `moving_seg` by `field` (nearest neighbour) and scores it against
/// `fixed_seg`; also reports folding of `field`.
pub fn evaluate_registration(
    field: &DisplacementField,
    moving_seg: &LabelVolume,
    fixed_seg: &LabelVolume,
    labels: &[u8],
) -> Result<EvalReport> {
    check_pair(moving_seg, fixed_seg)?;
    let warped = warp_nearest(moving_seg, field)?;
    let mut dice_map = BTreeMap::new();
    let mut asd_map = BTreeMap::new();
    for &l in labels {
        dice_map.insert(l, dice(&warped, fixed_seg, l)?);
        asd_map.insert(l, asd(&warped, fixed_seg, l)?);
    }
    let stats = jacobian_stats(&jacobian_det(field)?)?;
    Ok(EvalReport {
        labels: labels.to_vec(),
        dice: dice_map,
        asd_mm: asd_map,
        folding_pct: 100.0 * stats.folding_fraction,
        jac_std: stats.jac_std,
    })
}
