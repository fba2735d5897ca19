//! Global segmentation metrics: overlap scores, symmetric mean surface
//! distance, liver-to-vessel volume ratio, and Bland-Altman agreement
//! statistics.

use ndarray::Array3;
use serde::Serialize;

use crate::edt::feature_transform;
use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeKind};

/// Voxelwise confusion counts between two binary masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn zero() -> Self {
        ConfusionCounts {
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 0,
        }
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

fn check_same_shape(gt: &Volume, pred: &Volume) -> Result<()> {
    if gt.shape() != pred.shape() {
        return Err(Error::ShapeMismatch(format!(
            "gt shape {:?} vs prediction shape {:?}",
            gt.shape(),
            pred.shape()
        )));
    }
    Ok(())
}

/// Count voxelwise agreement between binary ground truth and prediction.
pub fn confusion(gt: &Volume, pred: &Volume) -> Result<ConfusionCounts> {
    check_same_shape(gt, pred)?;
    let mut c = ConfusionCounts::zero();
    for (&g, &p) in gt.data.iter().zip(pred.data.iter()) {
        match (g != 0.0, p != 0.0) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Dice overlap; both-empty convention yields 1.
pub fn dice(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * c.tp as f64 / denom as f64
    }
}

/// Jaccard index; both-empty convention yields 1.
pub fn jaccard(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    }
}

/// Recall (sensitivity); empty ground truth yields 1.
pub fn recall(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    }
}

/// Precision; empty prediction yields 1 when gt is empty too, else 0.
pub fn precision(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp;
    if denom == 0 {
        if c.fn_ == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        c.tp as f64 / denom as f64
    }
}

/// Boolean mask of surface voxels: mask voxels with at least one
/// face-adjacent background neighbor (the array border counts as background).
pub fn surface_voxels(mask: &Array3<bool>) -> Array3<bool> {
    let (nx, ny, nz) = mask.dim();
    Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| {
        if !mask[[x, y, z]] {
            return false;
        }
        let neighbors = [
            (x.wrapping_sub(1), y, z),
            (x + 1, y, z),
            (x, y.wrapping_sub(1), z),
            (x, y + 1, z),
            (x, y, z.wrapping_sub(1)),
            (x, y, z + 1),
        ];
        neighbors.iter().any(|&(a, b, c)| {
            if a >= nx || b >= ny || c >= nz {
                true
            } else {
                !mask[[a, b, c]]
            }
        })
    })
}

fn label_mask(v: &Volume) -> Array3<bool> {
    v.data.mapv(|x| x != 0.0)
}

/// Symmetric mean surface distance in mm.
///
/// Average of the two directed means (gt surface to nearest pred surface
/// voxel and vice versa), Euclidean under the volume spacing. If exactly one
/// mask is empty the result is +infinity; if both are empty it is 0.
pub fn mean_surface_distance(gt: &Volume, pred: &Volume) -> Result<f64> {
    check_same_shape(gt, pred)?;
    let gt_mask = label_mask(gt);
    let pred_mask = label_mask(pred);
    let gt_empty = !gt_mask.iter().any(|&v| v);
    let pred_empty = !pred_mask.iter().any(|&v| v);
    match (gt_empty, pred_empty) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(f64::INFINITY),
        _ => {}
    }
    let spacing = gt.spacing;
    let gt_surface = surface_voxels(&gt_mask);
    let pred_surface = surface_voxels(&pred_mask);

    let directed_mean = |from: &Array3<bool>, to: &Array3<bool>| -> f64 {
        let ft = feature_transform(to, spacing);
        let mut sum = 0.0f64;
        let mut count = 0u64;
        for (idx, &f) in from.indexed_iter() {
            if f {
                sum += ft.dist_sq_mm[[idx.0, idx.1, idx.2]].sqrt();
                count += 1;
            }
        }
        sum / count as f64
    };
    Ok(0.5 * (directed_mean(&gt_surface, &pred_surface) + directed_mean(&pred_surface, &gt_surface)))
}

/// Liver-to-vessel volume ratio (liver voxel count over vessel voxel count;
/// physical voxel volumes cancel on a shared grid).
pub fn vvr(liver_mask: &Volume, vessel_mask: &Volume) -> Result<f64> {
    check_same_shape(liver_mask, vessel_mask)?;
    let vessels = vessel_mask.count_nonzero();
    if vessels == 0 {
        return Err(Error::InvalidArgument(
            "VVR undefined: vessel mask is empty".into(),
        ));
    }
    Ok(liver_mask.count_nonzero() as f64 / vessels as f64)
}

/// |VVR(gt) - VVR(pred)| on a shared liver mask.
pub fn abs_vvr_diff(
    liver_mask: &Volume,
    gt_vessels: &Volume,
    pred_vessels: &Volume,
) -> Result<f64> {
    let a = vvr(liver_mask, gt_vessels)?;
    let b = vvr(liver_mask, pred_vessels)?;
    Ok((a - b).abs())
}

/// Bland-Altman agreement statistics over paired measurements.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BlandAltman {
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

/// Differences are prediction minus ground truth; limits of agreement are
/// mean ± 1.96 sample standard deviations (n-1).
pub fn bland_altman(pairs: &[(f64, f64)]) -> Result<BlandAltman> {
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument(
            "Bland-Altman analysis needs at least 2 pairs".into(),
        ));
    }
    let n = pairs.len() as f64;
    let diffs: Vec<f64> = pairs.iter().map(|&(gt, pred)| pred - gt).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    Ok(BlandAltman {
        mean_diff: mean,
        sd_diff: sd,
        loa_low: mean - 1.96 * sd,
        loa_high: mean + 1.96 * sd,
    })
}

/// Per-case metric row.
#[derive(Debug, Clone, Serialize)]
pub struct CaseMetrics {
    pub dice: f64,
    pub jaccard: f64,
    /// +infinity when exactly one mask is empty.
    pub msd_mm: f64,
    pub recall: f64,
    pub precision: f64,
    pub vvr_gt: Option<f64>,
    pub vvr_pred: Option<f64>,
    pub abs_vvr_diff: Option<f64>,
}

/// Compute the full per-case metric set. VVR fields need a liver mask and
/// non-empty vessel masks; they are None otherwise.
pub fn case_metrics(
    gt: &Volume,
    pred: &Volume,
    liver_mask: Option<&Volume>,
) -> Result<CaseMetrics> {
    if gt.kind != VolumeKind::Label || pred.kind != VolumeKind::Label {
        return Err(Error::InvalidArgument(
            "case metrics expect label volumes".into(),
        ));
    }
    let c = confusion(gt, pred)?;
    let msd = mean_surface_distance(gt, pred)?;
    let (vvr_gt, vvr_pred, diff) = match liver_mask {
        Some(liver) => {
            let g = vvr(liver, gt).ok();
            let p = vvr(liver, pred).ok();
            let d = match (g, p) {
                (Some(a), Some(b)) => Some((a - b).abs()),
                _ => None,
            };
            (g, p, d)
        }
        None => (None, None, None),
    };
    Ok(CaseMetrics {
        dice: dice(&c),
        jaccard: jaccard(&c),
        msd_mm: msd,
        recall: recall(&c),
        precision: precision(&c),
        vvr_gt,
        vvr_pred,
        abs_vvr_diff: diff,
    })
}
