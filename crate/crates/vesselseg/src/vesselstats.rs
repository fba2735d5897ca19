//! Vessel-thickness-stratified evaluation.
//!
//! Ground-truth vessels are partitioned into diameter groups: every voxel
//! takes the inscribed-sphere diameter (2 x distance map) at its nearest
//! skeleton voxel. True positives and false negatives inherit their ground
//! truth voxel's group; false positives are assigned to the group of the
//! nearest ground-truth skeleton voxel. Group-wise confusion counts sum
//! exactly to the global counts.

use ndarray::Array3;
use serde::Serialize;

use crate::edt::{edt, feature_transform};
use crate::error::{Error, Result};
use crate::metrics::{dice, mean_surface_distance, precision, recall, ConfusionCounts};
use crate::skeleton::skeletonize;
use crate::volume::{Volume, VolumeKind};

/// Diameter bin edges in mm; bins are left-closed, right-open, with the
/// last bin extending to infinity.
#[derive(Debug, Clone, Serialize)]
pub struct ThicknessBins {
    pub edges_mm: Vec<f64>,
}

impl Default for ThicknessBins {
    fn default() -> Self {
        ThicknessBins {
            edges_mm: vec![0.0, 5.0, 10.0, 15.0],
        }
    }
}

impl ThicknessBins {
    pub fn new(edges_mm: Vec<f64>) -> Result<Self> {
        if edges_mm.is_empty() || edges_mm[0] != 0.0 {
            return Err(Error::InvalidArgument(
                "thickness bin edges must start at 0".into(),
            ));
        }
        if edges_mm.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "thickness bin edges must be strictly increasing".into(),
            ));
        }
        Ok(ThicknessBins { edges_mm })
    }

    pub fn count(&self) -> usize {
        self.edges_mm.len()
    }

    pub fn bin_of(&self, diameter_mm: f64) -> usize {
        let mut bin = 0;
        for (i, &edge) in self.edges_mm.iter().enumerate() {
            if diameter_mm >= edge {
                bin = i;
            }
        }
        bin
    }

    pub fn label(&self, bin: usize) -> String {
        if bin + 1 < self.edges_mm.len() {
            format!("{}-{}mm", self.edges_mm[bin], self.edges_mm[bin + 1])
        } else {
            format!(">{}mm", self.edges_mm[bin])
        }
    }
}

/// Marker for voxels outside the ground-truth vessel mask in a partition.
pub const NO_GROUP: u8 = u8::MAX;

fn mask_of(v: &Volume) -> Array3<bool> {
    v.data.mapv(|x| x != 0.0)
}

/// Group id at every voxel of the grid: the bin of the diameter at the
/// nearest ground-truth skeleton voxel. This drives both the ground-truth
/// partition and false-positive assignment.
fn nearest_skeleton_bins(gt: &Volume, bins: &ThicknessBins) -> Result<Option<Array3<u8>>> {
    let gt_mask = mask_of(gt);
    if !gt_mask.iter().any(|&v| v) {
        return Ok(None);
    }
    let skel = skeletonize(&gt_mask, gt.spacing);
    let has_skeleton = skel.skeleton.iter().any(|&v| v);
    let (nx, ny, nz) = gt_mask.dim();
    if !has_skeleton {
        // Unreachable for non-empty masks (thinning never deletes the last
        // voxel of a component), but degrade gracefully: everything goes to
        // the bin of the largest distance-map diameter.
        log::warn!("non-empty mask produced an empty skeleton; using max-EDT fallback");
        let dist = edt(&gt_mask, gt.spacing);
        let max_d = dist.iter().cloned().fold(0.0f64, f64::max) * 2.0;
        let bin = bins.bin_of(max_d) as u8;
        return Ok(Some(Array3::from_elem((nx, ny, nz), bin)));
    }

    let ft = feature_transform(&skel.skeleton, gt.spacing);
    let mut out = Array3::<u8>::zeros((nx, ny, nz));
    for ((x, y, z), slot) in out.indexed_iter_mut() {
        let id = ft.nearest[[x, y, z]] as usize;
        let sx = id / (ny * nz);
        let sy = (id / nz) % ny;
        let sz = id % nz;
        let diameter = skel.diameters_mm[[sx, sy, sz]];
        *slot = bins.bin_of(diameter) as u8;
    }
    Ok(Some(out))
}

/// Partition ground-truth vessel voxels into thickness groups.
///
/// Returns a group-id volume: bin index on vessel voxels, [`NO_GROUP`]
/// elsewhere. The partition is complete and disjoint over the vessel mask.
pub fn thickness_partition(gt: &Volume, bins: &ThicknessBins) -> Result<Array3<u8>> {
    if gt.kind != VolumeKind::Label {
        return Err(Error::InvalidArgument(
            "thickness partition expects a label volume".into(),
        ));
    }
    let gt_mask = mask_of(gt);
    let (nx, ny, nz) = gt_mask.dim();
    let Some(all_bins) = nearest_skeleton_bins(gt, bins)? else {
        return Ok(Array3::from_elem((nx, ny, nz), NO_GROUP));
    };
    Ok(Array3::from_shape_fn((nx, ny, nz), |idx| {
        if gt_mask[idx] {
            all_bins[idx]
        } else {
            NO_GROUP
        }
    }))
}

/// Metrics of one thickness group.
#[derive(Debug, Clone, Serialize)]
pub struct GroupMetrics {
    pub group: usize,
    pub label: String,
    pub confusion: ConfusionCounts,
    pub dice: f64,
    pub msd_mm: f64,
    pub recall: f64,
    pub precision: f64,
    /// Share of the total ground-truth vessel volume in this group.
    pub voxel_share: f64,
}

/// Thickness-stratified confusion counts and metrics.
///
/// Group true-negative counts are not meaningful and are reported as 0;
/// tp/fp/fn sum to the global counts across groups.
pub fn stratified_metrics(
    gt: &Volume,
    pred: &Volume,
    bins: &ThicknessBins,
) -> Result<Vec<GroupMetrics>> {
    if gt.shape() != pred.shape() {
        return Err(Error::ShapeMismatch(format!(
            "gt shape {:?} vs prediction shape {:?}",
            gt.shape(),
            pred.shape()
        )));
    }
    let n_groups = bins.count();
    let gt_mask = mask_of(gt);
    let pred_mask = mask_of(pred);
    let assignment = nearest_skeleton_bins(gt, bins)?;

    let mut tp = vec![0u64; n_groups];
    let mut fp = vec![0u64; n_groups];
    let mut fn_ = vec![0u64; n_groups];
    let mut gt_count = vec![0u64; n_groups];
    let (nx, ny, nz) = gt_mask.dim();
    let mut gt_groups = vec![Array3::<f32>::zeros((nx, ny, nz)); n_groups];
    let mut pred_groups = vec![Array3::<f32>::zeros((nx, ny, nz)); n_groups];

    for ((x, y, z), &g) in gt_mask.indexed_iter() {
        let p = pred_mask[[x, y, z]];
        if !g && !p {
            continue;
        }
        let bin = match &assignment {
            Some(bins_map) => bins_map[[x, y, z]] as usize,
            // Empty ground truth: every predicted voxel is a false positive
            // with no skeleton to refer to; put them in the first group.
            None => 0,
        };
        match (g, p) {
            (true, true) => {
                tp[bin] += 1;
                gt_count[bin] += 1;
                gt_groups[bin][[x, y, z]] = 1.0;
                pred_groups[bin][[x, y, z]] = 1.0;
            }
            (true, false) => {
                fn_[bin] += 1;
                gt_count[bin] += 1;
                gt_groups[bin][[x, y, z]] = 1.0;
            }
            (false, true) => {
                fp[bin] += 1;
                pred_groups[bin][[x, y, z]] = 1.0;
            }
            (false, false) => unreachable!(),
        }
    }

    let total_gt: u64 = gt_count.iter().sum();
    let mut out = Vec::with_capacity(n_groups);
    for bin in 0..n_groups {
        let confusion = ConfusionCounts {
            tp: tp[bin],
            fp: fp[bin],
            fn_: fn_[bin],
            tn: 0,
        };
        let gt_vol = Volume::new(
            gt_groups[bin].clone(),
            gt.spacing,
            gt.origin,
            VolumeKind::Label,
        )?;
        let pred_vol = Volume::new(
            pred_groups[bin].clone(),
            gt.spacing,
            gt.origin,
            VolumeKind::Label,
        )?;
        out.push(GroupMetrics {
            group: bin,
            label: bins.label(bin),
            confusion,
            dice: dice(&confusion),
            msd_mm: mean_surface_distance(&gt_vol, &pred_vol)?,
            recall: recall(&confusion),
            precision: precision(&confusion),
            voxel_share: if total_gt > 0 {
                gt_count[bin] as f64 / total_gt as f64
            } else {
                0.0
            },
        });
    }
    Ok(out)
}
