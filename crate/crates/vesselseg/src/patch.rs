//! Patch grids and patch extraction for sliding-window processing.

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Patch shape and stride in voxels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PatchSpec {
    pub patch_size: [usize; 3],
    pub stride: [usize; 3],
}

impl PatchSpec {
    pub fn new(patch_size: [usize; 3], stride: [usize; 3]) -> Result<Self> {
        for i in 0..3 {
            if stride[i] == 0 || stride[i] > patch_size[i] {
                return Err(Error::InvalidArgument(format!(
                    "stride[{i}] = {} must satisfy 1 <= stride <= patch_size ({})",
                    stride[i], patch_size[i]
                )));
            }
        }
        Ok(PatchSpec { patch_size, stride })
    }

    /// Non-overlapping grid (stride equals patch size).
    pub fn exact(patch_size: [usize; 3]) -> Self {
        PatchSpec {
            patch_size,
            stride: patch_size,
        }
    }
}

fn axis_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut origins = Vec::new();
    let mut o = 0;
    while o + patch <= len {
        origins.push(o);
        o += stride;
    }
    // Clamp a final patch to end exactly at the boundary; no padding.
    let last = len - patch;
    if *origins.last().unwrap() != last {
        origins.push(last);
    }
    origins
}

/// Ordered patch origins covering the volume.
///
/// Origins step by the stride; the final origin per axis is clamped so the
/// last patch ends exactly at the volume boundary, so every voxel is inside
/// at least one patch and no patch needs padding.
pub fn patch_grid(volume_shape: [usize; 3], spec: &PatchSpec) -> Result<Vec<[usize; 3]>> {
    for i in 0..3 {
        if spec.patch_size[i] > volume_shape[i] {
            return Err(Error::InvalidArgument(format!(
                "patch size {:?} exceeds volume shape {:?} on axis {i}",
                spec.patch_size, volume_shape
            )));
        }
    }
    let per_axis: Vec<Vec<usize>> = (0..3)
        .map(|i| axis_origins(volume_shape[i], spec.patch_size[i], spec.stride[i]))
        .collect();
    let mut grid = Vec::with_capacity(per_axis[0].len() * per_axis[1].len() * per_axis[2].len());
    for &x in &per_axis[0] {
        for &y in &per_axis[1] {
            for &z in &per_axis[2] {
                grid.push([x, y, z]);
            }
        }
    }
    Ok(grid)
}

/// Copy one patch out of a volume; spacing inherited, origin shifted.
pub fn extract_patch(v: &Volume, origin: [usize; 3], size: [usize; 3]) -> Result<Volume> {
    let shape = v.shape();
    for i in 0..3 {
        if origin[i] + size[i] > shape[i] {
            return Err(Error::InvalidArgument(format!(
                "patch origin {origin:?} + size {size:?} exceeds volume shape {shape:?}"
            )));
        }
    }
    let data = v
        .data
        .slice(s![
            origin[0]..origin[0] + size[0],
            origin[1]..origin[1] + size[1],
            origin[2]..origin[2] + size[2]
        ])
        .to_owned();
    let new_origin: [f64; 3] =
        std::array::from_fn(|i| v.origin[i] + origin[i] as f64 * v.spacing[i]);
    Volume::new(data, v.spacing, new_origin, v.kind)
}
