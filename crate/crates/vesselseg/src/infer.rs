//! Sliding-window whole-volume prediction with overlap averaging.
//!
//! Patches are visited in raster order; per-patch softmax probabilities (and
//! the translated image, when present) accumulate into float32 sum buffers
//! with an integer coverage count, then divide. The final label is the
//! argmax, with exact ties going to background.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::nn::model::Model;
use crate::nn::ops::Feat;
use crate::patch::{extract_patch, patch_grid, PatchSpec};
use crate::volume::{Volume, VolumeKind};

/// Whole-volume prediction output.
pub struct PredictionResult {
    pub segmentation: Volume,
    pub probability: Volume,
    pub translation: Option<Volume>,
}

/// Feature-map view of a volume patch (adds the channel axis).
pub fn volume_to_feat(v: &Volume) -> Feat<f32> {
    let (nx, ny, nz) = v.data.dim();
    v.data
        .clone()
        .into_shape_with_order((1, nx, ny, nz))
        .expect("channel reshape")
}

/// Predict over an explicit list of patch origins. Accumulation follows the
/// given order; with fixed order the result is bit-reproducible, and any
/// order agrees within float rounding.
pub fn predict_with_origins(
    model: &Model<f32>,
    v: &Volume,
    origins: &[[usize; 3]],
    patch_size: [usize; 3],
) -> Result<PredictionResult> {
    if origins.is_empty() {
        return Err(Error::InvalidArgument("no patch origins given".into()));
    }
    let shape = v.shape();
    let dims = (shape[0], shape[1], shape[2]);
    let mut prob_sum = Array3::<f32>::zeros(dims);
    let mut trans_sum = Array3::<f32>::zeros(dims);
    let mut coverage = Array3::<u32>::zeros(dims);
    let mut want_translation = false;

    for &origin in origins {
        let patch = extract_patch(v, origin, patch_size)?;
        let feat = volume_to_feat(&patch);
        let out = model.forward(&feat)?;
        let logits = &out.logits;
        want_translation = out.translation.is_some();
        for i in 0..patch_size[0] {
            for j in 0..patch_size[1] {
                for k in 0..patch_size[2] {
                    let (gx, gy, gz) = (origin[0] + i, origin[1] + j, origin[2] + k);
                    let l0 = logits[[0, i, j, k]];
                    let l1 = logits[[1, i, j, k]];
                    let m = l0.max(l1);
                    let e0 = (l0 - m).exp();
                    let e1 = (l1 - m).exp();
                    prob_sum[[gx, gy, gz]] += e1 / (e0 + e1);
                    coverage[[gx, gy, gz]] += 1;
                    if let Some(t) = &out.translation {
                        trans_sum[[gx, gy, gz]] += t[[0, i, j, k]];
                    }
                }
            }
        }
    }

    debug_assert!(coverage.iter().all(|&c| c >= 1), "grid covers every voxel");
    let probability = Array3::from_shape_fn(dims, |idx| prob_sum[idx] / coverage[idx] as f32);
    let label = probability.mapv(|p| if p > 0.5 { 1.0 } else { 0.0 });

    Ok(PredictionResult {
        segmentation: Volume::new(label, v.spacing, v.origin, VolumeKind::Label)?,
        probability: Volume::new(
            probability.mapv(|p| p.clamp(0.0, 1.0)),
            v.spacing,
            v.origin,
            VolumeKind::Probability,
        )?,
        translation: if want_translation {
            let t = Array3::from_shape_fn(dims, |idx| trans_sum[idx] / coverage[idx] as f32);
            Some(Volume::new(t, v.spacing, v.origin, VolumeKind::Intensity)?)
        } else {
            None
        },
    })
}

/// Sliding-window prediction over the clamped patch grid.
///
/// The input is expected to be z-score normalized; the patch must fit inside
/// the volume and its dims must match the network's pooling pyramid.
pub fn predict_volume(model: &Model<f32>, v: &Volume, spec: &PatchSpec) -> Result<PredictionResult> {
    let origins = patch_grid(v.shape(), spec)?;
    predict_with_origins(model, v, &origins, spec.patch_size)
}
