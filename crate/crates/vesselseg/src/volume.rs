//! Volume data model: a 3D scalar grid with voxel spacing, plus the
//! intensity operations used everywhere else (z-score normalization,
//! shape resampling).

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the scalar values of a volume mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    Intensity,
    Label,
    Probability,
}

/// A 3D scalar grid indexed `[x, y, z]` with physical voxel spacing in mm.
///
/// Volumes are immutable after construction; all operations return new
/// volumes. Labels hold only {0, 1}, probabilities lie in [0, 1].
#[derive(Debug, Clone)]
pub struct Volume {
    pub data: Array3<f32>,
    /// mm per voxel along x, y, z; strictly positive.
    pub spacing: [f64; 3],
    /// Physical position of voxel (0,0,0) in mm.
    pub origin: [f64; 3],
    pub kind: VolumeKind,
}

impl Volume {
    /// Construct a volume, validating the kind-specific value invariants.
    pub fn new(
        data: Array3<f32>,
        spacing: [f64; 3],
        origin: [f64; 3],
        kind: VolumeKind,
    ) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        match kind {
            VolumeKind::Label => {
                if data.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvalidArgument(
                        "label volume contains values outside {0, 1}".into(),
                    ));
                }
            }
            VolumeKind::Probability => {
                if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    return Err(Error::InvalidArgument(
                        "probability volume contains values outside [0, 1]".into(),
                    ));
                }
            }
            VolumeKind::Intensity => {}
        }
        Ok(Volume {
            data,
            spacing,
            origin,
            kind,
        })
    }

    /// Intensity volume with unit spacing at the origin; test/synthesis helper.
    pub fn from_data(data: Array3<f32>, kind: VolumeKind) -> Result<Self> {
        Volume::new(data, [1.0, 1.0, 1.0], [0.0, 0.0, 0.0], kind)
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.0, d.1, d.2]
    }

    pub fn num_voxels(&self) -> usize {
        self.data.len()
    }

    /// Physical extent along each axis in mm (shape * spacing).
    pub fn extent_mm(&self) -> [f64; 3] {
        let s = self.shape();
        [
            s[0] as f64 * self.spacing[0],
            s[1] as f64 * self.spacing[1],
            s[2] as f64 * self.spacing[2],
        ]
    }

    /// True when shape and spacing match within floating tolerance.
    pub fn same_grid(&self, other: &Volume) -> bool {
        self.shape() == other.shape()
            && self
                .spacing
                .iter()
                .zip(&other.spacing)
                .all(|(a, b)| (a - b).abs() <= 1e-6 * a.abs().max(1.0))
    }

    /// Foreground voxel count for label volumes.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }
}

/// One training record: source image, optional auxiliary image, optional
/// label, optional liver mask. A triplet has auxiliary and label present;
/// a pair has auxiliary but no label.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub source: Volume,
    pub auxiliary: Option<Volume>,
    pub label: Option<Volume>,
    pub liver_mask: Option<Volume>,
}

impl Sample {
    /// Validate that all present volumes share one grid.
    pub fn validate(&self) -> Result<()> {
        for (name, vol) in [
            ("auxiliary", &self.auxiliary),
            ("label", &self.label),
            ("liver_mask", &self.liver_mask),
        ] {
            if let Some(v) = vol {
                if !self.source.same_grid(v) {
                    return Err(Error::ShapeMismatch(format!(
                        "sample {}: {} grid {:?}/{:?} differs from source {:?}/{:?}",
                        self.id,
                        name,
                        v.shape(),
                        v.spacing,
                        self.source.shape(),
                        self.source.spacing
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_triplet(&self) -> bool {
        self.auxiliary.is_some() && self.label.is_some()
    }

    pub fn is_pair(&self) -> bool {
        self.auxiliary.is_some() && self.label.is_none()
    }
}

/// Z-score normalize an intensity volume over all voxels.
///
/// Output mean is 0 and standard deviation 1 (population). Degenerate
/// inputs with std below 1e-6 map to all zeros instead of NaN.
pub fn zscore_normalize(v: &Volume) -> Result<Volume> {
    if v.kind != VolumeKind::Intensity {
        return Err(Error::InvalidArgument(
            "z-score normalization expects an intensity volume".into(),
        ));
    }
    let n = v.num_voxels() as f64;
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for &x in v.data.iter() {
        sum += x as f64;
        sum_sq += (x as f64) * (x as f64);
    }
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    let std = var.sqrt();
    let data = if std < 1e-6 {
        Array3::zeros(v.data.dim())
    } else {
        v.data.mapv(|x| ((x as f64 - mean) / std) as f32)
    };
    Volume::new(data, v.spacing, v.origin, VolumeKind::Intensity)
}

/// Resample a volume to a new shape, preserving the physical extent.
///
/// Intensity and probability volumes are interpolated trilinearly; labels
/// use nearest-neighbor so they stay binary. Spacing is rescaled so
/// `shape[i] * spacing[i]` stays constant.
pub fn resample(v: &Volume, target_shape: [usize; 3]) -> Result<Volume> {
    if target_shape.iter().any(|&s| s == 0) {
        return Err(Error::InvalidArgument(
            "resample target shape components must be >= 1".into(),
        ));
    }
    let src_shape = v.shape();
    if src_shape == target_shape {
        return Ok(v.clone());
    }
    let scale: [f64; 3] = std::array::from_fn(|i| src_shape[i] as f64 / target_shape[i] as f64);
    let new_spacing: [f64; 3] = std::array::from_fn(|i| v.spacing[i] * scale[i]);

    let mut out = Array3::<f32>::zeros((target_shape[0], target_shape[1], target_shape[2]));
    let nearest = v.kind == VolumeKind::Label;
    for i in 0..target_shape[0] {
        let x = (i as f64 + 0.5) * scale[0] - 0.5;
        for j in 0..target_shape[1] {
            let y = (j as f64 + 0.5) * scale[1] - 0.5;
            for k in 0..target_shape[2] {
                let z = (k as f64 + 0.5) * scale[2] - 0.5;
                out[[i, j, k]] = if nearest {
                    sample_nearest(&v.data, x, y, z)
                } else {
                    sample_trilinear(&v.data, x, y, z)
                };
            }
        }
    }
    Volume::new(out, new_spacing, v.origin, v.kind)
}

/// Trilinear sample at fractional voxel coordinates, clamped at the border.
pub(crate) fn sample_trilinear(data: &Array3<f32>, x: f64, y: f64, z: f64) -> f32 {
    let (nx, ny, nz) = data.dim();
    let clamp = |v: f64, n: usize| v.max(0.0).min((n - 1) as f64);
    let (x, y, z) = (clamp(x, nx), clamp(y, ny), clamp(z, nz));
    let (x0, y0, z0) = (x.floor() as usize, y.floor() as usize, z.floor() as usize);
    let (x1, y1, z1) = (
        (x0 + 1).min(nx - 1),
        (y0 + 1).min(ny - 1),
        (z0 + 1).min(nz - 1),
    );
    let (fx, fy, fz) = (x - x0 as f64, y - y0 as f64, z - z0 as f64);
    let mut acc = 0.0f64;
    for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
        if wx == 0.0 {
            continue;
        }
        for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
            if wy == 0.0 {
                continue;
            }
            for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                if wz == 0.0 {
                    continue;
                }
                acc += wx * wy * wz * data[[xi, yi, zi]] as f64;
            }
        }
    }
    acc as f32
}

/// Nearest-neighbor sample at fractional voxel coordinates, clamped.
pub(crate) fn sample_nearest(data: &Array3<f32>, x: f64, y: f64, z: f64) -> f32 {
    let (nx, ny, nz) = data.dim();
    let idx = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n - 1);
    data[[idx(x, nx), idx(y, ny), idx(z, nz)]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn vol(data: Array3<f32>) -> Volume {
        Volume::from_data(data, VolumeKind::Intensity).unwrap()
    }

    #[test]
    fn label_invariant_enforced() {
        let bad = Array3::from_elem((2, 2, 2), 0.5);
        assert!(Volume::from_data(bad, VolumeKind::Label).is_err());
        let good = Array3::from_elem((2, 2, 2), 1.0);
        assert!(Volume::from_data(good, VolumeKind::Label).is_ok());
    }

    #[test]
    fn spacing_must_be_positive() {
        let data = Array3::zeros((2, 2, 2));
        assert!(Volume::new(data, [0.0, 1.0, 1.0], [0.0; 3], VolumeKind::Intensity).is_err());
    }

    #[test]
    fn zscore_constant_volume_is_zero() {
        let v = vol(Array3::from_elem((4, 4, 4), 7.0));
        let z = zscore_normalize(&v).unwrap();
        assert!(z.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zscore_two_level_volume() {
        // Equal counts of 0 and 2: mean 1, std 1, so values map to -1/+1.
        let mut data = Array3::zeros((2, 2, 2));
        for (i, v) in data.iter_mut().enumerate() {
            *v = if i % 2 == 0 { 0.0 } else { 2.0 };
        }
        let z = zscore_normalize(&vol(data)).unwrap();
        for (i, &v) in z.data.iter().enumerate() {
            let expect = if i % 2 == 0 { -1.0 } else { 1.0 };
            assert!((v - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn zscore_moments_and_idempotence() {
        let mut state = 123u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) as f32) / (u32::MAX as f32) * 10.0 - 3.0
        };
        let data = Array3::from_shape_fn((8, 7, 6), |_| next());
        let z = zscore_normalize(&vol(data)).unwrap();
        let n = z.num_voxels() as f64;
        let mean: f64 = z.data.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var: f64 = z.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-4, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-4, "std {}", var.sqrt());

        let z2 = zscore_normalize(&z).unwrap();
        for (a, b) in z.data.iter().zip(z2.data.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn resample_identity_is_exact() {
        let data = Array3::from_shape_fn((5, 4, 3), |(i, j, k)| (i * 100 + j * 10 + k) as f32);
        let v = vol(data);
        let r = resample(&v, [5, 4, 3]).unwrap();
        assert_eq!(v.data, r.data);
    }

    #[test]
    fn resample_constant_downsample_is_constant() {
        let v = vol(Array3::from_elem((8, 8, 8), 3.5));
        let r = resample(&v, [4, 4, 4]).unwrap();
        assert!(r.data.iter().all(|&x| (x - 3.5).abs() < 1e-6));
    }

    #[test]
    fn resample_preserves_physical_extent() {
        let data = Array3::zeros((10, 6, 4));
        let v = Volume::new(data, [0.8, 0.8, 2.0], [0.0; 3], VolumeKind::Intensity).unwrap();
        let r = resample(&v, [5, 3, 8]).unwrap();
        for i in 0..3 {
            let before = v.extent_mm()[i];
            let after = r.extent_mm()[i];
            assert!(
                (before - after).abs() <= r.spacing[i],
                "axis {i}: {before} vs {after}"
            );
        }
    }

    #[test]
    fn resample_label_stays_binary() {
        let mut data = Array3::zeros((6, 6, 6));
        data[[2, 2, 2]] = 1.0;
        data[[3, 3, 3]] = 1.0;
        let v = Volume::from_data(data, VolumeKind::Label).unwrap();
        let r = resample(&v, [9, 9, 9]).unwrap();
        assert!(r.data.iter().all(|&x| x == 0.0 || x == 1.0));
        assert_eq!(r.kind, VolumeKind::Label);
    }

    #[test]
    fn sample_mismatched_grid_rejected() {
        let s = Sample {
            id: "a".into(),
            source: vol(Array3::zeros((4, 4, 4))),
            auxiliary: Some(vol(Array3::zeros((4, 4, 2)))),
            label: None,
            liver_mask: None,
        };
        assert!(s.validate().is_err());
    }
}
