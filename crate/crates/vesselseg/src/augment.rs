//! Stochastic spatial augmentation applied consistently across a sample's
//! volumes: per-axis flips, in-plane rotation, and coarse-grid elastic
//! deformation. One transform is drawn per sample and applied to source,
//! auxiliary, label and liver mask alike; intensities resample trilinearly,
//! labels nearest-neighbor.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::rng_from;
use crate::volume::{sample_nearest, sample_trilinear, Sample, Volume, VolumeKind};

/// Elastic deformation parameters: Gaussian displacements on a coarse
/// control grid, trilinearly interpolated to a dense field.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ElasticConfig {
    pub grid_spacing: usize,
    pub displacement_sigma: f64,
    pub probability: f64,
}

impl Default for ElasticConfig {
    fn default() -> Self {
        ElasticConfig {
            grid_spacing: 32,
            displacement_sigma: 4.0,
            probability: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Flip probability per axis.
    pub p_flip: [f64; 3],
    /// Max rotation about the through-plane (z) axis, degrees.
    pub max_rotation_deg: f64,
    pub elastic: ElasticConfig,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_flip: [0.5, 0.5, 0.5],
            max_rotation_deg: 10.0,
            elastic: ElasticConfig::default(),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No-op configuration; `augment_sample` returns inputs unchanged.
    pub fn disabled() -> Self {
        AugmentConfig {
            p_flip: [0.0; 3],
            max_rotation_deg: 0.0,
            elastic: ElasticConfig {
                probability: 0.0,
                ..ElasticConfig::default()
            },
            seed: 0,
        }
    }

    pub fn validate(&self) -> crate::error::Result<()> {
        for p in self.p_flip.iter().chain([&self.elastic.probability]) {
            if !(0.0..=1.0).contains(p) {
                return Err(crate::error::Error::InvalidArgument(format!(
                    "augmentation probability {p} outside [0, 1]"
                )));
            }
        }
        if self.elastic.displacement_sigma < 0.0 {
            return Err(crate::error::Error::InvalidArgument(
                "elastic displacement sigma must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// The transform drawn for one augmentation call.
struct DrawnTransform {
    flips: [bool; 3],
    rotation_rad: f64,
    /// Dense displacement field in voxels, if elastic deformation fired.
    displacement: Option<[Array3<f32>; 3]>,
}

impl DrawnTransform {
    fn is_identity(&self) -> bool {
        !self.flips.iter().any(|&f| f) && self.rotation_rad == 0.0 && self.displacement.is_none()
    }

    fn needs_warp(&self) -> bool {
        self.rotation_rad != 0.0 || self.displacement.is_some()
    }
}

fn draw_transform(
    cfg: &AugmentConfig,
    shape: [usize; 3],
    step_seed: u64,
) -> DrawnTransform {
    let mut rng = rng_from(cfg.seed, &[0x617567, step_seed]);
    let flips = [
        rng.gen_bool(cfg.p_flip[0]),
        rng.gen_bool(cfg.p_flip[1]),
        rng.gen_bool(cfg.p_flip[2]),
    ];
    let rotation_rad = if cfg.max_rotation_deg > 0.0 {
        rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg).to_radians()
    } else {
        0.0
    };
    let displacement = if cfg.elastic.probability > 0.0
        && cfg.elastic.displacement_sigma > 0.0
        && rng.gen_bool(cfg.elastic.probability)
    {
        Some(elastic_field(&mut rng, shape, &cfg.elastic))
    } else {
        None
    };
    DrawnTransform {
        flips,
        rotation_rad,
        displacement,
    }
}

/// Coarse Gaussian displacement grid, upsampled trilinearly to the volume.
fn elastic_field(
    rng: &mut impl Rng,
    shape: [usize; 3],
    cfg: &ElasticConfig,
) -> [Array3<f32>; 3] {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0f64, cfg.displacement_sigma).unwrap();
    let g = cfg.grid_spacing.max(2);
    let coarse_dims: [usize; 3] = std::array::from_fn(|i| shape[i] / g + 2);
    let coarse: Vec<Array3<f32>> = (0..3)
        .map(|_| {
            Array3::from_shape_fn(
                (coarse_dims[0], coarse_dims[1], coarse_dims[2]),
                |_| normal.sample(rng) as f32,
            )
        })
        .collect();
    let scale = 1.0 / g as f64;
    std::array::from_fn(|axis| {
        Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(i, j, k)| {
            sample_trilinear(
                &coarse[axis],
                i as f64 * scale,
                j as f64 * scale,
                k as f64 * scale,
            )
        })
    })
}

fn flip_volume(v: &Volume, flips: [bool; 3]) -> Volume {
    let mut data = v.data.clone();
    for (axis, &flip) in flips.iter().enumerate() {
        if flip {
            data.invert_axis(ndarray::Axis(axis));
        }
    }
    Volume {
        data: data.as_standard_layout().to_owned(),
        spacing: v.spacing,
        origin: v.origin,
        kind: v.kind,
    }
}

/// Resample through the rotation + displacement warp. Rotation is about the
/// volume center in physical (mm) coordinates so anisotropic voxels rotate
/// rigidly; coordinates outside the volume read as 0.
fn warp_volume(v: &Volume, t: &DrawnTransform) -> Volume {
    let shape = v.shape();
    let (sx, sy) = (v.spacing[0], v.spacing[1]);
    let cx = (shape[0] as f64 - 1.0) / 2.0 * sx;
    let cy = (shape[1] as f64 - 1.0) / 2.0 * sy;
    let (sin, cos) = (-t.rotation_rad).sin_cos();
    let nearest = v.kind == VolumeKind::Label;

    let data = Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(i, j, k)| {
        // Inverse rotation maps output voxel to source position.
        let (mut x, mut y, mut z) = (i as f64, j as f64, k as f64);
        if t.rotation_rad != 0.0 {
            let px = x * sx - cx;
            let py = y * sy - cy;
            x = (cos * px - sin * py + cx) / sx;
            y = (sin * px + cos * py + cy) / sy;
        }
        if let Some(disp) = &t.displacement {
            x += disp[0][[i, j, k]] as f64;
            y += disp[1][[i, j, k]] as f64;
            z += disp[2][[i, j, k]] as f64;
        }
        let inside = x >= -0.5
            && x <= shape[0] as f64 - 0.5
            && y >= -0.5
            && y <= shape[1] as f64 - 0.5
            && z >= -0.5
            && z <= shape[2] as f64 - 0.5;
        if !inside {
            return 0.0;
        }
        if nearest {
            sample_nearest(&v.data, x, y, z)
        } else {
            sample_trilinear(&v.data, x, y, z)
        }
    });
    Volume {
        data,
        spacing: v.spacing,
        origin: v.origin,
        kind: v.kind,
    }
}

fn transform_volume(v: &Volume, t: &DrawnTransform) -> Volume {
    let flipped = if t.flips.iter().any(|&f| f) {
        flip_volume(v, t.flips)
    } else {
        v.clone()
    };
    if t.needs_warp() {
        warp_volume(&flipped, t)
    } else {
        flipped
    }
}

/// Apply one randomly drawn spatial transform to every volume of a sample.
///
/// Deterministic given `(cfg.seed, step_seed)`; an identity draw returns the
/// sample bit-for-bit unchanged.
pub fn augment_sample(sample: &Sample, cfg: &AugmentConfig, step_seed: u64) -> Sample {
    let t = draw_transform(cfg, sample.source.shape(), step_seed);
    if t.is_identity() {
        return sample.clone();
    }
    Sample {
        id: sample.id.clone(),
        source: transform_volume(&sample.source, &t),
        auxiliary: sample.auxiliary.as_ref().map(|v| transform_volume(v, &t)),
        label: sample.label.as_ref().map(|v| transform_volume(v, &t)),
        liver_mask: sample.liver_mask.as_ref().map(|v| transform_volume(v, &t)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{confusion, dice};
    use ndarray::Array3;

    fn test_sample(seed: u64) -> Sample {
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f32 / u32::MAX as f32) * 2.0 - 1.0
        };
        let source = Volume::from_data(
            Array3::from_shape_fn((16, 12, 8), |_| next()),
            VolumeKind::Intensity,
        )
        .unwrap();
        let label = Volume::from_data(
            Array3::from_shape_fn((16, 12, 8), |(i, j, k)| {
                if (4..8).contains(&i) && (3..6).contains(&j) && (2..5).contains(&k) {
                    1.0
                } else {
                    0.0
                }
            }),
            VolumeKind::Label,
        )
        .unwrap();
        Sample {
            id: "t".into(),
            source: source.clone(),
            auxiliary: Some(source),
            label: Some(label),
            liver_mask: None,
        }
    }

    #[test]
    fn identity_config_returns_sample_unchanged() {
        let s = test_sample(1);
        let out = augment_sample(&s, &AugmentConfig::disabled(), 17);
        assert_eq!(s.source.data, out.source.data);
        assert_eq!(
            s.label.as_ref().unwrap().data,
            out.label.as_ref().unwrap().data
        );
    }

    #[test]
    fn forced_flip_is_involutive() {
        let s = test_sample(2);
        let cfg = AugmentConfig {
            p_flip: [1.0, 0.0, 0.0],
            max_rotation_deg: 0.0,
            elastic: ElasticConfig {
                probability: 0.0,
                ..ElasticConfig::default()
            },
            seed: 0,
        };
        let once = augment_sample(&s, &cfg, 0);
        assert_ne!(s.source.data, once.source.data);
        let twice = augment_sample(&once, &cfg, 0);
        assert_eq!(s.source.data, twice.source.data);
    }

    #[test]
    fn deterministic_given_seeds() {
        let s = test_sample(3);
        let cfg = AugmentConfig {
            seed: 99,
            ..AugmentConfig::default()
        };
        let a = augment_sample(&s, &cfg, 5);
        let b = augment_sample(&s, &cfg, 5);
        assert_eq!(a.source.data, b.source.data);
        assert_eq!(a.label.as_ref().unwrap().data, b.label.as_ref().unwrap().data);
        let c = augment_sample(&s, &cfg, 6);
        assert_ne!(a.source.data, c.source.data);
    }

    #[test]
    fn labels_stay_binary_and_shapes_fixed() {
        let s = test_sample(4);
        let cfg = AugmentConfig {
            seed: 7,
            max_rotation_deg: 15.0,
            elastic: ElasticConfig {
                probability: 1.0,
                grid_spacing: 8,
                displacement_sigma: 2.0,
            },
            ..AugmentConfig::default()
        };
        for step in 0..5 {
            let out = augment_sample(&s, &cfg, step);
            let label = out.label.as_ref().unwrap();
            assert_eq!(label.shape(), s.source.shape());
            assert!(label.data.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn dice_invariant_under_pure_flips() {
        let a = test_sample(5).label.unwrap();
        let mut b_data = Array3::zeros((16, 12, 8));
        for i in 5..9 {
            for j in 2..5 {
                for k in 3..6 {
                    b_data[[i, j, k]] = 1.0;
                }
            }
        }
        let b = Volume::from_data(b_data, VolumeKind::Label).unwrap();
        let before = dice(&confusion(&a, &b).unwrap());

        let t = DrawnTransform {
            flips: [true, false, true],
            rotation_rad: 0.0,
            displacement: None,
        };
        let fa = transform_volume(&a, &t);
        let fb = transform_volume(&b, &t);
        let after = dice(&confusion(&fa, &fb).unwrap());
        assert_eq!(before, after);
    }
}
