//! Procedural paired-modality vascular phantoms.
//!
//! Recursive bifurcating trees with decaying radii are rasterized into an
//! ellipsoidal "liver", then rendered twice: a native image where vessels
//! sit barely above the noise floor, and a contrast-enhanced image where
//! they are bright. The pair mimics the clinical situation the training
//! regimes exploit: the auxiliary modality carries the vessel signal.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{raw, nifti};
use crate::manifest::{DatasetManifest, ManifestRecord, Role};
use crate::rng::{derive_seed, rng_from};
use crate::volume::{sample_trilinear, zscore_normalize, Volume, VolumeKind};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub n_trees: usize,
    pub root_radius_mm: f64,
    pub branch_levels: usize,
    /// Child radius = parent radius * decay (with +-10% jitter).
    pub radius_decay: f64,
    /// Additive vessel intensity in the native image (units of base tissue).
    pub vessel_contrast_native: f64,
    /// Additive vessel intensity in the contrast-enhanced image.
    pub vessel_contrast_enhanced: f64,
    pub noise_sigma: f64,
    pub bias_field_amplitude: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            shape: [96, 96, 64],
            spacing_mm: [1.0, 1.0, 1.0],
            n_trees: 2,
            root_radius_mm: 8.5,
            branch_levels: 5,
            radius_decay: 0.72,
            vessel_contrast_native: 0.10,
            vessel_contrast_enhanced: 0.85,
            noise_sigma: 0.08,
            bias_field_amplitude: 0.1,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    /// Paper-scale preset: the full training grid of the clinical setup.
    pub fn paper_scale() -> Self {
        PhantomConfig {
            shape: [256, 192, 128],
            spacing_mm: [0.8, 0.8, 2.0],
            ..PhantomConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&s| s < 8) {
            return Err(Error::Config("phantom shape too small".into()));
        }
        if self.spacing_mm.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("phantom spacing must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.radius_decay) || self.radius_decay == 0.0 {
            return Err(Error::Config("radius_decay must be in (0, 1)".into()));
        }
        if self.root_radius_mm <= 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config("bad radius or noise parameters".into()));
        }
        Ok(())
    }

    fn extent_mm(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.shape[i] as f64 * self.spacing_mm[i])
    }

    fn liver_center(&self) -> [f64; 3] {
        let e = self.extent_mm();
        [e[0] / 2.0, e[1] / 2.0, e[2] / 2.0]
    }

    fn liver_semi_axes(&self) -> [f64; 3] {
        let e = self.extent_mm();
        [0.45 * e[0], 0.45 * e[1], 0.45 * e[2]]
    }
}

/// Straight centerline piece with a constant radius.
#[derive(Debug, Clone)]
pub struct Segment {
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius_mm: f64,
}

fn ellipsoid_coord(p: [f64; 3], center: [f64; 3], semi: [f64; 3]) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        let d = (p[i] - center[i]) / semi[i];
        s += d * d;
    }
    s
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn random_unit(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-4 && n2 <= 1.0 {
            return normalize(v);
        }
    }
}

fn perpendicular(dir: [f64; 3], rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let r = random_unit(rng);
        let dot = r[0] * dir[0] + r[1] * dir[1] + r[2] * dir[2];
        let p = [r[0] - dot * dir[0], r[1] - dot * dir[1], r[2] - dot * dir[2]];
        let n2: f64 = p.iter().map(|x| x * x).sum();
        if n2 > 1e-4 {
            return normalize(p);
        }
    }
}

fn rotate_towards(dir: [f64; 3], axis: [f64; 3], angle_rad: f64) -> [f64; 3] {
    // dir is unit, axis is unit and perpendicular: rotation in their plane.
    let (s, c) = angle_rad.sin_cos();
    normalize([
        c * dir[0] + s * axis[0],
        c * dir[1] + s * axis[1],
        c * dir[2] + s * axis[2],
    ])
}

/// Grow one bifurcating tree; the centerline stays inside the liver
/// ellipsoid.
pub fn generate_tree(cfg: &PhantomConfig, tree_seed: u64) -> Vec<Segment> {
    let mut rng = rng_from(cfg.seed, &[0x74726565, tree_seed]);
    let center = cfg.liver_center();
    let semi = cfg.liver_semi_axes();

    // Root starts inside the mid region, heading roughly through the organ.
    let root = loop {
        let p = [
            center[0] + rng.gen_range(-0.5..0.5) * semi[0],
            center[1] + rng.gen_range(-0.5..0.5) * semi[1],
            center[2] + rng.gen_range(-0.5..0.5) * semi[2],
        ];
        if ellipsoid_coord(p, center, semi) < 0.4 {
            break p;
        }
    };
    let dir = random_unit(&mut rng);

    let mut segments = Vec::new();
    let mut stack = vec![(root, dir, cfg.root_radius_mm, 0usize)];
    while let Some((p, mut dir, radius, level)) = stack.pop() {
        let len = (3.5 * radius).max(7.0);
        // Steer back toward the interior when the endpoint would leave.
        let mut end = [0.0; 3];
        for _ in 0..16 {
            end = [
                p[0] + dir[0] * len,
                p[1] + dir[1] * len,
                p[2] + dir[2] * len,
            ];
            if ellipsoid_coord(end, center, semi) <= 0.85 {
                break;
            }
            let inward = normalize([
                center[0] - p[0],
                center[1] - p[1],
                center[2] - p[2],
            ]);
            dir = normalize([
                0.55 * dir[0] + 0.45 * inward[0],
                0.55 * dir[1] + 0.45 * inward[1],
                0.55 * dir[2] + 0.45 * inward[2],
            ]);
        }
        if ellipsoid_coord(end, center, semi) > 1.0 {
            // Last resort: shrink the segment until it fits.
            let mut t = 1.0;
            while t > 0.1 && ellipsoid_coord(end, center, semi) > 1.0 {
                t *= 0.8;
                end = [
                    p[0] + dir[0] * len * t,
                    p[1] + dir[1] * len * t,
                    p[2] + dir[2] * len * t,
                ];
            }
        }
        segments.push(Segment {
            a: p,
            b: end,
            radius_mm: radius,
        });
        if level >= cfg.branch_levels {
            continue;
        }
        let split_axis = perpendicular(dir, &mut rng);
        let total_angle = rng.gen_range(0.7..1.2); // ~40..70 degrees
        for side in [-0.5, 0.5] {
            let jitter = 1.0 + 0.1 * rng.gen_range(-1.0..1.0);
            let child_radius = radius * cfg.radius_decay * jitter;
            let child_dir = rotate_towards(dir, split_axis, side * total_angle);
            stack.push((end, child_dir, child_radius, level + 1));
        }
    }
    segments
}

fn point_segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let ab2: f64 = ab.iter().map(|x| x * x).sum();
    let t = if ab2 < 1e-12 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / ab2).clamp(0.0, 1.0)
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

/// Voxel center in mm.
fn voxel_center(idx: [usize; 3], spacing: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| (idx[i] as f64 + 0.5) * spacing[i])
}

/// Rasterize centerline trees into binary vessel and liver masks;
/// vessels are clipped to the liver.
pub fn rasterize(trees: &[Vec<Segment>], cfg: &PhantomConfig) -> (Array3<bool>, Array3<bool>) {
    let [nx, ny, nz] = cfg.shape;
    let center = cfg.liver_center();
    let semi = cfg.liver_semi_axes();
    let liver = Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| {
        ellipsoid_coord(voxel_center([x, y, z], cfg.spacing_mm), center, semi) <= 1.0
    });

    let mut vessel = Array3::from_elem((nx, ny, nz), false);
    for tree in trees {
        for seg in tree {
            let r = seg.radius_mm;
            let lo: [usize; 3] = std::array::from_fn(|i| {
                (((seg.a[i].min(seg.b[i]) - r) / cfg.spacing_mm[i] - 1.0).floor().max(0.0))
                    as usize
            });
            let hi: [usize; 3] = std::array::from_fn(|i| {
                ((((seg.a[i].max(seg.b[i]) + r) / cfg.spacing_mm[i]) + 1.0).ceil() as usize)
                    .min(cfg.shape[i])
            });
            for x in lo[0]..hi[0] {
                for y in lo[1]..hi[1] {
                    for z in lo[2]..hi[2] {
                        if vessel[[x, y, z]] {
                            continue;
                        }
                        let p = voxel_center([x, y, z], cfg.spacing_mm);
                        if point_segment_distance(p, seg.a, seg.b) <= r {
                            vessel[[x, y, z]] = true;
                        }
                    }
                }
            }
        }
    }
    for (v, &l) in vessel.iter_mut().zip(liver.iter()) {
        *v = *v && l;
    }
    (vessel, liver)
}

/// Low-order smooth multiplicative field in `[1 - a, 1 + a]`.
fn bias_field(shape: [usize; 3], amplitude: f64, rng: &mut impl Rng) -> Array3<f32> {
    let coarse_dims = [5usize, 5, 5];
    let coarse = Array3::from_shape_fn(
        (coarse_dims[0], coarse_dims[1], coarse_dims[2]),
        |_| (1.0 + amplitude * rng.gen_range(-1.0..1.0)) as f32,
    );
    let scale: [f64; 3] =
        std::array::from_fn(|i| (coarse_dims[i] - 1) as f64 / (shape[i] - 1).max(1) as f64);
    Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(x, y, z)| {
        sample_trilinear(
            &coarse,
            x as f64 * scale[0],
            y as f64 * scale[1],
            z as f64 * scale[2],
        )
    })
}

/// Rendered phantom case.
pub struct PhantomCase {
    pub native: Volume,
    pub contrast: Volume,
    pub label: Volume,
    pub liver: Volume,
}

/// Render the native / contrast-enhanced image pair for a set of masks.
///
/// Both images share the tissue layout and bias field; noise is drawn
/// independently. Outputs are z-score normalized.
pub fn render_pair(
    vessel: &Array3<bool>,
    liver: &Array3<bool>,
    cfg: &PhantomConfig,
    case_seed: u64,
) -> Result<(Volume, Volume)> {
    use rand_distr::{Distribution, Normal};
    let shape = cfg.shape;
    let mut bias_rng = rng_from(cfg.seed, &[0x62696173, case_seed]);
    let bias = bias_field(shape, cfg.bias_field_amplitude, &mut bias_rng);
    let noise = Normal::new(0.0f64, cfg.noise_sigma.max(1e-12)).expect("positive sigma");

    let mut render = |contrast: f64, stream: u64| -> Result<Volume> {
        let mut rng = rng_from(cfg.seed, &[0x6e6f6973, case_seed, stream]);
        let data = Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(x, y, z)| {
            let base = if liver[[x, y, z]] { 1.0 } else { 0.55 };
            let vess = if vessel[[x, y, z]] { contrast } else { 0.0 };
            let n = if cfg.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            (((base + vess) * bias[[x, y, z]] as f64) + n) as f32
        });
        zscore_normalize(&Volume::new(
            data,
            cfg.spacing_mm,
            [0.0; 3],
            VolumeKind::Intensity,
        )?)
    };
    let native = render(cfg.vessel_contrast_native, 0)?;
    let contrast = render(cfg.vessel_contrast_enhanced, 1)?;
    Ok((native, contrast))
}

/// Generate one full case from its index.
pub fn generate_case(cfg: &PhantomConfig, case_index: u64) -> Result<PhantomCase> {
    cfg.validate()?;
    let trees: Vec<Vec<Segment>> = (0..cfg.n_trees)
        .map(|t| generate_tree(cfg, derive_seed(case_index, &[t as u64])))
        .collect();
    let (vessel, liver) = rasterize(&trees, cfg);
    let (native, contrast) = render_pair(&vessel, &liver, cfg, case_index)?;
    let to_label = |m: &Array3<bool>| -> Result<Volume> {
        Volume::new(
            m.mapv(|v| v as u8 as f32),
            cfg.spacing_mm,
            [0.0; 3],
            VolumeKind::Label,
        )
    };
    Ok(PhantomCase {
        native,
        contrast,
        label: to_label(&vessel)?,
        liver: to_label(&liver)?,
    })
}

/// On-disk format for generated datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Raw,
    Nifti,
}

/// Write a full dataset (triplets, unannotated pairs, test cases) plus its
/// manifest. Case seeds derive from the master seed and the case index, so
/// reruns are bit-identical.
pub fn generate_dataset(
    n_triplets: usize,
    n_pairs: usize,
    n_test: usize,
    cfg: &PhantomConfig,
    out_dir: &Path,
    format: OutputFormat,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ext = match format {
        OutputFormat::Raw => "raw",
        OutputFormat::Nifti => "nii.gz",
    };
    let save = |path: &Path, vol: &Volume| -> Result<()> {
        match format {
            OutputFormat::Raw => raw::save(path, vol),
            OutputFormat::Nifti => nifti::save(path, vol),
        }
    };

    let total = n_triplets + n_pairs + n_test;
    let mut records = Vec::with_capacity(total);
    for index in 0..total {
        let role = if index < n_triplets {
            Role::Triplet
        } else if index < n_triplets + n_pairs {
            Role::Pair
        } else {
            Role::Test
        };
        let id = format!("case_{index:03}");
        let case = generate_case(cfg, index as u64)?;

        let source = PathBuf::from(format!("{id}_source.{ext}"));
        let auxiliary = PathBuf::from(format!("{id}_aux.{ext}"));
        save(&out_dir.join(&source), &case.native)?;
        save(&out_dir.join(&auxiliary), &case.contrast)?;

        let (label, liver_mask) = match role {
            Role::Pair => (None, None),
            Role::Triplet | Role::Test => {
                let label = PathBuf::from(format!("{id}_label.{ext}"));
                let liver = PathBuf::from(format!("{id}_liver.{ext}"));
                save(&out_dir.join(&label), &case.label)?;
                save(&out_dir.join(&liver), &case.liver)?;
                (Some(label), Some(liver))
            }
        };
        records.push(ManifestRecord {
            id,
            role,
            source,
            auxiliary: Some(auxiliary),
            label,
            liver_mask,
        });
    }

    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edt::edt;
    use crate::metrics::{confusion, dice};
    use crate::vesselstats::{thickness_partition, ThicknessBins, NO_GROUP};

    fn small_cfg() -> PhantomConfig {
        PhantomConfig {
            shape: [64, 64, 48],
            seed: 7,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn zero_levels_single_segment_and_determinism() {
        let cfg = PhantomConfig {
            branch_levels: 0,
            ..small_cfg()
        };
        let t1 = generate_tree(&cfg, 3);
        assert_eq!(t1.len(), 1);
        let t2 = generate_tree(&cfg, 3);
        assert_eq!(t1.len(), t2.len());
        for (a, b) in t1.iter().zip(t2.iter()) {
            assert_eq!(a.a, b.a);
            assert_eq!(a.b, b.b);
            assert_eq!(a.radius_mm, b.radius_mm);
        }
        let t3 = generate_tree(&cfg, 4);
        assert!(t1[0].a != t3[0].a || t1[0].b != t3[0].b);
    }

    #[test]
    fn terminal_radii_follow_decay() {
        let cfg = PhantomConfig {
            root_radius_mm: 12.0,
            radius_decay: 0.7,
            branch_levels: 5,
            ..small_cfg()
        };
        let tree = generate_tree(&cfg, 0);
        assert_eq!(tree.len(), (1 << 6) - 1);
        let min_r = tree.iter().map(|s| s.radius_mm).fold(f64::INFINITY, f64::min);
        let ideal = 12.0 * 0.7f64.powi(5);
        assert!(
            (min_r - ideal).abs() / ideal < 0.5,
            "terminal radius {min_r} vs ideal {ideal}"
        );
    }

    #[test]
    fn rasterized_vessels_live_inside_liver() {
        let cfg = small_cfg();
        let trees: Vec<_> = (0..2).map(|t| generate_tree(&cfg, t)).collect();
        let (vessel, liver) = rasterize(&trees, &cfg);
        assert!(vessel.iter().any(|&v| v), "phantom has vessels");
        for (v, l) in vessel.iter().zip(liver.iter()) {
            assert!(!v || *l, "vessel voxel outside liver");
        }
    }

    #[test]
    fn single_segment_rasterizes_to_cylinder_with_matching_edt() {
        let cfg = PhantomConfig {
            shape: [48, 48, 48],
            ..PhantomConfig::default()
        };
        let seg = Segment {
            a: [24.0, 24.0, 6.0],
            b: [24.0, 24.0, 42.0],
            radius_mm: 4.0,
        };
        let (vessel, _) = rasterize(&[vec![seg]], &cfg);
        let d = edt(&vessel, cfg.spacing_mm);
        let max_d = d.iter().cloned().fold(0.0f64, f64::max);
        assert!(
            (2.0 * max_d - 8.0).abs() <= 2.0,
            "edt diameter {} vs 8",
            2.0 * max_d
        );
    }

    #[test]
    fn zero_trees_empty_mask() {
        let cfg = small_cfg();
        let (vessel, liver) = rasterize(&[], &cfg);
        assert_eq!(vessel.iter().filter(|&&v| v).count(), 0);
        assert!(liver.iter().any(|&v| v));
    }

    #[test]
    fn invisible_when_native_contrast_zero() {
        let cfg = PhantomConfig {
            vessel_contrast_native: 0.0,
            ..small_cfg()
        };
        let trees: Vec<_> = (0..2).map(|t| generate_tree(&cfg, t)).collect();
        let (vessel, liver) = rasterize(&trees, &cfg);
        let (native, contrast) = render_pair(&vessel, &liver, &cfg, 5).unwrap();

        // Mean intensity inside vessels vs inside the rest of the liver.
        let mean_in = |img: &Volume, mask: &dyn Fn(usize, usize, usize) -> bool| -> f64 {
            let mut sum = 0.0;
            let mut n = 0u64;
            for ((x, y, z), &v) in img.data.indexed_iter() {
                if mask(x, y, z) {
                    sum += v as f64;
                    n += 1;
                }
            }
            sum / n as f64
        };
        let vessel_mask = |x: usize, y: usize, z: usize| vessel[[x, y, z]];
        let tissue_mask =
            |x: usize, y: usize, z: usize| liver[[x, y, z]] && !vessel[[x, y, z]];
        let gap_native = (mean_in(&native, &vessel_mask) - mean_in(&native, &tissue_mask)).abs();
        let gap_contrast =
            (mean_in(&contrast, &vessel_mask) - mean_in(&contrast, &tissue_mask)).abs();
        // z-scored images: express the gap relative to the noise level.
        assert!(
            gap_native < cfg.noise_sigma,
            "native gap {gap_native} vs noise {}",
            cfg.noise_sigma
        );
        assert!(gap_contrast > 5.0 * gap_native.max(1e-6));
    }

    #[test]
    fn contrast_gap_ordering_holds_with_default_settings() {
        let cfg = small_cfg();
        let case = generate_case(&cfg, 0).unwrap();
        let vessel = case.label.data.mapv(|v| v != 0.0);
        let liver = case.liver.data.mapv(|v| v != 0.0);
        let gap = |img: &Volume| -> f64 {
            let mut sv = 0.0;
            let mut nv = 0u64;
            let mut st = 0.0;
            let mut nt = 0u64;
            for ((x, y, z), &val) in img.data.indexed_iter() {
                if vessel[[x, y, z]] {
                    sv += val as f64;
                    nv += 1;
                } else if liver[[x, y, z]] {
                    st += val as f64;
                    nt += 1;
                }
            }
            (sv / nv as f64) - (st / nt as f64)
        };
        assert!(gap(&case.contrast) > gap(&case.native));
        assert!(gap(&case.contrast) > 0.5, "contrast gap {}", gap(&case.contrast));
    }

    #[test]
    fn default_config_populates_all_thickness_bins() {
        let cfg = PhantomConfig {
            seed: 11,
            ..PhantomConfig::default()
        };
        let mut counts = [0u64; 4];
        for case_index in 0..3 {
            let case = generate_case(&cfg, case_index).unwrap();
            let partition = thickness_partition(&case.label, &ThicknessBins::default()).unwrap();
            for &p in partition.iter() {
                if p != NO_GROUP {
                    counts[p as usize] += 1;
                }
            }
        }
        assert!(
            counts.iter().all(|&c| c > 0),
            "bin population {counts:?}"
        );
    }

    #[test]
    fn frangi_on_contrast_image_segments_vessels() {
        let cfg = PhantomConfig {
            shape: [64, 64, 48],
            seed: 3,
            ..PhantomConfig::default()
        };
        let case = generate_case(&cfg, 1).unwrap();
        let params = crate::frangi::FrangiParams::default();
        let (pred, _) = crate::frangi::frangi_otsu_segment(&case.contrast, &params).unwrap();
        let c = confusion(&case.label, &pred).unwrap();
        let d = dice(&c);
        assert!(d >= 0.5, "contrast-image baseline dice {d}");
    }

    #[test]
    fn dataset_generation_and_reruns_are_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig {
            shape: [32, 32, 24],
            branch_levels: 3,
            root_radius_mm: 5.0,
            seed: 9,
            ..PhantomConfig::default()
        };
        let out1 = dir.path().join("d1");
        let m1 = generate_dataset(3, 4, 2, &cfg, &out1, OutputFormat::Raw).unwrap();
        assert_eq!(m1.records.len(), 9);
        assert_eq!(m1.count_role(Role::Triplet), 3);
        assert_eq!(m1.count_role(Role::Pair), 4);
        assert_eq!(m1.count_role(Role::Test), 2);
        let s = m1.load_sample(&m1.records[0]).unwrap();
        assert!(s.is_triplet());
        assert!(s.liver_mask.is_some());

        let out2 = dir.path().join("d2");
        generate_dataset(3, 4, 2, &cfg, &out2, OutputFormat::Raw).unwrap();
        for entry in std::fs::read_dir(&out1).unwrap() {
            let p1 = entry.unwrap().path();
            let p2 = out2.join(p1.file_name().unwrap());
            assert_eq!(
                std::fs::read(&p1).unwrap(),
                std::fs::read(&p2).unwrap(),
                "regenerated file differs: {p1:?}"
            );
        }

        // Test-only manifest.
        let out3 = dir.path().join("d3");
        let m3 = generate_dataset(0, 0, 1, &cfg, &out3, OutputFormat::Raw).unwrap();
        assert_eq!(m3.records.len(), 1);
        assert_eq!(m3.records[0].role, Role::Test);
    }
}
