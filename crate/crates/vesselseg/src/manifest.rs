//! Dataset manifests: the JSON index of training/test cases, sample
//! loading, and the medical-decathlon ingestion adapter.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, raw};
use crate::volume::{Sample, Volume, VolumeKind};

/// Role of a record in the training scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Source + auxiliary + label.
    Triplet,
    /// Source + auxiliary, no annotation.
    Pair,
    /// Held-out evaluation case.
    Test,
}

/// One case: id, role and per-volume file paths (relative to the root).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub role: Role,
    pub source: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auxiliary: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub liver_mask: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    records: Vec<ManifestRecord>,
}

/// A validated dataset index rooted at a directory.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn records_with_role(&self, role: Role) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.role == role)
    }

    pub fn count_role(&self, role: Role) -> usize {
        self.records_with_role(role).count()
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.root.join(rel)
        }
    }

    /// Load all volumes of one record into a `Sample`.
    ///
    /// Triplet records must provide auxiliary and label; pair records must
    /// provide auxiliary. Grid consistency is validated.
    pub fn load_sample(&self, record: &ManifestRecord) -> Result<Sample> {
        let source = io::load_volume_auto(&self.resolve(&record.source), VolumeKind::Intensity)?;
        let auxiliary = record
            .auxiliary
            .as_ref()
            .map(|p| io::load_volume_auto(&self.resolve(p), VolumeKind::Intensity))
            .transpose()?;
        let label = record
            .label
            .as_ref()
            .map(|p| io::load_volume_auto(&self.resolve(p), VolumeKind::Label))
            .transpose()?;
        let liver_mask = record
            .liver_mask
            .as_ref()
            .map(|p| io::load_volume_auto(&self.resolve(p), VolumeKind::Label))
            .transpose()?;

        match record.role {
            Role::Triplet if auxiliary.is_none() || label.is_none() => {
                return Err(Error::Manifest(format!(
                    "triplet record '{}' must list auxiliary and label volumes",
                    record.id
                )));
            }
            Role::Pair if auxiliary.is_none() => {
                return Err(Error::Manifest(format!(
                    "pair record '{}' must list an auxiliary volume",
                    record.id
                )));
            }
            _ => {}
        }

        let sample = Sample {
            id: record.id.clone(),
            source,
            auxiliary,
            label,
            liver_mask,
        };
        sample.validate()?;
        Ok(sample)
    }

    /// Write the manifest JSON to `path` with records in order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let body = ManifestFile {
            records: self.records.clone(),
        };
        serde_json::to_writer_pretty(BufWriter::new(file), &body)?;
        Ok(())
    }
}

/// Load and validate a manifest file. Paths are resolved relative to the
/// manifest's directory; every referenced file must exist.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parsed: ManifestFile = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let root = path
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));
    let manifest = DatasetManifest {
        root,
        records: parsed.records,
    };

    let mut seen = BTreeSet::new();
    for rec in &manifest.records {
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Manifest(format!("duplicate record id '{}'", rec.id)));
        }
        for vol_path in [Some(&rec.source), rec.auxiliary.as_ref(), rec.label.as_ref(), rec.liver_mask.as_ref()]
            .into_iter()
            .flatten()
        {
            let full = manifest.resolve(vol_path);
            if !full.exists() {
                return Err(Error::Manifest(format!(
                    "record '{}': missing file {}",
                    rec.id,
                    full.display()
                )));
            }
        }
    }
    if manifest.records.is_empty() {
        log::warn!("manifest {} contains no records", path.display());
    }
    Ok(manifest)
}

/// Ingest a medical-decathlon style directory (`imagesTr/`, `labelsTr/`,
/// 4D multichannel images) into pair/triplet records.
///
/// `source_channel` becomes the source volume, `aux_channel` the auxiliary
/// volume, and voxels whose integer label is in `label_ids` form the binary
/// label. Extracted 3D volumes are written under `out_dir` in raw format and
/// a manifest is returned rooted there. Cases without a label file become
/// pairs; cases with one become triplets.
pub fn ingest_decathlon(
    dir: &Path,
    source_channel: usize,
    aux_channel: usize,
    label_ids: &[u32],
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let images = dir.join("imagesTr");
    let labels = dir.join("labelsTr");
    if !images.is_dir() {
        return Err(Error::Manifest(format!(
            "{}: no imagesTr directory",
            dir.display()
        )));
    }
    if label_ids.is_empty() {
        return Err(Error::InvalidArgument(
            "ingest_decathlon needs at least one label id".into(),
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut case_files: Vec<PathBuf> = std::fs::read_dir(&images)
        .map_err(|e| Error::io(&images, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            !name.starts_with('.') && (name.ends_with(".nii") || name.ends_with(".nii.gz"))
        })
        .collect();
    case_files.sort();

    let mut records = Vec::new();
    for image_path in &case_files {
        let name = image_path.file_name().and_then(|n| n.to_str()).unwrap();
        let id = name.trim_end_matches(".nii.gz").trim_end_matches(".nii");
        let nd = io::nifti::load_all_channels(image_path)?;
        let n_channels = nd.channels.len();
        let pick = |c: usize| -> Result<&ndarray::Array3<f32>> {
            nd.channels.get(c).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "case {id}: channel {c} out of range ({n_channels} channels)"
                ))
            })
        };
        let source = Volume::new(
            pick(source_channel)?.clone(),
            nd.spacing,
            nd.origin,
            VolumeKind::Intensity,
        )?;
        let auxiliary = Volume::new(
            pick(aux_channel)?.clone(),
            nd.spacing,
            nd.origin,
            VolumeKind::Intensity,
        )?;

        let source_rel = PathBuf::from(format!("{id}_source.raw"));
        let aux_rel = PathBuf::from(format!("{id}_aux.raw"));
        raw::save(&out_dir.join(&source_rel), &source)?;
        raw::save(&out_dir.join(&aux_rel), &auxiliary)?;

        let label_path = ["nii.gz", "nii"]
            .iter()
            .map(|ext| labels.join(format!("{id}.{ext}")))
            .find(|p| p.exists());

        let (role, label_rel) = if let Some(label_path) = label_path {
            let raw_label = io::nifti::load(&label_path)?;
            let max_id = raw_label.data.iter().fold(0f32, |m, &v| m.max(v)) as u32;
            for &want in label_ids {
                if want > max_id {
                    return Err(Error::Manifest(format!(
                        "case {id}: label id {want} not present (max id {max_id})"
                    )));
                }
            }
            let binary = raw_label
                .data
                .mapv(|v| if label_ids.contains(&(v.round() as u32)) { 1.0 } else { 0.0 });
            let label_vol = Volume::new(binary, nd.spacing, nd.origin, VolumeKind::Label)?;
            let rel = PathBuf::from(format!("{id}_label.raw"));
            raw::save(&out_dir.join(&rel), &label_vol)?;
            (Role::Triplet, Some(rel))
        } else {
            (Role::Pair, None)
        };

        records.push(ManifestRecord {
            id: id.to_string(),
            role,
            source: source_rel,
            auxiliary: Some(aux_rel),
            label: label_rel,
            liver_mask: None,
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
    use byteorder::{ByteOrder, LittleEndian};
    use ndarray::Array3;

    fn write_case(dir: &Path, id: &str, role: Role, with_label: bool) -> ManifestRecord {
        let data = Array3::from_elem((4, 4, 4), 1.0f32);
        let v = Volume::from_data(data, VolumeKind::Intensity).unwrap();
        let source = PathBuf::from(format!("{id}_src.raw"));
        raw::save(&dir.join(&source), &v).unwrap();
        let auxiliary = PathBuf::from(format!("{id}_aux.raw"));
        raw::save(&dir.join(&auxiliary), &v).unwrap();
        let label = if with_label {
            let l = Volume::from_data(Array3::zeros((4, 4, 4)), VolumeKind::Label).unwrap();
            let p = PathBuf::from(format!("{id}_lab.raw"));
            raw::save(&dir.join(&p), &l).unwrap();
            Some(p)
        } else {
            None
        };
        ManifestRecord {
            id: id.into(),
            role,
            source,
            auxiliary: Some(auxiliary),
            label,
            liver_mask: None,
        }
    }

    #[test]
    fn manifest_round_trip_and_roles() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = Vec::new();
        for i in 0..12 {
            records.push(write_case(dir.path(), &format!("t{i}"), Role::Triplet, true));
        }
        for i in 0..30 {
            records.push(write_case(dir.path(), &format!("p{i}"), Role::Pair, false));
        }
        let manifest = DatasetManifest {
            root: dir.path().to_path_buf(),
            records,
        };
        let path = dir.path().join("manifest.json");
        manifest.save(&path).unwrap();

        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.records.len(), 42);
        assert_eq!(loaded.count_role(Role::Triplet), 12);
        assert_eq!(loaded.count_role(Role::Pair), 30);

        let sample = loaded.load_sample(&loaded.records[0]).unwrap();
        assert!(sample.is_triplet());
        let sample = loaded.load_sample(&loaded.records[12]).unwrap();
        assert!(sample.is_pair());
    }

    #[test]
    fn empty_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, r#"{"records": []}"#).unwrap();
        let m = load_manifest(&path).unwrap();
        assert!(m.records.is_empty());
    }

    #[test]
    fn missing_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(
            &path,
            r#"{"records": [{"id": "a", "role": "test", "source": "nope.raw"}]}"#,
        )
        .unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Manifest(_))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let rec = write_case(dir.path(), "a", Role::Pair, false);
        let manifest = DatasetManifest {
            root: dir.path().to_path_buf(),
            records: vec![rec.clone(), rec],
        };
        let path = dir.path().join("manifest.json");
        manifest.save(&path).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Manifest(_))));
    }

    fn write_decathlon_case(images: &Path, labels: &Path, id: &str, with_label: bool) {
        // 4D image with 4 channels holding distinct constants.
        let base = Volume::from_data(Array3::from_elem((5, 4, 3), 0.0), VolumeKind::Intensity)
            .unwrap();
        let path = images.join(format!("{id}.nii"));
        crate::io::nifti::save(&path, &base).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        LittleEndian::write_i16(&mut bytes[40..], 4);
        LittleEndian::write_i16(&mut bytes[48..], 4);
        for c in 1..4u32 {
            for _ in 0..(5 * 4 * 3) {
                let mut buf = [0u8; 4];
                LittleEndian::write_f32(&mut buf, c as f32 * 10.0);
                bytes.extend_from_slice(&buf);
            }
        }
        std::fs::write(&path, bytes).unwrap();

        if with_label {
            let mut lab = Array3::zeros((5, 4, 3));
            lab[[0, 0, 0]] = 1.0;
            lab[[1, 0, 0]] = 2.0;
            lab[[2, 0, 0]] = 3.0;
            let v = Volume::from_data(lab, VolumeKind::Intensity).unwrap();
            crate::io::nifti::save(&labels.join(format!("{id}.nii")), &v).unwrap();
        }
    }

    #[test]
    fn decathlon_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("imagesTr");
        let labels = dir.path().join("labelsTr");
        std::fs::create_dir_all(&images).unwrap();
        std::fs::create_dir_all(&labels).unwrap();
        write_decathlon_case(&images, &labels, "case_000", true);
        write_decathlon_case(&images, &labels, "case_001", false);

        let out = dir.path().join("ingested");
        // T2w-like input channel 3, contrast channel 2, tumor labels {2, 3}.
        let manifest = ingest_decathlon(dir.path(), 3, 2, &[2, 3], &out).unwrap();
        assert_eq!(manifest.records.len(), 2);
        assert_eq!(manifest.records[0].role, Role::Triplet);
        assert_eq!(manifest.records[1].role, Role::Pair);

        let s = manifest.load_sample(&manifest.records[0]).unwrap();
        assert!(s.is_triplet());
        assert!((s.source.data[[0, 0, 0]] - 30.0).abs() < 1e-6);
        assert!((s.auxiliary.as_ref().unwrap().data[[0, 0, 0]] - 20.0).abs() < 1e-6);
        let label = s.label.unwrap();
        assert_eq!(label.data[[0, 0, 0]], 0.0); // label id 1 not selected
        assert_eq!(label.data[[1, 0, 0]], 1.0);
        assert_eq!(label.data[[2, 0, 0]], 1.0);

        // Unknown label id errors.
        let out2 = dir.path().join("ingested2");
        assert!(ingest_decathlon(dir.path(), 3, 2, &[9], &out2).is_err());
    }
}
