//! Raw volume format: little-endian float32 array plus a JSON sidecar
//! carrying shape, spacing, origin and kind. Round-trips are bit-exact,
//! which the checkpoint and determinism tests rely on.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeKind};

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 3],
    spacing: [f64; 3],
    #[serde(default)]
    origin: [f64; 3],
    kind: VolumeKind,
}

/// Sidecar path for a `.raw` data file: same stem, `.json` extension.
pub fn sidecar_path(raw_path: &Path) -> PathBuf {
    raw_path.with_extension("json")
}

/// Load a `.raw` + `.json` volume. Values are stored z-fastest.
pub fn load(path: &Path) -> Result<Volume> {
    let side_path = sidecar_path(path);
    let side_file = File::open(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: Sidecar = serde_json::from_reader(BufReader::new(side_file))
        .map_err(|e| Error::CorruptVolume(format!("{}: bad sidecar: {e}", side_path.display())))?;

    let n: usize = side.shape.iter().product();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let expected_bytes = (n * 4) as u64;
    let actual_bytes = file.metadata().map_err(|e| Error::io(path, e))?.len();
    if actual_bytes != expected_bytes {
        return Err(Error::CorruptVolume(format!(
            "{}: file has {actual_bytes} bytes, sidecar shape {:?} needs {expected_bytes}",
            path.display(),
            side.shape
        )));
    }
    let mut reader = BufReader::new(file);
    let mut values = vec![0f32; n];
    reader
        .read_f32_into::<LittleEndian>(&mut values)
        .map_err(|e| Error::CorruptVolume(format!("{}: truncated data: {e}", path.display())))?;

    let data = Array3::from_shape_vec((side.shape[0], side.shape[1], side.shape[2]), values)
        .map_err(|e| Error::CorruptVolume(format!("{}: {e}", path.display())))?;
    Volume::new(data, side.spacing, side.origin, side.kind)
}

/// Save a volume as `.raw` + `.json`.
pub fn save(path: &Path, vol: &Volume) -> Result<()> {
    let side = Sidecar {
        shape: vol.shape(),
        spacing: vol.spacing,
        origin: vol.origin,
        kind: vol.kind,
    };
    let side_path = sidecar_path(path);
    let side_file = File::create(&side_path).map_err(|e| Error::io(&side_path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(side_file), &side)?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    // Standard layout means iteration order is exactly z-fastest.
    debug_assert!(vol.data.is_standard_layout());
    for &v in vol.data.iter() {
        writer
            .write_f32::<LittleEndian>(v)
            .map_err(|e| Error::io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.raw");
        let data = Array3::from_shape_fn((4, 3, 5), |(i, j, k)| {
            (i as f32 * 0.37 - j as f32 * 1.2 + k as f32).sin()
        });
        let v = Volume::new(data, [0.8, 0.9, 2.0], [1.0, -2.0, 3.0], VolumeKind::Intensity)
            .unwrap();
        save(&path, &v).unwrap();
        let r = load(&path).unwrap();
        assert_eq!(v.data, r.data);
        assert_eq!(v.spacing, r.spacing);
        assert_eq!(v.origin, r.origin);
        assert_eq!(v.kind, r.kind);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.raw");
        let v = Volume::from_data(Array3::zeros((4, 4, 4)), VolumeKind::Intensity).unwrap();
        save(&path, &v).unwrap();
        // Chop the data file.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load(&path) {
            Err(Error::CorruptVolume(_)) => {}
            other => panic!("expected corrupt volume error, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.raw");
        let v = Volume::from_data(Array3::zeros((4, 4, 4)), VolumeKind::Intensity).unwrap();
        save(&path, &v).unwrap();
        // Rewrite the sidecar with an inconsistent shape.
        let side = sidecar_path(&path);
        let text = std::fs::read_to_string(&side).unwrap().replace("4", "5");
        std::fs::write(&side, text).unwrap();
        assert!(matches!(load(&path), Err(Error::CorruptVolume(_))));
    }
}
