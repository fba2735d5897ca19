//! Volume file I/O: NIfTI-1 (.nii / .nii.gz) and the raw float32 + JSON
//! sidecar format used for dependency-free fixtures.

pub mod nifti;
pub mod raw;

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeKind};

/// On-disk volume formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti,
    RawJson,
}

impl VolumeFormat {
    /// Infer the format from a file name.
    pub fn from_path(path: &Path) -> Result<Self> {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.ends_with(".nii") || name.ends_with(".nii.gz") {
            Ok(VolumeFormat::Nifti)
        } else if name.ends_with(".raw") {
            Ok(VolumeFormat::RawJson)
        } else {
            Err(Error::InvalidArgument(format!(
                "cannot infer volume format from '{name}' (expected .nii, .nii.gz or .raw)"
            )))
        }
    }
}

/// Load a volume, binarizing label files at 0.5.
///
/// The declared `kind` drives value handling: labels are thresholded so
/// sources that store {0, 255} come back as {0, 1}.
pub fn load_volume(path: &Path, format: VolumeFormat, kind: VolumeKind) -> Result<Volume> {
    let mut vol = match format {
        VolumeFormat::Nifti => nifti::load(path)?,
        VolumeFormat::RawJson => raw::load(path)?,
    };
    match kind {
        VolumeKind::Label => {
            let data = vol.data.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
            Volume::new(data, vol.spacing, vol.origin, VolumeKind::Label)
        }
        other => {
            vol.kind = other;
            Ok(vol)
        }
    }
}

/// Load with the format inferred from the extension.
pub fn load_volume_auto(path: &Path, kind: VolumeKind) -> Result<Volume> {
    load_volume(path, VolumeFormat::from_path(path)?, kind)
}

/// Save a volume in the format implied by the extension.
pub fn save_volume(path: &Path, vol: &Volume) -> Result<()> {
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Nifti => nifti::save(path, vol),
        VolumeFormat::RawJson => raw::save(path, vol),
    }
}
