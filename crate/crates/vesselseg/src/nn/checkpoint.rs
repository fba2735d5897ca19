//! Checkpoint archives: a ZIP file holding `manifest.json` (architecture,
//! config, sigma state, provenance, seed) plus one little-endian float32
//! blob per named parameter.
//!
//! The writer emits stored (uncompressed) entries with zeroed timestamps in
//! a fixed order, so identical training runs produce byte-identical
//! checkpoint files.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{build_unet, build_ynet, Arch, Model, NetConfig, SigmaMode};
use super::{ParamGroup, Scalar};
use crate::error::{Error, Result};

const FORMAT_VERSION: u32 = 1;

/// Training provenance embedded in the checkpoint manifest.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub regime: String,
    pub epochs_completed: usize,
    pub train_seed: u64,
    pub data_manifest: String,
    pub code_version: String,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    arch: Arch,
    sigma_mode: SigmaMode,
    fixed_sigma: Option<(f64, f64)>,
    config: NetConfig,
    init_seed: u64,
    provenance: Provenance,
    params: Vec<ParamEntry>,
}

// ---- minimal stored-entry zip ----------------------------------------------

static CRC_TABLE: LazyLock<[u32; 256]> = LazyLock::new(|| {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xedb8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    table
});

fn crc32(bytes: &[u8]) -> u32 {
    let mut c = 0xffff_ffffu32;
    for &b in bytes {
        c = CRC_TABLE[((c ^ b as u32) & 0xff) as usize] ^ (c >> 8);
    }
    c ^ 0xffff_ffff
}

struct ZipWriter<W: Write> {
    sink: W,
    offset: u64,
    central: Vec<u8>,
    entries: u16,
}

impl<W: Write> ZipWriter<W> {
    fn new(sink: W) -> Self {
        ZipWriter {
            sink,
            offset: 0,
            central: Vec::new(),
            entries: 0,
        }
    }

    fn put(&mut self, name: &str, data: &[u8]) -> std::io::Result<()> {
        let crc = crc32(data);
        let name_bytes = name.as_bytes();
        let mut local = Vec::with_capacity(30 + name_bytes.len());
        local.extend_from_slice(&0x0403_4b50u32.to_le_bytes());
        local.extend_from_slice(&20u16.to_le_bytes()); // version needed
        local.extend_from_slice(&0u16.to_le_bytes()); // flags
        local.extend_from_slice(&0u16.to_le_bytes()); // method: stored
        local.extend_from_slice(&0u16.to_le_bytes()); // mod time
        local.extend_from_slice(&0x0021u16.to_le_bytes()); // mod date: 1980-01-01
        local.extend_from_slice(&crc.to_le_bytes());
        local.extend_from_slice(&(data.len() as u32).to_le_bytes());
        local.extend_from_slice(&(data.len() as u32).to_le_bytes());
        local.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        local.extend_from_slice(&0u16.to_le_bytes()); // extra len
        local.extend_from_slice(name_bytes);

        self.sink.write_all(&local)?;
        self.sink.write_all(data)?;

        self.central.extend_from_slice(&0x0201_4b50u32.to_le_bytes());
        self.central.extend_from_slice(&20u16.to_le_bytes()); // made by
        self.central.extend_from_slice(&20u16.to_le_bytes()); // needed
        self.central.extend_from_slice(&0u16.to_le_bytes());
        self.central.extend_from_slice(&0u16.to_le_bytes());
        self.central.extend_from_slice(&0u16.to_le_bytes());
        self.central.extend_from_slice(&0x0021u16.to_le_bytes());
        self.central.extend_from_slice(&crc.to_le_bytes());
        self.central.extend_from_slice(&(data.len() as u32).to_le_bytes());
        self.central.extend_from_slice(&(data.len() as u32).to_le_bytes());
        self.central
            .extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        self.central.extend_from_slice(&0u16.to_le_bytes()); // extra
        self.central.extend_from_slice(&0u16.to_le_bytes()); // comment
        self.central.extend_from_slice(&0u16.to_le_bytes()); // disk
        self.central.extend_from_slice(&0u16.to_le_bytes()); // internal attrs
        self.central.extend_from_slice(&0u32.to_le_bytes()); // external attrs
        self.central
            .extend_from_slice(&(self.offset as u32).to_le_bytes());
        self.central.extend_from_slice(name_bytes);

        self.offset += (local.len() + data.len()) as u64;
        self.entries += 1;
        Ok(())
    }

    fn finish(mut self) -> std::io::Result<()> {
        let cd_size = self.central.len() as u32;
        let cd_offset = self.offset as u32;
        self.sink.write_all(&self.central)?;
        let mut eocd = Vec::with_capacity(22);
        eocd.extend_from_slice(&0x0605_4b50u32.to_le_bytes());
        eocd.extend_from_slice(&0u16.to_le_bytes());
        eocd.extend_from_slice(&0u16.to_le_bytes());
        eocd.extend_from_slice(&self.entries.to_le_bytes());
        eocd.extend_from_slice(&self.entries.to_le_bytes());
        eocd.extend_from_slice(&cd_size.to_le_bytes());
        eocd.extend_from_slice(&cd_offset.to_le_bytes());
        eocd.extend_from_slice(&0u16.to_le_bytes());
        self.sink.write_all(&eocd)?;
        self.sink.flush()
    }
}

fn read_u16(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn read_u32(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// All entries of a stored-format zip archive, in central-directory order.
fn unzip(bytes: &[u8], what: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let corrupt = |msg: &str| Error::Checkpoint(format!("{}: {msg}", what.display()));
    if bytes.len() < 22 {
        return Err(corrupt("too short for a zip archive"));
    }
    let mut eocd = None;
    let scan_from = bytes.len().saturating_sub(22 + 65536);
    for pos in (scan_from..=bytes.len() - 22).rev() {
        if read_u32(bytes, pos) == 0x0605_4b50 {
            eocd = Some(pos);
            break;
        }
    }
    let eocd = eocd.ok_or_else(|| corrupt("no end-of-central-directory record"))?;
    let entries = read_u16(bytes, eocd + 10) as usize;
    let cd_offset = read_u32(bytes, eocd + 16) as usize;

    let mut out = Vec::with_capacity(entries);
    let mut pos = cd_offset;
    for _ in 0..entries {
        if pos + 46 > bytes.len() || read_u32(bytes, pos) != 0x0201_4b50 {
            return Err(corrupt("bad central directory entry"));
        }
        let method = read_u16(bytes, pos + 10);
        let crc = read_u32(bytes, pos + 16);
        let size = read_u32(bytes, pos + 20) as usize;
        let name_len = read_u16(bytes, pos + 28) as usize;
        let extra_len = read_u16(bytes, pos + 30) as usize;
        let comment_len = read_u16(bytes, pos + 32) as usize;
        let header_offset = read_u32(bytes, pos + 42) as usize;
        let name = String::from_utf8(bytes[pos + 46..pos + 46 + name_len].to_vec())
            .map_err(|_| corrupt("non-utf8 entry name"))?;
        if method != 0 {
            return Err(corrupt("unsupported compression method"));
        }
        if header_offset + 30 > bytes.len() {
            return Err(corrupt("local header out of bounds"));
        }
        let lh_name = read_u16(bytes, header_offset + 26) as usize;
        let lh_extra = read_u16(bytes, header_offset + 28) as usize;
        let data_start = header_offset + 30 + lh_name + lh_extra;
        if data_start + size > bytes.len() {
            return Err(corrupt("entry data out of bounds"));
        }
        let data = bytes[data_start..data_start + size].to_vec();
        if crc32(&data) != crc {
            return Err(corrupt("crc mismatch"));
        }
        out.push((name, data));
        pos += 46 + name_len + extra_len + comment_len;
    }
    Ok(out)
}

// ---- checkpoint io -----------------------------------------------------------

fn param_blob_name(param_name: &str) -> String {
    format!("params/{param_name}.f32")
}

/// Serialize a model (values cast to f32) plus provenance. The write is
/// atomic: data lands in a temp file renamed into place.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    model: &Model<F>,
    provenance: &Provenance,
) -> Result<()> {
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        arch: model.arch,
        sigma_mode: model.sigma_mode,
        fixed_sigma: model.fixed_sigma(),
        config: model.config.clone(),
        init_seed: model.init_seed,
        provenance: provenance.clone(),
        params: model
            .params
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let tmp = path.with_extension("zip.tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut zip = ZipWriter::new(BufWriter::new(file));
        let manifest_json = serde_json::to_vec_pretty(&manifest)?;
        zip.put("manifest.json", &manifest_json)
            .map_err(|e| Error::io(&tmp, e))?;
        for (_, p) in model.params.iter() {
            let mut blob = Vec::with_capacity(p.value.len() * 4);
            for v in p.value.iter() {
                blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
            zip.put(&param_blob_name(&p.name), &blob)
                .map_err(|e| Error::io(&tmp, e))?;
        }
        zip.finish().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Load a checkpoint, rebuilding the model and overwriting every parameter
/// from the stored blobs.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(Model<F>, Provenance)> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let entries = unzip(&bytes, path)?;
    let manifest_bytes = entries
        .iter()
        .find(|(n, _)| n == "manifest.json")
        .map(|(_, d)| d.clone())
        .ok_or_else(|| Error::Checkpoint(format!("{}: no manifest.json", path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format version {}",
            path.display(),
            manifest.format_version
        )));
    }

    let mut model: Model<F> = match manifest.arch {
        Arch::Unet => build_unet(&manifest.config, manifest.init_seed)?,
        Arch::Ynet => build_ynet(
            &manifest.config,
            manifest.sigma_mode,
            manifest.fixed_sigma,
            manifest.init_seed,
        )?,
    };

    if model.params.len() != manifest.params.len() {
        return Err(Error::Checkpoint(format!(
            "{}: parameter count mismatch ({} vs {})",
            path.display(),
            model.params.len(),
            manifest.params.len()
        )));
    }
    for entry in &manifest.params {
        let id = model.params.find(&entry.name).ok_or_else(|| {
            Error::Checkpoint(format!(
                "{}: unknown parameter '{}'",
                path.display(),
                entry.name
            ))
        })?;
        let blob_name = param_blob_name(&entry.name);
        let blob = entries
            .iter()
            .find(|(n, _)| *n == blob_name)
            .map(|(_, d)| d)
            .ok_or_else(|| {
                Error::Checkpoint(format!("{}: missing blob {blob_name}", path.display()))
            })?;
        let param = model.params.param_mut(id);
        if param.value.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{}: shape mismatch for '{}'",
                path.display(),
                entry.name
            )));
        }
        if blob.len() != param.value.len() * 4 {
            return Err(Error::Checkpoint(format!(
                "{}: blob size mismatch for '{}'",
                path.display(),
                entry.name
            )));
        }
        for (i, v) in param.value.iter_mut().enumerate() {
            let raw = f32::from_le_bytes([
                blob[4 * i],
                blob[4 * i + 1],
                blob[4 * i + 2],
                blob[4 * i + 3],
            ]);
            *v = F::from_f64(raw as f64);
        }
    }
    Ok((model, manifest.provenance))
}

/// Hex SHA-256 over the f32 little-endian bytes of all parameters whose
/// group passes the filter, in name order.
pub fn param_digest<F: Scalar>(model: &Model<F>, filter: impl Fn(ParamGroup) -> bool) -> String {
    let bytes = model.params.digest_bytes(filter);
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
