//! Minimal NIfTI-1 reader/writer.
//!
//! Reads .nii and .nii.gz with the common scalar datatypes, applies
//! scl_slope/scl_inter, and honors pixdim spacing. Writes float32 volumes
//! with an axis-aligned sform. Rotational orientation is not interpreted;
//! inputs are assumed co-registered and axis-aligned.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeKind};

const HEADER_SIZE: usize = 348;
const MAGIC: &[u8; 4] = b"n+1\0";

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const SROW_Y: usize = 296;
    pub const SROW_Z: usize = 312;
    pub const MAGIC: usize = 344;
}

mod datatype {
    pub const UINT8: i16 = 2;
    pub const INT16: i16 = 4;
    pub const INT32: i16 = 8;
    pub const FLOAT32: i16 = 16;
    pub const FLOAT64: i16 = 64;
    pub const INT8: i16 = 256;
    pub const UINT16: i16 = 512;
}

/// A decoded NIfTI file: one or more 3D channels on one grid.
pub struct NiftiData {
    pub channels: Vec<Array3<f32>>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

fn read_all_bytes(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut head = [0u8; 2];
    let n = reader.read(&mut head).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&head[..n]);
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        MultiGzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::CorruptVolume(format!("{}: gzip: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

/// Load every channel of a NIfTI file (3D files yield one channel).
pub fn load_all_channels(path: &Path) -> Result<NiftiData> {
    let bytes = read_all_bytes(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(Error::CorruptVolume(format!(
            "{}: file shorter than NIfTI-1 header",
            path.display()
        )));
    }
    let little = match LittleEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) {
        348 => true,
        _ if BigEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == 348 => false,
        other => {
            return Err(Error::CorruptVolume(format!(
                "{}: sizeof_hdr = {other}, not a NIfTI-1 file",
                path.display()
            )))
        }
    };
    let read_i16 = |off: usize| -> i16 {
        if little {
            LittleEndian::read_i16(&bytes[off..])
        } else {
            BigEndian::read_i16(&bytes[off..])
        }
    };
    let read_f32 = |off: usize| -> f32 {
        if little {
            LittleEndian::read_f32(&bytes[off..])
        } else {
            BigEndian::read_f32(&bytes[off..])
        }
    };

    let ndim = read_i16(offsets::DIM) as usize;
    if !(1..=7).contains(&ndim) {
        return Err(Error::CorruptVolume(format!(
            "{}: dim[0] = {ndim} out of range",
            path.display()
        )));
    }
    let mut dims = [1usize; 7];
    for (i, d) in dims.iter_mut().enumerate().take(ndim) {
        let v = read_i16(offsets::DIM + 2 * (i + 1));
        if v < 1 {
            return Err(Error::CorruptVolume(format!(
                "{}: dim[{}] = {v}",
                path.display(),
                i + 1
            )));
        }
        *d = v as usize;
    }
    if ndim > 4 && dims[4..].iter().any(|&d| d > 1) {
        return Err(Error::CorruptVolume(format!(
            "{}: >4D volumes are not supported",
            path.display()
        )));
    }
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let nt = if ndim >= 4 { dims[3] } else { 1 };

    let dt = read_i16(offsets::DATATYPE);
    let elem_size = match dt {
        datatype::UINT8 | datatype::INT8 => 1,
        datatype::INT16 | datatype::UINT16 => 2,
        datatype::INT32 | datatype::FLOAT32 => 4,
        datatype::FLOAT64 => 8,
        other => {
            return Err(Error::CorruptVolume(format!(
                "{}: unsupported datatype {other}",
                path.display()
            )))
        }
    };

    let vox_offset = read_f32(offsets::VOX_OFFSET) as usize;
    let vox_offset = vox_offset.max(HEADER_SIZE + 4);
    let n = nx * ny * nz * nt;
    if bytes.len() < vox_offset + n * elem_size {
        return Err(Error::CorruptVolume(format!(
            "{}: truncated data section ({} bytes, need {})",
            path.display(),
            bytes.len(),
            vox_offset + n * elem_size
        )));
    }
    let data = &bytes[vox_offset..vox_offset + n * elem_size];

    let scl_slope = read_f32(offsets::SCL_SLOPE);
    let scl_inter = read_f32(offsets::SCL_INTER);
    let (slope, inter) = if scl_slope == 0.0 || !scl_slope.is_finite() {
        (1.0f32, 0.0f32)
    } else {
        (scl_slope, scl_inter)
    };

    let fetch = |i: usize| -> f32 {
        let off = i * elem_size;
        let raw = match dt {
            datatype::UINT8 => data[off] as f32,
            datatype::INT8 => data[off] as i8 as f32,
            datatype::INT16 => {
                if little {
                    LittleEndian::read_i16(&data[off..]) as f32
                } else {
                    BigEndian::read_i16(&data[off..]) as f32
                }
            }
            datatype::UINT16 => {
                if little {
                    LittleEndian::read_u16(&data[off..]) as f32
                } else {
                    BigEndian::read_u16(&data[off..]) as f32
                }
            }
            datatype::INT32 => {
                if little {
                    LittleEndian::read_i32(&data[off..]) as f32
                } else {
                    BigEndian::read_i32(&data[off..]) as f32
                }
            }
            datatype::FLOAT32 => {
                if little {
                    LittleEndian::read_f32(&data[off..])
                } else {
                    BigEndian::read_f32(&data[off..])
                }
            }
            datatype::FLOAT64 => {
                if little {
                    LittleEndian::read_f64(&data[off..]) as f32
                } else {
                    BigEndian::read_f64(&data[off..]) as f32
                }
            }
            _ => unreachable!(),
        };
        raw * slope + inter
    };

    // NIfTI stores x fastest; our arrays are [x, y, z] with z fastest.
    let plane = nx * ny * nz;
    let mut channels = Vec::with_capacity(nt);
    for t in 0..nt {
        let base = t * plane;
        let arr = Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| {
            fetch(base + x + nx * (y + ny * z))
        });
        channels.push(arr);
    }

    let mut spacing = [0f64; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let p = read_f32(offsets::PIXDIM + 4 * (i + 1)).abs() as f64;
        *s = if p > 0.0 && p.is_finite() { p } else { 1.0 };
    }
    let sform = read_i16(offsets::SFORM_CODE);
    let qform = read_i16(offsets::QFORM_CODE);
    let origin = if sform > 0 {
        [
            read_f32(offsets::SROW_X + 12) as f64,
            read_f32(offsets::SROW_Y + 12) as f64,
            read_f32(offsets::SROW_Z + 12) as f64,
        ]
    } else if qform > 0 {
        [
            read_f32(offsets::QOFFSET_X) as f64,
            read_f32(offsets::QOFFSET_X + 4) as f64,
            read_f32(offsets::QOFFSET_X + 8) as f64,
        ]
    } else {
        [0.0; 3]
    };

    Ok(NiftiData {
        channels,
        spacing,
        origin,
    })
}

/// Load a single-channel NIfTI volume as intensity data.
pub fn load(path: &Path) -> Result<Volume> {
    load_channel(path, 0, true)
}

/// Load one channel of a (possibly 4D) NIfTI file.
///
/// `require_single` rejects multi-channel files, which keeps plain volume
/// loads honest while the dataset adapters select channels explicitly.
pub fn load_channel(path: &Path, channel: usize, require_single: bool) -> Result<Volume> {
    let mut nd = load_all_channels(path)?;
    if require_single && nd.channels.len() != 1 {
        return Err(Error::CorruptVolume(format!(
            "{}: expected a 3D volume, found {} channels",
            path.display(),
            nd.channels.len()
        )));
    }
    if channel >= nd.channels.len() {
        return Err(Error::InvalidArgument(format!(
            "{}: channel {channel} out of range ({} channels)",
            path.display(),
            nd.channels.len()
        )));
    }
    let data = nd.channels.swap_remove(channel);
    Volume::new(data, nd.spacing, nd.origin, VolumeKind::Intensity)
}

/// Write a volume as float32 NIfTI-1 (.nii, gzipped when the name ends .gz).
pub fn save(path: &Path, vol: &Volume) -> Result<()> {
    let mut header = vec![0u8; HEADER_SIZE + 4];
    LittleEndian::write_i32(&mut header[offsets::SIZEOF_HDR..], 348);
    let dims = vol.shape();
    LittleEndian::write_i16(&mut header[offsets::DIM..], 3);
    for i in 0..3 {
        LittleEndian::write_i16(&mut header[offsets::DIM + 2 * (i + 1)..], dims[i] as i16);
    }
    for i in 4..8 {
        LittleEndian::write_i16(&mut header[offsets::DIM + 2 * i..], 1);
    }
    LittleEndian::write_i16(&mut header[offsets::DATATYPE..], datatype::FLOAT32);
    LittleEndian::write_i16(&mut header[offsets::BITPIX..], 32);
    LittleEndian::write_f32(&mut header[offsets::PIXDIM..], 1.0);
    for i in 0..3 {
        LittleEndian::write_f32(
            &mut header[offsets::PIXDIM + 4 * (i + 1)..],
            vol.spacing[i] as f32,
        );
    }
    LittleEndian::write_f32(&mut header[offsets::VOX_OFFSET..], (HEADER_SIZE + 4) as f32);
    LittleEndian::write_f32(&mut header[offsets::SCL_SLOPE..], 1.0);
    LittleEndian::write_f32(&mut header[offsets::SCL_INTER..], 0.0);
    LittleEndian::write_i16(&mut header[offsets::QFORM_CODE..], 0);
    LittleEndian::write_i16(&mut header[offsets::SFORM_CODE..], 1);
    for (row, axis) in [offsets::SROW_X, offsets::SROW_Y, offsets::SROW_Z]
        .into_iter()
        .zip(0usize..)
    {
        let mut vals = [0f32; 4];
        vals[axis] = vol.spacing[axis] as f32;
        vals[3] = vol.origin[axis] as f32;
        for (i, v) in vals.iter().enumerate() {
            LittleEndian::write_f32(&mut header[row + 4 * i..], *v);
        }
    }
    header[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(MAGIC);

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"));
    let mut sink: Box<dyn Write> = if gz {
        Box::new(GzEncoder::new(BufWriter::new(file), Compression::fast()))
    } else {
        Box::new(BufWriter::new(file))
    };
    sink.write_all(&header).map_err(|e| Error::io(path, e))?;
    let (nx, ny, _nz) = vol.data.dim();
    // x-fastest order on disk.
    let _ = (nx, ny);
    for z in 0..vol.shape()[2] {
        for y in 0..vol.shape()[1] {
            for x in 0..vol.shape()[0] {
                sink.write_f32::<LittleEndian>(vol.data[[x, y, z]])
                    .map_err(|e| Error::io(path, e))?;
            }
        }
    }
    sink.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
