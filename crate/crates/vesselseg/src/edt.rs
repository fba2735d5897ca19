//! Exact Euclidean distance transforms on anisotropic voxel grids.
//!
//! Separable lower-envelope (Felzenszwalb–Huttenlocher) passes over the
//! three axes, carrying the index of the nearest feature voxel alongside
//! the squared distance so callers can look up per-feature attributes
//! (e.g. vessel diameter at the nearest skeleton voxel).

use ndarray::Array3;

/// Squared distance plus nearest-feature flat index for every voxel.
pub struct FeatureTransform {
    pub dist_sq_mm: Array3<f64>,
    /// Flat index `(x * ny + y) * nz + z` of the nearest feature voxel;
    /// `u32::MAX` when the image holds no features at all.
    pub nearest: Array3<u32>,
}

impl FeatureTransform {
    pub fn distance_mm(&self, idx: [usize; 3]) -> f64 {
        self.dist_sq_mm[idx].sqrt()
    }
}

/// One lower-envelope pass along a line with sample positions `i * h`.
///
/// `f` holds squared distances (INFINITY where unseeded), `ids` the nearest
/// feature index carried from previous passes. Results are written back.
/// `vertices[j]` is the j-th envelope parabola; `bounds[j-1]` is where
/// parabola j takes over from parabola j-1.
fn envelope_pass(f: &mut [f64], ids: &mut [u32], h: f64, scratch: &mut EnvelopeScratch) {
    let n = f.len();
    let EnvelopeScratch {
        vertices,
        bounds,
        fq,
        idq,
    } = scratch;
    fq.clear();
    fq.extend_from_slice(f);
    idq.clear();
    idq.extend_from_slice(ids);

    vertices.clear();
    bounds.clear();
    let intersect = |p: usize, q: usize, fq: &[f64]| -> f64 {
        let xp = p as f64 * h;
        let xq = q as f64 * h;
        ((fq[q] + xq * xq) - (fq[p] + xp * xp)) / (2.0 * (xq - xp))
    };
    for q in 0..n {
        if fq[q].is_infinite() {
            continue;
        }
        if vertices.is_empty() {
            vertices.push(q);
            continue;
        }
        let mut s = intersect(*vertices.last().unwrap(), q, fq);
        while let Some(&last_bound) = bounds.last() {
            if s > last_bound {
                break;
            }
            vertices.pop();
            bounds.pop();
            s = intersect(*vertices.last().unwrap(), q, fq);
        }
        vertices.push(q);
        bounds.push(s);
    }
    if vertices.is_empty() {
        return; // no features on this line
    }
    let mut j = 0usize;
    for i in 0..n {
        let x = i as f64 * h;
        while j < bounds.len() && bounds[j] < x {
            j += 1;
        }
        let p = vertices[j];
        let xp = p as f64 * h;
        f[i] = (x - xp) * (x - xp) + fq[p];
        ids[i] = idq[p];
    }
}

struct EnvelopeScratch {
    vertices: Vec<usize>,
    bounds: Vec<f64>,
    fq: Vec<f64>,
    idq: Vec<u32>,
}

impl EnvelopeScratch {
    fn new(cap: usize) -> Self {
        EnvelopeScratch {
            vertices: Vec::with_capacity(cap),
            bounds: Vec::with_capacity(cap),
            fq: Vec::with_capacity(cap),
            idq: Vec::with_capacity(cap),
        }
    }
}

/// Exact nearest-feature transform of a boolean feature image.
pub fn feature_transform(features: &Array3<bool>, spacing: [f64; 3]) -> FeatureTransform {
    let (nx, ny, nz) = features.dim();
    let mut dist = Array3::<f64>::zeros((nx, ny, nz));
    let mut ids = Array3::<u32>::zeros((nx, ny, nz));
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let flat = ((x * ny + y) * nz + z) as u32;
                if features[[x, y, z]] {
                    dist[[x, y, z]] = 0.0;
                    ids[[x, y, z]] = flat;
                } else {
                    dist[[x, y, z]] = f64::INFINITY;
                    ids[[x, y, z]] = u32::MAX;
                }
            }
        }
    }

    let max_len = nx.max(ny).max(nz);
    let mut scratch = EnvelopeScratch::new(max_len);
    let mut line_f = vec![0f64; max_len];
    let mut line_id = vec![0u32; max_len];

    // z axis (contiguous lines)
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                line_f[z] = dist[[x, y, z]];
                line_id[z] = ids[[x, y, z]];
            }
            envelope_pass(&mut line_f[..nz], &mut line_id[..nz], spacing[2], &mut scratch);
            for z in 0..nz {
                dist[[x, y, z]] = line_f[z];
                ids[[x, y, z]] = line_id[z];
            }
        }
    }
    // y axis
    for x in 0..nx {
        for z in 0..nz {
            for y in 0..ny {
                line_f[y] = dist[[x, y, z]];
                line_id[y] = ids[[x, y, z]];
            }
            envelope_pass(&mut line_f[..ny], &mut line_id[..ny], spacing[1], &mut scratch);
            for y in 0..ny {
                dist[[x, y, z]] = line_f[y];
                ids[[x, y, z]] = line_id[y];
            }
        }
    }
    // x axis
    for y in 0..ny {
        for z in 0..nz {
            for x in 0..nx {
                line_f[x] = dist[[x, y, z]];
                line_id[x] = ids[[x, y, z]];
            }
            envelope_pass(&mut line_f[..nx], &mut line_id[..nx], spacing[0], &mut scratch);
            for x in 0..nx {
                dist[[x, y, z]] = line_f[x];
                ids[[x, y, z]] = line_id[x];
            }
        }
    }

    FeatureTransform {
        dist_sq_mm: dist,
        nearest: ids,
    }
}

/// Euclidean distance map of a binary mask: each foreground voxel gets its
/// distance in mm to the nearest background voxel, background reads 0.
/// A mask with no background at all maps foreground to infinity.
pub fn edt(mask: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let background = mask.mapv(|m| !m);
    let ft = feature_transform(&background, spacing);
    let mut out = ft.dist_sq_mm;
    out.zip_mut_with(&mask.mapv(|m| m as u8), |d, &m| {
        *d = if m == 1 { d.sqrt() } else { 0.0 };
    });
    out
}
