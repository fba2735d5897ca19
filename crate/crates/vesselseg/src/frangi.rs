//! Classical baseline: multiscale Hessian vesselness filtering with Otsu
//! thresholding.
//!
//! Per scale, the volume is Gaussian-smoothed (per-axis sigma in voxels
//! derived from the scale in mm), the Hessian is taken with central
//! differences, and its eigenvalues sorted by magnitude |l1| <= |l2| <= |l3|
//! feed the tubularity response. The final map is the maximum over scales.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeKind};

/// Multiscale vesselness parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrangiParams {
    pub scales_mm: Vec<f64>,
    /// Plate-vs-line sensitivity.
    pub alpha: f64,
    /// Blob sensitivity.
    pub beta: f64,
    /// Structureness scale; `None` picks half the maximum Frobenius norm at
    /// each scale.
    pub c: Option<f64>,
    pub bright_on_dark: bool,
}

impl Default for FrangiParams {
    fn default() -> Self {
        FrangiParams {
            scales_mm: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            alpha: 0.5,
            beta: 0.5,
            c: None,
            bright_on_dark: true,
        }
    }
}

impl FrangiParams {
    pub fn validate(&self) -> Result<()> {
        if self.scales_mm.is_empty() {
            return Err(Error::InvalidArgument(
                "vesselness needs at least one scale".into(),
            ));
        }
        if self.scales_mm.iter().any(|&s| s <= 0.0) || self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(Error::InvalidArgument(
                "scales, alpha and beta must be positive".into(),
            ));
        }
        if let Some(c) = self.c {
            if c <= 0.0 {
                return Err(Error::InvalidArgument("c must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Separable Gaussian smoothing with mirror boundary, sigma per axis in
/// voxels.
pub fn gaussian_smooth(data: &Array3<f32>, sigma_vox: [f64; 3]) -> Array3<f32> {
    let mut out = data.mapv(|v| v as f64);
    for axis in 0..3 {
        let sigma = sigma_vox[axis];
        if sigma < 1e-6 {
            continue;
        }
        let radius = (4.0 * sigma).ceil() as isize;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        for k in -radius..=radius {
            kernel.push((-(k as f64 * k as f64) / (2.0 * sigma * sigma)).exp());
        }
        let norm: f64 = kernel.iter().sum();
        for k in kernel.iter_mut() {
            *k /= norm;
        }
        out = convolve_axis(&out, &kernel, axis, radius);
    }
    out.mapv(|v| v as f32)
}

fn mirror(i: isize, n: isize) -> usize {
    // scipy-style 'reflect': (d c b a | a b c d | d c b a)
    let period = 2 * n;
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

fn convolve_axis(data: &Array3<f64>, kernel: &[f64], axis: usize, radius: isize) -> Array3<f64> {
    let dim = data.dim();
    let n = [dim.0, dim.1, dim.2][axis] as isize;
    Array3::from_shape_fn(dim, |(x, y, z)| {
        let mut acc = 0.0;
        for (ki, &kv) in kernel.iter().enumerate() {
            let off = ki as isize - radius;
            let idx = match axis {
                0 => [mirror(x as isize + off, n), y, z],
                1 => [x, mirror(y as isize + off, n), z],
                _ => [x, y, mirror(z as isize + off, n)],
            };
            acc += kv * data[idx];
        }
        acc
    })
}

/// Eigenvalues of a symmetric 3x3 matrix, analytic (no iteration), unsorted.
fn eig_symmetric3(a: [[f64; 3]; 3]) -> [f64; 3] {
    let p1 = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    if p1 < 1e-30 {
        return [a[0][0], a[1][1], a[2][2]];
    }
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = a;
    for (i, row) in b.iter_mut().enumerate() {
        row[i] -= q;
        for v in row.iter_mut() {
            *v /= p;
        }
    }
    let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
        - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let r = (det / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    let e2 = 3.0 * q - e1 - e3;
    [e1, e2, e3]
}

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Hessian at one voxel by central differences on the smoothed volume,
/// spacing-aware, with clamped borders.
fn hessian_at(s: &Array3<f32>, x: usize, y: usize, z: usize, spacing: [f64; 3]) -> [[f64; 3]; 3] {
    let (nx, ny, nz) = s.dim();
    let at = |i: isize, j: isize, k: isize| -> f64 {
        s[[clamp_idx(i, nx), clamp_idx(j, ny), clamp_idx(k, nz)]] as f64
    };
    let (xi, yi, zi) = (x as isize, y as isize, z as isize);
    let center = at(xi, yi, zi);
    let (hx, hy, hz) = (spacing[0], spacing[1], spacing[2]);

    let dxx = (at(xi + 1, yi, zi) - 2.0 * center + at(xi - 1, yi, zi)) / (hx * hx);
    let dyy = (at(xi, yi + 1, zi) - 2.0 * center + at(xi, yi - 1, zi)) / (hy * hy);
    let dzz = (at(xi, yi, zi + 1) - 2.0 * center + at(xi, yi, zi - 1)) / (hz * hz);
    let dxy = (at(xi + 1, yi + 1, zi) - at(xi + 1, yi - 1, zi) - at(xi - 1, yi + 1, zi)
        + at(xi - 1, yi - 1, zi))
        / (4.0 * hx * hy);
    let dxz = (at(xi + 1, yi, zi + 1) - at(xi + 1, yi, zi - 1) - at(xi - 1, yi, zi + 1)
        + at(xi - 1, yi, zi - 1))
        / (4.0 * hx * hz);
    let dyz = (at(xi, yi + 1, zi + 1) - at(xi, yi + 1, zi - 1) - at(xi, yi - 1, zi + 1)
        + at(xi, yi - 1, zi - 1))
        / (4.0 * hy * hz);
    [[dxx, dxy, dxz], [dxy, dyy, dyz], [dxz, dyz, dzz]]
}

/// Multiscale tubularity map in [0, 1]: max over scales of the eigenvalue
/// response, zero where the principal curvatures do not indicate a bright
/// tube (or dark tube when `bright_on_dark` is false).
pub fn frangi_vesselness(v: &Volume, params: &FrangiParams) -> Result<Volume> {
    params.validate()?;
    if v.kind != VolumeKind::Intensity {
        return Err(Error::InvalidArgument(
            "vesselness expects an intensity volume".into(),
        ));
    }
    let dims = v.data.dim();
    let n = v.num_voxels();
    let mut best = Array3::<f32>::zeros(dims);

    for &scale in &params.scales_mm {
        let sigma_vox = [
            scale / v.spacing[0],
            scale / v.spacing[1],
            scale / v.spacing[2],
        ];
        let smoothed = gaussian_smooth(&v.data, sigma_vox);

        // First pass: eigenvalues and structureness for the scale.
        let mut lam = vec![[0.0f64; 3]; n];
        let mut s_norm = vec![0.0f64; n];
        let mut max_s = 0.0f64;
        let mut flat = 0usize;
        for x in 0..dims.0 {
            for y in 0..dims.1 {
                for z in 0..dims.2 {
                    let h = hessian_at(&smoothed, x, y, z, v.spacing);
                    let mut eigs = eig_symmetric3(h);
                    if !params.bright_on_dark {
                        for e in eigs.iter_mut() {
                            *e = -*e;
                        }
                    }
                    eigs.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());
                    let s = (eigs[0] * eigs[0] + eigs[1] * eigs[1] + eigs[2] * eigs[2]).sqrt();
                    lam[flat] = eigs;
                    s_norm[flat] = s;
                    if s > max_s {
                        max_s = s;
                    }
                    flat += 1;
                }
            }
        }
        let c = params.c.unwrap_or(0.5 * max_s);
        if c <= 0.0 {
            continue; // constant volume at this scale: response is zero
        }

        let two_a2 = 2.0 * params.alpha * params.alpha;
        let two_b2 = 2.0 * params.beta * params.beta;
        let two_c2 = 2.0 * c * c;
        let best_flat = best.as_slice_mut().unwrap();
        for (flat, (eigs, s)) in lam.iter().zip(s_norm.iter()).enumerate() {
            let (l1, l2, l3) = (eigs[0], eigs[1], eigs[2]);
            // Bright tubes need both principal curvatures negative.
            if l2 >= 0.0 || l3 >= 0.0 {
                continue;
            }
            let l2a = l2.abs();
            let l3a = l3.abs();
            if l3a < 1e-12 {
                continue;
            }
            let ra = l2a / l3a;
            let rb = l1.abs() / (l2a * l3a).sqrt();
            let response = (1.0 - (-(ra * ra) / two_a2).exp())
                * (-(rb * rb) / two_b2).exp()
                * (1.0 - (-(s * s) / two_c2).exp());
            if response as f32 > best_flat[flat] {
                best_flat[flat] = response as f32;
            }
        }
    }

    Volume::new(
        best.mapv(|v| v.clamp(0.0, 1.0)),
        v.spacing,
        v.origin,
        VolumeKind::Probability,
    )
}

/// Otsu threshold of a 256-bin histogram: the bin-center value whose split
/// maximizes between-class variance.
pub fn otsu_from_histogram(counts: &[u64; 256], lo: f64, width: f64) -> f64 {
    let total: u64 = counts.iter().sum();
    let total_f = total as f64;
    let centers: Vec<f64> = (0..256).map(|i| lo + (i as f64 + 0.5) * width).collect();
    let weighted_sum: f64 = counts
        .iter()
        .zip(&centers)
        .map(|(&c, &v)| c as f64 * v)
        .sum();

    let mut best_t = 0usize;
    let mut best_var = f64::NEG_INFINITY;
    let mut w0 = 0.0f64;
    let mut sum0 = 0.0f64;
    for t in 0..255 {
        w0 += counts[t] as f64;
        sum0 += counts[t] as f64 * centers[t];
        if w0 == 0.0 {
            continue;
        }
        let w1 = total_f - w0;
        if w1 == 0.0 {
            break;
        }
        let mu0 = sum0 / w0;
        let mu1 = (weighted_sum - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_t = t;
        }
    }
    centers[best_t]
}

/// Otsu threshold over a volume's 256-bin intensity histogram.
pub fn otsu_threshold(v: &Volume) -> Result<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &x in v.data.iter() {
        lo = lo.min(x as f64);
        hi = hi.max(x as f64);
    }
    if !(hi > lo) {
        return Err(Error::InvalidArgument(
            "Otsu threshold undefined for a constant volume".into(),
        ));
    }
    let width = (hi - lo) / 256.0;
    let mut counts = [0u64; 256];
    for &x in v.data.iter() {
        let bin = (((x as f64 - lo) / width) as usize).min(255);
        counts[bin] += 1;
    }
    Ok(otsu_from_histogram(&counts, lo, width))
}

/// Vesselness map thresholded by Otsu. A degenerate constant vesselness map
/// (e.g. from a constant input) yields an empty segmentation.
pub fn frangi_otsu_segment(v: &Volume, params: &FrangiParams) -> Result<(Volume, Volume)> {
    let vesselness = frangi_vesselness(v, params)?;
    let label = match otsu_threshold(&vesselness) {
        Ok(threshold) => vesselness
            .data
            .mapv(|x| if (x as f64) > threshold { 1.0 } else { 0.0 }),
        Err(_) => Array3::zeros(v.data.dim()),
    };
    let label = Volume::new(label, v.spacing, v.origin, VolumeKind::Label)?;
    Ok((label, vesselness))
}
