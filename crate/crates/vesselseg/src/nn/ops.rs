//! Tensor operations on `[channels, x, y, z]` feature maps with explicit
//! backward passes.
//!
//! 3x3x3 convolutions run as chunked im2col + GEMM so both directions share
//! one code path; everything else is plain loops over contiguous z-runs.
//! Accumulation order is fixed, so results are reproducible bit-for-bit.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, ShapeBuilder};

use super::Scalar;

/// Feature map: `[C, X, Y, Z]`, standard layout, z fastest.
pub type Feat<F> = Array4<F>;

/// Upper bound on the im2col buffer (elements); chunks of the x axis are
/// sized so `27 * cin * chunk_x * Y * Z` stays below it.
const COL_CHUNK_ELEMS: usize = 1 << 22;

fn chunk_x_len(cin: usize, x: usize, y: usize, z: usize) -> usize {
    (COL_CHUNK_ELEMS / (27 * cin * y * z)).clamp(1, x)
}

/// Gather the 27-neighborhood columns for output positions x0..x1.
/// `cols[(ci*27 + off), ((xo-x0)*Y + yo)*Z + zo] = x[ci, xo+dx-1, yo+dy-1, zo+dz-1]`
/// with zeros outside the volume.
fn im2col<F: Scalar>(x: &Feat<F>, x0: usize, x1: usize, cols: &mut Array2<F>) {
    let (cin, nx, ny, nz) = x.dim();
    let chunk = (x1 - x0) * ny * nz;
    debug_assert_eq!(cols.dim(), (cin * 27, chunk));
    let xs = x.as_slice().expect("feature maps are standard layout");
    let cs = cols.as_slice_mut().expect("cols buffer is standard layout");

    for ci in 0..cin {
        for dx in 0..3usize {
            for dy in 0..3usize {
                for dz in 0..3usize {
                    let row = ci * 27 + dx * 9 + dy * 3 + dz;
                    let row_base = row * chunk;
                    for xo in x0..x1 {
                        let seg_x = row_base + (xo - x0) * ny * nz;
                        let sx = xo as isize + dx as isize - 1;
                        if sx < 0 || sx >= nx as isize {
                            cs[seg_x..seg_x + ny * nz].fill(F::zero());
                            continue;
                        }
                        for yo in 0..ny {
                            let seg = seg_x + yo * nz;
                            let sy = yo as isize + dy as isize - 1;
                            if sy < 0 || sy >= ny as isize {
                                cs[seg..seg + nz].fill(F::zero());
                                continue;
                            }
                            let src = (ci * nx + sx as usize) * ny * nz + sy as usize * nz;
                            match dz {
                                0 => {
                                    cs[seg] = F::zero();
                                    cs[seg + 1..seg + nz]
                                        .copy_from_slice(&xs[src..src + nz - 1]);
                                }
                                1 => {
                                    cs[seg..seg + nz].copy_from_slice(&xs[src..src + nz]);
                                }
                                _ => {
                                    cs[seg..seg + nz - 1]
                                        .copy_from_slice(&xs[src + 1..src + nz]);
                                    cs[seg + nz - 1] = F::zero();
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the column gradients back onto the input gradient.
fn col2im_add<F: Scalar>(dcols: &Array2<F>, x0: usize, x1: usize, dx_acc: &mut Feat<F>) {
    let (cin, nx, ny, nz) = dx_acc.dim();
    let chunk = (x1 - x0) * ny * nz;
    debug_assert_eq!(dcols.dim(), (cin * 27, chunk));
    let ds = dcols.as_slice().expect("cols buffer is standard layout");
    let xs = dx_acc.as_slice_mut().expect("grad buffer is standard layout");

    for ci in 0..cin {
        for dx in 0..3usize {
            for dy in 0..3usize {
                for dz in 0..3usize {
                    let row = ci * 27 + dx * 9 + dy * 3 + dz;
                    let row_base = row * chunk;
                    for xo in x0..x1 {
                        let sx = xo as isize + dx as isize - 1;
                        if sx < 0 || sx >= nx as isize {
                            continue;
                        }
                        let seg_x = row_base + (xo - x0) * ny * nz;
                        for yo in 0..ny {
                            let sy = yo as isize + dy as isize - 1;
                            if sy < 0 || sy >= ny as isize {
                                continue;
                            }
                            let seg = seg_x + yo * nz;
                            let dst = (ci * nx + sx as usize) * ny * nz + sy as usize * nz;
                            match dz {
                                0 => {
                                    for i in 0..nz - 1 {
                                        xs[dst + i] = xs[dst + i] + ds[seg + 1 + i];
                                    }
                                }
                                1 => {
                                    for i in 0..nz {
                                        xs[dst + i] = xs[dst + i] + ds[seg + i];
                                    }
                                }
                                _ => {
                                    for i in 0..nz - 1 {
                                        xs[dst + 1 + i] = xs[dst + 1 + i] + ds[seg + i];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Strided 2D matrix view of the x-chunk `[c, x0..x1, :, :]` of a feature map.
fn chunk_matrix<F: Scalar>(feat: &Feat<F>, x0: usize, x1: usize) -> ArrayView2<'_, F> {
    let (c, nx, ny, nz) = feat.dim();
    let len = (x1 - x0) * ny * nz;
    let slice = feat.as_slice().expect("standard layout");
    ArrayView2::from_shape(
        (c, len).strides((nx * ny * nz, 1)),
        &slice[x0 * ny * nz..],
    )
    .expect("chunk view in bounds")
}

fn chunk_matrix_mut<F: Scalar>(feat: &mut Feat<F>, x0: usize, x1: usize) -> ArrayViewMut2<'_, F> {
    let (c, nx, ny, nz) = feat.dim();
    let len = (x1 - x0) * ny * nz;
    let slice = feat.as_slice_mut().expect("standard layout");
    ArrayViewMut2::from_shape(
        (c, len).strides((nx * ny * nz, 1)),
        &mut slice[x0 * ny * nz..],
    )
    .expect("chunk view in bounds")
}

/// 3x3x3 convolution with zero padding. Weights are `[cout, cin*27]`, the
/// column order matching [`im2col`].
pub fn conv3_fwd<F: Scalar>(x: &Feat<F>, w: ArrayView2<F>, b: ArrayView1<F>) -> Feat<F> {
    let (cin, nx, ny, nz) = x.dim();
    let cout = w.nrows();
    debug_assert_eq!(w.ncols(), cin * 27);
    let mut y = Feat::zeros((cout, nx, ny, nz));
    let step = chunk_x_len(cin, nx, ny, nz);
    let mut x0 = 0;
    while x0 < nx {
        let x1 = (x0 + step).min(nx);
        let len = (x1 - x0) * ny * nz;
        let mut cols = Array2::<F>::zeros((cin * 27, len));
        im2col(x, x0, x1, &mut cols);
        let mut y_mat = chunk_matrix_mut(&mut y, x0, x1);
        general_mat_mul(F::one(), &w, &cols.view(), F::zero(), &mut y_mat);
        for co in 0..cout {
            let bias = b[co];
            y_mat.row_mut(co).mapv_inplace(|v| v + bias);
        }
        x0 = x1;
    }
    y
}

/// Backward pass of [`conv3_fwd`]: accumulates weight/bias gradients and
/// optionally returns the input gradient.
pub fn conv3_bwd<F: Scalar>(
    x: &Feat<F>,
    w: ArrayView2<F>,
    dy: &Feat<F>,
    mut dw: ArrayViewMut2<F>,
    mut db: ArrayViewMut1<F>,
    need_dx: bool,
) -> Option<Feat<F>> {
    let (cin, nx, ny, nz) = x.dim();
    let cout = dy.dim().0;
    debug_assert_eq!(dy.dim(), (cout, nx, ny, nz));

    for co in 0..cout {
        let mut acc = F::zero();
        for v in dy.index_axis(ndarray::Axis(0), co).iter() {
            acc = acc + *v;
        }
        db[co] = db[co] + acc;
    }

    let step = chunk_x_len(cin, nx, ny, nz);
    let mut dx = need_dx.then(|| Feat::zeros((cin, nx, ny, nz)));
    let mut x0 = 0;
    while x0 < nx {
        let x1 = (x0 + step).min(nx);
        let len = (x1 - x0) * ny * nz;
        let mut cols = Array2::<F>::zeros((cin * 27, len));
        im2col(x, x0, x1, &mut cols);
        let dy_mat = chunk_matrix(dy, x0, x1);
        general_mat_mul(F::one(), &dy_mat, &cols.t(), F::one(), &mut dw);
        if let Some(dx_acc) = dx.as_mut() {
            let mut dcols = Array2::<F>::zeros((cin * 27, len));
            general_mat_mul(F::one(), &w.t(), &dy_mat, F::zero(), &mut dcols.view_mut());
            col2im_add(&dcols, x0, x1, dx_acc);
        }
        x0 = x1;
    }
    dx
}

/// 1x1x1 convolution (channel mixing). Weights are `[cout, cin]`.
pub fn conv1_fwd<F: Scalar>(x: &Feat<F>, w: ArrayView2<F>, b: ArrayView1<F>) -> Feat<F> {
    let (cin, nx, ny, nz) = x.dim();
    let cout = w.nrows();
    let n = nx * ny * nz;
    let x_mat = chunk_matrix(x, 0, nx);
    debug_assert_eq!(x_mat.dim(), (cin, n));
    let mut y = Feat::zeros((cout, nx, ny, nz));
    {
        let mut y_mat = chunk_matrix_mut(&mut y, 0, nx);
        general_mat_mul(F::one(), &w, &x_mat, F::zero(), &mut y_mat);
        for co in 0..cout {
            let bias = b[co];
            y_mat.row_mut(co).mapv_inplace(|v| v + bias);
        }
    }
    y
}

/// Backward pass of [`conv1_fwd`].
pub fn conv1_bwd<F: Scalar>(
    x: &Feat<F>,
    w: ArrayView2<F>,
    dy: &Feat<F>,
    mut dw: ArrayViewMut2<F>,
    mut db: ArrayViewMut1<F>,
    need_dx: bool,
) -> Option<Feat<F>> {
    let (cin, nx, ny, nz) = x.dim();
    let cout = dy.dim().0;
    for co in 0..cout {
        let mut acc = F::zero();
        for v in dy.index_axis(ndarray::Axis(0), co).iter() {
            acc = acc + *v;
        }
        db[co] = db[co] + acc;
    }
    let x_mat = chunk_matrix(x, 0, nx);
    let dy_mat = chunk_matrix(dy, 0, nx);
    general_mat_mul(F::one(), &dy_mat, &x_mat.t(), F::one(), &mut dw);
    if need_dx {
        let mut dx = Feat::zeros((cin, nx, ny, nz));
        {
            let mut dx_mat = chunk_matrix_mut(&mut dx, 0, nx);
            general_mat_mul(F::one(), &w.t(), &dy_mat, F::zero(), &mut dx_mat);
        }
        Some(dx)
    } else {
        None
    }
}

/// ReLU; the mask records which activations were positive.
pub fn relu_fwd<F: Scalar>(x: &Feat<F>) -> (Feat<F>, Vec<bool>) {
    let mut mask = Vec::with_capacity(x.len());
    let y = x.mapv(|v| {
        let keep = v > F::zero();
        mask.push(keep);
        if keep {
            v
        } else {
            F::zero()
        }
    });
    (y, mask)
}

/// In-place ReLU backward: zero the gradient wherever the activation was
/// clamped.
pub fn relu_bwd_inplace<F: Scalar>(dy: &mut Feat<F>, mask: &[bool]) {
    debug_assert_eq!(dy.len(), mask.len());
    for (g, &keep) in dy.iter_mut().zip(mask.iter()) {
        if !keep {
            *g = F::zero();
        }
    }
}

/// Cached normalization state for the backward pass.
pub struct GnCache<F> {
    pub xhat: Feat<F>,
    pub inv_std: Vec<F>,
}

/// Group normalization over `groups` channel groups with per-channel affine
/// scale and shift. Statistics accumulate in f64 for stable, reproducible
/// sums.
pub fn group_norm_fwd<F: Scalar>(
    x: &Feat<F>,
    gamma: ArrayView1<F>,
    beta: ArrayView1<F>,
    groups: usize,
    eps: f64,
) -> (Feat<F>, GnCache<F>) {
    let (c, nx, ny, nz) = x.dim();
    debug_assert_eq!(c % groups, 0, "channels divisible by groups");
    let gs = c / groups;
    let n = nx * ny * nz;
    let m = (gs * n) as f64;
    let xs = x.as_slice().expect("standard layout");

    let mut xhat = Feat::zeros((c, nx, ny, nz));
    let mut y = Feat::zeros((c, nx, ny, nz));
    let mut inv_std = Vec::with_capacity(groups);
    {
        let xh = xhat.as_slice_mut().unwrap();
        let ys = y.as_slice_mut().unwrap();
        for g in 0..groups {
            let lo = g * gs * n;
            let hi = (g + 1) * gs * n;
            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            for &v in &xs[lo..hi] {
                let v = v.as_f64();
                sum += v;
                sum_sq += v * v;
            }
            let mean = sum / m;
            let var = (sum_sq / m - mean * mean).max(0.0);
            let istd = 1.0 / (var + eps).sqrt();
            inv_std.push(F::from_f64(istd));
            for ci in 0..gs {
                let ch = g * gs + ci;
                let gam = gamma[ch].as_f64();
                let bet = beta[ch].as_f64();
                let base = lo + ci * n;
                for i in 0..n {
                    let h = (xs[base + i].as_f64() - mean) * istd;
                    xh[base + i] = F::from_f64(h);
                    ys[base + i] = F::from_f64(gam * h + bet);
                }
            }
        }
    }
    (y, GnCache { xhat, inv_std })
}

/// Backward pass of [`group_norm_fwd`]; returns the input gradient and
/// accumulates per-channel affine gradients.
pub fn group_norm_bwd<F: Scalar>(
    dy: &Feat<F>,
    cache: &GnCache<F>,
    gamma: ArrayView1<F>,
    mut dgamma: ArrayViewMut1<F>,
    mut dbeta: ArrayViewMut1<F>,
    groups: usize,
) -> Feat<F> {
    let (c, nx, ny, nz) = dy.dim();
    let gs = c / groups;
    let n = nx * ny * nz;
    let m = (gs * n) as f64;
    let dys = dy.as_slice().unwrap();
    let xh = cache.xhat.as_slice().unwrap();

    let mut dx = Feat::zeros((c, nx, ny, nz));
    let dxs = dx.as_slice_mut().unwrap();
    for g in 0..groups {
        let istd = cache.inv_std[g].as_f64();
        // Per-group sums of dxhat and dxhat * xhat, in f64.
        let mut s1 = 0.0f64;
        let mut s2 = 0.0f64;
        for ci in 0..gs {
            let ch = g * gs + ci;
            let gam = gamma[ch].as_f64();
            let base = ch * n;
            let mut dg = 0.0f64;
            let mut dbt = 0.0f64;
            for i in 0..n {
                let d = dys[base + i].as_f64();
                let h = xh[base + i].as_f64();
                dg += d * h;
                dbt += d;
                let dxh = d * gam;
                s1 += dxh;
                s2 += dxh * h;
            }
            dgamma[ch] = dgamma[ch] + F::from_f64(dg);
            dbeta[ch] = dbeta[ch] + F::from_f64(dbt);
        }
        let mean_s1 = s1 / m;
        let mean_s2 = s2 / m;
        for ci in 0..gs {
            let ch = g * gs + ci;
            let gam = gamma[ch].as_f64();
            let base = ch * n;
            for i in 0..n {
                let dxh = dys[base + i].as_f64() * gam;
                let h = xh[base + i].as_f64();
                dxs[base + i] = F::from_f64(istd * (dxh - mean_s1 - h * mean_s2));
            }
        }
    }
    dx
}

/// 2x2x2 max pooling with stride 2. Ties resolve to the first candidate in
/// scan order, recorded in the returned index map for the backward pass.
pub fn maxpool_fwd<F: Scalar>(x: &Feat<F>) -> (Feat<F>, Vec<u8>) {
    let (c, nx, ny, nz) = x.dim();
    debug_assert!(
        nx % 2 == 0 && ny % 2 == 0 && nz % 2 == 0,
        "pooling needs even spatial dims"
    );
    let (ox, oy, oz) = (nx / 2, ny / 2, nz / 2);
    let mut y = Feat::zeros((c, ox, oy, oz));
    let mut idx = vec![0u8; c * ox * oy * oz];
    let mut flat = 0usize;
    for ci in 0..c {
        for i in 0..ox {
            for j in 0..oy {
                for k in 0..oz {
                    let mut best = F::neg_infinity();
                    let mut best_code = 0u8;
                    for (code, (dx, dy, dz)) in offsets2().into_iter().enumerate() {
                        let v = x[[ci, 2 * i + dx, 2 * j + dy, 2 * k + dz]];
                        if v > best {
                            best = v;
                            best_code = code as u8;
                        }
                    }
                    y[[ci, i, j, k]] = best;
                    idx[flat] = best_code;
                    flat += 1;
                }
            }
        }
    }
    (y, idx)
}

fn offsets2() -> [(usize, usize, usize); 8] {
    [
        (0, 0, 0),
        (0, 0, 1),
        (0, 1, 0),
        (0, 1, 1),
        (1, 0, 0),
        (1, 0, 1),
        (1, 1, 0),
        (1, 1, 1),
    ]
}

/// Backward pass of [`maxpool_fwd`].
pub fn maxpool_bwd<F: Scalar>(dy: &Feat<F>, idx: &[u8], in_shape: (usize, usize, usize, usize)) -> Feat<F> {
    let (c, ox, oy, oz) = dy.dim();
    let mut dx = Feat::zeros(in_shape);
    let offs = offsets2();
    let mut flat = 0usize;
    for ci in 0..c {
        for i in 0..ox {
            for j in 0..oy {
                for k in 0..oz {
                    let (dxo, dyo, dzo) = offs[idx[flat] as usize];
                    dx[[ci, 2 * i + dxo, 2 * j + dyo, 2 * k + dzo]] =
                        dx[[ci, 2 * i + dxo, 2 * j + dyo, 2 * k + dzo]] + dy[[ci, i, j, k]];
                    flat += 1;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbor x2 upsampling.
pub fn upsample2_fwd<F: Scalar>(x: &Feat<F>) -> Feat<F> {
    let (c, nx, ny, nz) = x.dim();
    Feat::from_shape_fn((c, 2 * nx, 2 * ny, 2 * nz), |(ci, i, j, k)| {
        x[[ci, i / 2, j / 2, k / 2]]
    })
}

/// Backward pass of [`upsample2_fwd`]: sum over each 2x2x2 child block.
pub fn upsample2_bwd<F: Scalar>(dy: &Feat<F>) -> Feat<F> {
    let (c, nx, ny, nz) = dy.dim();
    let (ox, oy, oz) = (nx / 2, ny / 2, nz / 2);
    let mut dx = Feat::zeros((c, ox, oy, oz));
    for ci in 0..c {
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    dx[[ci, i / 2, j / 2, k / 2]] =
                        dx[[ci, i / 2, j / 2, k / 2]] + dy[[ci, i, j, k]];
                }
            }
        }
    }
    dx
}

/// Concatenate along the channel axis.
pub fn concat_channels<F: Scalar>(a: &Feat<F>, b: &Feat<F>) -> Feat<F> {
    ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()])
        .expect("matching spatial dims")
        .as_standard_layout()
        .to_owned()
}

/// Split a channel-concatenated gradient back into its two parts.
pub fn split_channels<F: Scalar>(dy: &Feat<F>, first: usize) -> (Feat<F>, Feat<F>) {
    let a = dy
        .slice(ndarray::s![..first, .., .., ..])
        .as_standard_layout()
        .to_owned();
    let b = dy
        .slice(ndarray::s![first.., .., .., ..])
        .as_standard_layout()
        .to_owned();
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use ndarray::{Array1, Array2};
    use rand::Rng;

    fn rand_feat(rng: &mut impl Rng, dim: (usize, usize, usize, usize)) -> Feat<f64> {
        Feat::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0))
    }

    /// Naive 3x3x3 convolution used as a forward oracle for the GEMM path.
    fn conv3_naive(x: &Feat<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Feat<f64> {
        let (cin, nx, ny, nz) = x.dim();
        let cout = w.nrows();
        let mut y = Feat::zeros((cout, nx, ny, nz));
        for co in 0..cout {
            for i in 0..nx {
                for j in 0..ny {
                    for k in 0..nz {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for dx in 0..3isize {
                                for dy in 0..3isize {
                                    for dz in 0..3isize {
                                        let (sx, sy, sz) = (
                                            i as isize + dx - 1,
                                            j as isize + dy - 1,
                                            k as isize + dz - 1,
                                        );
                                        if sx < 0
                                            || sy < 0
                                            || sz < 0
                                            || sx >= nx as isize
                                            || sy >= ny as isize
                                            || sz >= nz as isize
                                        {
                                            continue;
                                        }
                                        let widx =
                                            ci * 27 + (dx * 9 + dy * 3 + dz) as usize;
                                        acc += w[[co, widx]]
                                            * x[[ci, sx as usize, sy as usize, sz as usize]];
                                    }
                                }
                            }
                        }
                        y[[co, i, j, k]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv3_matches_naive_forward() {
        let mut rng = rng_from(1, &[]);
        for &dim in &[(1, 3, 4, 5), (2, 5, 3, 6), (3, 8, 2, 2)] {
            let x = rand_feat(&mut rng, dim);
            let cout = 2;
            let w = Array2::from_shape_fn((cout, dim.0 * 27), |_| rng.gen_range(-1.0..1.0));
            let b = Array1::from_shape_fn(cout, |_| rng.gen_range(-1.0..1.0));
            let fast = conv3_fwd(&x, w.view(), b.view());
            let slow = conv3_naive(&x, &w, &b);
            for (a, s) in fast.iter().zip(slow.iter()) {
                assert!((a - s).abs() < 1e-10, "{a} vs {s}");
            }
        }
    }

    /// Scalar loss sum(R . y) with random fixed R; its dy is R itself, so
    /// op gradients can be checked against central finite differences.
    fn fd_check<FwdF, BwdF>(
        theta: &mut [f64],
        fwd: FwdF,
        bwd: BwdF,
        tol: f64,
    ) where
        FwdF: Fn(&[f64]) -> f64,
        BwdF: Fn(&[f64]) -> Vec<f64>,
    {
        let analytic = bwd(theta);
        assert_eq!(analytic.len(), theta.len());
        let h = 1e-5;
        for i in 0..theta.len() {
            let orig = theta[i];
            theta[i] = orig + h;
            let plus = fwd(theta);
            theta[i] = orig - h;
            let minus = fwd(theta);
            theta[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic[i] - numeric).abs() / denom < tol,
                "component {i}: analytic {} vs numeric {numeric}",
                analytic[i]
            );
        }
    }

    #[test]
    fn conv3_gradients_match_fd() {
        let mut rng = rng_from(2, &[]);
        let dim = (2, 4, 3, 4);
        let x0 = rand_feat(&mut rng, dim);
        let cout = 2;
        let w0 = Array2::from_shape_fn((cout, dim.0 * 27), |_| rng.gen_range(-0.5..0.5));
        let b0 = Array1::from_shape_fn(cout, |_| rng.gen_range(-0.5..0.5));
        let r = rand_feat(&mut rng, (cout, dim.1, dim.2, dim.3));

        // Pack (x, w, b) into one parameter vector.
        let nx = x0.len();
        let nw = w0.len();
        let mut theta: Vec<f64> = x0
            .iter()
            .chain(w0.iter())
            .chain(b0.iter())
            .copied()
            .collect();
        let unpack = |t: &[f64]| {
            let x = Feat::from_shape_vec(dim, t[..nx].to_vec()).unwrap();
            let w = Array2::from_shape_vec((cout, dim.0 * 27), t[nx..nx + nw].to_vec()).unwrap();
            let b = Array1::from_vec(t[nx + nw..].to_vec());
            (x, w, b)
        };
        let r2 = r.clone();
        let fwd = move |t: &[f64]| {
            let (x, w, b) = unpack(t);
            let y = conv3_fwd(&x, w.view(), b.view());
            y.iter().zip(r2.iter()).map(|(a, b)| a * b).sum()
        };
        let r3 = r.clone();
        let bwd = move |t: &[f64]| {
            let (x, w, b) = unpack(t);
            let mut dw = Array2::<f64>::zeros(w.raw_dim());
            let mut db = Array1::<f64>::zeros(b.raw_dim());
            let dx = conv3_bwd(&x, w.view(), &r3, dw.view_mut(), db.view_mut(), true).unwrap();
            dx.iter()
                .chain(dw.iter())
                .chain(db.iter())
                .copied()
                .collect()
        };
        fd_check(&mut theta, fwd, bwd, 1e-6);
    }

    #[test]
    fn conv1_gradients_match_fd() {
        let mut rng = rng_from(3, &[]);
        let dim = (3, 3, 2, 4);
        let x0 = rand_feat(&mut rng, dim);
        let cout = 2;
        let w0 = Array2::from_shape_fn((cout, dim.0), |_| rng.gen_range(-0.5..0.5));
        let b0 = Array1::from_shape_fn(cout, |_| rng.gen_range(-0.5..0.5));
        let r = rand_feat(&mut rng, (cout, dim.1, dim.2, dim.3));

        let nx = x0.len();
        let nw = w0.len();
        let mut theta: Vec<f64> = x0
            .iter()
            .chain(w0.iter())
            .chain(b0.iter())
            .copied()
            .collect();
        let unpack = move |t: &[f64]| {
            let x = Feat::from_shape_vec(dim, t[..nx].to_vec()).unwrap();
            let w = Array2::from_shape_vec((cout, dim.0), t[nx..nx + nw].to_vec()).unwrap();
            let b = Array1::from_vec(t[nx + nw..].to_vec());
            (x, w, b)
        };
        let r2 = r.clone();
        let fwd = move |t: &[f64]| {
            let (x, w, b) = unpack(t);
            let y = conv1_fwd(&x, w.view(), b.view());
            y.iter().zip(r2.iter()).map(|(a, b)| a * b).sum()
        };
        let bwd = move |t: &[f64]| {
            let (x, w, b) = unpack(t);
            let mut dw = Array2::<f64>::zeros(w.raw_dim());
            let mut db = Array1::<f64>::zeros(b.raw_dim());
            let dx = conv1_bwd(&x, w.view(), &r, dw.view_mut(), db.view_mut(), true).unwrap();
            dx.iter()
                .chain(dw.iter())
                .chain(db.iter())
                .copied()
                .collect()
        };
        fd_check(&mut theta, fwd, bwd, 1e-6);
    }

    #[test]
    fn group_norm_gradients_match_fd() {
        let mut rng = rng_from(4, &[]);
        let dim = (4, 2, 3, 2);
        let groups = 2;
        let x0 = rand_feat(&mut rng, dim);
        let g0 = Array1::from_shape_fn(dim.0, |_| rng.gen_range(0.5..1.5));
        let b0 = Array1::from_shape_fn(dim.0, |_| rng.gen_range(-0.5..0.5));
        let r = rand_feat(&mut rng, dim);

        let nx = x0.len();
        let ng = g0.len();
        let mut theta: Vec<f64> = x0
            .iter()
            .chain(g0.iter())
            .chain(b0.iter())
            .copied()
            .collect();
        let unpack = move |t: &[f64]| {
            let x = Feat::from_shape_vec(dim, t[..nx].to_vec()).unwrap();
            let g = Array1::from_vec(t[nx..nx + ng].to_vec());
            let b = Array1::from_vec(t[nx + ng..].to_vec());
            (x, g, b)
        };
        let r2 = r.clone();
        let fwd = move |t: &[f64]| {
            let (x, g, b) = unpack(t);
            let (y, _) = group_norm_fwd(&x, g.view(), b.view(), groups, 1e-5);
            y.iter().zip(r2.iter()).map(|(a, b)| a * b).sum()
        };
        let bwd = move |t: &[f64]| {
            let (x, g, b) = unpack(t);
            let (_, cache) = group_norm_fwd(&x, g.view(), b.view(), groups, 1e-5);
            let mut dg = Array1::<f64>::zeros(ng);
            let mut db = Array1::<f64>::zeros(ng);
            let dx = group_norm_bwd(&r, &cache, g.view(), dg.view_mut(), db.view_mut(), groups);
            dx.iter()
                .chain(dg.iter())
                .chain(db.iter())
                .copied()
                .collect()
        };
        fd_check(&mut theta, fwd, bwd, 1e-4);
    }

    #[test]
    fn relu_masks_gradient() {
        let x = Feat::from_shape_vec((1, 1, 1, 4), vec![-1.0, 2.0, -3.0, 4.0]).unwrap();
        let (y, mask) = relu_fwd(&x);
        assert_eq!(y.as_slice().unwrap(), &[0.0, 2.0, 0.0, 4.0]);
        let mut dy = Feat::from_shape_vec((1, 1, 1, 4), vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        relu_bwd_inplace(&mut dy, &mask);
        assert_eq!(dy.as_slice().unwrap(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_and_upsample_round_trip_shapes() {
        let mut rng = rng_from(5, &[]);
        let x = rand_feat(&mut rng, (2, 4, 6, 2));
        let (y, idx) = maxpool_fwd(&x);
        assert_eq!(y.dim(), (2, 2, 3, 1));

        // Pool backward routes gradient to the argmax voxel only.
        let dy = rand_feat(&mut rng, (2, 2, 3, 1));
        let dx = maxpool_bwd(&dy, &idx, x.dim());
        assert_eq!(dx.dim(), x.dim());
        let total_in: f64 = dy.iter().sum();
        let total_out: f64 = dx.iter().sum();
        assert!((total_in - total_out).abs() < 1e-12);

        let up = upsample2_fwd(&y);
        assert_eq!(up.dim(), (2, 4, 6, 2));
        let dup = upsample2_bwd(&up);
        for (a, b) in dup.iter().zip(y.iter()) {
            assert!((a - b * 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_gradient_matches_fd() {
        let mut rng = rng_from(6, &[]);
        let dim = (1, 2, 2, 4);
        let x0 = rand_feat(&mut rng, dim);
        let r = rand_feat(&mut rng, (1, 1, 1, 2));
        let mut theta: Vec<f64> = x0.iter().copied().collect();
        let r2 = r.clone();
        let fwd = move |t: &[f64]| {
            let x = Feat::from_shape_vec(dim, t.to_vec()).unwrap();
            let (y, _) = maxpool_fwd(&x);
            y.iter().zip(r2.iter()).map(|(a, b)| a * b).sum()
        };
        let bwd = move |t: &[f64]| {
            let x = Feat::from_shape_vec(dim, t.to_vec()).unwrap();
            let (_, idx) = maxpool_fwd(&x);
            let dx = maxpool_bwd(&r, &idx, dim);
            dx.iter().copied().collect()
        };
        fd_check(&mut theta, fwd, bwd, 1e-6);
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = rng_from(7, &[]);
        let a = rand_feat(&mut rng, (2, 3, 2, 2));
        let b = rand_feat(&mut rng, (3, 3, 2, 2));
        let cat = concat_channels(&a, &b);
        assert_eq!(cat.dim(), (5, 3, 2, 2));
        let (ra, rb) = split_channels(&cat, 2);
        assert_eq!(ra, a);
        assert_eq!(rb, b);
    }
}
