//! Topology-preserving 3D curve thinning and discrete-topology helpers.
//!
//! The thinning peels border voxels over six directional subiterations.
//! Within a subiteration candidates are deleted sequentially in raster
//! order, each re-checked immediately before removal, and a voxel is only
//! removed if it is simple (deletion preserves both foreground 26-topology
//! and background 6-topology) and not a curve endpoint. Sequential deletion
//! of simple points preserves components, tunnels and cavities exactly.

use ndarray::Array3;

use crate::edt::edt;

/// Offsets of the 26-neighborhood.
fn offsets26() -> Vec<[isize; 3]> {
    let mut v = Vec::with_capacity(26);
    for dx in -1isize..=1 {
        for dy in -1isize..=1 {
            for dz in -1isize..=1 {
                if dx != 0 || dy != 0 || dz != 0 {
                    v.push([dx, dy, dz]);
                }
            }
        }
    }
    v
}

#[inline]
fn block_index(dx: isize, dy: isize, dz: isize) -> usize {
    ((dx + 1) * 9 + (dy + 1) * 3 + (dz + 1)) as usize
}

/// Snapshot the 3x3x3 neighborhood of `p` (outside the volume reads as
/// background). Index 13 is the center.
fn neighborhood(mask: &Array3<bool>, p: [usize; 3]) -> [bool; 27] {
    let (nx, ny, nz) = mask.dim();
    let mut n = [false; 27];
    for dx in -1isize..=1 {
        for dy in -1isize..=1 {
            for dz in -1isize..=1 {
                let (x, y, z) = (
                    p[0] as isize + dx,
                    p[1] as isize + dy,
                    p[2] as isize + dz,
                );
                let inside = x >= 0
                    && y >= 0
                    && z >= 0
                    && (x as usize) < nx
                    && (y as usize) < ny
                    && (z as usize) < nz;
                n[block_index(dx, dy, dz)] =
                    inside && mask[[x as usize, y as usize, z as usize]];
            }
        }
    }
    n
}

fn coords_of(i: usize) -> [isize; 3] {
    [
        (i / 9) as isize - 1,
        ((i / 3) % 3) as isize - 1,
        (i % 3) as isize - 1,
    ]
}

/// Number of 26-connected components of foreground cells in the punctured
/// neighborhood (all such cells touch the center, so this is the C* count).
fn fg_components_26(n: &[bool; 27]) -> usize {
    let mut seen = [false; 27];
    let mut components = 0;
    for start in 0..27 {
        if start == 13 || !n[start] || seen[start] {
            continue;
        }
        components += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let ci = coords_of(i);
            for j in 0..27 {
                if j == 13 || seen[j] || !n[j] {
                    continue;
                }
                let cj = coords_of(j);
                let adj = (ci[0] - cj[0]).abs() <= 1
                    && (ci[1] - cj[1]).abs() <= 1
                    && (ci[2] - cj[2]).abs() <= 1;
                if adj {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    components
}

/// Number of 6-connected components of background cells within the
/// 18-neighborhood that contain a face neighbor of the center (the C-bar
/// count of the simple-point characterization).
fn bg_components_6(n: &[bool; 27]) -> usize {
    let in_n18 = |i: usize| -> bool {
        if i == 13 {
            return false;
        }
        let c = coords_of(i);
        c[0].abs() + c[1].abs() + c[2].abs() <= 2 && c.iter().any(|&v| v == 0)
    };
    let is_face = |i: usize| -> bool {
        let c = coords_of(i);
        c[0].abs() + c[1].abs() + c[2].abs() == 1
    };
    let mut seen = [false; 27];
    let mut components = 0;
    for start in 0..27 {
        if !in_n18(start) || n[start] || seen[start] || !is_face(start) {
            continue;
        }
        // Flood this background component through 6-adjacency inside N18.
        components += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let ci = coords_of(i);
            for j in 0..27 {
                if seen[j] || !in_n18(j) || n[j] {
                    continue;
                }
                let cj = coords_of(j);
                let manhattan = (ci[0] - cj[0]).abs() + (ci[1] - cj[1]).abs() + (ci[2] - cj[2]).abs();
                if manhattan == 1 {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    components
}

/// A foreground voxel is simple iff deleting it preserves local topology:
/// exactly one foreground 26-component in the punctured neighborhood and
/// exactly one background 6-component touching a face neighbor.
fn is_simple(n: &[bool; 27]) -> bool {
    fg_components_26(n) == 1 && bg_components_6(n) == 1
}

fn count_fg_neighbors(n: &[bool; 27]) -> usize {
    n.iter()
        .enumerate()
        .filter(|&(i, &v)| i != 13 && v)
        .count()
}

/// Skeleton of a binary mask plus the inscribed-sphere diameters along it.
pub struct SkeletonResult {
    pub skeleton: Array3<bool>,
    /// 2 x EDT of the input mask, in mm, at skeleton voxels (0 elsewhere).
    pub diameters_mm: Array3<f64>,
}

/// Thin a binary mask to a topology-preserving curve skeleton and attach
/// vessel diameters (twice the distance-to-background of the input mask).
pub fn skeletonize(mask: &Array3<bool>, spacing: [f64; 3]) -> SkeletonResult {
    let mut img = mask.clone();
    let (nx, ny, nz) = img.dim();
    // Face directions: peel from +z, -z, -y, +y, -x, +x in fixed order.
    let directions: [[isize; 3]; 6] = [
        [0, 0, 1],
        [0, 0, -1],
        [0, -1, 0],
        [0, 1, 0],
        [-1, 0, 0],
        [1, 0, 0],
    ];

    let is_bg_at = |img: &Array3<bool>, x: isize, y: isize, z: isize| -> bool {
        if x < 0 || y < 0 || z < 0 {
            return true;
        }
        let (x, y, z) = (x as usize, y as usize, z as usize);
        if x >= nx || y >= ny || z >= nz {
            return true;
        }
        !img[[x, y, z]]
    };

    loop {
        let mut deleted_in_cycle = 0usize;
        for dir in directions {
            // Candidates: border voxels in this direction that currently
            // qualify. Raster order keeps the pass deterministic.
            let mut candidates = Vec::new();
            for ((x, y, z), &fg) in img.indexed_iter() {
                if !fg {
                    continue;
                }
                if is_bg_at(
                    &img,
                    x as isize + dir[0],
                    y as isize + dir[1],
                    z as isize + dir[2],
                ) {
                    candidates.push([x, y, z]);
                }
            }
            for p in candidates {
                if !img[[p[0], p[1], p[2]]] {
                    continue;
                }
                let n = neighborhood(&img, p);
                // Endpoints of curves are preserved so tubes thin to
                // centerlines instead of contracting to points.
                if count_fg_neighbors(&n) <= 1 {
                    continue;
                }
                if !is_simple(&n) {
                    continue;
                }
                img[[p[0], p[1], p[2]]] = false;
                deleted_in_cycle += 1;
            }
        }
        if deleted_in_cycle == 0 {
            break;
        }
    }

    let dist = edt(mask, spacing);
    let diameters_mm = Array3::from_shape_fn((nx, ny, nz), |idx| {
        if img[idx] {
            2.0 * dist[idx]
        } else {
            0.0
        }
    });
    SkeletonResult {
        skeleton: img,
        diameters_mm,
    }
}

/// Count 26-connected foreground components.
pub fn connected_components_26(mask: &Array3<bool>) -> usize {
    let (nx, ny, nz) = mask.dim();
    let mut seen = Array3::<bool>::from_elem((nx, ny, nz), false);
    let offs = offsets26();
    let mut components = 0;
    for ((x, y, z), &fg) in mask.indexed_iter() {
        if !fg || seen[[x, y, z]] {
            continue;
        }
        components += 1;
        let mut stack = vec![[x, y, z]];
        seen[[x, y, z]] = true;
        while let Some(p) = stack.pop() {
            for o in &offs {
                let (a, b, c) = (
                    p[0] as isize + o[0],
                    p[1] as isize + o[1],
                    p[2] as isize + o[2],
                );
                if a < 0 || b < 0 || c < 0 {
                    continue;
                }
                let (a, b, c) = (a as usize, b as usize, c as usize);
                if a >= nx || b >= ny || c >= nz || seen[[a, b, c]] || !mask[[a, b, c]] {
                    continue;
                }
                seen[[a, b, c]] = true;
                stack.push([a, b, c]);
            }
        }
    }
    components
}

/// Euler characteristic of the voxel union complex (vertices - edges +
/// faces - cubes). Topology-preserving thinning leaves this unchanged; a
/// ball gives 1, a solid torus 0.
pub fn euler_characteristic(mask: &Array3<bool>) -> i64 {
    let (nx, ny, nz) = mask.dim();
    let mut vertices = Array3::<bool>::from_elem((nx + 1, ny + 1, nz + 1), false);
    let mut edges_x = Array3::<bool>::from_elem((nx, ny + 1, nz + 1), false);
    let mut edges_y = Array3::<bool>::from_elem((nx + 1, ny, nz + 1), false);
    let mut edges_z = Array3::<bool>::from_elem((nx + 1, ny + 1, nz), false);
    let mut faces_xy = Array3::<bool>::from_elem((nx, ny, nz + 1), false);
    let mut faces_xz = Array3::<bool>::from_elem((nx, ny + 1, nz), false);
    let mut faces_yz = Array3::<bool>::from_elem((nx + 1, ny, nz), false);
    let mut cubes = 0i64;

    for ((x, y, z), &fg) in mask.indexed_iter() {
        if !fg {
            continue;
        }
        cubes += 1;
        for dx in 0..2 {
            for dy in 0..2 {
                for dz in 0..2 {
                    vertices[[x + dx, y + dy, z + dz]] = true;
                }
            }
        }
        for dy in 0..2 {
            for dz in 0..2 {
                edges_x[[x, y + dy, z + dz]] = true;
            }
        }
        for dx in 0..2 {
            for dz in 0..2 {
                edges_y[[x + dx, y, z + dz]] = true;
            }
        }
        for dx in 0..2 {
            for dy in 0..2 {
                edges_z[[x + dx, y + dy, z]] = true;
            }
        }
        for dz in 0..2 {
            faces_xy[[x, y, z + dz]] = true;
        }
        for dy in 0..2 {
            faces_xz[[x, y + dy, z]] = true;
        }
        for dx in 0..2 {
            faces_yz[[x + dx, y, z]] = true;
        }
    }

    let count = |a: &Array3<bool>| a.iter().filter(|&&v| v).count() as i64;
    let v = count(&vertices);
    let e = count(&edges_x) + count(&edges_y) + count(&edges_z);
    let f = count(&faces_xy) + count(&faces_xz) + count(&faces_yz);
    v - e + f - cubes
}

#[cfg(test)]
pub(crate) mod shapes {
    use super::*;

    /// Solid digital cylinder along z.
    pub fn cylinder(shape: (usize, usize, usize), radius: f64, len: usize) -> Array3<bool> {
        let cx = shape.0 as f64 / 2.0 - 0.5;
        let cy = shape.1 as f64 / 2.0 - 0.5;
        let z0 = (shape.2 - len) / 2;
        Array3::from_shape_fn(shape, |(x, y, z)| {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            (z0..z0 + len).contains(&z) && (dx * dx + dy * dy).sqrt() <= radius
        })
    }

    /// Solid torus in the xy-plane.
    pub fn torus(shape: (usize, usize, usize), major: f64, minor: f64) -> Array3<bool> {
        let cx = shape.0 as f64 / 2.0 - 0.5;
        let cy = shape.1 as f64 / 2.0 - 0.5;
        let cz = shape.2 as f64 / 2.0 - 0.5;
        Array3::from_shape_fn(shape, |(x, y, z)| {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let dz = z as f64 - cz;
            let ring = (dx * dx + dy * dy).sqrt() - major;
            (ring * ring + dz * dz).sqrt() <= minor
        })
    }

    /// Y-junction: a trunk along z splitting into two diagonal branches.
    pub fn y_junction(shape: (usize, usize, usize), radius: f64) -> Array3<bool> {
        let cx = shape.0 as f64 / 2.0 - 0.5;
        let cy = shape.1 as f64 / 2.0 - 0.5;
        let split = shape.2 as f64 / 2.0;
        Array3::from_shape_fn(shape, |(x, y, z)| {
            let xf = x as f64;
            let yf = y as f64;
            let zf = z as f64;
            let trunk = zf <= split && ((xf - cx).powi(2) + (yf - cy).powi(2)).sqrt() <= radius;
            let t = (zf - split).max(0.0);
            let left = zf > split
                && ((xf - (cx - 0.7 * t)).powi(2) + (yf - cy).powi(2)).sqrt() <= radius;
            let right = zf > split
                && ((xf - (cx + 0.7 * t)).powi(2) + (yf - cy).powi(2)).sqrt() <= radius;
            trunk || left || right
        })
    }
}
