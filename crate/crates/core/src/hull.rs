//! Incremental 3D convex hull (beneath-beyond).
//!
//! Visibility uses the orientation determinant divided by the face area and
//! the point-set diameter, so the tolerance is scale free.

use std::collections::HashSet;

use thiserror::Error;

use crate::mesh::Vec3;
use crate::trimesh::TriMesh;

/// Normalized orientation tolerance.
pub const HULL_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum HullError {
    #[error("convex hull needs at least 4 non-coplanar points")]
    DegenerateInput,
}

/// Outward-oriented convex hull of a point cloud.
pub fn convex_hull(points: &[Vec3]) -> Result<TriMesh, HullError> {
    let pts = dedup(points);
    if pts.len() < 4 {
        return Err(HullError::DegenerateInput);
    }
    let scale = diameter_bound(&pts);
    if scale == 0.0 {
        return Err(HullError::DegenerateInput);
    }
    let [a, b, c, d] = initial_simplex(&pts, scale)?;

    let mut faces: Vec<[usize; 3]> = vec![[a, b, c], [a, c, d], [a, d, b], [b, d, c]];
    // orient so the fourth point of the simplex lies behind every face
    let inner = (pts[a] + pts[b] + pts[c] + pts[d]) / 4.0;
    for f in &mut faces {
        if plane_dist(&pts, f, &inner) > 0.0 {
            f.swap(1, 2);
        }
    }

    for p in 0..pts.len() {
        if [a, b, c, d].contains(&p) {
            continue;
        }
        let q = pts[p];
        let visible: Vec<bool> = faces.iter().map(|f| plane_dist(&pts, f, &q) > HULL_EPS * scale).collect();
        if !visible.iter().any(|&v| v) {
            continue;
        }
        let mut edges = HashSet::new();
        for (f, _) in faces.iter().zip(&visible).filter(|(_, &v)| v) {
            for k in 0..3 {
                edges.insert((f[k], f[(k + 1) % 3]));
            }
        }
        let mut horizon = Vec::new();
        for (f, _) in faces.iter().zip(&visible).filter(|(_, &v)| v) {
            for k in 0..3 {
                let e = (f[k], f[(k + 1) % 3]);
                if !edges.contains(&(e.1, e.0)) {
                    horizon.push(e);
                }
            }
        }
        let mut kept: Vec<[usize; 3]> =
            faces.iter().zip(&visible).filter(|(_, &v)| !v).map(|(f, _)| *f).collect();
        kept.extend(horizon.into_iter().map(|(u, v)| [u, v, p]));
        faces = kept;
    }

    // compact to the hull vertices, keeping input order
    let mut used: Vec<usize> = faces.iter().flatten().copied().collect();
    used.sort_unstable();
    used.dedup();
    let mut remap = vec![usize::MAX; pts.len()];
    for (i, &v) in used.iter().enumerate() {
        remap[v] = i;
    }
    Ok(TriMesh::new(
        used.iter().map(|&v| pts[v]).collect(),
        faces.iter().map(|f| [remap[f[0]], remap[f[1]], remap[f[2]]]).collect(),
    ))
}

fn dedup(points: &[Vec3]) -> Vec<Vec3> {
    let mut seen = HashSet::new();
    points
        .iter()
        .filter(|p| seen.insert([p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]))
        .copied()
        .collect()
}

fn diameter_bound(pts: &[Vec3]) -> f64 {
    let mut lo = pts[0];
    let mut hi = pts[0];
    for p in pts {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).norm()
}

/// Signed distance of `q` above the plane of face `f`.
fn plane_dist(pts: &[Vec3], f: &[usize; 3], q: &Vec3) -> f64 {
    let (a, b, c) = (pts[f[0]], pts[f[1]], pts[f[2]]);
    let n = (b - a).cross(&(c - a));
    let len = n.norm();
    if len == 0.0 {
        return 0.0;
    }
    n.dot(&(q - a)) / len
}

fn initial_simplex(pts: &[Vec3], scale: f64) -> Result<[usize; 4], HullError> {
    let tol = HULL_EPS * scale;
    let a = 0;
    let b = argmax(pts, |p| (p - pts[a]).norm());
    let ab = pts[b] - pts[a];
    if ab.norm() <= tol {
        return Err(HullError::DegenerateInput);
    }
    let c = argmax(pts, |p| ab.cross(&(p - pts[a])).norm() / ab.norm());
    if ab.cross(&(pts[c] - pts[a])).norm() / ab.norm() <= tol {
        return Err(HullError::DegenerateInput);
    }
    let face = [a, b, c];
    let d = argmax(pts, |p| plane_dist(pts, &face, p).abs());
    if plane_dist(pts, &face, &pts[d]).abs() <= tol {
        return Err(HullError::DegenerateInput);
    }
    Ok([a, b, c, d])
}

fn argmax(pts: &[Vec3], f: impl Fn(&Vec3) -> f64) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, p) in pts.iter().enumerate() {
        let v = f(p);
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}
