//! Indexed triangle meshes: part surfaces, source surfaces and extracted
//! layers. Includes an AABB tree for closest-point and ray queries, and
//! OBJ / binary STL input and output.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mesh::{MeshError, Vec3};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Self {
        Self { vertices, triangles }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn corners(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Unnormalized normal, twice the area.
    pub fn raw_normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.corners(t);
        (b - a).cross(&(c - a))
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        0.5 * self.raw_normal(t).norm()
    }

    pub fn unit_normal(&self, t: usize) -> Vec3 {
        let n = self.raw_normal(t);
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vec3::zeros()
        }
    }

    pub fn centroid(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.corners(t);
        (a + b + c) / 3.0
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Signed enclosed volume (positive for an outward-wound closed surface).
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|&[a, b, c]| self.vertices[a].dot(&self.vertices[b].cross(&self.vertices[c])) / 6.0)
            .sum()
    }

    /// Concatenates meshes without welding.
    pub fn merged<'a>(parts: impl IntoIterator<Item = &'a TriMesh>) -> TriMesh {
        let mut out = TriMesh::default();
        for m in parts {
            let base = out.vertices.len();
            out.vertices.extend_from_slice(&m.vertices);
            out.triangles
                .extend(m.triangles.iter().map(|t| [t[0] + base, t[1] + base, t[2] + base]));
        }
        out
    }

    pub fn flipped(&self) -> TriMesh {
        TriMesh {
            vertices: self.vertices.clone(),
            triangles: self.triangles.iter().map(|&[a, b, c]| [a, c, b]).collect(),
        }
    }

    /// Area-weighted vertex normals.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut n = vec![Vec3::zeros(); self.vertices.len()];
        for (t, tri) in self.triangles.iter().enumerate() {
            let f = self.raw_normal(t);
            for &v in tri {
                n[v] += f;
            }
        }
        n.into_iter()
            .map(|v| if v.norm() > 0.0 { v.normalize() } else { v })
            .collect()
    }

    /// Undirected edge use counts.
    pub fn edge_counts(&self) -> HashMap<[usize; 2], usize> {
        let mut counts = HashMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *counts.entry([a.min(b), a.max(b)]).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Uniform samples by area: (point, triangle index).
    pub fn sample_uniform<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<(Vec3, usize)> {
        let mut cdf = Vec::with_capacity(self.triangles.len());
        let mut acc = 0.0;
        for t in 0..self.triangles.len() {
            acc += self.triangle_area(t);
            cdf.push(acc);
        }
        if acc <= 0.0 {
            return Vec::new();
        }
        (0..count)
            .map(|_| {
                let r = rng.gen::<f64>() * acc;
                let t = cdf.partition_point(|&c| c < r).min(cdf.len() - 1);
                let (mut u, mut v): (f64, f64) = (rng.gen(), rng.gen());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                let [a, b, c] = self.corners(t);
                (a + (b - a) * u + (c - a) * v, t)
            })
            .collect()
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for p in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", p.x, p.y, p.z);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    pub fn from_obj(text: &str) -> Result<TriMesh, MeshError> {
        let mut mesh = TriMesh::default();
        for line in text.lines() {
            let mut tok = line.split_whitespace();
            match tok.next() {
                Some("v") => {
                    let c: Vec<f64> = tok
                        .take(3)
                        .map(|t| t.parse().map_err(|_| MeshError::Parse(format!("obj: bad coordinate `{t}`"))))
                        .collect::<Result<_, _>>()?;
                    if c.len() != 3 {
                        return Err(MeshError::Parse(format!("obj: short vertex `{line}`")));
                    }
                    mesh.vertices.push(Vec3::new(c[0], c[1], c[2]));
                }
                Some("f") => {
                    let idx: Vec<usize> = tok
                        .map(|t| {
                            let head = t.split('/').next().unwrap_or(t);
                            let i: i64 = head
                                .parse()
                                .map_err(|_| MeshError::Parse(format!("obj: bad index `{t}`")))?;
                            let n = mesh.vertices.len() as i64;
                            let r = if i < 0 { n + i } else { i - 1 };
                            if r < 0 || r >= n {
                                return Err(MeshError::Parse(format!("obj: index {i} out of range")));
                            }
                            Ok(r as usize)
                        })
                        .collect::<Result<_, _>>()?;
                    if idx.len() < 3 {
                        return Err(MeshError::Parse(format!("obj: face with {} vertices", idx.len())));
                    }
                    for k in 1..idx.len() - 1 {
                        mesh.triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        Ok(mesh)
    }

    pub fn to_stl(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(84 + 50 * self.triangles.len());
        let mut header = [0u8; 80];
        header[..14].copy_from_slice(b"peel layer stl");
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.triangles.len() as u32).to_le_bytes());
        for t in 0..self.triangles.len() {
            let n = self.unit_normal(t);
            for v in [n.x, n.y, n.z] {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            for p in self.corners(t) {
                for v in [p.x, p.y, p.z] {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            out.extend_from_slice(&0u16.to_le_bytes());
        }
        out
    }

    /// Reads a binary STL, welding bit-identical corners.
    pub fn from_stl(bytes: &[u8]) -> Result<TriMesh, MeshError> {
        if bytes.len() < 84 {
            return Err(MeshError::Parse("stl: truncated header".into()));
        }
        let n = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as usize;
        if bytes.len() < 84 + 50 * n {
            return Err(MeshError::Parse("stl: truncated body".into()));
        }
        let mut mesh = TriMesh::default();
        let mut index: HashMap<[u32; 3], usize> = HashMap::new();
        let f = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        for t in 0..n {
            let base = 84 + 50 * t + 12;
            let mut tri = [0usize; 3];
            for (k, slot) in tri.iter_mut().enumerate() {
                let o = base + 12 * k;
                let (x, y, z) = (f(o), f(o + 4), f(o + 8));
                let key = [x.to_bits(), y.to_bits(), z.to_bits()];
                *slot = *index.entry(key).or_insert_with(|| {
                    mesh.vertices.push(Vec3::new(x as f64, y as f64, z as f64));
                    mesh.vertices.len() - 1
                });
            }
            mesh.triangles.push(tri);
        }
        Ok(mesh)
    }

    /// Loads `.obj` or binary `.stl` by extension.
    pub fn load(path: &Path) -> Result<TriMesh, MeshError> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("stl") | Some("STL") => {
                let mut bytes = Vec::new();
                std::fs::File::open(path)?.read_to_end(&mut bytes)?;
                TriMesh::from_stl(&bytes)
            }
            _ => TriMesh::from_obj(&std::fs::read_to_string(path)?),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), MeshError> {
        let mut f = std::fs::File::create(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("stl") | Some("STL") => f.write_all(&self.to_stl())?,
            _ => f.write_all(self.to_obj().as_bytes())?,
        }
        Ok(())
    }
}

/// Closest point on triangle `abc` to `p` by Voronoi region tests.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Möller-Trumbore, two-sided. Returns the ray parameter.
pub fn ray_triangle(origin: &Vec3, dir: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    let scale = e1.norm() * e2.norm() * dir.norm();
    if det.abs() <= 1e-14 * scale {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - a;
    let u = s.dot(&p) * inv;
    const SLACK: f64 = 1e-9;
    if !(-SLACK..=1.0 + SLACK).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < -SLACK || u + v > 1.0 + SLACK {
        return None;
    }
    Some(e2.dot(&q) * inv)
}

#[derive(Debug, Clone)]
struct Node {
    lo: Vec3,
    hi: Vec3,
    /// Leaf: range into `order`; inner: children.
    kind: NodeKind,
}

#[derive(Debug, Clone)]
enum NodeKind {
    Leaf(usize, usize),
    Inner(usize, usize),
}

/// Bounding-volume hierarchy over the triangles of a [`TriMesh`].
#[derive(Debug, Clone)]
pub struct TriangleTree<'a> {
    mesh: &'a TriMesh,
    nodes: Vec<Node>,
    order: Vec<usize>,
}

const LEAF_SIZE: usize = 6;

impl<'a> TriangleTree<'a> {
    pub fn new(mesh: &'a TriMesh) -> Self {
        let mut tree = Self { mesh, nodes: Vec::new(), order: (0..mesh.triangles.len()).collect() };
        if !mesh.triangles.is_empty() {
            let centroids: Vec<Vec3> = (0..mesh.triangles.len()).map(|t| mesh.centroid(t)).collect();
            tree.build(0, mesh.triangles.len(), &centroids);
        }
        tree
    }

    fn bounds(&self, start: usize, end: usize) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &t in &self.order[start..end] {
            for p in self.mesh.corners(t) {
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
        }
        (lo, hi)
    }

    fn build(&mut self, start: usize, end: usize, centroids: &[Vec3]) -> usize {
        let (lo, hi) = self.bounds(start, end);
        let id = self.nodes.len();
        self.nodes.push(Node { lo, hi, kind: NodeKind::Leaf(start, end) });
        if end - start > LEAF_SIZE {
            let ext = hi - lo;
            let axis = if ext.x >= ext.y && ext.x >= ext.z {
                0
            } else if ext.y >= ext.z {
                1
            } else {
                2
            };
            let mid = (start + end) / 2;
            self.order[start..end].sort_by(|&a, &b| {
                centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b))
            });
            let l = self.build(start, mid, centroids);
            let r = self.build(mid, end, centroids);
            self.nodes[id].kind = NodeKind::Inner(l, r);
        }
        id
    }

    fn box_dist2(node: &Node, p: &Vec3) -> f64 {
        let mut d = 0.0;
        for a in 0..3 {
            let v = if p[a] < node.lo[a] {
                node.lo[a] - p[a]
            } else if p[a] > node.hi[a] {
                p[a] - node.hi[a]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }

    /// Closest surface point to `p`: (point, triangle, distance).
    pub fn closest_point(&self, p: &Vec3) -> Option<(Vec3, usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best: Option<(Vec3, usize, f64)> = None;
        let mut best_d2 = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if Self::box_dist2(node, p) > best_d2 {
                continue;
            }
            match node.kind {
                NodeKind::Leaf(s, e) => {
                    for &t in &self.order[s..e] {
                        let [a, b, c] = self.mesh.corners(t);
                        let q = closest_point_on_triangle(p, &a, &b, &c);
                        let d2 = (q - p).norm_squared();
                        if d2 < best_d2 || (d2 == best_d2 && best.is_none_or(|b| t < b.1)) {
                            best_d2 = d2;
                            best = Some((q, t, d2.sqrt()));
                        }
                    }
                }
                NodeKind::Inner(l, r) => {
                    let (dl, dr) = (Self::box_dist2(&self.nodes[l], p), Self::box_dist2(&self.nodes[r], p));
                    if dl < dr {
                        stack.push(r);
                        stack.push(l);
                    } else {
                        stack.push(l);
                        stack.push(r);
                    }
                }
            }
        }
        best
    }

    fn ray_hits_box(node: &Node, o: &Vec3, d: &Vec3, tmax: f64) -> bool {
        let mut t0 = -1e-9_f64;
        let mut t1 = tmax;
        for a in 0..3 {
            let pad = 1e-9 * (1.0 + (node.hi[a] - node.lo[a]).abs());
            let (lo, hi) = (node.lo[a] - pad, node.hi[a] + pad);
            if d[a].abs() < 1e-300 {
                if o[a] < lo || o[a] > hi {
                    return false;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let (mut ta, mut tb) = ((lo - o[a]) * inv, (hi - o[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return false;
            }
        }
        true
    }

    /// Nearest hit with parameter `t >= min_t`: (t, triangle).
    pub fn first_hit(&self, origin: &Vec3, dir: &Vec3, min_t: f64) -> Option<(f64, usize)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best: Option<(f64, usize)> = None;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            let tmax = best.map_or(f64::INFINITY, |b| b.0);
            if !Self::ray_hits_box(node, origin, dir, tmax) {
                continue;
            }
            match node.kind {
                NodeKind::Leaf(s, e) => {
                    for &t in &self.order[s..e] {
                        let [a, b, c] = self.mesh.corners(t);
                        if let Some(h) = ray_triangle(origin, dir, &a, &b, &c) {
                            if h >= min_t && best.is_none_or(|(bt, bi)| h < bt || (h == bt && t < bi)) {
                                best = Some((h, t));
                            }
                        }
                    }
                }
                NodeKind::Inner(l, r) => {
                    stack.push(r);
                    stack.push(l);
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn unit_square(n: usize) -> TriMesh {
        let mut m = TriMesh::default();
        for j in 0..=n {
            for i in 0..=n {
                m.vertices.push(Vec3::new(i as f64 / n as f64, j as f64 / n as f64, 0.0));
            }
        }
        let id = |i: usize, j: usize| j * (n + 1) + i;
        for j in 0..n {
            for i in 0..n {
                m.triangles.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                m.triangles.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        m
    }

    #[test]
    fn closest_point_matches_brute_force() {
        let m = unit_square(7);
        let tree = TriangleTree::new(&m);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = Vec3::new(rng.gen_range(-0.5..1.5), rng.gen_range(-0.5..1.5), rng.gen_range(-1.0..1.0));
            let brute = (0..m.triangles.len())
                .map(|t| {
                    let [a, b, c] = m.corners(t);
                    (closest_point_on_triangle(&p, &a, &b, &c) - p).norm()
                })
                .fold(f64::INFINITY, f64::min);
            let (_, _, d) = tree.closest_point(&p).unwrap();
            assert!((d - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn ray_hits_plane() {
        let m = unit_square(4);
        let tree = TriangleTree::new(&m);
        let (t, _) = tree.first_hit(&Vec3::new(0.3, 0.4, 2.0), &Vec3::new(0.0, 0.0, -1.0), 0.0).unwrap();
        assert!((t - 2.0).abs() < 1e-12);
        assert!(tree.first_hit(&Vec3::new(0.3, 0.4, 2.0), &Vec3::new(0.0, 0.0, 1.0), 0.0).is_none());
        assert!(tree.first_hit(&Vec3::new(3.0, 0.4, 2.0), &Vec3::new(0.0, 0.0, -1.0), 0.0).is_none());
    }

    #[test]
    fn stl_round_trip_within_float_precision() {
        let mut m = unit_square(3);
        for p in &mut m.vertices {
            p.z = 0.1 * p.x + 1.0 / 3.0;
        }
        let back = TriMesh::from_stl(&m.to_stl()).unwrap();
        assert_eq!(back.triangles.len(), m.triangles.len());
        assert_eq!(back.vertices.len(), m.vertices.len());
        for t in 0..m.triangles.len() {
            for (p, q) in m.corners(t).iter().zip(back.corners(t).iter()) {
                assert!((p - q).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn obj_round_trip_is_exact() {
        let mut m = unit_square(2);
        m.vertices[3].z = 0.1 + 0.2;
        let back = TriMesh::from_obj(&m.to_obj()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn sampling_is_area_uniform() {
        let m = unit_square(5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let s = m.sample_uniform(20000, &mut rng);
        let left = s.iter().filter(|(p, _)| p.x < 0.5).count() as f64 / s.len() as f64;
        assert!((left - 0.5).abs() < 0.02);
    }
}
