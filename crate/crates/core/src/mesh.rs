//! Tetrahedral mesh of the machining domain.
//!
//! A [`TetMesh`] is immutable once built. Construction validates every
//! invariant the downstream operators rely on: in-range indices, positive
//! orientation, a conforming face structure, and symmetric face adjacency.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Tets below this volume (mm³) are rejected.
pub const MIN_TET_VOLUME: f64 = 1e-12;

/// Barycentric slack used by [`TetMesh::locate_point`].
pub const LOCATE_TOLERANCE: f64 = 1e-9;

/// Local vertex triples of the four faces. Face `f` is opposite local vertex
/// `f`, and the listed winding gives the outward normal of a positively
/// oriented tet.
pub const FACE_VERTICES: [[usize; 3]; 4] = [[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]];

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("tet {tet} is degenerate (volume {volume:e} mm³)")]
    DegenerateTet { tet: usize, volume: f64 },
    #[error("face {face:?} is shared by {count} tets")]
    NonManifoldFace { face: [usize; 3], count: usize },
    #[error("tet {tet} references vertex {vertex} but the mesh has {count} vertices")]
    IndexOutOfRange { tet: usize, vertex: usize, count: usize },
    #[error("tet {0} repeats a vertex")]
    RepeatedVertex(usize),
    #[error("({tet}, {face}) is not a boundary face")]
    NotBoundaryFace { tet: usize, face: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Provenance of a boundary face: the part surface ∂H, the stock surface ∂M,
/// or unknown.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "UPPERCASE")]
pub enum BoundaryTag {
    Part,
    Stock,
    #[default]
    Untagged,
}

impl BoundaryTag {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundaryTag::Part => "PART",
            BoundaryTag::Stock => "STOCK",
            BoundaryTag::Untagged => "UNTAGGED",
        }
    }
}

impl std::str::FromStr for BoundaryTag {
    type Err = MeshError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "PART" => Ok(BoundaryTag::Part),
            "STOCK" => Ok(BoundaryTag::Stock),
            "UNTAGGED" => Ok(BoundaryTag::Untagged),
            other => Err(MeshError::Parse(format!("unknown boundary tag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryFace {
    pub tet: usize,
    pub local_face: usize,
    pub tag: BoundaryTag,
}

#[derive(Debug, Clone)]
pub struct TetMesh {
    vertices: Vec<Vec3>,
    tets: Vec<[usize; 4]>,
    volumes: Vec<f64>,
    /// Neighbour across local face `f`, `None` on the boundary.
    neighbors: Vec<[Option<usize>; 4]>,
    boundary_faces: Vec<BoundaryFace>,
    /// Index into `boundary_faces` per (tet, local face).
    boundary_slot: Vec<[Option<usize>; 4]>,
    vertex_tets: Vec<Vec<usize>>,
    vertex_neighbors: Vec<Vec<usize>>,
    on_boundary: Vec<bool>,
    locator: OnceLock<PointLocator>,
}

pub(crate) fn signed_volume(p: [&Vec3; 4]) -> f64 {
    (p[1] - p[0]).cross(&(p[2] - p[0])).dot(&(p[3] - p[0])) / 6.0
}

fn sorted3(mut f: [usize; 3]) -> [usize; 3] {
    f.sort_unstable();
    f
}

impl TetMesh {
    /// Builds and validates a mesh. Negatively oriented tets are flipped by
    /// swapping their last two vertices; all boundary faces start out
    /// `UNTAGGED`.
    pub fn new(vertices: Vec<Vec3>, mut tets: Vec<[usize; 4]>) -> Result<Self, MeshError> {
        let nv = vertices.len();
        let mut volumes = Vec::with_capacity(tets.len());
        for (t, tet) in tets.iter_mut().enumerate() {
            for &v in tet.iter() {
                if v >= nv {
                    return Err(MeshError::IndexOutOfRange { tet: t, vertex: v, count: nv });
                }
            }
            for a in 0..4 {
                for b in a + 1..4 {
                    if tet[a] == tet[b] {
                        return Err(MeshError::RepeatedVertex(t));
                    }
                }
            }
            let mut vol = signed_volume([
                &vertices[tet[0]],
                &vertices[tet[1]],
                &vertices[tet[2]],
                &vertices[tet[3]],
            ]);
            if vol < 0.0 {
                tet.swap(2, 3);
                vol = -vol;
            }
            if !(vol >= MIN_TET_VOLUME) {
                return Err(MeshError::DegenerateTet { tet: t, volume: vol });
            }
            volumes.push(vol);
        }

        let mut face_map: HashMap<[usize; 3], Vec<(usize, usize)>> =
            HashMap::with_capacity(tets.len() * 2);
        for (t, tet) in tets.iter().enumerate() {
            for (f, fv) in FACE_VERTICES.iter().enumerate() {
                let key = sorted3([tet[fv[0]], tet[fv[1]], tet[fv[2]]]);
                face_map.entry(key).or_default().push((t, f));
            }
        }

        let mut neighbors = vec![[None; 4]; tets.len()];
        let mut boundary_slot = vec![[None; 4]; tets.len()];
        let mut boundary_faces = Vec::new();
        let mut offending: Option<([usize; 3], usize)> = None;
        for (key, owners) in &face_map {
            match owners.as_slice() {
                [(t, f)] => boundary_slot[*t][*f] = Some(usize::MAX),
                [(t0, f0), (t1, f1)] => {
                    neighbors[*t0][*f0] = Some(*t1);
                    neighbors[*t1][*f1] = Some(*t0);
                }
                more => {
                    // report the lexicographically smallest offender for determinism
                    if offending.is_none_or(|(k, _)| *key < k) {
                        offending = Some((*key, more.len()));
                    }
                }
            }
        }
        if let Some((face, count)) = offending {
            return Err(MeshError::NonManifoldFace { face, count });
        }
        for (t, slots) in boundary_slot.iter_mut().enumerate() {
            for (f, slot) in slots.iter_mut().enumerate() {
                if slot.is_some() {
                    *slot = Some(boundary_faces.len());
                    boundary_faces.push(BoundaryFace { tet: t, local_face: f, tag: BoundaryTag::Untagged });
                }
            }
        }

        let mut vertex_tets = vec![Vec::new(); nv];
        for (t, tet) in tets.iter().enumerate() {
            for &v in tet {
                vertex_tets[v].push(t);
            }
        }
        let mut vertex_neighbors = vec![Vec::new(); nv];
        for tet in &tets {
            for a in 0..4 {
                for b in 0..4 {
                    if a != b {
                        vertex_neighbors[tet[a]].push(tet[b]);
                    }
                }
            }
        }
        for ring in &mut vertex_neighbors {
            ring.sort_unstable();
            ring.dedup();
        }
        let mut on_boundary = vec![false; nv];
        for bf in &boundary_faces {
            for v in face_of(&tets[bf.tet], bf.local_face) {
                on_boundary[v] = true;
            }
        }

        Ok(Self {
            vertices,
            tets,
            volumes,
            neighbors,
            boundary_faces,
            boundary_slot,
            vertex_tets,
            vertex_neighbors,
            on_boundary,
            locator: OnceLock::new(),
        })
    }

    /// Replaces the tags of the listed boundary faces.
    pub fn with_tags<I>(mut self, tags: I) -> Result<Self, MeshError>
    where
        I: IntoIterator<Item = (usize, usize, BoundaryTag)>,
    {
        for (tet, face, tag) in tags {
            let slot = self
                .boundary_slot
                .get(tet)
                .and_then(|s| s.get(face).copied().flatten())
                .ok_or(MeshError::NotBoundaryFace { tet, face })?;
            self.boundary_faces[slot].tag = tag;
        }
        Ok(self)
    }

    /// Tags every boundary face from a classifier over (outward unit normal,
    /// face centroid).
    pub fn with_tag_fn(mut self, mut classify: impl FnMut(&Vec3, &Vec3) -> BoundaryTag) -> Self {
        for i in 0..self.boundary_faces.len() {
            let bf = self.boundary_faces[i];
            let n = self.outward_normal(bf.tet, bf.local_face);
            let c = self.face_centroid(bf.tet, bf.local_face);
            self.boundary_faces[i].tag = classify(&n, &c);
        }
        self
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_tets(&self) -> usize {
        self.tets.len()
    }

    pub fn boundary_faces(&self) -> &[BoundaryFace] {
        &self.boundary_faces
    }

    pub fn neighbors(&self, t: usize) -> &[Option<usize>; 4] {
        &self.neighbors[t]
    }

    /// Face-adjacent tets of `t` in local-face order.
    pub fn tet_neighbors(&self, t: usize) -> impl Iterator<Item = usize> + '_ {
        self.neighbors[t].iter().filter_map(|n| *n)
    }

    pub fn boundary_face_at(&self, t: usize, local_face: usize) -> Option<&BoundaryFace> {
        self.boundary_slot[t][local_face].map(|i| &self.boundary_faces[i])
    }

    pub fn vertex_tets(&self, v: usize) -> &[usize] {
        &self.vertex_tets[v]
    }

    /// Sorted 1-ring of `v` along mesh edges.
    pub fn vertex_neighbors(&self, v: usize) -> &[usize] {
        &self.vertex_neighbors[v]
    }

    pub fn is_boundary_vertex(&self, v: usize) -> bool {
        self.on_boundary[v]
    }

    pub fn tet_volume(&self, t: usize) -> f64 {
        self.volumes[t]
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn total_volume(&self) -> f64 {
        self.volumes.iter().sum()
    }

    pub fn tet_points(&self, t: usize) -> [Vec3; 4] {
        let tet = &self.tets[t];
        [
            self.vertices[tet[0]],
            self.vertices[tet[1]],
            self.vertices[tet[2]],
            self.vertices[tet[3]],
        ]
    }

    pub fn tet_centroid(&self, t: usize) -> Vec3 {
        let p = self.tet_points(t);
        (p[0] + p[1] + p[2] + p[3]) / 4.0
    }

    /// Global vertex ids of local face `f`, wound outward.
    pub fn face_vertices(&self, t: usize, f: usize) -> [usize; 3] {
        face_of(&self.tets[t], f)
    }

    pub fn face_centroid(&self, t: usize, f: usize) -> Vec3 {
        let [a, b, c] = self.face_vertices(t, f);
        (self.vertices[a] + self.vertices[b] + self.vertices[c]) / 3.0
    }

    /// Area vector of the face opposite local vertex `opposite`, pointing from
    /// the face toward that vertex. Its length is the face area, and the four
    /// vectors of a tet sum to zero. With this orientation the gradient of the
    /// hat function of local vertex `i` is `s_i / (3 V)`.
    pub fn face_area_vector(&self, t: usize, opposite: usize) -> Vec3 {
        let [a, b, c] = self.face_vertices(t, opposite);
        let (pa, pb, pc) = (&self.vertices[a], &self.vertices[b], &self.vertices[c]);
        -0.5 * (pb - pa).cross(&(pc - pa))
    }

    /// Outward unit normal of a face.
    pub fn outward_normal(&self, t: usize, f: usize) -> Vec3 {
        (-self.face_area_vector(t, f)).normalize()
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.vertices {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    /// Unique undirected edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<[usize; 2]> {
        let mut out = Vec::new();
        for (v, ring) in self.vertex_neighbors.iter().enumerate() {
            for &w in ring {
                if v < w {
                    out.push([v, w]);
                }
            }
        }
        out
    }

    /// Mean edge length over all unique edges.
    pub fn mean_edge_length(&self) -> f64 {
        let edges = self.edges();
        if edges.is_empty() {
            return 0.0;
        }
        edges
            .iter()
            .map(|[a, b]| (self.vertices[*a] - self.vertices[*b]).norm())
            .sum::<f64>()
            / edges.len() as f64
    }

    /// Barycentric coordinates of `x` in tet `t`.
    pub fn barycentric(&self, t: usize, x: &Vec3) -> [f64; 4] {
        let p = self.tet_points(t);
        let vol = signed_volume([&p[0], &p[1], &p[2], &p[3]]);
        let mut out = [0.0; 4];
        for (i, w) in out.iter_mut().enumerate() {
            let mut q = p;
            q[i] = *x;
            *w = signed_volume([&q[0], &q[1], &q[2], &q[3]]) / vol;
        }
        out
    }

    /// Lowest-index tet containing `x` (barycentrics ≥ −1e-9), or `None`.
    pub fn locate_point(&self, x: &Vec3) -> Option<usize> {
        let locator = self.locator.get_or_init(|| PointLocator::build(self));
        locator
            .candidates(x)
            .iter()
            .copied()
            .find(|&t| self.barycentric(t, x).iter().all(|&w| w >= -LOCATE_TOLERANCE))
    }

    /// Boundary faces as an outward-wound triangle soup over the mesh vertices,
    /// restricted to the given tags.
    pub fn boundary_triangles(&self, tags: &[BoundaryTag]) -> Vec<[usize; 3]> {
        self.boundary_faces
            .iter()
            .filter(|bf| tags.contains(&bf.tag))
            .map(|bf| self.face_vertices(bf.tet, bf.local_face))
            .collect()
    }

    /// Counts of boundary faces per tag.
    pub fn tag_counts(&self) -> BTreeMap<BoundaryTag, usize> {
        let mut out = BTreeMap::new();
        for bf in &self.boundary_faces {
            *out.entry(bf.tag).or_insert(0) += 1;
        }
        out
    }

    /// Enclosed volume from the boundary via the divergence theorem (flux of x/3).
    pub fn boundary_enclosed_volume(&self) -> f64 {
        self.boundary_faces
            .iter()
            .map(|bf| {
                let [a, b, c] = self.face_vertices(bf.tet, bf.local_face);
                let (pa, pb, pc) = (&self.vertices[a], &self.vertices[b], &self.vertices[c]);
                pa.dot(&pb.cross(pc)) / 6.0
            })
            .sum()
    }

    /// Tets reachable from `seeds` within `depth` face-adjacency steps, with
    /// the BFS depth of each (seeds at depth 0). `allow` filters which tets
    /// the search may enter.
    pub fn tet_rings(
        &self,
        seeds: impl IntoIterator<Item = usize>,
        depth: usize,
        mut allow: impl FnMut(usize) -> bool,
    ) -> BTreeMap<usize, usize> {
        let mut seen = BTreeMap::new();
        let mut frontier: Vec<usize> = Vec::new();
        for s in seeds {
            if allow(s) && !seen.contains_key(&s) {
                seen.insert(s, 0);
                frontier.push(s);
            }
        }
        for d in 1..=depth {
            let mut next = Vec::new();
            for &t in &frontier {
                for n in self.tet_neighbors(t) {
                    if !seen.contains_key(&n) && allow(n) {
                        seen.insert(n, d);
                        next.push(n);
                    }
                }
            }
            frontier = next;
        }
        seen
    }
}

fn face_of(tet: &[usize; 4], f: usize) -> [usize; 3] {
    let fv = FACE_VERTICES[f];
    [tet[fv[0]], tet[fv[1]], tet[fv[2]]]
}

/// Uniform bucket grid over tet bounding boxes.
#[derive(Debug, Clone)]
struct PointLocator {
    lo: Vec3,
    cell: Vec3,
    dims: [usize; 3],
    buckets: Vec<Vec<usize>>,
}

impl PointLocator {
    fn build(mesh: &TetMesh) -> Self {
        let (lo, hi) = mesh.bounding_box();
        let extent = (hi - lo).map(|e| e.max(1e-12));
        let n = mesh.num_tets().max(1) as f64;
        let vol = extent.x * extent.y * extent.z;
        let h = (vol / n).cbrt().max(1e-12);
        let dims = [
            ((extent.x / h).ceil() as usize).clamp(1, 256),
            ((extent.y / h).ceil() as usize).clamp(1, 256),
            ((extent.z / h).ceil() as usize).clamp(1, 256),
        ];
        let cell = Vec3::new(
            extent.x / dims[0] as f64,
            extent.y / dims[1] as f64,
            extent.z / dims[2] as f64,
        );
        let mut buckets = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        let this = Self { lo, cell, dims, buckets: Vec::new() };
        for t in 0..mesh.num_tets() {
            let p = mesh.tet_points(t);
            let mut tlo = p[0];
            let mut thi = p[0];
            for q in &p[1..] {
                tlo = tlo.inf(q);
                thi = thi.sup(q);
            }
            let pad = Vec3::repeat(1e-9 * (1.0 + extent.max()));
            let a = this.cell_of(&(tlo - pad));
            let b = this.cell_of(&(thi + pad));
            for i in a[0]..=b[0] {
                for j in a[1]..=b[1] {
                    for k in a[2]..=b[2] {
                        buckets[(i * dims[1] + j) * dims[2] + k].push(t);
                    }
                }
            }
        }
        Self { buckets, ..this }
    }

    fn cell_of(&self, x: &Vec3) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            let r = ((x[a] - self.lo[a]) / self.cell[a]).floor();
            out[a] = if r < 0.0 { 0 } else { (r as usize).min(self.dims[a] - 1) };
        }
        out
    }

    fn candidates(&self, x: &Vec3) -> &[usize] {
        let (lo, hi) = (self.lo, self.lo + self.cell.component_mul(&Vec3::new(
            self.dims[0] as f64,
            self.dims[1] as f64,
            self.dims[2] as f64,
        )));
        let slack = 1e-9 * (1.0 + (hi - lo).max());
        if (0..3).any(|a| x[a] < lo[a] - slack || x[a] > hi[a] + slack) {
            return &[];
        }
        let c = self.cell_of(x);
        &self.buckets[(c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn unit_tet() -> TetMesh {
        TetMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(0.0, 0.0, 1.0),
            ],
            vec![[0, 1, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn unit_tet_basics() {
        let m = unit_tet();
        assert_eq!(m.num_tets(), 1);
        assert!((m.tet_volume(0) - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(m.boundary_faces().len(), 4);
        assert!(m.tet_neighbors(0).next().is_none());
    }

    #[test]
    fn negative_orientation_is_flipped() {
        let m = TetMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(0.0, 0.0, 1.0),
            ],
            vec![[0, 2, 1, 3]],
        )
        .unwrap();
        assert!((m.tet_volume(0) - 1.0 / 6.0).abs() < 1e-15);
        let p = m.tet_points(0);
        assert!(signed_volume([&p[0], &p[1], &p[2], &p[3]]) > 0.0);
    }

    #[test]
    fn scaled_tet_volume() {
        let m = TetMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(2.0, 0.0, 0.0),
                Vec3::new(0.0, 2.0, 0.0),
                Vec3::new(0.0, 0.0, 2.0),
            ],
            vec![[0, 1, 2, 3]],
        )
        .unwrap();
        assert!((m.tet_volume(0) - 8.0 / 6.0).abs() < 1e-14);
    }

    #[test]
    fn face_area_vector_orientation() {
        let m = unit_tet();
        // face opposite (0,0,1) lies in z = 0 and points toward that vertex
        let s = m.face_area_vector(0, 3);
        assert!((s - Vec3::new(0.0, 0.0, 0.5)).norm() < 1e-15);
        let sum: Vec3 = (0..4).map(|i| m.face_area_vector(0, i)).sum();
        assert!(sum.norm() < 1e-12);
    }

    #[test]
    fn needle_area_vectors_sum_to_zero() {
        let m = TetMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1e-3, 0.0, 0.0),
                Vec3::new(0.0, 1e-3, 0.0),
                Vec3::new(0.0, 0.0, 1e3),
            ],
            vec![[0, 1, 2, 3]],
        )
        .unwrap();
        let sum: Vec3 = (0..4).map(|i| m.face_area_vector(0, i)).sum();
        assert!(sum.norm() < 1e-12);
    }

    #[test]
    fn degenerate_and_bad_indices() {
        let flat = TetMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(1.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2, 3]],
        );
        assert!(matches!(flat, Err(MeshError::DegenerateTet { tet: 0, .. })));
        let oob = TetMesh::new(vec![Vec3::zeros(); 3], vec![[0, 1, 2, 3]]);
        assert!(matches!(oob, Err(MeshError::IndexOutOfRange { .. })));
        let rep = TetMesh::new(vec![Vec3::zeros(); 4], vec![[0, 1, 1, 3]]);
        assert!(matches!(rep, Err(MeshError::RepeatedVertex(0))));
    }

    #[test]
    fn face_shared_by_three_tets_is_rejected() {
        let verts = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(0.0, 0.0, -1.0),
            Vec3::new(0.3, 0.3, 2.0),
        ];
        let r = TetMesh::new(verts, vec![[0, 1, 2, 3], [0, 1, 2, 4], [0, 1, 2, 5]]);
        match r {
            Err(MeshError::NonManifoldFace { face, count }) => {
                assert_eq!(face, [0, 1, 2]);
                assert_eq!(count, 3);
            }
            other => panic!("expected NonManifoldFace, got {other:?}"),
        }
    }

    #[test]
    fn locate_point_cases() {
        let m = unit_tet();
        assert_eq!(m.locate_point(&m.tet_centroid(0)), Some(0));
        assert_eq!(m.locate_point(&Vec3::new(10.0, 10.0, 10.0)), None);
        assert_eq!(m.locate_point(&Vec3::new(0.6, 0.6, 0.6)), None);
    }

    #[test]
    fn two_tets_share_face_and_tie_breaks_low() {
        let m = TetMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(0.0, 0.0, 1.0),
                Vec3::new(0.0, 0.0, -1.0),
            ],
            vec![[0, 1, 2, 4], [0, 1, 2, 3]],
        )
        .unwrap();
        assert_eq!(m.tet_neighbors(0).collect::<Vec<_>>(), vec![1]);
        assert_eq!(m.tet_neighbors(1).collect::<Vec<_>>(), vec![0]);
        assert_eq!(m.boundary_faces().len(), 6);
        // on the shared face z = 0
        assert_eq!(m.locate_point(&Vec3::new(0.2, 0.2, 0.0)), Some(0));
    }

    #[test]
    fn sidecar_tags_reject_interior_faces() {
        let m = TetMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(0.0, 0.0, 1.0),
                Vec3::new(0.0, 0.0, -1.0),
            ],
            vec![[0, 1, 2, 3], [0, 1, 2, 4]],
        )
        .unwrap();
        // local face 3 of tet 0 is the shared one
        assert!(matches!(
            m.clone().with_tags([(0, 3, BoundaryTag::Part)]),
            Err(MeshError::NotBoundaryFace { tet: 0, face: 3 })
        ));
        let tagged = m.with_tags([(0, 0, BoundaryTag::Part)]).unwrap();
        assert_eq!(tagged.boundary_face_at(0, 0).unwrap().tag, BoundaryTag::Part);
    }
}
