//! Anchor-constrained smooth vector fields.
//!
//! The field minimizes `α²‖L_u V‖² + Σ_i w_i² ‖v_i − a_i‖²`, where `L_u` is
//! the uniform face-neighbour Laplacian over tets. The three components are
//! independent and share one sparse normal-equations factorization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffops::{normalize_field, VectorField, ZERO_VECTOR};
use crate::mesh::{BoundaryTag, TetMesh, Vec3};
use crate::sparse::{pcg, Csr, Ordering, SolverError, SparseOperator, SpdSolver};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldOptError {
    #[error("anchor set is empty")]
    EmptyAnchorSet,
    #[error("tet {tet} has a zero vector after the solve")]
    ZeroVectorAfterSolve { tet: usize },
    #[error("invalid anchor: {0}")]
    InvalidAnchor(String),
    #[error("invalid weights: {0}")]
    InvalidConfig(String),
    #[error("mesh has no PART faces")]
    NoPartFaces,
    #[error("solver failure: {0}")]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub tet: usize,
    pub direction: Vec3,
    pub weight: f64,
    #[serde(default)]
    pub critical: bool,
}

/// At most one anchor per tet; inserting into an occupied tet replaces the
/// previous anchor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    anchors: BTreeMap<usize, Anchor>,
}

impl AnchorSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts an anchor, normalizing its direction. Returns the anchor it
    /// replaced, if any.
    pub fn insert(&mut self, mut anchor: Anchor) -> Result<Option<Anchor>, FieldOptError> {
        let n = anchor.direction.norm();
        if !(n.is_finite() && n > ZERO_VECTOR) {
            return Err(FieldOptError::InvalidAnchor(format!("tet {} has a zero direction", anchor.tet)));
        }
        if !(anchor.weight > 0.0 && anchor.weight.is_finite()) {
            return Err(FieldOptError::InvalidAnchor(format!("tet {} weight {}", anchor.tet, anchor.weight)));
        }
        anchor.direction /= n;
        Ok(self.anchors.insert(anchor.tet, anchor))
    }

    /// Places the same anchor on every tet incident to `vertex`.
    pub fn insert_at_vertex(
        &mut self,
        mesh: &TetMesh,
        vertex: usize,
        direction: Vec3,
        weight: f64,
        critical: bool,
    ) -> Result<(), FieldOptError> {
        if vertex >= mesh.num_vertices() {
            return Err(FieldOptError::InvalidAnchor(format!("vertex {vertex} out of range")));
        }
        for &tet in mesh.vertex_tets(vertex) {
            self.insert(Anchor { tet, direction, weight, critical })?;
        }
        Ok(())
    }

    pub fn remove(&mut self, tet: usize) -> Option<Anchor> {
        self.anchors.remove(&tet)
    }

    pub fn get(&self, tet: usize) -> Option<&Anchor> {
        self.anchors.get(&tet)
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Anchors in ascending tet order.
    pub fn iter(&self) -> impl Iterator<Item = &Anchor> {
        self.anchors.values()
    }

    pub fn critical_only(&self) -> AnchorSet {
        AnchorSet { anchors: self.anchors.iter().filter(|(_, a)| a.critical).map(|(k, a)| (*k, *a)).collect() }
    }

    pub fn validate(&self, mesh: &TetMesh) -> Result<(), FieldOptError> {
        match self.anchors.keys().next_back() {
            Some(&t) if t >= mesh.num_tets() => {
                Err(FieldOptError::InvalidAnchor(format!("tet {t} out of range")))
            }
            _ => Ok(()),
        }
    }

    /// Parses `tet|vertex id dx dy dz [weight] [critical]` lines. Missing
    /// weights default from `cfg` according to the critical flag.
    pub fn parse(text: &str, mesh: &TetMesh, cfg: &FieldOptConfig) -> Result<AnchorSet, FieldOptError> {
        let mut set = AnchorSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| FieldOptError::InvalidAnchor(format!("line {}: {msg}", no + 1));
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() < 5 {
                return Err(bad("expected `tet|vertex id dx dy dz`"));
            }
            let id: usize = tok[1].parse().map_err(|_| bad("bad id"))?;
            let mut d = [0.0; 3];
            for (k, slot) in d.iter_mut().enumerate() {
                *slot = tok[2 + k].parse().map_err(|_| bad("bad direction"))?;
            }
            let critical = tok.iter().skip(5).any(|t| t.eq_ignore_ascii_case("critical"));
            let weight = match tok.get(5) {
                Some(w) if !w.eq_ignore_ascii_case("critical") => w.parse().map_err(|_| bad("bad weight"))?,
                _ if critical => cfg.beta_critical,
                _ => cfg.beta_general,
            };
            let dir = Vec3::new(d[0], d[1], d[2]);
            match tok[0] {
                "tet" => {
                    if id >= mesh.num_tets() {
                        return Err(bad("tet out of range"));
                    }
                    set.insert(Anchor { tet: id, direction: dir, weight, critical })?;
                }
                "vertex" => set.insert_at_vertex(mesh, id, dir, weight, critical)?,
                other => return Err(bad(&format!("unknown target `{other}`"))),
            }
        }
        Ok(set)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for a in self.iter() {
            s.push_str(&format!(
                "tet {} {} {} {} {}{}\n",
                a.tet,
                a.direction.x,
                a.direction.y,
                a.direction.z,
                a.weight,
                if a.critical { " critical" } else { "" }
            ));
        }
        s
    }
}

impl FromIterator<Anchor> for AnchorSet {
    fn from_iter<I: IntoIterator<Item = Anchor>>(iter: I) -> Self {
        let mut s = AnchorSet::new();
        for a in iter {
            s.insert(a).expect("anchor must have a nonzero direction and positive weight");
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldOptConfig {
    pub alpha: f64,
    pub beta_general: f64,
    pub beta_critical: f64,
    pub gamma: f64,
}

impl Default for FieldOptConfig {
    fn default() -> Self {
        Self { alpha: 1.0, beta_general: 1e5, beta_critical: 1e8, gamma: 1e5 }
    }
}

impl FieldOptConfig {
    pub fn validate(&self) -> Result<(), FieldOptError> {
        let all = [self.alpha, self.beta_general, self.beta_critical, self.gamma];
        if all.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(FieldOptError::InvalidConfig("weights must be positive".into()));
        }
        if !(self.beta_critical >= self.beta_general && self.beta_general >= self.alpha) {
            return Err(FieldOptError::InvalidConfig("need beta_critical ≥ beta_general ≥ alpha".into()));
        }
        Ok(())
    }
}

/// Uniform Laplacian over tets: row `i` is `v_i − mean of face neighbours`.
/// Rows of isolated tets are zero.
pub fn uniform_laplacian(mesh: &TetMesh) -> SparseOperator {
    let n = mesh.num_tets();
    let mut op = SparseOperator::new(n, n);
    for t in 0..n {
        let nb: Vec<usize> = mesh.tet_neighbors(t).collect();
        if nb.is_empty() {
            continue;
        }
        op.push(t, t, 1.0);
        let w = 1.0 / nb.len() as f64;
        for j in nb {
            op.push(t, j, -w);
        }
    }
    op
}

/// `L_uᵀ L_u` assembled row by row.
fn gram(lu: &SparseOperator) -> SparseOperator {
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); lu.nrows];
    for &(r, c, v) in &lu.triplets {
        rows[r].push((c, v));
    }
    let mut out = SparseOperator::new(lu.ncols, lu.ncols);
    for row in rows {
        for &(a, va) in &row {
            for &(b, vb) in &row {
                out.push(a, b, va * vb);
            }
        }
    }
    SparseOperator { triplets: out.compressed(), ..out }
}

/// Reusable normal-equations solver for a fixed mesh and smoothness weight.
/// The factorization is cached and rebuilt only when the weights or the set
/// of pinned tets change. Systems where every free tet carries a target
/// weight are strongly diagonally dominant and go through preconditioned CG;
/// the rest use a nested-dissection Cholesky factorization.
#[derive(Debug, Clone)]
pub struct FieldSystem {
    n: usize,
    alpha2: f64,
    ltl: SparseOperator,
    /// Largest diagonal entry of `L_uᵀ L_u`.
    ltl_max_diag: f64,
    centroids: Vec<Vec3>,
    cache: Option<(Vec<f64>, Vec<bool>, Factored)>,
}

#[derive(Debug, Clone)]
enum Backend {
    Direct(SpdSolver),
    Iterative(Csr),
}

#[derive(Debug, Clone)]
struct Factored {
    free: Vec<usize>,
    coupling: Vec<(usize, usize, f64)>,
    backend: Backend,
}

/// Iterative solves are used when every free diagonal weight exceeds the
/// smoothness diagonal by this factor.
const ITERATIVE_DOMINANCE: f64 = 1e3;

impl FieldSystem {
    pub fn new(mesh: &TetMesh, alpha: f64) -> Self {
        let ltl = gram(&uniform_laplacian(mesh));
        let ltl_max_diag = ltl.diag().into_iter().fold(0.0, f64::max);
        Self {
            n: mesh.num_tets(),
            alpha2: alpha * alpha,
            ltl,
            ltl_max_diag,
            centroids: (0..mesh.num_tets()).map(|t| mesh.tet_centroid(t)).collect(),
            cache: None,
        }
    }

    /// The full normal matrix `α² L_uᵀ L_u + diag(weights)`.
    pub fn normal_matrix(&self, weights: &[f64]) -> SparseOperator {
        let mut a = SparseOperator::new(self.n, self.n);
        for &(r, c, v) in &self.ltl.triplets {
            a.push(r, c, self.alpha2 * v);
        }
        for (t, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                a.push(t, t, w);
            }
        }
        a
    }

    fn factor(&self, weights: &[f64], pinned: &[bool]) -> Result<Factored, SolverError> {
        let mut index = vec![usize::MAX; self.n];
        let mut free = Vec::new();
        for t in 0..self.n {
            if !pinned[t] {
                index[t] = free.len();
                free.push(t);
            }
        }
        let mut reduced = SparseOperator::new(free.len(), free.len());
        let mut coupling = Vec::new();
        for (r, c, v) in self.normal_matrix(weights).compressed() {
            if pinned[r] {
                continue;
            }
            if pinned[c] {
                coupling.push((index[r], c, v));
            } else {
                reduced.push(index[r], index[c], v);
            }
        }
        let dominant = free
            .iter()
            .all(|&t| weights[t] >= ITERATIVE_DOMINANCE * self.alpha2 * self.ltl_max_diag.max(1.0));
        let backend = if dominant {
            Backend::Iterative(Csr::from_operator(&reduced))
        } else {
            let pts: Vec<Vec3> = free.iter().map(|&t| self.centroids[t]).collect();
            Backend::Direct(SpdSolver::factor_with(&reduced, Ordering::NestedDissection(&pts))?)
        };
        Ok(Factored { free, coupling, backend })
    }

    /// Solves `(α² LᵀL + W) v = rhs` per component. `weights` holds the
    /// squared per-tet target weights, `rhs` the weighted targets `w² a`.
    /// Tets with `pinned[t] = Some(x)` are held at `x`.
    pub fn solve(
        &mut self,
        weights: &[f64],
        rhs: &[Vec3],
        pinned: Option<&[Option<Vec3>]>,
    ) -> Result<VectorField, FieldOptError> {
        assert_eq!(weights.len(), self.n);
        assert_eq!(rhs.len(), self.n);
        let mask: Vec<bool> = match pinned {
            Some(p) => p.iter().map(|x| x.is_some()).collect(),
            None => vec![false; self.n],
        };
        let stale = match &self.cache {
            Some((w, m, _)) => w.as_slice() != weights || *m != mask,
            None => true,
        };
        if stale {
            let f = self.factor(weights, &mask)?;
            self.cache = Some((weights.to_vec(), mask, f));
        }
        let f = &self.cache.as_ref().unwrap().2;
        let mut cols: [Vec<f64>; 3] = std::array::from_fn(|k| f.free.iter().map(|&t| rhs[t][k]).collect());
        if let Some(p) = pinned {
            for &(r, c, v) in &f.coupling {
                let x = p[c].unwrap();
                for (k, col) in cols.iter_mut().enumerate() {
                    col[r] -= v * x[k];
                }
            }
        }
        let sol = match &f.backend {
            Backend::Direct(s) => s.solve_many(&[&cols[0], &cols[1], &cols[2]]),
            Backend::Iterative(csr) => {
                let mut out = Vec::with_capacity(3);
                for col in &cols {
                    let x0: Vec<f64> = col.iter().zip(&csr.diag).map(|(b, d)| b / d).collect();
                    let x = pcg(csr, col, &x0, 1e-13, 500).ok_or_else(|| {
                        SolverError::Factorization("conjugate gradients did not converge".into())
                    })?;
                    out.push(x);
                }
                out
            }
        };
        let mut out: VectorField = match pinned {
            Some(p) => p.iter().map(|x| x.unwrap_or_else(Vec3::zeros)).collect(),
            None => vec![Vec3::zeros(); self.n],
        };
        for (i, &t) in f.free.iter().enumerate() {
            out[t] = Vec3::new(sol[0][i], sol[1][i], sol[2][i]);
        }
        Ok(out)
    }
}

/// Squared weights and weighted targets of an anchor set.
pub fn anchor_terms(n: usize, anchors: &AnchorSet) -> (Vec<f64>, Vec<Vec3>) {
    let mut w = vec![0.0; n];
    let mut rhs = vec![Vec3::zeros(); n];
    for a in anchors.iter() {
        let b2 = a.weight * a.weight;
        w[a.tet] = b2;
        rhs[a.tet] = a.direction * b2;
    }
    (w, rhs)
}

/// Pre-normalization minimizer of the anchor-constrained smoothness energy.
pub fn solve_unnormalized(
    mesh: &TetMesh,
    anchors: &AnchorSet,
    cfg: &FieldOptConfig,
) -> Result<VectorField, FieldOptError> {
    if anchors.is_empty() {
        return Err(FieldOptError::EmptyAnchorSet);
    }
    cfg.validate()?;
    anchors.validate(mesh)?;
    let (w, rhs) = anchor_terms(mesh.num_tets(), anchors);
    FieldSystem::new(mesh, cfg.alpha).solve(&w, &rhs, None)
}

/// Smooth unit field interpolating the anchors.
pub fn interpolate_field(
    mesh: &TetMesh,
    anchors: &AnchorSet,
    cfg: &FieldOptConfig,
) -> Result<VectorField, FieldOptError> {
    let raw = solve_unnormalized(mesh, anchors, cfg)?;
    normalize_field(&raw).map_err(|tet| FieldOptError::ZeroVectorAfterSolve { tet })
}

/// Largest `‖v_i − a_i‖` over the anchors.
pub fn anchor_residual(field: &[Vec3], anchors: &AnchorSet) -> f64 {
    anchors.iter().map(|a| (field[a.tet] - a.direction).norm()).fold(0.0, f64::max)
}

/// Part-surface normal per tet near the part: tets with PART faces take the
/// mean of those faces' normals pointing into the domain, and the normal is
/// carried outward by breadth-first search up to `depth` face steps.
pub fn part_normal_ring(mesh: &TetMesh, depth: usize) -> Result<BTreeMap<usize, Vec3>, FieldOptError> {
    let mut normal: BTreeMap<usize, Vec3> = BTreeMap::new();
    for bf in mesh.boundary_faces().iter().filter(|bf| bf.tag == BoundaryTag::Part) {
        // the area vector points into the domain, away from the part
        *normal.entry(bf.tet).or_insert_with(Vec3::zeros) += mesh.face_area_vector(bf.tet, bf.local_face);
    }
    if normal.is_empty() {
        return Err(FieldOptError::NoPartFaces);
    }
    normal.retain(|_, n| n.norm() > 0.0);
    for n in normal.values_mut() {
        *n = n.normalize();
    }
    let mut frontier: Vec<usize> = normal.keys().copied().collect();
    for _ in 0..depth {
        let mut next = Vec::new();
        for &t in &frontier {
            let nt = normal[&t];
            for nb in mesh.tet_neighbors(t) {
                if let std::collections::btree_map::Entry::Vacant(e) = normal.entry(nb) {
                    e.insert(nt);
                    next.push(nb);
                }
            }
        }
        frontier = next;
    }
    Ok(normal)
}

/// `v ← normalize(α v + (1 − α) n)` on tets within `depth` steps of the part.
pub fn blend_with_normals(
    field: &[Vec3],
    mesh: &TetMesh,
    alpha_blend: f64,
    depth: usize,
) -> Result<VectorField, FieldOptError> {
    if !(0.0..=1.0).contains(&alpha_blend) {
        return Err(FieldOptError::InvalidConfig(format!("blend {alpha_blend} outside [0, 1]")));
    }
    let ring = part_normal_ring(mesh, depth)?;
    let mut out = field.to_vec();
    for (&t, n) in &ring {
        let b = field[t] * alpha_blend + n * (1.0 - alpha_blend);
        let len = b.norm();
        if len < ZERO_VECTOR {
            return Err(FieldOptError::ZeroVectorAfterSolve { tet: t });
        }
        out[t] = b / len;
    }
    Ok(out)
}
