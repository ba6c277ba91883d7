//! Discrete operators on piecewise-linear scalar fields and element-constant
//! vector fields: gradient, integrated divergence, cotangent Laplacian,
//! lumped mass, a Poisson solve and the irrotationality metric.
//!
//! Sign convention: `D_i(v) = Σ_t vol_t ∇h_i · v_t`, so that
//! `Σ_i g_i D_i(v) = Σ_t vol_t ∇g_t · v_t` for every `g` and `v`. The
//! Laplacian is the positive semi-definite stiffness matrix, which makes
//! `L_c g = D(∇g)` and turns the least-squares projection of `v` onto
//! gradients into `L_c g = D(v)`.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{BoundaryTag, TetMesh, Vec3};
use crate::sparse::{SolverError, SparseOperator, SpdSolver};

/// One value per vertex; linear inside each tet.
pub type ScalarField = Vec<f64>;

/// One vector per tet.
pub type VectorField = Vec<Vec3>;

/// Edge-matrix determinant below which a tet is treated as singular.
pub const SINGULAR_DET: f64 = 1e-12;

/// Norm below which a vector cannot be normalized.
pub const ZERO_VECTOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffOpsError {
    #[error("tet {tet} has a singular edge matrix (det {det:e})")]
    SingularTet { tet: usize, det: f64 },
    #[error("solver failure: {0}")]
    SolverFailure(#[from] SolverError),
    #[error("no boundary faces carry the {0} tag")]
    IncompatibleBC(String),
    #[error("field has {got} entries, expected {expected}")]
    LengthMismatch { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BoundaryCondition {
    /// Gauge-fixed pure Neumann solve.
    #[default]
    Natural,
    /// Every vertex of a face with `tag` is pinned to `value`.
    Dirichlet { tag: BoundaryTag, value: f64 },
}

fn check_len(got: usize, expected: usize) -> Result<(), DiffOpsError> {
    if got != expected {
        return Err(DiffOpsError::LengthMismatch { got, expected });
    }
    Ok(())
}

/// Samples `f` at the mesh vertices.
pub fn sample_vertices(mesh: &TetMesh, f: impl Fn(&Vec3) -> f64) -> ScalarField {
    mesh.vertices().iter().map(f).collect()
}

/// Per-tet constant gradient from the inverse of the edge matrix
/// `E = [x1−x0, x2−x0, x3−x0]ᵀ`: `∇g = E⁻¹ (g1−g0, g2−g0, g3−g0)`.
pub fn gradient(mesh: &TetMesh, g: &[f64]) -> Result<VectorField, DiffOpsError> {
    check_len(g.len(), mesh.num_vertices())?;
    mesh.tets()
        .iter()
        .enumerate()
        .map(|(t, tet)| {
            let p = mesh.tet_points(t);
            let e = Matrix3::from_rows(&[
                (p[1] - p[0]).transpose(),
                (p[2] - p[0]).transpose(),
                (p[3] - p[0]).transpose(),
            ]);
            let det = e.determinant();
            if det.abs() < SINGULAR_DET {
                return Err(DiffOpsError::SingularTet { tet: t, det });
            }
            let inv = e.try_inverse().ok_or(DiffOpsError::SingularTet { tet: t, det })?;
            let dg = Vec3::new(g[tet[1]] - g[tet[0]], g[tet[2]] - g[tet[0]], g[tet[3]] - g[tet[0]]);
            Ok(inv * dg)
        })
        .collect()
}

/// Gradients of the four hat functions of tet `t`: `s_i / (3 vol)`.
pub fn hat_gradients(mesh: &TetMesh, t: usize) -> [Vec3; 4] {
    let scale = 1.0 / (3.0 * mesh.tet_volume(t));
    std::array::from_fn(|i| mesh.face_area_vector(t, i) * scale)
}

/// `D_i = (1/3) Σ_t s_i^t · v_t` over the tets incident to vertex `i`.
pub fn integrated_divergence(mesh: &TetMesh, v: &[Vec3]) -> Result<Vec<f64>, DiffOpsError> {
    check_len(v.len(), mesh.num_tets())?;
    let mut d = vec![0.0; mesh.num_vertices()];
    for (t, tet) in mesh.tets().iter().enumerate() {
        for (i, &vi) in tet.iter().enumerate() {
            d[vi] += mesh.face_area_vector(t, i).dot(&v[t]) / 3.0;
        }
    }
    Ok(d)
}

/// Cotangent weight contributed by tet `t` to the edge between local
/// vertices `i` and `j`: `(1/6) l_kl cot θ_kl`, where `kl` is the opposite
/// edge and `θ_kl` the interior dihedral angle along it.
pub fn cotan_weight(mesh: &TetMesh, t: usize, i: usize, j: usize) -> f64 {
    let tet = mesh.tets()[t];
    let (k, l) = {
        let mut rest = (0..4).filter(|&m| m != i && m != j);
        (rest.next().unwrap(), rest.next().unwrap())
    };
    let len = (mesh.vertices()[tet[k]] - mesh.vertices()[tet[l]]).norm();
    // the faces meeting along kl are those opposite i and j
    let ni = mesh.outward_normal(t, i);
    let nj = mesh.outward_normal(t, j);
    let cos = -ni.dot(&nj);
    let sin = ni.cross(&nj).norm();
    len * cos / sin / 6.0
}

/// Symmetric cotangent Laplacian: `L(i,j) = −w_ij`, `L(i,i) = Σ_k w_ik`.
/// Negative weights are kept; a warning is logged when any occur.
pub fn cotan_laplacian(mesh: &TetMesh) -> SparseOperator {
    let n = mesh.num_vertices();
    let mut op = SparseOperator::new(n, n);
    let mut negative = 0usize;
    for (t, tet) in mesh.tets().iter().enumerate() {
        for i in 0..4 {
            for j in i + 1..4 {
                let w = cotan_weight(mesh, t, i, j);
                let (a, b) = (tet[i], tet[j]);
                op.push(a, b, -w);
                op.push(b, a, -w);
                op.push(a, a, w);
                op.push(b, b, w);
            }
        }
    }
    for (r, c, v) in op.compressed() {
        if r < c && v > 0.0 {
            negative += 1;
        }
    }
    if negative > 0 {
        log::warn!("{negative} edges have negative cotangent weights");
    }
    op
}

/// Lumped mass: a quarter of the volume of each incident tet.
pub fn lumped_mass(mesh: &TetMesh) -> Vec<f64> {
    let mut m = vec![0.0; mesh.num_vertices()];
    for (t, tet) in mesh.tets().iter().enumerate() {
        let q = mesh.tet_volume(t) / 4.0;
        for &v in tet {
            m[v] += q;
        }
    }
    m
}

pub fn mass_matrix(mesh: &TetMesh) -> SparseOperator {
    SparseOperator::diagonal(&lumped_mass(mesh))
}

/// Returns unit vectors, or the first tet whose vector is too short.
pub fn normalize_field(v: &[Vec3]) -> Result<VectorField, usize> {
    v.iter()
        .enumerate()
        .map(|(t, x)| {
            let n = x.norm();
            if n < ZERO_VECTOR || !n.is_finite() {
                Err(t)
            } else {
                Ok(x / n)
            }
        })
        .collect()
}

pub fn is_normalized(v: &[Vec3]) -> bool {
    v.iter().all(|x| (x.norm() - 1.0).abs() <= 1e-9)
}

/// Cached factorization of the Laplacian with a fixed set of pinned
/// vertices. Reused across right-hand sides.
#[derive(Debug, Clone)]
pub struct PoissonSolver {
    n: usize,
    /// Pinned value per vertex, `None` for free vertices.
    fixed: Vec<Option<f64>>,
    free_index: Vec<Option<usize>>,
    free: Vec<usize>,
    /// Couplings `(free row, pinned vertex, L value)` moved to the right side.
    coupling: Vec<(usize, usize, f64)>,
    solver: SpdSolver,
    subtract_mean: bool,
}

impl PoissonSolver {
    pub fn new(mesh: &TetMesh, bc: BoundaryCondition) -> Result<Self, DiffOpsError> {
        let lc = cotan_laplacian(mesh);
        Self::with_laplacian(mesh, &lc, bc)
    }

    pub fn with_laplacian(
        mesh: &TetMesh,
        lc: &SparseOperator,
        bc: BoundaryCondition,
    ) -> Result<Self, DiffOpsError> {
        let n = mesh.num_vertices();
        let mut fixed = vec![None; n];
        match bc {
            BoundaryCondition::Natural => {
                if n > 0 {
                    fixed[0] = Some(0.0);
                }
                Self::build(lc, fixed, true)
            }
            BoundaryCondition::Dirichlet { tag, value } => {
                let mut any = false;
                for bf in mesh.boundary_faces().iter().filter(|bf| bf.tag == tag) {
                    any = true;
                    for v in mesh.face_vertices(bf.tet, bf.local_face) {
                        fixed[v] = Some(value);
                    }
                }
                if !any {
                    return Err(DiffOpsError::IncompatibleBC(tag.as_str().to_string()));
                }
                Self::build(lc, fixed, false)
            }
        }
    }

    /// Pins the given vertices to arbitrary values. At least one vertex per
    /// connected component must be pinned for the system to be definite.
    pub fn with_fixed(lc: &SparseOperator, fixed: Vec<Option<f64>>) -> Result<Self, DiffOpsError> {
        Self::build(lc, fixed, false)
    }

    fn build(lc: &SparseOperator, fixed: Vec<Option<f64>>, subtract_mean: bool) -> Result<Self, DiffOpsError> {
        let n = fixed.len();
        check_len(lc.nrows, n)?;
        let mut free_index = vec![None; n];
        let mut free = Vec::new();
        for (v, f) in fixed.iter().enumerate() {
            if f.is_none() {
                free_index[v] = Some(free.len());
                free.push(v);
            }
        }
        let mut reduced = SparseOperator::new(free.len(), free.len());
        let mut coupling = Vec::new();
        for (r, c, val) in lc.compressed() {
            if let Some(fr) = free_index[r] {
                match free_index[c] {
                    Some(fc) => reduced.push(fr, fc, val),
                    None => coupling.push((fr, c, val)),
                }
            }
        }
        let solver = SpdSolver::factor(&reduced)?;
        Ok(Self { n, fixed, free_index, free, coupling, solver, subtract_mean })
    }

    pub fn is_fixed(&self, v: usize) -> bool {
        self.free_index[v].is_none()
    }

    /// Solves `L_c g = rhs` on the free vertices, pinned values elsewhere.
    pub fn solve_rhs(&self, rhs: &[f64]) -> Result<ScalarField, DiffOpsError> {
        check_len(rhs.len(), self.n)?;
        let mut b: Vec<f64> = self.free.iter().map(|&v| rhs[v]).collect();
        for &(fr, c, val) in &self.coupling {
            b[fr] -= val * self.fixed[c].unwrap();
        }
        let x = self.solver.solve(&b);
        let mut g: ScalarField = self.fixed.iter().map(|f| f.unwrap_or(0.0)).collect();
        for (fr, &v) in self.free.iter().enumerate() {
            g[v] = x[fr];
        }
        if self.subtract_mean && self.n > 0 {
            let mean = g.iter().sum::<f64>() / self.n as f64;
            for x in &mut g {
                *x -= mean;
            }
        }
        Ok(g)
    }

    /// Least-squares scalar potential of `v`.
    pub fn solve(&self, mesh: &TetMesh, v: &[Vec3]) -> Result<ScalarField, DiffOpsError> {
        self.solve_rhs(&integrated_divergence(mesh, v)?)
    }
}

/// Scalar field whose gradient best matches `v` in the volume-weighted L²
/// sense, under the given boundary condition.
pub fn solve_poisson(mesh: &TetMesh, v: &[Vec3], bc: BoundaryCondition) -> Result<ScalarField, DiffOpsError> {
    PoissonSolver::new(mesh, bc)?.solve(mesh, v)
}

/// `(1/|Ω|) Σ_t vol_t ‖v_t − ∇g_t‖²` for a given potential `g`.
pub fn projection_residual(mesh: &TetMesh, v: &[Vec3], g: &[f64]) -> Result<f64, DiffOpsError> {
    let grad = gradient(mesh, g)?;
    let total: f64 = (0..mesh.num_tets())
        .map(|t| mesh.tet_volume(t) * (v[t] - grad[t]).norm_squared())
        .sum();
    Ok(total / mesh.total_volume())
}

/// Irrotationality metric: residual of `v` against the gradient of its own
/// natural-boundary Poisson potential.
pub fn i_rot(mesh: &TetMesh, v: &[Vec3]) -> Result<f64, DiffOpsError> {
    let g = solve_poisson(mesh, v, BoundaryCondition::Natural)?;
    projection_residual(mesh, v, &g)
}

/// [`i_rot`] with a prebuilt natural-boundary solver.
pub fn i_rot_with(solver: &PoissonSolver, mesh: &TetMesh, v: &[Vec3]) -> Result<(f64, ScalarField), DiffOpsError> {
    let g = solver.solve(mesh, v)?;
    Ok((projection_residual(mesh, v, &g)?, g))
}
