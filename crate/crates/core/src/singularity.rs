//! Detection and repair of field singularities.
//!
//! Point singularities are strict interior extrema of the scalar field.
//! Surface singularities are connected sets of interior faces across which
//! the field vectors oppose each other; they are admissible when their rim
//! lies on the part surface, where a local flip-and-refit can process them.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffops::{
    cotan_laplacian, integrated_divergence, normalize_field, BoundaryCondition, DiffOpsError, PoissonSolver,
    ScalarField, VectorField,
};
use crate::fieldopt::{Anchor, AnchorSet, FieldOptConfig, FieldOptError, FieldSystem};
use crate::layers::{extract_isosurface, field_range, IsoSurface, LayerError};
use crate::mesh::{BoundaryTag, TetMesh, Vec3};
use crate::sparse::SparseOperator;
use crate::trimesh::TriMesh;

#[derive(Debug, Error)]
pub enum SingularityError {
    #[error("singular boundary is not admissible (rim leaves the part surface)")]
    InadmissibleBoundary,
    #[error("correction ring reaches the stock boundary even at depth 1")]
    RingTouchesDomainBoundary,
    #[error("source surface is not manifold")]
    NonManifoldSource,
    #[error("source surface is not consistently oriented")]
    UnorientedSource,
    #[error("invalid directive: {0}")]
    InvalidDirective(String),
    #[error(transparent)]
    DiffOps(#[from] DiffOpsError),
    #[error(transparent)]
    FieldOpt(#[from] FieldOptError),
    #[error(transparent)]
    Layer(#[from] LayerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExtremumKind {
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointSingularity {
    pub vertex: usize,
    pub kind: ExtremumKind,
    pub interior: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointScan {
    /// Strict extrema, interior and boundary, ascending by vertex.
    pub singularities: Vec<PointSingularity>,
    /// Vertices that are extrema only up to exact ties with a neighbour.
    pub plateaus: Vec<usize>,
}

impl PointScan {
    pub fn interior(&self) -> impl Iterator<Item = &PointSingularity> {
        self.singularities.iter().filter(|s| s.interior)
    }
}

/// Strict local extrema of `g` over vertex 1-rings.
pub fn detect_point_singularities(mesh: &TetMesh, g: &[f64]) -> PointScan {
    let mut scan = PointScan::default();
    for v in 0..mesh.num_vertices() {
        let nbrs = mesh.vertex_neighbors(v);
        if nbrs.is_empty() {
            continue;
        }
        let (mut gt, mut lt, mut eq) = (0, 0, 0);
        for &u in nbrs {
            match g[v].partial_cmp(&g[u]) {
                Some(std::cmp::Ordering::Greater) => gt += 1,
                Some(std::cmp::Ordering::Less) => lt += 1,
                _ => eq += 1,
            }
        }
        let interior = !mesh.is_boundary_vertex(v);
        if gt == nbrs.len() {
            scan.singularities.push(PointSingularity { vertex: v, kind: ExtremumKind::Max, interior });
        } else if lt == nbrs.len() {
            scan.singularities.push(PointSingularity { vertex: v, kind: ExtremumKind::Min, interior });
        } else if eq > 0 && (gt + eq == nbrs.len() || lt + eq == nbrs.len()) {
            scan.plateaus.push(v);
        }
    }
    scan
}

/// Interior strict extrema found by rebuilding vertex adjacency from the
/// raw tets and boundary from raw face counts. Shares no code with
/// [`detect_point_singularities`] so it can certify its result.
pub fn interior_extrema_full_scan(mesh: &TetMesh, g: &[f64]) -> Vec<usize> {
    let n = mesh.num_vertices();
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    let mut faces: HashMap<[usize; 3], usize> = HashMap::new();
    for tet in mesh.tets() {
        for a in 0..4 {
            for b in 0..4 {
                if a != b {
                    adj[tet[a]].insert(tet[b]);
                }
            }
            let mut f = [tet[(a + 1) % 4], tet[(a + 2) % 4], tet[(a + 3) % 4]];
            f.sort_unstable();
            *faces.entry(f).or_insert(0) += 1;
        }
    }
    let mut boundary = vec![false; n];
    for (f, c) in &faces {
        if *c == 1 {
            for &v in f {
                boundary[v] = true;
            }
        }
    }
    (0..n)
        .filter(|&v| !boundary[v] && !adj[v].is_empty())
        .filter(|&v| adj[v].iter().all(|&u| g[v] > g[u]) || adj[v].iter().all(|&u| g[v] < g[u]))
        .collect()
}

/// Connected set of conflicted interior faces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularBoundary {
    /// Tet pairs `(a, b)`, `a < b`, one per conflicted face, sorted.
    pub faces: Vec<(usize, usize)>,
    /// Rim edges as sorted vertex pairs.
    pub rim: Vec<[usize; 2]>,
    pub admissible: bool,
}

impl SingularBoundary {
    /// Tets on either side of the conflicted faces.
    pub fn zone(&self) -> BTreeSet<usize> {
        self.faces.iter().flat_map(|&(a, b)| [a, b]).collect()
    }
}

/// Shared face of two adjacent tets, as sorted vertex ids.
fn shared_face(mesh: &TetMesh, a: usize, b: usize) -> [usize; 3] {
    let tb = mesh.tets()[b];
    let mut f: Vec<usize> = mesh.tets()[a].iter().copied().filter(|v| tb.contains(v)).collect();
    f.sort_unstable();
    [f[0], f[1], f[2]]
}

/// Conflicted faces grouped into edge-connected components.
pub fn detect_singular_boundary(mesh: &TetMesh, v: &[Vec3], conflict_threshold: f64) -> Vec<SingularBoundary> {
    let mut conflicted = Vec::new();
    for a in 0..mesh.num_tets() {
        for b in mesh.tet_neighbors(a) {
            if a < b && v[a].dot(&v[b]) < conflict_threshold {
                conflicted.push((a, b));
            }
        }
    }
    let tri: Vec<[usize; 3]> = conflicted.iter().map(|&(a, b)| shared_face(mesh, a, b)).collect();
    let mut by_edge: BTreeMap<[usize; 2], Vec<usize>> = BTreeMap::new();
    for (i, f) in tri.iter().enumerate() {
        for e in [[f[0], f[1]], [f[0], f[2]], [f[1], f[2]]] {
            by_edge.entry(e).or_default().push(i);
        }
    }
    let part_edges = tagged_edges(mesh, BoundaryTag::Part);

    let mut comp = vec![usize::MAX; tri.len()];
    let mut out = Vec::new();
    for s in 0..tri.len() {
        if comp[s] != usize::MAX {
            continue;
        }
        comp[s] = s;
        let mut stack = vec![s];
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            let f = tri[i];
            for e in [[f[0], f[1]], [f[0], f[2]], [f[1], f[2]]] {
                for &j in &by_edge[&e] {
                    if comp[j] == usize::MAX {
                        comp[j] = s;
                        stack.push(j);
                    }
                }
            }
        }
        let mut count: BTreeMap<[usize; 2], usize> = BTreeMap::new();
        for &i in &members {
            let f = tri[i];
            for e in [[f[0], f[1]], [f[0], f[2]], [f[1], f[2]]] {
                *count.entry(e).or_insert(0) += 1;
            }
        }
        let rim: Vec<[usize; 2]> = count.into_iter().filter(|(_, c)| c % 2 == 1).map(|(e, _)| e).collect();
        // a closed conflict surface encloses material the part cannot reach
        let admissible = !rim.is_empty() && rim.iter().all(|e| part_edges.contains(e));
        let mut faces: Vec<(usize, usize)> = members.iter().map(|&i| conflicted[i]).collect();
        faces.sort_unstable();
        out.push(SingularBoundary { faces, rim, admissible });
    }
    out
}

fn tagged_edges(mesh: &TetMesh, tag: BoundaryTag) -> HashSet<[usize; 2]> {
    let mut set = HashSet::new();
    for f in mesh.boundary_triangles(&[tag]) {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[0], f[2])] {
            set.insert([a.min(b), a.max(b)]);
        }
    }
    set
}

/// Tets an ADD_ANCHOR repair constrains: the tets around every vertex of
/// the tets met by the ray from `vertex` along `direction`, up to where the
/// ray leaves the domain. A lone anchored ring only moves a sink along the
/// ray; anchoring the whole escape path removes it.
pub fn anchor_footprint(mesh: &TetMesh, vertex: usize, direction: Vec3) -> BTreeSet<usize> {
    let step = 0.3 * mesh.mean_edge_length();
    let dir = direction.normalize();
    let mut hit: BTreeSet<usize> = mesh.vertex_tets(vertex).iter().copied().collect();
    let mut p = mesh.vertices()[vertex];
    let mut misses = 0;
    // a ray starting on a vertex can clip a tet corner, so allow a short gap
    while misses < 2 {
        p += dir * step;
        match mesh.locate_point(&p) {
            Some(t) => {
                misses = 0;
                hit.insert(t);
            }
            None => misses += 1,
        }
    }
    let mut out = BTreeSet::new();
    for t in hit {
        for &v in &mesh.tets()[t] {
            out.extend(mesh.vertex_tets(v).iter().copied());
        }
    }
    out
}

/// Places critical anchors along `direction` on the [`anchor_footprint`]
/// of the singular vertex and re-solves the field with `rebuild`.
pub fn resolve_type1(
    mesh: &TetMesh,
    anchors: &AnchorSet,
    singular: &PointSingularity,
    direction: Vec3,
    cfg: &FieldOptConfig,
    rebuild: &mut dyn FnMut(&AnchorSet) -> Result<VectorField, FieldOptError>,
) -> Result<(VectorField, AnchorSet), SingularityError> {
    let mut next = anchors.clone();
    for tet in anchor_footprint(mesh, singular.vertex, direction) {
        next.insert(Anchor { tet, direction, weight: cfg.beta_critical, critical: true })?;
    }
    let field = rebuild(&next)?;
    Ok((field, next))
}

/// Anchors from the outward normals of a source surface. Triangles longer
/// than the mesh's mean edge are subdivided so every crossed tet gets a
/// sample; each sample centroid inside the domain anchors its tet. Normals
/// landing in one tet are averaged, and an anchor opposing an already
/// accepted face neighbour is dropped.
pub fn orient_source_surface(source: &TriMesh, mesh: &TetMesh, weight: f64) -> Result<AnchorSet, SingularityError> {
    check_orientation(source)?;
    let h = mesh.mean_edge_length();
    let mut sums: BTreeMap<usize, Vec3> = BTreeMap::new();
    for t in 0..source.triangles.len() {
        let n = source.unit_normal(t);
        if n.norm() == 0.0 {
            continue;
        }
        let [a, b, c] = source.corners(t);
        let longest = (b - a).norm().max((c - b).norm()).max((a - c).norm());
        let k = (longest / h).ceil().max(1.0) as usize;
        for (i, j) in (0..k).flat_map(|i| (0..k - i).map(move |j| (i, j))) {
            // centroids of the k² sub-triangles of a regular split
            let mut pts = vec![(i as f64 + 1.0 / 3.0, j as f64 + 1.0 / 3.0)];
            if i + j + 1 < k {
                pts.push((i as f64 + 2.0 / 3.0, j as f64 + 2.0 / 3.0));
            }
            for (u, w) in pts {
                let p = a + (b - a) * (u / k as f64) + (c - a) * (w / k as f64);
                if let Some(tet) = mesh.locate_point(&p) {
                    *sums.entry(tet).or_insert_with(Vec3::zeros) += n;
                }
            }
        }
    }
    let mut set = AnchorSet::new();
    for (&tet, s) in &sums {
        if s.norm() == 0.0 {
            continue;
        }
        let dir = s.normalize();
        let opposed = mesh.tet_neighbors(tet).any(|nb| set.get(nb).is_some_and(|a| a.direction.dot(&dir) < 0.0));
        if opposed {
            log::warn!("source anchor in tet {tet} opposes a neighbour and was dropped");
            continue;
        }
        set.insert(Anchor { tet, direction: dir, weight, critical: false })?;
    }
    if set.is_empty() {
        log::warn!("source surface does not intersect the domain");
    }
    Ok(set)
}

/// Edge-manifold with every shared edge used once in each direction, and
/// not inward facing when closed.
fn check_orientation(src: &TriMesh) -> Result<(), SingularityError> {
    let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
    for f in &src.triangles {
        for k in 0..3 {
            *directed.entry((f[k], f[(k + 1) % 3])).or_insert(0) += 1;
        }
    }
    let counts = src.edge_counts();
    if counts.values().any(|&c| c > 2) {
        return Err(SingularityError::NonManifoldSource);
    }
    if directed.values().any(|&c| c > 1) {
        return Err(SingularityError::UnorientedSource);
    }
    if counts.values().all(|&c| c == 2) && src.signed_volume() < 0.0 {
        return Err(SingularityError::UnorientedSource);
    }
    Ok(())
}

/// Iso-values whose layers cross the tets of the singular boundary.
pub fn broken_iso_values(layers: &[IsoSurface], sb: &SingularBoundary) -> Vec<f64> {
    let zone = sb.zone();
    layers
        .iter()
        .filter(|l| l.source_tets.iter().any(|t| zone.contains(t)))
        .map(|l| l.iso_value)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionPass {
    /// Tets whose vectors were flipped and re-smoothed.
    pub ring: Vec<usize>,
    pub free_vertices: Vec<usize>,
    #[serde(skip)]
    pub scalar: ScalarField,
    #[serde(skip)]
    pub field: VectorField,
    pub layers: Vec<IsoSurface>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Type3Correction {
    pub ring_depth: usize,
    pub iso_values: Vec<f64>,
    pub passes: Vec<CorrectionPass>,
}

impl Type3Correction {
    /// Replacement surfaces at `c` from both passes.
    pub fn replacements(&self, c: f64) -> Vec<&IsoSurface> {
        self.passes.iter().flat_map(|p| p.layers.iter()).filter(|l| l.iso_value == c).collect()
    }
}

/// Local correction of an admissible surface singularity. Each pass flips
/// the vectors in a ring on one side, re-smooths them with everything
/// outside the ring held fixed, refits the scalar field inside the ring
/// with all other vertices pinned to their previous values, and extracts
/// the layers at `iso_values`. The ring shrinks if it would reach stock.
pub fn local_correction_type3(
    mesh: &TetMesh,
    field: &[Vec3],
    g: &[f64],
    sb: &SingularBoundary,
    iso_values: &[f64],
    ring_depth: usize,
    cfg: &FieldOptConfig,
) -> Result<Type3Correction, SingularityError> {
    if !sb.admissible {
        return Err(SingularityError::InadmissibleBoundary);
    }
    let lc = cotan_laplacian(mesh);
    let mut system = FieldSystem::new(mesh, cfg.alpha);
    let stock_tets: HashSet<usize> =
        mesh.boundary_faces().iter().filter(|bf| bf.tag == BoundaryTag::Stock).map(|bf| bf.tet).collect();

    // split the zone by agreement with one reference direction
    let d = field[sb.faces[0].0];
    let mut sides: [BTreeSet<usize>; 2] = [BTreeSet::new(), BTreeSet::new()];
    for &(a, b) in &sb.faces {
        let (pos, neg) = if field[a].dot(&d) >= field[b].dot(&d) { (a, b) } else { (b, a) };
        sides[0].insert(pos);
        sides[1].insert(neg);
    }
    let overlap: BTreeSet<usize> = sides[0].intersection(&sides[1]).copied().collect();
    for s in &mut sides {
        s.retain(|t| !overlap.contains(t));
    }

    for depth in (1..=ring_depth.max(1)).rev() {
        let mut passes = Vec::new();
        let mut touches = false;
        for side in 0..2 {
            let dir = if side == 0 { d } else { -d };
            let other = &sides[1 - side];
            let ring = mesh.tet_rings(sides[side].iter().copied(), depth - 1, |t| {
                !other.contains(&t) && field[t].dot(&dir) > 0.0
            });
            if ring.keys().any(|t| stock_tets.contains(t)) {
                touches = true;
                break;
            }
            passes.push(correction_pass(mesh, field, g, &lc, &mut system, ring.keys().copied().collect(), iso_values, cfg)?);
        }
        if !touches {
            return Ok(Type3Correction { ring_depth: depth, iso_values: iso_values.to_vec(), passes });
        }
        log::debug!("correction ring of depth {depth} reaches stock, shrinking");
    }
    Err(SingularityError::RingTouchesDomainBoundary)
}

#[allow(clippy::too_many_arguments)]
fn correction_pass(
    mesh: &TetMesh,
    field: &[Vec3],
    g: &[f64],
    lc: &SparseOperator,
    system: &mut FieldSystem,
    ring: Vec<usize>,
    iso_values: &[f64],
    cfg: &FieldOptConfig,
) -> Result<CorrectionPass, SingularityError> {
    let n = mesh.num_tets();
    let in_ring: Vec<bool> = {
        let mut m = vec![false; n];
        for &t in &ring {
            m[t] = true;
        }
        m
    };
    let b2 = cfg.beta_general * cfg.beta_general;
    let mut weights = vec![0.0; n];
    let mut rhs = vec![Vec3::zeros(); n];
    let mut pinned: Vec<Option<Vec3>> = field.iter().map(|v| Some(*v)).collect();
    for &t in &ring {
        weights[t] = b2;
        rhs[t] = -field[t] * b2;
        pinned[t] = None;
    }
    let raw = system.solve(&weights, &rhs, Some(&pinned))?;
    let mut new_field = field.to_vec();
    let ring_vecs: Vec<Vec3> = ring.iter().map(|&t| raw[t]).collect();
    let normalized = normalize_field(&ring_vecs).map_err(|i| FieldOptError::ZeroVectorAfterSolve { tet: ring[i] })?;
    for (&t, v) in ring.iter().zip(normalized) {
        new_field[t] = v;
    }

    // vertices touched only by ring tets are refitted
    let mut free = vec![true; mesh.num_vertices()];
    let mut touched = vec![false; mesh.num_vertices()];
    for (t, tet) in mesh.tets().iter().enumerate() {
        for &v in tet {
            if in_ring[t] {
                touched[v] = true;
            } else {
                free[v] = false;
            }
        }
    }
    let fixed: Vec<Option<f64>> = (0..g.len()).map(|v| if free[v] && touched[v] { None } else { Some(g[v]) }).collect();
    let free_vertices: Vec<usize> = (0..g.len()).filter(|&v| fixed[v].is_none()).collect();
    let scalar = if free_vertices.is_empty() {
        g.to_vec()
    } else {
        let solver = PoissonSolver::with_fixed(lc, fixed)?;
        solver.solve_rhs(&integrated_divergence(mesh, &new_field)?)?
    };
    let (lo, hi) = field_range(&scalar).unwrap_or((0.0, 0.0));
    let layers = iso_values
        .iter()
        .filter(|&&c| lo < c && c < hi)
        .map(|&c| extract_isosurface(mesh, &scalar, c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CorrectionPass { ring, free_vertices, scalar, field: new_field, layers })
}

/// What a directive points at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DirectiveTarget {
    Vertex { vertex: usize },
    /// The interior point singularity nearest to a position.
    Near { point: Vec3 },
    /// Every interior point singularity of the round it is applied in.
    AllPoints,
    /// A surface singularity component by detection index.
    Boundary { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DirectiveAction {
    AddAnchor,
    LocalCorrection,
    ReorientSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolutionDirective {
    pub target: DirectiveTarget,
    pub action: DirectiveAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_direction: Option<Vec3>,
}

impl ResolutionDirective {
    pub fn add_anchor(target: DirectiveTarget, direction: Vec3) -> Self {
        Self { target, action: DirectiveAction::AddAnchor, anchor_direction: Some(direction) }
    }

    pub fn validate(&self) -> Result<(), SingularityError> {
        match (self.action, self.anchor_direction) {
            (DirectiveAction::AddAnchor, None) => {
                Err(SingularityError::InvalidDirective("ADD_ANCHOR needs an anchor direction".into()))
            }
            (DirectiveAction::AddAnchor, Some(d)) if !(d.norm() > 0.0 && d.iter().all(|x| x.is_finite())) => {
                Err(SingularityError::InvalidDirective("anchor direction must be a nonzero vector".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularityConfig {
    pub max_rounds: usize,
    pub conflict_threshold: f64,
    pub ring_depth: usize,
    pub bc: BoundaryCondition,
}

impl Default for SingularityConfig {
    fn default() -> Self {
        Self { max_rounds: 20, conflict_threshold: 0.0, ring_depth: 3, bc: BoundaryCondition::Natural }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BoundaryStatus {
    /// Type III: processed by local correction at layer extraction.
    Admissible,
    /// Type IV: needs new anchors.
    NeedsDirective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRecord {
    pub index: usize,
    pub face_count: usize,
    pub rim_edges: usize,
    pub admissible: bool,
    pub status: BoundaryStatus,
    /// Tet pairs of the conflicted faces.
    pub faces: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairRecord {
    pub round: usize,
    pub vertex: usize,
    pub kind: ExtremumKind,
    pub direction: Vec3,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SingularityReport {
    pub rounds: usize,
    /// Interior point singularities seen in the first round.
    pub initial_points: Vec<PointSingularity>,
    pub repairs: Vec<RepairRecord>,
    /// Interior point singularities left at the end.
    pub remaining_points: Vec<PointSingularity>,
    pub boundary_extrema: usize,
    pub plateaus: Vec<usize>,
    pub boundaries: Vec<BoundaryRecord>,
    /// No interior extrema by independent full scan and no Type IV left.
    pub clean: bool,
}

impl SingularityReport {
    pub fn unresolved(&self) -> bool {
        !self.remaining_points.is_empty()
            || self.boundaries.iter().any(|b| b.status == BoundaryStatus::NeedsDirective)
    }
}

#[derive(Debug, Clone)]
pub struct SingularityOutcome {
    pub field: VectorField,
    pub scalar: ScalarField,
    pub anchors: AnchorSet,
    pub report: SingularityReport,
    /// Surface singularities of the final field.
    pub boundaries: Vec<SingularBoundary>,
}

/// The detect / repair loop. Interior point singularities are matched
/// against ADD_ANCHOR directives in list order (each used at most once) and
/// the field is rebuilt through `rebuild`; rounds stop when no extremum is
/// left, no directive applies, or `max_rounds` is reached. Surface
/// singularities of the final field are then classified.
pub fn classify_and_iterate(
    mesh: &TetMesh,
    field: &[Vec3],
    anchors: &AnchorSet,
    directives: &[ResolutionDirective],
    cfg: &FieldOptConfig,
    scfg: &SingularityConfig,
    rebuild: &mut dyn FnMut(&AnchorSet) -> Result<VectorField, FieldOptError>,
) -> Result<SingularityOutcome, SingularityError> {
    for d in directives {
        d.validate()?;
    }
    let solver = PoissonSolver::new(mesh, scfg.bc)?;
    let mut field = field.to_vec();
    let mut anchors = anchors.clone();
    let mut used = vec![false; directives.len()];
    let mut report = SingularityReport::default();
    let mut g;
    loop {
        report.rounds += 1;
        g = solver.solve(mesh, &field)?;
        let scan = detect_point_singularities(mesh, &g);
        let interior: Vec<PointSingularity> = scan.interior().copied().collect();
        if report.rounds == 1 {
            report.initial_points = interior.clone();
        }
        report.boundary_extrema = scan.singularities.len() - interior.len();
        report.plateaus = scan.plateaus;
        report.remaining_points = interior.clone();
        if interior.is_empty() || report.rounds >= scfg.max_rounds.max(1) {
            break;
        }
        let mut applied = false;
        for (i, d) in directives.iter().enumerate() {
            if used[i] || d.action != DirectiveAction::AddAnchor {
                continue;
            }
            let dir = d.anchor_direction.expect("validated").normalize();
            let targets: Vec<PointSingularity> = match d.target {
                DirectiveTarget::Vertex { vertex } => interior.iter().filter(|s| s.vertex == vertex).copied().collect(),
                DirectiveTarget::Near { point } => interior
                    .iter()
                    .min_by(|a, b| {
                        let da = (mesh.vertices()[a.vertex] - point).norm();
                        let db = (mesh.vertices()[b.vertex] - point).norm();
                        da.total_cmp(&db).then(a.vertex.cmp(&b.vertex))
                    })
                    .copied()
                    .into_iter()
                    .collect(),
                DirectiveTarget::AllPoints => interior.clone(),
                DirectiveTarget::Boundary { .. } => Vec::new(),
            };
            if targets.is_empty() {
                continue;
            }
            used[i] = true;
            applied = true;
            for s in targets {
                for tet in anchor_footprint(mesh, s.vertex, dir) {
                    anchors.insert(Anchor { tet, direction: dir, weight: cfg.beta_critical, critical: true })?;
                }
                report.repairs.push(RepairRecord { round: report.rounds, vertex: s.vertex, kind: s.kind, direction: dir });
            }
        }
        if !applied {
            break;
        }
        field = rebuild(&anchors)?;
    }

    let boundaries = detect_singular_boundary(mesh, &field, scfg.conflict_threshold);
    report.boundaries = boundaries
        .iter()
        .enumerate()
        .map(|(index, b)| BoundaryRecord {
            index,
            face_count: b.faces.len(),
            rim_edges: b.rim.len(),
            admissible: b.admissible,
            status: if b.admissible { BoundaryStatus::Admissible } else { BoundaryStatus::NeedsDirective },
            faces: b.faces.clone(),
        })
        .collect();
    report.clean = interior_extrema_full_scan(mesh, &g).is_empty()
        && !report.boundaries.iter().any(|b| b.status == BoundaryStatus::NeedsDirective);
    Ok(SingularityOutcome { field, scalar: g, anchors, report, boundaries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffops::{sample_vertices, solve_poisson};
    use crate::fieldopt::interpolate_field;
    use crate::hull::convex_hull;
    use crate::layers::{audit_watertight, generate_layer_set, LayerSpec};
    use crate::scenes;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_extrema(mesh: &TetMesh, g: &[f64]) -> Vec<PointSingularity> {
        let mut out = Vec::new();
        for v in 0..mesh.num_vertices() {
            let nb: BTreeSet<usize> =
                mesh.tets().iter().filter(|t| t.contains(&v)).flatten().copied().filter(|&u| u != v).collect();
            let interior = !mesh
                .boundary_faces()
                .iter()
                .any(|bf| mesh.face_vertices(bf.tet, bf.local_face).contains(&v));
            if nb.iter().all(|&u| g[v] > g[u]) {
                out.push(PointSingularity { vertex: v, kind: ExtremumKind::Max, interior });
            } else if nb.iter().all(|&u| g[v] < g[u]) {
                out.push(PointSingularity { vertex: v, kind: ExtremumKind::Min, interior });
            }
        }
        out
    }

    #[test]
    fn linear_field_has_no_interior_extrema() {
        let m = scenes::jittered_cube(4, 0.2, 5);
        let g = sample_vertices(&m, |p| p.x + 0.3 * p.y - p.z);
        assert_eq!(detect_point_singularities(&m, &g).interior().count(), 0);
        assert!(interior_extrema_full_scan(&m, &g).is_empty());
    }

    #[test]
    fn constructed_maximum_is_found() {
        let m = scenes::box_mesh(Vec3::zeros(), Vec3::repeat(1.0), [4, 4, 4]);
        let c = Vec3::repeat(0.5);
        let g = sample_vertices(&m, |p| -(p - c).norm_squared());
        let scan = detect_point_singularities(&m, &g);
        let interior: Vec<_> = scan.interior().collect();
        assert_eq!(interior.len(), 1);
        assert_eq!(m.vertices()[interior[0].vertex], c);
        assert_eq!(interior[0].kind, ExtremumKind::Max);
        assert_eq!(interior_extrema_full_scan(&m, &g), vec![interior[0].vertex]);
    }

    #[test]
    fn plateau_is_flagged_not_reported() {
        let m = scenes::box_mesh(Vec3::zeros(), Vec3::repeat(1.0), [4, 4, 4]);
        let c = Vec3::repeat(0.5);
        let mut g = sample_vertices(&m, |p| -(p - c).norm_squared());
        let top = (0..m.num_vertices()).find(|&v| m.vertices()[v] == c).unwrap();
        let nb = m.vertex_neighbors(top)[0];
        g[nb] = g[top];
        let scan = detect_point_singularities(&m, &g);
        assert_eq!(scan.interior().count(), 0);
        assert!(scan.plateaus.contains(&top) && scan.plateaus.contains(&nb));
    }

    #[test]
    fn detector_matches_brute_force_on_random_fields() {
        let m = scenes::jittered_cube(5, 0.25, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let g: Vec<f64> = (0..m.num_vertices()).map(|_| rng.gen()).collect();
            let scan = detect_point_singularities(&m, &g);
            assert_eq!(scan.singularities, brute_force_extrema(&m, &g));
            let mut interior: Vec<usize> = scan.interior().map(|s| s.vertex).collect();
            interior.sort_unstable();
            assert_eq!(interior_extrema_full_scan(&m, &g), interior);
        }
    }

    #[test]
    fn two_tets_with_opposite_vectors() {
        let m = TetMesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z(), Vec3::repeat(1.0)],
            vec![[0, 1, 2, 3], [1, 2, 3, 4]],
        )
        .unwrap();
        let v = vec![Vec3::z(), -Vec3::z()];
        let sb = detect_singular_boundary(&m, &v, 0.0);
        assert_eq!(sb.len(), 1);
        assert_eq!(sb[0].faces, vec![(0, 1)]);
        assert_eq!(sb[0].rim.len(), 3);
        assert!(!sb[0].admissible);
        assert!(detect_singular_boundary(&m, &[Vec3::z(), Vec3::z()], 0.0).is_empty());
    }

    #[test]
    fn opposing_bar_cut_matches_exhaustive_scan() {
        let m = scenes::box_mesh(Vec3::zeros(), Vec3::new(3.0, 1.0, 1.0), [9, 3, 3]);
        let n = m.num_tets();
        let anchors: AnchorSet = [
            Anchor { tet: 0, direction: Vec3::x(), weight: 1e5, critical: false },
            Anchor { tet: n - 1, direction: -Vec3::x(), weight: 1e5, critical: false },
        ]
        .into_iter()
        .collect();
        let v = interpolate_field(&m, &anchors, &FieldOptConfig::default()).unwrap();
        let sb = detect_singular_boundary(&m, &v, 0.0);
        assert_eq!(sb.len(), 1);
        let mut brute = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if m.tet_neighbors(a).any(|x| x == b) && v[a].dot(&v[b]) < 0.0 {
                    brute.push((a, b));
                }
            }
        }
        assert_eq!(sb[0].faces, brute);
        // the cut spans the cross-section, so every rim edge is on the hull
        let boundary: HashSet<[usize; 2]> = m
            .boundary_triangles(&[BoundaryTag::Untagged, BoundaryTag::Part, BoundaryTag::Stock])
            .iter()
            .flat_map(|f| [[f[0], f[1]], [f[1], f[2]], [f[0], f[2]]])
            .map(|[a, b]| [a.min(b), a.max(b)])
            .collect();
        assert!(sb[0].rim.iter().all(|e| boundary.contains(e)));
    }

    #[test]
    fn rim_on_part_is_admissible() {
        let (m, v) = scenes::two_stream_tunnel(4);
        let sb = detect_singular_boundary(&m, &v, 0.0);
        assert_eq!(sb.len(), 1);
        assert!(sb[0].admissible);
        // the same conflict with stock walls is not
        let stock = m.clone().with_tag_fn(|_, _| BoundaryTag::Stock);
        assert!(!detect_singular_boundary(&stock, &v, 0.0)[0].admissible);
    }

    #[test]
    fn sink_in_ball_is_removed_by_anchoring() {
        let m = scenes::ball_mesh(6);
        let cfg = FieldOptConfig::default();
        let mut anchors = AnchorSet::new();
        for bf in m.boundary_faces() {
            let n = -m.outward_normal(bf.tet, bf.local_face);
            anchors.insert(Anchor { tet: bf.tet, direction: n, weight: cfg.beta_general, critical: false }).unwrap();
        }
        let mut rebuild = |a: &AnchorSet| interpolate_field(&m, a, &cfg);
        let v = rebuild(&anchors).unwrap();
        let g = solve_poisson(&m, &v, BoundaryCondition::Natural).unwrap();
        let mut points: Vec<PointSingularity> = detect_point_singularities(&m, &g).interior().copied().collect();
        assert!(!points.is_empty());
        let mut current = anchors;
        for _ in 0..3 {
            if points.is_empty() {
                break;
            }
            let (v, a) = resolve_type1(&m, &current, &points[0], Vec3::z(), &cfg, &mut rebuild).unwrap();
            current = a;
            let g = solve_poisson(&m, &v, BoundaryCondition::Natural).unwrap();
            points = detect_point_singularities(&m, &g).interior().copied().collect();
        }
        assert!(points.is_empty());
    }

    fn cup_anchors(m: &TetMesh, cfg: &FieldOptConfig) -> AnchorSet {
        let hull = convex_hull(&scenes::cup_points()).unwrap();
        let mut anchors = orient_source_surface(&hull, m, cfg.beta_general).unwrap();
        for (t, d) in crate::fieldopt::part_normal_ring(m, 0).unwrap() {
            if anchors.get(t).is_none() {
                anchors.insert(Anchor { tet: t, direction: d, weight: cfg.beta_general, critical: false }).unwrap();
            }
        }
        anchors
    }

    #[test]
    fn cavity_sink_is_removed_by_directive() {
        let m = scenes::cup_scene(2);
        let cfg = FieldOptConfig::default();
        let anchors = cup_anchors(&m, &cfg);
        let mut rebuild = |a: &AnchorSet| interpolate_field(&m, a, &cfg);
        let v = rebuild(&anchors).unwrap();
        let g = solve_poisson(&m, &v, BoundaryCondition::Natural).unwrap();
        let points: Vec<PointSingularity> = detect_point_singularities(&m, &g).interior().copied().collect();
        assert_eq!(points.len(), 1);
        assert!((m.vertices()[points[0].vertex] - Vec3::new(2.0, 2.0, 1.0)).norm() < 0.6);

        let (v2, a2) = resolve_type1(&m, &anchors, &points[0], Vec3::z(), &cfg, &mut rebuild).unwrap();
        assert!(a2.len() > anchors.len());
        let g2 = solve_poisson(&m, &v2, BoundaryCondition::Natural).unwrap();
        assert!(interior_extrema_full_scan(&m, &g2).is_empty());

        let directive = ResolutionDirective::add_anchor(DirectiveTarget::AllPoints, Vec3::z());
        let out = classify_and_iterate(&m, &v, &anchors, &[directive], &cfg, &SingularityConfig::default(), &mut rebuild)
            .unwrap();
        assert_eq!(out.report.rounds, 2);
        assert_eq!(out.report.initial_points.len(), 1);
        assert!(out.report.remaining_points.is_empty());
        assert!(interior_extrema_full_scan(&m, &out.scalar).is_empty());
    }

    #[test]
    fn footprint_follows_the_ray_out() {
        let m = scenes::box_mesh(Vec3::zeros(), Vec3::repeat(1.0), [4, 4, 4]);
        let centre = (0..m.num_vertices()).find(|&v| m.vertices()[v] == Vec3::repeat(0.5)).unwrap();
        let fp = anchor_footprint(&m, centre, Vec3::z());
        assert!(fp.iter().any(|&t| m.tet_centroid(t).z > 0.8));
        // two vertex rings around the start, nothing further back
        assert!(fp.iter().all(|&t| m.tet_points(t).iter().any(|p| p.z >= 0.25)));
    }

    #[test]
    fn hull_source_anchors_point_outward() {
        let m = scenes::box_mesh(Vec3::repeat(-1.0), Vec3::repeat(1.0), [6, 6, 6]);
        let pts: Vec<Vec3> = (0..8)
            .map(|c| Vec3::new((c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64) - Vec3::repeat(0.5))
            .collect();
        let hull = convex_hull(&pts).unwrap();
        let set = orient_source_surface(&hull, &m, 1e5).unwrap();
        assert!(!set.is_empty());
        for a in set.iter() {
            assert!(a.direction.dot(&m.tet_centroid(a.tet)) > 0.0);
            for nb in m.tet_neighbors(a.tet) {
                if let Some(b) = set.get(nb) {
                    assert!(a.direction.dot(&b.direction) >= 0.0);
                }
            }
        }
        let far: Vec<Vec3> = pts.iter().map(|p| p + Vec3::repeat(10.0)).collect();
        assert!(orient_source_surface(&convex_hull(&far).unwrap(), &m, 1e5).unwrap().is_empty());
        assert!(matches!(orient_source_surface(&hull.flipped(), &m, 1e5), Err(SingularityError::UnorientedSource)));
    }

    #[test]
    fn sphere_source_in_shell_gives_no_interior_extrema() {
        let m = scenes::shell_mesh(8, 0.4, 1.0);
        let sphere = scenes::icosphere(2, 0.7);
        let cfg = FieldOptConfig::default();
        let anchors = orient_source_surface(&sphere, &m, cfg.beta_general).unwrap();
        let v = interpolate_field(&m, &anchors, &cfg).unwrap();
        let g = solve_poisson(&m, &v, BoundaryCondition::Natural).unwrap();
        assert!(interior_extrema_full_scan(&m, &g).is_empty());
    }

    #[test]
    fn type3_correction_replaces_broken_layers() {
        let (m, v) = scenes::two_stream_tunnel(8);
        let g = solve_poisson(&m, &v, BoundaryCondition::Natural).unwrap();
        let sb = detect_singular_boundary(&m, &v, 0.0);
        assert_eq!(sb.len(), 1);
        let layers = generate_layer_set(&m, &g, LayerSpec::LayerCount(24), 42).unwrap();
        let broken = broken_iso_values(&layers.layers, &sb[0]);
        assert!(!broken.is_empty());
        let fix = local_correction_type3(&m, &v, &g, &sb[0], &broken, 3, &FieldOptConfig::default()).unwrap();
        assert_eq!(fix.passes.len(), 2);
        for &c in &broken {
            let reps = fix.replacements(c);
            assert!(!reps.is_empty(), "no replacement at {c}");
            assert!(reps.iter().all(|r| audit_watertight(&m, r).is_watertight()));
        }
        // locality: values away from the boundary are untouched
        let zone = sb[0].zone();
        let far = m.tet_rings(zone.iter().copied(), fix.ring_depth + 1, |_| true);
        let near: HashSet<usize> = far.keys().flat_map(|&t| m.tets()[t]).collect();
        for p in &fix.passes {
            for vtx in 0..m.num_vertices() {
                if !near.contains(&vtx) {
                    assert_eq!(p.scalar[vtx].to_bits(), g[vtx].to_bits());
                }
            }
        }
    }

    #[test]
    fn inadmissible_boundary_is_rejected() {
        let (m, v) = scenes::two_stream_tunnel(4);
        let m = m.with_tag_fn(|_, _| BoundaryTag::Stock);
        let g = solve_poisson(&m, &v, BoundaryCondition::Natural).unwrap();
        let sb = detect_singular_boundary(&m, &v, 0.0);
        assert!(matches!(
            local_correction_type3(&m, &v, &g, &sb[0], &[0.1], 3, &FieldOptConfig::default()),
            Err(SingularityError::InadmissibleBoundary)
        ));
    }

    #[test]
    fn clean_field_takes_one_round() {
        let m = scenes::unit_cube_scene(4);
        let g = sample_vertices(&m, |p| p.z);
        let v = normalize_field(&crate::diffops::gradient(&m, &g).unwrap()).unwrap();
        let cfg = FieldOptConfig::default();
        let mut rebuild = |a: &AnchorSet| interpolate_field(&m, a, &cfg);
        let out = classify_and_iterate(&m, &v, &AnchorSet::new(), &[], &cfg, &SingularityConfig::default(), &mut rebuild)
            .unwrap();
        assert_eq!(out.report.rounds, 1);
        assert!(out.report.clean);
        assert!(out.report.repairs.is_empty() && out.report.boundaries.is_empty());
    }

    #[test]
    fn add_anchor_directive_needs_direction() {
        let d = ResolutionDirective { target: DirectiveTarget::AllPoints, action: DirectiveAction::AddAnchor, anchor_direction: None };
        assert!(d.validate().is_err());
    }
}
