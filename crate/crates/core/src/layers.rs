//! Iso-surface working layers, their spacing, floating-volume audit and
//! cutting-depth metrics.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffops::hat_gradients;
use crate::mesh::{BoundaryTag, TetMesh, Vec3};
use crate::trimesh::{TriMesh, TriangleTree};

/// Relative margin kept between the outermost layers and the field range.
pub const RANGE_MARGIN: f64 = 1e-3;

/// Relative shift applied to vertex values that coincide with an iso-value.
pub const ISO_PERTURBATION: f64 = 1e-9;

/// Surface samples per layer for spacing statistics.
pub const SPACING_SAMPLES: usize = 200;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("iso-value {value} outside the field range ({min}, {max})")]
    IsoValueOutOfRange { value: f64, min: f64, max: f64 },
    #[error("scalar field is constant")]
    ConstantField,
    #[error("empty mesh")]
    EmptyMesh,
    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Mesh(#[from] crate::mesh::MeshError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoSurface {
    pub iso_value: f64,
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    /// Originating tet of each triangle.
    pub source_tets: Vec<usize>,
}

impl IsoSurface {
    pub fn to_trimesh(&self) -> TriMesh {
        TriMesh::new(self.vertices.clone(), self.triangles.clone())
    }

    pub fn area(&self) -> f64 {
        self.to_trimesh().area()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }
}

/// Marching-tetrahedra extraction of `{g = c}`. Crossed edges share one
/// vertex and triangles face along increasing `g`.
pub fn extract_isosurface(mesh: &TetMesh, g: &[f64], c: f64) -> Result<IsoSurface, LayerError> {
    let (min, max) = field_range(g).ok_or(LayerError::EmptyMesh)?;
    if !(min < c && c < max) {
        return Err(LayerError::IsoValueOutOfRange { value: c, min, max });
    }
    let eps = ISO_PERTURBATION * (max - min);
    // values equal to c are nudged up so no vertex sits on the surface
    let val = |v: usize| if g[v] == c { g[v] + eps } else { g[v] };

    let mut surf = IsoSurface { iso_value: c, vertices: Vec::new(), triangles: Vec::new(), source_tets: Vec::new() };
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();
    let pts = mesh.vertices();
    for (t, tet) in mesh.tets().iter().enumerate() {
        let above: Vec<usize> = (0..4).filter(|&k| val(tet[k]) > c).collect();
        let below: Vec<usize> = (0..4).filter(|&k| val(tet[k]) <= c).collect();
        if above.is_empty() || below.is_empty() {
            continue;
        }
        let mut cut = |a: usize, b: usize| -> usize {
            let (va, vb) = (tet[a], tet[b]);
            let key = (va.min(vb), va.max(vb));
            *edge_vertex.entry(key).or_insert_with(|| {
                let (ga, gb) = (val(key.0), val(key.1));
                let s = (c - ga) / (gb - ga);
                surf.vertices.push(pts[key.0] + (pts[key.1] - pts[key.0]) * s);
                surf.vertices.len() - 1
            })
        };
        let polygon: Vec<usize> = match (above.len(), below.len()) {
            (1, 3) => below.iter().map(|&b| cut(above[0], b)).collect(),
            (3, 1) => above.iter().map(|&a| cut(a, below[0])).collect(),
            _ => {
                // quad: walk the four crossed edges in cyclic order
                let (a0, a1, b0, b1) = (above[0], above[1], below[0], below[1]);
                vec![cut(a0, b0), cut(a0, b1), cut(a1, b1), cut(a1, b0)]
            }
        };
        let grad = tet_gradient(mesh, t, g, tet, &above, &below);
        let mut emit = |tri: [usize; 3]| {
            let [p, q, r] = tri.map(|i| surf.vertices[i]);
            let n = (q - p).cross(&(r - p));
            let tri = if n.dot(&grad) < 0.0 { [tri[0], tri[2], tri[1]] } else { tri };
            surf.triangles.push(tri);
            surf.source_tets.push(t);
        };
        emit([polygon[0], polygon[1], polygon[2]]);
        if polygon.len() == 4 {
            emit([polygon[0], polygon[2], polygon[3]]);
        }
    }
    Ok(surf)
}

/// Field gradient in tet `t`, or the below-to-above direction when the
/// gradient vanishes numerically.
fn tet_gradient(mesh: &TetMesh, t: usize, g: &[f64], tet: &[usize; 4], above: &[usize], below: &[usize]) -> Vec3 {
    let grads = hat_gradients(mesh, t);
    let grad: Vec3 = (0..4).map(|k| grads[k] * g[tet[k]]).sum();
    if grad.norm() > 0.0 {
        return grad;
    }
    let pts = mesh.vertices();
    let mean = |ks: &[usize]| ks.iter().map(|&k| pts[tet[k]]).sum::<Vec3>() / ks.len() as f64;
    mean(above) - mean(below)
}

pub fn field_range(g: &[f64]) -> Option<(f64, f64)> {
    if g.is_empty() {
        return None;
    }
    Some(g.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x))))
}

/// How many layers to cut.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    /// Spacing in field units, which are millimetres once `‖∇g‖ ≈ 1`.
    TargetDepth(f64),
    LayerCount(usize),
}

/// Iso-values inside `[min + δ, max − δ]`, `δ` being a small fraction of
/// the range. A layer count spreads layers over the whole interval. A target
/// depth uses `ceil(range / depth)` layers spaced exactly `depth` apart and
/// centred in the range, tightened only if they would not fit.
pub fn iso_values(g: &[f64], spec: LayerSpec) -> Result<Vec<f64>, LayerError> {
    let (min, max) = field_range(g).ok_or(LayerError::EmptyMesh)?;
    let range = max - min;
    if range <= 0.0 {
        return Err(LayerError::ConstantField);
    }
    let delta = RANGE_MARGIN * range;
    let (lo, hi) = (min + delta, max - delta);
    let mid = 0.5 * (min + max);
    match spec {
        LayerSpec::LayerCount(0) => Err(LayerError::InvalidSpec("layer count must be positive".into())),
        LayerSpec::LayerCount(1) => Ok(vec![mid]),
        LayerSpec::LayerCount(n) => {
            Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
        }
        LayerSpec::TargetDepth(d) if !(d > 0.0 && d.is_finite()) => {
            Err(LayerError::InvalidSpec(format!("target depth {d} must be positive")))
        }
        LayerSpec::TargetDepth(d) => {
            let n = (range / d).ceil().max(1.0) as usize;
            if n == 1 {
                return Ok(vec![mid]);
            }
            let step = d.min((hi - lo) / (n - 1) as f64);
            let first = mid - step * (n - 1) as f64 / 2.0;
            Ok((0..n).map(|i| first + step * i as f64).collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpacingStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub samples: usize,
    /// Samples whose ray left the domain before meeting the next layer.
    #[serde(default)]
    pub misses: usize,
}

impl SpacingStats {
    pub fn from_samples(d: &[f64]) -> Option<Self> {
        if d.is_empty() {
            return None;
        }
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            min: d.iter().copied().fold(f64::INFINITY, f64::min),
            max: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            samples: d.len(),
            misses: 0,
        })
    }

    /// Coefficient of variation `std / mean`.
    pub fn relative_std(&self) -> f64 {
        self.std / self.mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSet {
    /// Ascending by iso-value.
    pub layers: Vec<IsoSurface>,
    pub spacing: Option<SpacingStats>,
}

impl LayerSet {
    pub fn iso_values(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.iso_value).collect()
    }
}

pub fn generate_layer_set(mesh: &TetMesh, g: &[f64], spec: LayerSpec, seed: u64) -> Result<LayerSet, LayerError> {
    let values = iso_values(g, spec)?;
    let layers = values
        .iter()
        .map(|&c| extract_isosurface(mesh, g, c))
        .collect::<Result<Vec<_>, _>>()?;
    let spacing = spacing_stats(&layers, seed);
    Ok(LayerSet { layers, spacing })
}

/// Distances from random points of each layer to the next one, measured
/// along the layer normal (which points towards increasing values). Rays
/// that leave through a partial next layer are counted as misses; a nearest
/// point measure would instead report the gap to the edge of that layer.
pub fn spacing_stats(layers: &[IsoSurface], seed: u64) -> Option<SpacingStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Vec::new();
    let mut misses = 0;
    for pair in layers.windows(2) {
        let (a, b) = (pair[0].to_trimesh(), pair[1].to_trimesh());
        if a.is_empty() || b.is_empty() {
            continue;
        }
        let tree = TriangleTree::new(&b);
        for (p, tri) in a.sample_uniform(SPACING_SAMPLES, &mut rng) {
            let n = a.unit_normal(tri);
            let dir = if pair[1].iso_value >= pair[0].iso_value { n } else { -n };
            match tree.first_hit(&p, &dir, 0.0) {
                Some((t, _)) => d.push(t),
                None => misses += 1,
            }
        }
    }
    SpacingStats::from_samples(&d).map(|s| SpacingStats { misses, ..s })
}

/// Topology audit of one extracted surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatertightAudit {
    /// Edges with more than two incident triangles.
    pub non_manifold_edges: usize,
    /// Edges with one incident triangle that do not lie on a boundary face.
    pub open_interior_edges: usize,
}

impl WatertightAudit {
    pub fn is_watertight(&self) -> bool {
        self.non_manifold_edges == 0 && self.open_interior_edges == 0
    }
}

/// Every edge has at most two triangles, and edges with one triangle lie
/// in a boundary face of the domain.
pub fn audit_watertight(mesh: &TetMesh, surf: &IsoSurface) -> WatertightAudit {
    let mut count: HashMap<[usize; 2], (usize, usize)> = HashMap::new();
    for (tri, &t) in surf.triangles.iter().zip(&surf.source_tets) {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            let e = count.entry([a.min(b), a.max(b)]).or_insert((0, t));
            e.0 += 1;
        }
    }
    let mut audit = WatertightAudit { non_manifold_edges: 0, open_interior_edges: 0 };
    for (&[a, b], &(n, t)) in &count {
        if n > 2 {
            audit.non_manifold_edges += 1;
        } else if n == 1 && !segment_on_boundary(mesh, t, &surf.vertices[a], &surf.vertices[b]) {
            audit.open_interior_edges += 1;
        }
    }
    audit
}

/// True if the segment lies in a boundary face of tet `t`.
fn segment_on_boundary(mesh: &TetMesh, t: usize, p: &Vec3, q: &Vec3) -> bool {
    let scale = mesh.mean_edge_length().max(1e-300);
    (0..4).filter(|&f| mesh.neighbors(t)[f].is_none()).any(|f| {
        let [a, b, c] = mesh.face_vertices(t, f).map(|v| mesh.vertices()[v]);
        let n = (b - a).cross(&(c - a)).normalize();
        n.dot(&(p - a)).abs() <= 1e-9 * scale && n.dot(&(q - a)).abs() <= 1e-9 * scale
    })
}

/// Which side of a layer is cut away first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PeelSide {
    /// Material with `g < c` is gone at stage `c`; the part sits at high `g`.
    #[default]
    RemoveBelow,
    /// Material with `g > c` is gone at stage `c`; the part sits at low `g`.
    RemoveAbove,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatingViolation {
    pub iso_value: f64,
    pub tets: Vec<usize>,
}

/// Remaining-material components not attached to the part. Remaining tets
/// are whole tets with all four values on the kept side of `c`.
pub fn floating_volume_check(mesh: &TetMesh, g: &[f64], iso_values: &[f64], side: PeelSide) -> Vec<FloatingViolation> {
    floating_volume_check_with(mesh, g, iso_values, side, BoundaryTag::Part)
}

/// [`floating_volume_check`] with a configurable attachment tag.
pub fn floating_volume_check_with(
    mesh: &TetMesh,
    g: &[f64],
    iso_values: &[f64],
    side: PeelSide,
    attach: BoundaryTag,
) -> Vec<FloatingViolation> {
    let n = mesh.num_tets();
    let mut attached = vec![false; n];
    for bf in mesh.boundary_faces().iter().filter(|bf| bf.tag == attach) {
        attached[bf.tet] = true;
    }
    let mut out = Vec::new();
    for &c in iso_values {
        let keep: Vec<bool> = mesh
            .tets()
            .iter()
            .map(|tet| match side {
                PeelSide::RemoveBelow => tet.iter().all(|&v| g[v] >= c),
                PeelSide::RemoveAbove => tet.iter().all(|&v| g[v] <= c),
            })
            .collect();
        let mut label = vec![usize::MAX; n];
        for s in 0..n {
            if !keep[s] || label[s] != usize::MAX {
                continue;
            }
            label[s] = s;
            let mut stack = vec![s];
            let mut comp = Vec::new();
            let mut ok = false;
            while let Some(t) = stack.pop() {
                comp.push(t);
                ok |= attached[t];
                for nb in mesh.tet_neighbors(t) {
                    if keep[nb] && label[nb] == usize::MAX {
                        label[nb] = s;
                        stack.push(nb);
                    }
                }
            }
            if !ok {
                comp.sort_unstable();
                out.push(FloatingViolation { iso_value: c, tets: comp });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthVariationReport {
    pub histogram: Vec<usize>,
    pub bin_width: f64,
    pub max_depth: f64,
    pub mean_depth: f64,
    pub avg_variation: f64,
    pub samples: usize,
    /// Samples whose normal ray missed and fell back to closest distance.
    pub ray_misses: usize,
    pub definition: String,
}

/// Parameters of [`depth_variation`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthSampling {
    pub samples: usize,
    pub bins: usize,
    /// Number of height bands used for the variation measure.
    pub bands: usize,
    /// Axis along which bands are cut.
    pub band_axis: Vec3,
    pub seed: u64,
}

impl Default for DepthSampling {
    fn default() -> Self {
        Self { samples: 10_000, bins: 32, bands: 16, band_axis: Vec3::z(), seed: 42 }
    }
}

/// Leftover thickness on the part after roughing: for area-uniform samples
/// on the part, the distance along the outward normal to the first hit on
/// `envelope` (the surface the cutter last traversed). Variation is the mean
/// absolute difference between angularly successive samples inside each
/// height band.
pub fn depth_variation(
    envelope: &TriMesh,
    part: &TriMesh,
    cfg: &DepthSampling,
) -> Result<DepthVariationReport, LayerError> {
    if envelope.is_empty() || part.is_empty() || cfg.samples == 0 || cfg.bins == 0 {
        return Err(LayerError::EmptyMesh);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tree = TriangleTree::new(envelope);
    let samples = part.sample_uniform(cfg.samples, &mut rng);
    let mut depths = Vec::with_capacity(samples.len());
    let mut misses = 0;
    for (p, tri) in &samples {
        let n = part.unit_normal(*tri);
        let d = match tree.first_hit(p, &n, 0.0) {
            Some((t, _)) => t,
            None => {
                misses += 1;
                tree.closest_point(p).map(|(_, _, d)| d).unwrap_or(0.0)
            }
        };
        depths.push(d);
    }
    let max_depth = depths.iter().copied().fold(0.0, f64::max);
    let mean_depth = depths.iter().sum::<f64>() / depths.len() as f64;
    let bin_width = if max_depth > 0.0 { max_depth / cfg.bins as f64 } else { 1.0 };
    let mut histogram = vec![0; cfg.bins];
    for &d in &depths {
        histogram[((d / bin_width) as usize).min(cfg.bins - 1)] += 1;
    }

    let axis = cfg.band_axis.normalize();
    let heights: Vec<f64> = samples.iter().map(|(p, _)| p.dot(&axis)).collect();
    let (hlo, hhi) = field_range(&heights).unwrap();
    let bands = cfg.bands.max(1);
    let mut by_band: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, h) in heights.iter().enumerate() {
        let b = if hhi > hlo { (((h - hlo) / (hhi - hlo)) * bands as f64) as usize } else { 0 };
        by_band.entry(b.min(bands - 1)).or_default().push(i);
    }
    let (u, w) = orthonormal_pair(&axis);
    let mut total = 0.0;
    let mut steps = 0usize;
    for idx in by_band.values_mut() {
        let centre = idx.iter().map(|&i| samples[i].0).sum::<Vec3>() / idx.len() as f64;
        let angle = |i: usize| {
            let r = samples[i].0 - centre;
            r.dot(&w).atan2(r.dot(&u))
        };
        idx.sort_by(|&a, &b| angle(a).total_cmp(&angle(b)).then(a.cmp(&b)));
        for pair in idx.windows(2) {
            total += (depths[pair[1]] - depths[pair[0]]).abs();
            steps += 1;
        }
    }
    Ok(DepthVariationReport {
        histogram,
        bin_width,
        max_depth,
        mean_depth,
        avg_variation: if steps > 0 { total / steps as f64 } else { 0.0 },
        samples: depths.len(),
        ray_misses: misses,
        definition: format!(
            "depth along part normal to first envelope hit; variation = mean |successive difference| over {bands} bands along ({:.3}, {:.3}, {:.3}), samples ordered by angle",
            axis.x, axis.y, axis.z
        ),
    })
}

fn orthonormal_pair(axis: &Vec3) -> (Vec3, Vec3) {
    let helper = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = axis.cross(&helper).normalize();
    (u, axis.cross(&u))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Obj,
    Stl,
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Obj => "obj",
            ExportFormat::Stl => "stl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerManifestEntry {
    pub index: usize,
    pub file: String,
    pub iso_value: f64,
    pub triangles: usize,
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub format: ExportFormat,
    pub layers: Vec<LayerManifestEntry>,
    pub spacing: Option<SpacingStats>,
    pub violations: Vec<FloatingViolationSummary>,
}

/// Compact form of a violation for manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatingViolationSummary {
    pub iso_value: f64,
    pub tet_count: usize,
    pub first_tet: usize,
}

impl From<&FloatingViolation> for FloatingViolationSummary {
    fn from(v: &FloatingViolation) -> Self {
        Self { iso_value: v.iso_value, tet_count: v.tets.len(), first_tet: v.tets.first().copied().unwrap_or(0) }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `layer_NNN.<ext>` per layer plus `manifest.json`; returns the
/// written paths, manifest last.
pub fn export_layers(
    layers: &LayerSet,
    violations: &[FloatingViolation],
    dir: &Path,
    format: ExportFormat,
) -> Result<Vec<PathBuf>, LayerError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| LayerError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    if layers.layers.is_empty() {
        log::warn!("exporting an empty layer set to {}", dir.display());
    }
    let mut files = Vec::new();
    let mut entries = Vec::new();
    for (i, layer) in layers.layers.iter().enumerate() {
        let name = format!("layer_{i:03}.{}", format.extension());
        let path = dir.join(&name);
        let tm = layer.to_trimesh();
        let bytes = match format {
            ExportFormat::Obj => tm.to_obj().into_bytes(),
            ExportFormat::Stl => tm.to_stl(),
        };
        fs::write(&path, bytes).map_err(io(&path))?;
        entries.push(LayerManifestEntry {
            index: i,
            file: name,
            iso_value: layer.iso_value,
            triangles: layer.triangles.len(),
            area: tm.area(),
        });
        files.push(path);
    }
    let manifest = LayerManifest {
        format,
        layers: entries,
        spacing: layers.spacing,
        violations: violations.iter().map(Into::into).collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io(&path))?;
    files.push(path);
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffops::sample_vertices;
    use crate::scenes;

    #[test]
    fn single_tet_midpoint_triangle() {
        let m = scenes::unit_tet();
        let s = extract_isosurface(&m, &[0.0, 1.0, 0.0, 0.0], 0.5).unwrap();
        assert_eq!(s.triangles.len(), 1);
        let mut got: Vec<[f64; 3]> = s.vertices.iter().map(|v| [v.x, v.y, v.z]).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, vec![[0.5, 0.0, 0.0], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]]);
        let n = s.to_trimesh().raw_normal(0);
        assert!(n.x > 0.0);
    }

    #[test]
    fn planar_cut_of_cube_has_unit_area() {
        let m = scenes::jittered_cube(5, 0.2, 4);
        let g = sample_vertices(&m, |p| p.z);
        let s = extract_isosurface(&m, &g, 0.5).unwrap();
        assert!((s.area() - 1.0).abs() < 1e-9);
        assert!(s.vertices.iter().all(|v| (v.z - 0.5).abs() < 1e-12));
        assert!(audit_watertight(&m, &s).is_watertight());
    }

    #[test]
    fn out_of_range_iso_value_errors() {
        let m = scenes::unit_tet();
        assert!(matches!(
            extract_isosurface(&m, &[0.0, 1.0, 0.0, 0.0], 1.0),
            Err(LayerError::IsoValueOutOfRange { .. })
        ));
    }

    #[test]
    fn iso_value_on_vertices_is_perturbed() {
        let m = scenes::box_mesh(Vec3::zeros(), Vec3::repeat(1.0), [4, 4, 4]);
        let g = sample_vertices(&m, |p| p.z);
        let s = extract_isosurface(&m, &g, 0.5).unwrap();
        assert!(!s.is_empty());
        assert!((s.area() - 1.0).abs() < 1e-6);
        assert!(audit_watertight(&m, &s).is_watertight());
    }

    #[test]
    fn orientation_follows_gradient_and_layers_nest() {
        let m = scenes::jittered_cube(4, 0.2, 11);
        let g = sample_vertices(&m, |p| (p - Vec3::new(-0.3, -0.2, -0.4)).norm());
        let set = generate_layer_set(&m, &g, LayerSpec::LayerCount(5), 1).unwrap();
        for layer in &set.layers {
            let tm = layer.to_trimesh();
            for (i, &t) in layer.source_tets.iter().enumerate() {
                let grads = hat_gradients(&m, t);
                let grad: Vec3 = (0..4).map(|k| grads[k] * g[m.tets()[t][k]]).sum();
                assert!(tm.raw_normal(i).dot(&grad) > 0.0);
            }
            assert!(audit_watertight(&m, layer).is_watertight());
        }
        for pair in set.layers.windows(2) {
            let lower = pair[0].iso_value;
            for p in &pair[1].vertices {
                let t = m.locate_point(p).unwrap();
                let b = m.barycentric(t, p);
                let val: f64 = (0..4).map(|k| b[k] * g[m.tets()[t][k]]).sum();
                assert!(val >= lower);
            }
        }
    }

    #[test]
    fn target_depth_on_linear_field() {
        let m = scenes::box_mesh(Vec3::zeros(), Vec3::repeat(1.0), [4, 4, 4]);
        let g = sample_vertices(&m, |p| p.z);
        let set = generate_layer_set(&m, &g, LayerSpec::TargetDepth(0.25), 42).unwrap();
        assert_eq!(set.layers.len(), 4);
        let s = set.spacing.unwrap();
        assert!((s.mean - 0.25).abs() < 1e-6);
        assert!(s.std < 1e-6);
        let one = iso_values(&g, LayerSpec::LayerCount(1)).unwrap();
        assert_eq!(one, vec![0.5]);
    }

    #[test]
    fn area_converges_under_refinement() {
        let mut errs = Vec::new();
        for n in [2, 4, 8] {
            let m = scenes::box_mesh(Vec3::zeros(), Vec3::repeat(1.0), [n, n, n]);
            let g = sample_vertices(&m, |p| (p - Vec3::repeat(0.5)).norm());
            let s = extract_isosurface(&m, &g, 0.3).unwrap();
            errs.push((s.area() - 4.0 * std::f64::consts::PI * 0.09).abs());
        }
        assert!(errs[2] < errs[1] && errs[1] < errs[0]);
    }

    #[test]
    fn floating_volume_cases() {
        let m = scenes::box_mesh(Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0), [6, 6, 6]);
        let m = scenes::tag_part_where(m, |_, c| c.z > 1.0 - 1e-12);
        // part at the high-g end
        let g = sample_vertices(&m, |p| p.z);
        let cs = iso_values(&g, LayerSpec::LayerCount(7)).unwrap();
        assert!(floating_volume_check(&m, &g, &cs, PeelSide::RemoveBelow).is_empty());
        assert!(floating_volume_check(&m, &g, &[-1.0], PeelSide::RemoveBelow).is_empty());
        // bump near the bottom, away from the part
        let bump = Vec3::new(0.5, 0.5, 0.25);
        let g = sample_vertices(&m, |p| p.z + 3.0 * (-(p - bump).norm_squared() / 0.08).exp());
        let v = floating_volume_check(&m, &g, &[1.5], PeelSide::RemoveBelow);
        assert_eq!(v.len(), 1);
        assert!(v[0].tets.iter().all(|&t| (m.tet_centroid(t) - bump).norm() < 0.35));
    }

    #[test]
    fn depth_of_offset_surface() {
        // hemisphere-free check: a flat square and its 0.5 offset
        let part = TriMesh::new(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2], [0, 2, 3]],
        );
        let mut off = part.clone();
        for v in &mut off.vertices {
            v.z += 0.5;
        }
        let cfg = DepthSampling { samples: 500, ..Default::default() };
        let r = depth_variation(&off, &part, &cfg).unwrap();
        assert!((r.max_depth - 0.5).abs() < 1e-3);
        assert!(r.avg_variation < 1e-9);
        assert_eq!(r.histogram.iter().sum::<usize>(), 500);
        let same = depth_variation(&part, &part, &cfg).unwrap();
        assert!(same.max_depth < 1e-6);
    }

    #[test]
    fn export_writes_layers_and_manifest() {
        let m = scenes::box_mesh(Vec3::zeros(), Vec3::repeat(1.0), [3, 3, 3]);
        let g = sample_vertices(&m, |p| p.z);
        let set = generate_layer_set(&m, &g, LayerSpec::LayerCount(4), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = export_layers(&set, &[], dir.path(), ExportFormat::Obj).unwrap();
        let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(names, ["layer_000.obj", "layer_001.obj", "layer_002.obj", "layer_003.obj", "manifest.json"]);
        let stl = export_layers(&set, &[], &dir.path().join("stl"), ExportFormat::Stl).unwrap();
        let back = TriMesh::load(&stl[1]).unwrap();
        let orig = set.layers[1].to_trimesh();
        for t in 0..orig.triangles.len() {
            let a = orig.corners(t);
            let b = back.corners(t);
            for k in 0..3 {
                assert!((a[k] - b[k]).norm() < 1e-6);
            }
        }
        let empty = LayerSet { layers: vec![], spacing: None };
        let only = export_layers(&empty, &[], &dir.path().join("empty"), ExportFormat::Obj).unwrap();
        assert_eq!(only.len(), 1);
    }
}
