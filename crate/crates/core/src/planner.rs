//! End-to-end planning: seed anchors, design the field, repair
//! singularities, remove curl, integrate, slice, and audit the result.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curlfree::{remove_curl_with_progress, CurlConfig, CurlError, CurlRemovalReport};
use crate::diffops::{i_rot, normalize_field, sample_vertices, BoundaryCondition, PoissonSolver, ScalarField, VectorField};
use crate::fieldopt::{blend_with_normals, interpolate_field, part_normal_ring, Anchor, AnchorSet, FieldOptConfig};
use crate::hull::{convex_hull, HullError};
use crate::layers::{
    audit_watertight, depth_variation, export_layers, field_range, generate_layer_set,
    floating_volume_check, iso_values, spacing_stats, DepthSampling, DepthVariationReport, ExportFormat,
    FloatingViolation, FloatingViolationSummary, IsoSurface, LayerError, LayerSet, LayerSpec, PeelSide, SpacingStats,
};
use crate::mesh::{BoundaryTag, TetMesh, Vec3};
use crate::scenes::part_surface;
use crate::singularity::{
    broken_iso_values, classify_and_iterate, detect_singular_boundary, interior_extrema_full_scan,
    local_correction_type3, orient_source_surface, ResolutionDirective, SingularityConfig, SingularityError,
    SingularityReport,
};
use crate::trimesh::TriMesh;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid plan config: {0}")]
    InvalidConfig(String),
    #[error("strategy {0:?} needs PART-tagged boundary faces")]
    MissingPart(Strategy),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Hull(#[from] HullError),
}

/// Where the initial anchors come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    /// Only the anchors listed in the config.
    AnchorsOnly,
    /// Outward normals of the part's convex hull, with part normals where
    /// the hull does not reach.
    ConvexHullSource,
    /// Normals of the part surface.
    #[default]
    PartNormalsSource,
    /// Constant field along the peel direction; the 2.5D baseline.
    Planar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BcChoice {
    #[default]
    Natural,
    /// `g = 0` on the part, so the last layer hugs it.
    DirichletPart,
    DirichletStock,
}

impl BcChoice {
    pub fn condition(self) -> BoundaryCondition {
        match self {
            BcChoice::Natural => BoundaryCondition::Natural,
            BcChoice::DirichletPart => BoundaryCondition::Dirichlet { tag: BoundaryTag::Part, value: 0.0 },
            BcChoice::DirichletStock => BoundaryCondition::Dirichlet { tag: BoundaryTag::Stock, value: 0.0 },
        }
    }
}

/// `v ← normalize(alpha v + (1 − alpha) n)` within `depth` tets of the part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendConfig {
    pub alpha: f64,
    #[serde(default = "default_blend_depth")]
    pub depth: usize,
}

fn default_blend_depth() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub name: Option<String>,
    pub strategy: Strategy,
    pub bc: BcChoice,
    pub layers: LayerSpec,
    pub seed: u64,
    pub peel_side: PeelSide,
    /// Required by PLANAR.
    pub peel_direction: Option<Vec3>,
    pub export_format: ExportFormat,
    pub depth_samples: usize,
    pub max_rounds: usize,
    pub conflict_threshold: f64,
    pub ring_depth: usize,
    pub weights: FieldOptConfig,
    pub curl: CurlConfig,
    pub blend: Option<BlendConfig>,
    pub anchors: Vec<Anchor>,
    pub directives: Vec<ResolutionDirective>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            name: None,
            strategy: Strategy::default(),
            bc: BcChoice::default(),
            layers: LayerSpec::LayerCount(10),
            seed: 42,
            // fields point away from the part, so the part sits at low g
            peel_side: PeelSide::RemoveAbove,
            peel_direction: None,
            export_format: ExportFormat::Obj,
            depth_samples: 10_000,
            max_rounds: 20,
            conflict_threshold: 0.0,
            ring_depth: 3,
            weights: FieldOptConfig::default(),
            curl: CurlConfig::default(),
            blend: None,
            anchors: Vec::new(),
            directives: Vec::new(),
        }
    }
}

impl PlanConfig {
    pub fn from_toml(text: &str) -> Result<Self, PlanError> {
        let cfg: PlanConfig = toml::from_str(text).map_err(|e| PlanError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PlanError> {
        let text = fs::read_to_string(path).map_err(|source| PlanError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan config serializes")
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            let s = serde_json::to_value(self.strategy).expect("enum serializes");
            s.as_str().unwrap_or("plan").to_string()
        })
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: String| Err(PlanError::InvalidConfig(m));
        if self.strategy == Strategy::Planar {
            match self.peel_direction {
                None => return bad("PLANAR needs peel_direction".into()),
                Some(d) if !(d.norm() > 0.0 && d.iter().all(|x| x.is_finite())) => {
                    return bad("peel_direction must be a nonzero vector".into())
                }
                _ => {}
            }
        }
        if self.strategy == Strategy::AnchorsOnly && self.anchors.is_empty() {
            return bad("ANCHORS_ONLY needs at least one anchor".into());
        }
        if let Some(b) = self.blend {
            if !(0.0..=1.0).contains(&b.alpha) {
                return bad(format!("blend alpha {} outside [0, 1]", b.alpha));
            }
        }
        if self.depth_samples == 0 {
            return bad("depth_samples must be positive".into());
        }
        for d in &self.directives {
            d.validate().map_err(|e| PlanError::InvalidConfig(e.to_string()))?;
        }
        self.weights.validate().map_err(|e| PlanError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    fn singularity_config(&self) -> SingularityConfig {
        SingularityConfig {
            max_rounds: self.max_rounds,
            conflict_threshold: self.conflict_threshold,
            ring_depth: self.ring_depth,
            bc: self.bc.condition(),
        }
    }
}

/// Outward convex hull of the vertices used by the part surface.
pub fn convex_hull_source(part: &TriMesh) -> Result<TriMesh, HullError> {
    let mut used: Vec<usize> = part.triangles.iter().flatten().copied().collect();
    used.sort_unstable();
    used.dedup();
    convex_hull(&used.iter().map(|&v| part.vertices[v]).collect::<Vec<_>>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Seed,
    Field,
    Singularity,
    Curl,
    Recheck,
    Poisson,
    Layers,
    Correction,
    Floating,
    Depth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProgressEvent {
    pub stage: Stage,
    pub iteration: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i_rot: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PlanStatus {
    Valid,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanValidity {
    pub status: PlanStatus,
    /// Stage whose error stopped the pipeline.
    pub failed_stage: Option<Stage>,
    pub reasons: Vec<String>,
}

/// One admissible surface singularity and what its correction produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionSummary {
    pub boundary: usize,
    pub broken_iso_values: Vec<f64>,
    pub ring_depth: Option<usize>,
    pub replaced_iso_values: Vec<f64>,
    pub watertight: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanMetrics {
    pub tets: usize,
    pub vertices: usize,
    /// Recomputed from the final field.
    pub i_rot: Option<f64>,
    pub interior_extrema: Vec<usize>,
    pub type4_boundaries: usize,
    pub layer_count: usize,
    pub iso_values: Vec<f64>,
    pub spacing: Option<SpacingStats>,
    pub violations: Vec<FloatingViolationSummary>,
    pub depth: Option<DepthVariationReport>,
}

#[derive(Debug, Clone)]
pub struct PeelingPlan {
    pub config: PlanConfig,
    pub anchors: AnchorSet,
    pub field: VectorField,
    pub scalar: ScalarField,
    pub curl: Option<CurlRemovalReport>,
    pub singularity: Option<SingularityReport>,
    pub layers: LayerSet,
    pub corrections: Vec<CorrectionSummary>,
    pub violations: Vec<FloatingViolation>,
    pub metrics: PlanMetrics,
    pub validity: PlanValidity,
}

impl PeelingPlan {
    pub fn is_valid(&self) -> bool {
        self.validity.status == PlanStatus::Valid
    }

    /// Union of all layers, the last surface each region of the part sees.
    pub fn envelope(&self) -> TriMesh {
        let meshes: Vec<TriMesh> = self.layers.layers.iter().map(IsoSurface::to_trimesh).collect();
        TriMesh::merged(&meshes)
    }
}

pub fn run_plan(mesh: &TetMesh, cfg: &PlanConfig) -> Result<PeelingPlan, PlanError> {
    run_plan_with_progress(mesh, cfg, &mut |_| {})
}

struct Builder<'a> {
    mesh: &'a TetMesh,
    cfg: &'a PlanConfig,
    plan: PeelingPlan,
}

impl Builder<'_> {
    fn fail(mut self, stage: Stage, err: impl std::fmt::Display) -> PeelingPlan {
        log::warn!("plan stage {stage:?} failed: {err}");
        self.plan.validity.failed_stage = Some(stage);
        self.plan.validity.reasons.push(format!("{stage:?} failed: {err}"));
        self.finish()
    }

    fn finish(mut self) -> PeelingPlan {
        let mesh = self.mesh;
        let p = &mut self.plan;
        p.metrics.layer_count = p.layers.layers.len();
        p.metrics.iso_values = p.layers.iso_values();
        p.metrics.spacing = p.layers.spacing;
        p.metrics.violations = p.violations.iter().map(Into::into).collect();
        if p.scalar.len() == mesh.num_vertices() {
            p.metrics.interior_extrema = interior_extrema_full_scan(mesh, &p.scalar);
        }
        if p.field.len() == mesh.num_tets() {
            p.metrics.i_rot = i_rot(mesh, &p.field).ok();
        }
        let r = &mut p.validity.reasons;
        if p.validity.failed_stage.is_none() {
            if let Some(c) = &p.curl {
                if !c.converged {
                    r.push("curl removal did not converge".into());
                }
            }
            match p.metrics.i_rot {
                Some(v) if v <= self.cfg.curl.threshold => {}
                Some(v) => r.push(format!("I_rot {v:e} above threshold")),
                None => r.push("I_rot could not be recomputed".into()),
            }
            if !p.metrics.interior_extrema.is_empty() {
                r.push(format!("{} interior extrema remain", p.metrics.interior_extrema.len()));
            }
            if p.metrics.type4_boundaries > 0 {
                r.push(format!("{} non-admissible singular boundaries need directives", p.metrics.type4_boundaries));
            }
            for c in &p.corrections {
                if c.error.is_some() || !c.watertight || c.replaced_iso_values != c.broken_iso_values {
                    r.push(format!("singular boundary {} was not repaired", c.boundary));
                }
            }
            if !p.violations.is_empty() {
                r.push(format!("{} floating-volume violations", p.violations.len()));
            }
        }
        p.validity.status = if r.is_empty() { PlanStatus::Valid } else { PlanStatus::Invalid };
        self.plan
    }
}

/// Runs the whole pipeline. Configuration problems are errors; a stage that
/// fails yields a plan marked INVALID with that stage recorded.
pub fn run_plan_with_progress(
    mesh: &TetMesh,
    cfg: &PlanConfig,
    progress: &mut dyn FnMut(ProgressEvent),
) -> Result<PeelingPlan, PlanError> {
    cfg.validate()?;
    let has_part = mesh.boundary_faces().iter().any(|bf| bf.tag == BoundaryTag::Part);
    if matches!(cfg.strategy, Strategy::ConvexHullSource | Strategy::PartNormalsSource) && !has_part {
        return Err(PlanError::MissingPart(cfg.strategy));
    }
    let mut b = Builder {
        mesh,
        cfg,
        plan: PeelingPlan {
            config: cfg.clone(),
            anchors: AnchorSet::new(),
            field: Vec::new(),
            scalar: Vec::new(),
            curl: None,
            singularity: None,
            layers: LayerSet { layers: Vec::new(), spacing: None },
            corrections: Vec::new(),
            violations: Vec::new(),
            metrics: PlanMetrics {
                tets: mesh.num_tets(),
                vertices: mesh.num_vertices(),
                i_rot: None,
                interior_extrema: Vec::new(),
                type4_boundaries: 0,
                layer_count: 0,
                iso_values: Vec::new(),
                spacing: None,
                violations: Vec::new(),
                depth: None,
            },
            validity: PlanValidity { status: PlanStatus::Invalid, failed_stage: None, reasons: Vec::new() },
        },
    };
    let mut emit = |stage: Stage, iteration: usize, i_rot: Option<f64>| progress(ProgressEvent { stage, iteration, i_rot });

    if cfg.strategy == Strategy::Planar {
        let d = cfg.peel_direction.expect("validated").normalize();
        b.plan.field = vec![d; mesh.num_tets()];
        b.plan.scalar = sample_vertices(mesh, |p| p.dot(&d));
        emit(Stage::Field, 0, None);
        emit(Stage::Poisson, 0, None);
    } else {
        emit(Stage::Seed, 0, None);
        let anchors = match seed_anchors(mesh, cfg) {
            Ok(a) => a,
            Err(e) => return Ok(b.fail(Stage::Seed, e)),
        };
        let weights = cfg.weights;
        let blend = cfg.blend;
        let mut rebuild = |a: &AnchorSet| {
            let v = interpolate_field(mesh, a, &weights)?;
            match blend {
                Some(bl) => blend_with_normals(&v, mesh, bl.alpha, bl.depth),
                None => Ok(v),
            }
        };
        let field = match rebuild(&anchors) {
            Ok(v) => v,
            Err(e) => return Ok(b.fail(Stage::Field, e)),
        };
        emit(Stage::Field, 0, None);
        b.plan.anchors = anchors.clone();

        let scfg = cfg.singularity_config();
        let out = match classify_and_iterate(mesh, &field, &anchors, &cfg.directives, &weights, &scfg, &mut rebuild) {
            Ok(o) => o,
            Err(e) => return Ok(b.fail(Stage::Singularity, e)),
        };
        emit(Stage::Singularity, out.report.rounds, None);
        b.plan.anchors = out.anchors.clone();
        b.plan.singularity = Some(out.report.clone());

        let curl_pass = |field: &[Vec3], anchors: &AnchorSet, emit: &mut dyn FnMut(Stage, usize, Option<f64>)| {
            match remove_curl_with_progress(mesh, field, anchors, &weights, &cfg.curl, &mut |p| {
                emit(Stage::Curl, p.iteration, Some(p.i_rot))
            }) {
                Ok(r) => Ok(r),
                Err(CurlError::NonConvergence(r)) => Ok(*r),
                Err(e) => Err(e),
            }
        };
        let mut report = match curl_pass(&out.field, &out.anchors, &mut emit) {
            Ok(r) => r,
            Err(e) => return Ok(b.fail(Stage::Curl, e)),
        };

        // curl removal may move extrema; one more directive round is allowed
        let solver = match PoissonSolver::new(mesh, cfg.bc.condition()) {
            Ok(s) => s,
            Err(e) => return Ok(b.fail(Stage::Recheck, e)),
        };
        let mut g = match solver.solve(mesh, &report.final_field) {
            Ok(g) => g,
            Err(e) => return Ok(b.fail(Stage::Recheck, e)),
        };
        emit(Stage::Recheck, 0, None);
        if !interior_extrema_full_scan(mesh, &g).is_empty() && !cfg.directives.is_empty() {
            let again =
                match classify_and_iterate(mesh, &report.final_field, &out.anchors, &cfg.directives, &weights, &scfg, &mut rebuild) {
                    Ok(o) => o,
                    Err(e) => return Ok(b.fail(Stage::Recheck, e)),
                };
            report = match curl_pass(&again.field, &again.anchors, &mut emit) {
                Ok(r) => r,
                Err(e) => return Ok(b.fail(Stage::Curl, e)),
            };
            b.plan.anchors = again.anchors;
            let mut merged = again.report;
            let first = b.plan.singularity.take().expect("set above");
            merged.rounds += first.rounds;
            merged.initial_points = first.initial_points;
            merged.repairs = first.repairs.into_iter().chain(merged.repairs).collect();
            b.plan.singularity = Some(merged);
            g = match solver.solve(mesh, &report.final_field) {
                Ok(g) => g,
                Err(e) => return Ok(b.fail(Stage::Poisson, e)),
            };
        }
        emit(Stage::Poisson, 0, None);
        b.plan.field = report.final_field.clone();
        b.plan.scalar = g;
        b.plan.curl = Some(report);
    }

    let (mesh, g) = (b.mesh, b.plan.scalar.clone());
    let layers = match generate_layer_set(mesh, &g, cfg.layers, cfg.seed) {
        Ok(l) => l,
        Err(e) => return Ok(b.fail(Stage::Layers, e)),
    };
    emit(Stage::Layers, layers.layers.len(), None);
    b.plan.layers = layers;

    if cfg.strategy != Strategy::Planar {
        let boundaries = detect_singular_boundary(mesh, &b.plan.field, cfg.conflict_threshold);
        b.plan.metrics.type4_boundaries = boundaries.iter().filter(|sb| !sb.admissible).count();
        for (i, sb) in boundaries.iter().enumerate().filter(|(_, sb)| sb.admissible) {
            let broken = broken_iso_values(&b.plan.layers.layers, sb);
            if broken.is_empty() {
                continue;
            }
            let summary = correct_boundary(mesh, &mut b.plan, i, sb, broken, cfg);
            b.plan.corrections.push(summary);
        }
        if !b.plan.corrections.is_empty() {
            b.plan.layers.spacing = spacing_stats(&b.plan.layers.layers, cfg.seed);
        }
        emit(Stage::Correction, b.plan.corrections.len(), None);
    }

    b.plan.violations = floating_volume_check(mesh, &g, &b.plan.layers.iso_values(), cfg.peel_side);
    emit(Stage::Floating, b.plan.violations.len(), None);

    if mesh.boundary_faces().iter().any(|bf| bf.tag == BoundaryTag::Part) && !b.plan.layers.layers.is_empty() {
        let sampling = DepthSampling { samples: cfg.depth_samples, seed: cfg.seed, ..Default::default() };
        match depth_variation(&b.plan.envelope(), &part_surface(mesh), &sampling) {
            Ok(d) => b.plan.metrics.depth = Some(d),
            // layers that miss the domain entirely leave nothing to measure
            Err(e) => log::warn!("depth report skipped: {e}"),
        }
        emit(Stage::Depth, 0, None);
    }
    Ok(b.finish())
}

/// Initial anchors for the configured strategy plus the listed anchors.
pub fn seed_anchors(mesh: &TetMesh, cfg: &PlanConfig) -> Result<AnchorSet, PlanError> {
    let w = cfg.weights.beta_general;
    let mut set = match cfg.strategy {
        Strategy::AnchorsOnly | Strategy::Planar => AnchorSet::new(),
        Strategy::PartNormalsSource => normal_anchors(mesh, w, &AnchorSet::new())?,
        Strategy::ConvexHullSource => {
            let hull = convex_hull_source(&part_surface(mesh))?;
            let hull_anchors = orient_source_surface(&hull, mesh, w).map_err(|e| PlanError::InvalidConfig(e.to_string()))?;
            normal_anchors(mesh, w, &hull_anchors)?
        }
    };
    for a in &cfg.anchors {
        set.insert(*a).map_err(|e| PlanError::InvalidConfig(e.to_string()))?;
    }
    set.validate(mesh).map_err(|e| PlanError::InvalidConfig(e.to_string()))?;
    Ok(set)
}

/// `base` plus part-normal anchors on PART tets it does not cover.
fn normal_anchors(mesh: &TetMesh, weight: f64, base: &AnchorSet) -> Result<AnchorSet, PlanError> {
    let ring = part_normal_ring(mesh, 0).map_err(|_| PlanError::MissingPart(Strategy::PartNormalsSource))?;
    let mut set = base.clone();
    for (tet, direction) in ring {
        if set.get(tet).is_none() {
            set.insert(Anchor { tet, direction, weight, critical: false }).expect("part normal is a unit vector");
        }
    }
    Ok(set)
}

fn correct_boundary(
    mesh: &TetMesh,
    plan: &mut PeelingPlan,
    index: usize,
    sb: &crate::singularity::SingularBoundary,
    broken: Vec<f64>,
    cfg: &PlanConfig,
) -> CorrectionSummary {
    let mut summary = CorrectionSummary {
        boundary: index,
        broken_iso_values: broken.clone(),
        ring_depth: None,
        replaced_iso_values: Vec::new(),
        watertight: false,
        error: None,
    };
    let fix = match local_correction_type3(mesh, &plan.field, &plan.scalar, sb, &broken, cfg.ring_depth, &cfg.weights) {
        Ok(f) => f,
        Err(e) => {
            summary.error = Some(e.to_string());
            return summary;
        }
    };
    summary.ring_depth = Some(fix.ring_depth);
    summary.watertight = true;
    for &c in &broken {
        let reps = fix.replacements(c);
        if reps.is_empty() {
            continue;
        }
        let merged = merge_surfaces(c, &reps);
        summary.watertight &= audit_watertight(mesh, &merged).is_watertight();
        if let Some(layer) = plan.layers.layers.iter_mut().find(|l| l.iso_value == c) {
            *layer = merged;
        }
        summary.replaced_iso_values.push(c);
    }
    summary
}

/// Concatenation of surfaces at one iso-value.
fn merge_surfaces(c: f64, parts: &[&IsoSurface]) -> IsoSurface {
    let mut out = IsoSurface { iso_value: c, vertices: Vec::new(), triangles: Vec::new(), source_tets: Vec::new() };
    for s in parts {
        let base = out.vertices.len();
        out.vertices.extend_from_slice(&s.vertices);
        out.triangles.extend(s.triangles.iter().map(|t| t.map(|v| v + base)));
        out.source_tets.extend_from_slice(&s.source_tets);
    }
    out
}

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.json";
pub const LAYERS_DIR: &str = "layers";

#[derive(Serialize)]
struct MetricsFile<'a> {
    name: String,
    status: PlanStatus,
    validity: &'a PlanValidity,
    metrics: &'a PlanMetrics,
}

/// Writes the plan as a directory: config copy, metrics, reports, anchors,
/// the scalar field (one value per vertex) and the layer exports. Contents
/// depend only on the plan, so identical runs give identical bytes.
pub fn write_plan_dir(plan: &PeelingPlan, dir: &Path) -> Result<Vec<PathBuf>, PlanError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PlanError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut files = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<(), PlanError> {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(io(&path))?;
        files.push(path);
        Ok(())
    };
    let json = |v: &dyn erased::Json| v.to_json();
    put(CONFIG_FILE, plan.config.to_toml().into_bytes())?;
    let metrics = MetricsFile {
        name: plan.config.label(),
        status: plan.validity.status,
        validity: &plan.validity,
        metrics: &plan.metrics,
    };
    put(METRICS_FILE, json(&metrics))?;
    put("anchors.txt", plan.anchors.to_text().into_bytes())?;
    put("singularity.json", json(&plan.singularity))?;
    put("curl.json", json(&plan.curl))?;
    put("corrections.json", json(&plan.corrections))?;
    let mut scalar = String::with_capacity(plan.scalar.len() * 20);
    for v in &plan.scalar {
        scalar.push_str(&format!("{v:e}\n"));
    }
    put("scalar.txt", scalar.into_bytes())?;
    files.extend(export_layers(&plan.layers, &plan.violations, &dir.join(LAYERS_DIR), plan.config.export_format)?);
    Ok(files)
}

mod erased {
    pub trait Json {
        fn to_json(&self) -> Vec<u8>;
    }

    impl<T: serde::Serialize> Json for T {
        fn to_json(&self) -> Vec<u8> {
            let mut v = serde_json::to_vec_pretty(self).expect("report serializes");
            v.push(b'\n');
            v
        }
    }
}

/// Reads a `scalar.txt` written by [`write_plan_dir`].
pub fn parse_scalar(text: &str) -> Result<ScalarField, PlanError> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| l.parse::<f64>().map_err(|e| PlanError::Parse(format!("scalar line {}: {e}", i + 1))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub strategy: Strategy,
    pub bc: BcChoice,
    pub layers: usize,
    pub max_depth: f64,
    pub mean_depth: f64,
    pub avg_variation: f64,
    pub status: PlanStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub definition: String,
}

impl ComparisonReport {
    /// Fixed-width text table.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<24} {:<20} {:<16} {:>6} {:>12} {:>12} {:>14} {:>8}\n",
            "name", "strategy", "bc", "layers", "max_depth", "mean_depth", "avg_variation", "status"
        );
        for r in &self.rows {
            let word = |v: &dyn erased::Json| String::from_utf8(v.to_json()).unwrap().trim().trim_matches('"').to_string();
            s.push_str(&format!(
                "{:<24} {:<20} {:<16} {:>6} {:>12.6} {:>12.6} {:>14.6} {:>8}\n",
                r.name,
                word(&r.strategy),
                word(&r.bc),
                r.layers,
                r.max_depth,
                r.mean_depth,
                r.avg_variation,
                word(&r.status)
            ));
        }
        s
    }
}

/// Runs each config and measures its leftover depth against `part`.
pub fn compare_strategies(mesh: &TetMesh, part: &TriMesh, cfgs: &[PlanConfig]) -> Result<ComparisonReport, PlanError> {
    if cfgs.is_empty() {
        return Err(PlanError::InvalidConfig("nothing to compare".into()));
    }
    let mut rows = Vec::new();
    let mut definition = String::new();
    for cfg in cfgs {
        let plan = run_plan(mesh, cfg)?;
        let sampling = DepthSampling { samples: cfg.depth_samples, seed: cfg.seed, ..Default::default() };
        let depth = depth_variation(&plan.envelope(), part, &sampling)?;
        definition = depth.definition.clone();
        rows.push(ComparisonRow {
            name: cfg.label(),
            strategy: cfg.strategy,
            bc: cfg.bc,
            layers: plan.layers.layers.len(),
            max_depth: depth.max_depth,
            mean_depth: depth.mean_depth,
            avg_variation: depth.avg_variation,
            status: plan.validity.status,
        });
    }
    Ok(ComparisonReport { rows, definition })
}

/// Result of auditing an existing scalar field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub interior_extrema: Vec<crate::singularity::PointSingularity>,
    pub plateaus: Vec<usize>,
    pub iso_values: Vec<f64>,
    pub violations: Vec<FloatingViolationSummary>,
    pub clean: bool,
}

/// Singularity and floating-volume audit of `g` at the layers `spec` gives.
pub fn check_scalar(mesh: &TetMesh, g: &[f64], spec: LayerSpec, side: PeelSide) -> Result<CheckReport, PlanError> {
    if g.len() != mesh.num_vertices() {
        return Err(PlanError::InvalidConfig(format!(
            "scalar has {} values for {} vertices",
            g.len(),
            mesh.num_vertices()
        )));
    }
    let scan = crate::singularity::detect_point_singularities(mesh, g);
    let full = interior_extrema_full_scan(mesh, g);
    let interior: Vec<_> = scan.interior().copied().collect();
    debug_assert_eq!(interior.iter().map(|s| s.vertex).collect::<Vec<_>>(), full);
    let values = if field_range(g).is_some_and(|(lo, hi)| hi > lo) { iso_values(g, spec)? } else { Vec::new() };
    let violations: Vec<FloatingViolationSummary> =
        floating_volume_check(mesh, g, &values, side).iter().map(Into::into).collect();
    let clean = full.is_empty() && violations.is_empty();
    Ok(CheckReport { interior_extrema: interior, plateaus: scan.plateaus, iso_values: values, violations, clean })
}

/// Unit field from a scalar, for callers that hold only `g`.
pub fn field_of(mesh: &TetMesh, g: &[f64]) -> Result<VectorField, PlanError> {
    let grad = crate::diffops::gradient(mesh, g).map_err(|e| PlanError::InvalidConfig(e.to_string()))?;
    normalize_field(&grad).map_err(|t| PlanError::InvalidConfig(format!("gradient vanishes in tet {t}")))
}

impl From<SingularityError> for PlanError {
    fn from(e: SingularityError) -> Self {
        PlanError::InvalidConfig(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes;

    fn planar_cfg(d: f64) -> PlanConfig {
        PlanConfig {
            strategy: Strategy::Planar,
            peel_direction: Some(Vec3::z()),
            layers: LayerSpec::TargetDepth(d),
            ..Default::default()
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = planar_cfg(0.25);
        cfg.blend = Some(BlendConfig { alpha: 0.5, depth: 2 });
        cfg.directives.push(ResolutionDirective::add_anchor(
            crate::singularity::DirectiveTarget::AllPoints,
            Vec3::z(),
        ));
        cfg.anchors.push(Anchor { tet: 3, direction: Vec3::x(), weight: 1e8, critical: true });
        let text = cfg.to_toml();
        assert_eq!(PlanConfig::from_toml(&text).unwrap(), cfg);
        assert!(matches!(PlanConfig::from_toml("strategy = \"PLANAR\""), Err(PlanError::InvalidConfig(_))));
        assert!(matches!(PlanConfig::from_toml("colour = 1"), Err(PlanError::Parse(_))));
    }

    #[test]
    fn planar_plan_matches_analytic_planes() {
        let m = scenes::unit_cube_scene(4);
        let plan = run_plan(&m, &planar_cfg(0.25)).unwrap();
        assert!(plan.is_valid(), "{:?}", plan.validity);
        let values = plan.layers.iso_values();
        assert_eq!(values.len(), 4);
        for (v, want) in values.iter().zip([0.125, 0.375, 0.625, 0.875]) {
            assert!((v - want).abs() < 1e-12);
        }
        for l in &plan.layers.layers {
            assert!(l.vertices.iter().all(|p| (p.z - l.iso_value).abs() < 1e-9));
            assert!((l.area() - 1.0).abs() < 1e-9);
        }
        assert!(plan.curl.is_none());
        assert!(plan.metrics.i_rot.unwrap() < 1e-20);
    }

    #[test]
    fn single_anchor_plan_is_uniform() {
        let m = scenes::unit_cube_scene(4);
        let cfg = PlanConfig {
            strategy: Strategy::AnchorsOnly,
            anchors: vec![Anchor { tet: 0, direction: Vec3::z(), weight: 1e5, critical: false }],
            layers: LayerSpec::LayerCount(4),
            ..Default::default()
        };
        let plan = run_plan(&m, &cfg).unwrap();
        assert!(plan.is_valid(), "{:?}", plan.validity);
        assert!(plan.metrics.i_rot.unwrap() < 1e-10);
        assert!(plan.field.iter().all(|v| (v - Vec3::z()).norm() < 1e-9));
        assert_eq!(plan.layers.layers.len(), 4);
    }

    #[test]
    fn missing_prerequisites_are_config_errors() {
        let m = scenes::box_mesh(Vec3::zeros(), Vec3::repeat(1.0), [2, 2, 2]);
        let cfg = PlanConfig { strategy: Strategy::PartNormalsSource, ..Default::default() };
        assert!(matches!(run_plan(&m, &cfg), Err(PlanError::MissingPart(_))));
        let cfg = PlanConfig { strategy: Strategy::AnchorsOnly, ..Default::default() };
        assert!(matches!(run_plan(&m, &cfg), Err(PlanError::InvalidConfig(_))));
        let cfg = PlanConfig { strategy: Strategy::Planar, ..Default::default() };
        assert!(matches!(run_plan(&m, &cfg), Err(PlanError::InvalidConfig(_))));
    }

    #[test]
    fn stage_failure_marks_plan_invalid() {
        let m = scenes::unit_cube_scene(2);
        // a layer count of zero only fails at slicing time
        let cfg = PlanConfig { layers: LayerSpec::LayerCount(0), ..Default::default() };
        let plan = run_plan(&m, &cfg).unwrap();
        assert!(!plan.is_valid());
        assert_eq!(plan.validity.failed_stage, Some(Stage::Layers));
    }

    #[test]
    fn cup_hull_plan_needs_and_takes_a_directive() {
        let m = scenes::cup_scene(2);
        let mut base = PlanConfig { strategy: Strategy::ConvexHullSource, layers: LayerSpec::LayerCount(8), ..Default::default() };
        // this coarse cup converges slowly, and its distance-like field has
        // ridges where neighbouring vectors turn by just over 90 degrees
        base.curl.max_iters = 300;
        base.conflict_threshold = -0.6;
        let plan = run_plan(&m, &base).unwrap();
        assert_eq!(plan.singularity.as_ref().unwrap().initial_points.len(), 1);
        assert!(plan.singularity.as_ref().unwrap().repairs.is_empty());

        let mut cfg = base.clone();
        cfg.directives.push(ResolutionDirective::add_anchor(crate::singularity::DirectiveTarget::AllPoints, Vec3::z()));
        let plan = run_plan(&m, &cfg).unwrap();
        assert_eq!(plan.singularity.as_ref().unwrap().repairs.len(), 1);
        assert!(plan.is_valid(), "{:?}", plan.validity);
        assert!(plan.metrics.interior_extrema.is_empty());
        assert!(plan.violations.is_empty());
    }

    #[test]
    fn progress_reports_curl_history() {
        let m = scenes::cup_scene(2);
        let cfg = PlanConfig { layers: LayerSpec::LayerCount(4), ..Default::default() };
        let mut curl = Vec::new();
        let mut stages = Vec::new();
        let plan = run_plan_with_progress(&m, &cfg, &mut |e| {
            stages.push(e.stage);
            if e.stage == Stage::Curl {
                curl.push(e.i_rot.unwrap());
            }
        })
        .unwrap();
        assert_eq!(curl, plan.curl.unwrap().i_rot_history);
        let mut sorted = stages.clone();
        sorted.sort();
        assert_eq!(stages, sorted);
    }

    #[test]
    fn plan_dir_is_reproducible() {
        let m = scenes::unit_cube_scene(3);
        let cfg = PlanConfig { layers: LayerSpec::LayerCount(3), depth_samples: 200, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let a = write_plan_dir(&run_plan(&m, &cfg).unwrap(), &dir.path().join("a")).unwrap();
        let b = write_plan_dir(&run_plan(&m, &cfg).unwrap(), &dir.path().join("b")).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.file_name(), y.file_name());
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        let g = parse_scalar(&fs::read_to_string(dir.path().join("a/scalar.txt")).unwrap()).unwrap();
        assert_eq!(g.len(), m.num_vertices());
    }

    #[test]
    fn comparison_rows_follow_configs() {
        let m = scenes::freeform_scene(2);
        let part = part_surface(&m);
        let planar = PlanConfig { name: Some("planar".into()), depth_samples: 500, ..planar_cfg(0.25) };
        let report = compare_strategies(&m, &part, std::slice::from_ref(&planar)).unwrap();
        assert_eq!(report.rows.len(), 1);
        let twice = compare_strategies(&m, &part, &[planar.clone(), planar]).unwrap();
        assert_eq!(twice.rows[0], twice.rows[1]);
        assert_eq!(twice.to_table().lines().count(), 3);
        assert!(compare_strategies(&m, &part, &[]).is_err());
    }

    #[test]
    fn check_finds_injected_maximum() {
        let m = scenes::unit_cube_scene(4);
        let mut g = sample_vertices(&m, |p| p.z);
        let centre = (0..m.num_vertices()).find(|&v| m.vertices()[v] == Vec3::repeat(0.5)).unwrap();
        assert!(check_scalar(&m, &g, LayerSpec::LayerCount(4), PeelSide::RemoveAbove).unwrap().clean);
        g[centre] = 0.2;
        let r = check_scalar(&m, &g, LayerSpec::LayerCount(4), PeelSide::RemoveAbove).unwrap();
        assert!(!r.clean);
        assert_eq!(r.interior_extrema.len(), 1);
        assert_eq!(r.interior_extrema[0].vertex, centre);
    }

    #[test]
    fn hull_source_uses_only_surface_vertices() {
        let m = scenes::cup_scene(2);
        let hull = convex_hull_source(&part_surface(&m)).unwrap();
        assert!((hull.signed_volume() - 8.0).abs() < 1e-9);
    }
}
