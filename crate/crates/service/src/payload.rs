//! Request and response bodies.

use peel_core::diffops::VectorField;
use peel_core::fieldopt::{Anchor, FieldOptConfig};
use peel_core::layers::IsoSurface;
use peel_core::mesh_io::{parse_sidecar, parse_tetgen, parse_vtk};
use peel_core::planner::{PlanStatus, Stage};
use peel_core::{scenes, BoundaryTag, TetMesh, Vec3};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::error::ApiError;

/// Mesh upload. Text formats carry an optional tag sidecar; `scene` builds
/// one of the bundled demo meshes.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeshPayload {
    Vtk { text: String, tags: Option<String> },
    Tetgen { node: String, ele: String, tags: Option<String> },
    Scene { name: String, n: Option<usize> },
}

impl MeshPayload {
    pub fn build(&self) -> Result<TetMesh, ApiError> {
        let bad = |e: peel_core::MeshError| ApiError::BadRequest(e.to_string());
        let (mesh, tags) = match self {
            MeshPayload::Vtk { text, tags } => (parse_vtk(text).map_err(bad)?, tags),
            MeshPayload::Tetgen { node, ele, tags } => (parse_tetgen(node, ele).map_err(bad)?, tags),
            MeshPayload::Scene { name, n } => return demo_scene(name, *n),
        };
        match tags {
            Some(t) => mesh.with_tags(parse_sidecar(t).map_err(bad)?).map_err(bad),
            None => Ok(mesh),
        }
    }
}

pub const DEMO_SCENES: [&str; 4] = ["unit_cube", "cup", "freeform", "jittered_cube"];

pub fn demo_scene(name: &str, n: Option<usize>) -> Result<TetMesh, ApiError> {
    let n = n.unwrap_or(2);
    if !(1..=32).contains(&n) {
        return Err(ApiError::BadRequest(format!("scene resolution {n} outside 1..=32")));
    }
    Ok(match name {
        "unit_cube" => scenes::unit_cube_scene(n),
        "cup" => scenes::cup_scene(n),
        "freeform" => scenes::freeform_scene(n),
        "jittered_cube" => scenes::jittered_cube(n, 0.2, 7),
        other => return Err(ApiError::BadRequest(format!("unknown scene {other:?}, expected one of {DEMO_SCENES:?}"))),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshSummary {
    pub vertices: usize,
    pub tets: usize,
    pub boundary_faces: usize,
    pub part_faces: usize,
    pub stock_faces: usize,
    pub volume: f64,
    pub bbox_min: Vec3,
    pub bbox_max: Vec3,
}

impl MeshSummary {
    pub fn of(mesh: &TetMesh) -> Self {
        let count = |tag| mesh.boundary_faces().iter().filter(|bf| bf.tag == tag).count();
        let (lo, hi) = mesh.bounding_box();
        Self {
            vertices: mesh.num_vertices(),
            tets: mesh.num_tets(),
            boundary_faces: mesh.boundary_faces().len(),
            part_faces: count(BoundaryTag::Part),
            stock_faces: count(BoundaryTag::Stock),
            volume: mesh.total_volume(),
            bbox_min: lo,
            bbox_max: hi,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeshResponse {
    pub revision: u64,
    pub summary: MeshSummary,
}

/// Anchor edit. Weight defaults to the general anchor weight.
#[derive(Debug, Clone, Deserialize)]
pub struct AnchorRequest {
    pub tet: usize,
    pub direction: Vec3,
    pub weight: Option<f64>,
    #[serde(default)]
    pub critical: bool,
    /// Rejects the edit unless the session is at this revision.
    pub expected_revision: Option<u64>,
}

impl AnchorRequest {
    pub fn anchor(&self) -> Anchor {
        let weight = self.weight.unwrap_or(FieldOptConfig::default().beta_general);
        Anchor { tet: self.tet, direction: self.direction, weight, critical: self.critical }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RevisionResponse {
    pub revision: u64,
    /// True when the edit waits for the running job to commit.
    pub queued: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorList {
    pub revision: u64,
    pub anchors: Vec<Anchor>,
    pub queued: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Idle,
    Running,
    Failed,
    Done,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobInfo {
    pub job: Option<Uuid>,
    pub state: JobState,
    /// Anchor revision the job was started from.
    pub revision: Option<u64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveResponse {
    pub job: Uuid,
    pub revision: u64,
}

/// One message on the progress stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum JobEvent {
    Progress {
        seq: u64,
        job: Uuid,
        stage: Stage,
        iteration: usize,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        i_rot: Option<f64>,
    },
    Finished {
        seq: u64,
        job: Uuid,
        status: PlanStatus,
        revision: u64,
    },
    Failed {
        seq: u64,
        job: Uuid,
        error: String,
    },
}

impl JobEvent {
    pub fn seq(&self) -> u64 {
        match self {
            JobEvent::Progress { seq, .. } | JobEvent::Finished { seq, .. } | JobEvent::Failed { seq, .. } => *seq,
        }
    }

    pub fn is_terminal(&self) -> bool {
        !matches!(self, JobEvent::Progress { .. })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerPayload {
    pub index: usize,
    pub iso_value: f64,
    pub positions: Vec<f64>,
    pub indices: Vec<u32>,
}

impl LayerPayload {
    pub fn of(index: usize, s: &IsoSurface) -> Self {
        Self {
            index,
            iso_value: s.iso_value,
            positions: s.vertices.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
            indices: s.triangles.iter().flatten().map(|&i| i as u32).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayersResponse {
    pub revision: u64,
    pub total: usize,
    pub layers: Vec<LayerPayload>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldSample {
    pub revision: u64,
    pub stride: usize,
    pub tets: Vec<usize>,
    pub centroids: Vec<f64>,
    pub vectors: Vec<f64>,
}

impl FieldSample {
    pub fn of(mesh: &TetMesh, field: &VectorField, stride: usize, revision: u64) -> Self {
        let tets: Vec<usize> = (0..field.len()).step_by(stride).collect();
        let centroids = tets.iter().flat_map(|&t| mesh.tet_centroid(t).as_slice().to_vec()).collect();
        let vectors = tets.iter().flat_map(|&t| field[t].as_slice().to_vec()).collect();
        Self { revision, stride, tets, centroids, vectors }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct SaveRequest {
    pub dir: std::path::PathBuf,
}
