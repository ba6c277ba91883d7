//! Sessions. Mutations go through one writer lock per session and publish a
//! new immutable snapshot; readers only load the current snapshot.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use arc_swap::ArcSwap;
use peel_core::planner::{run_plan_with_progress, write_plan_dir, PeelingPlan, PlanConfig};
use peel_core::{Anchor, AnchorSet, TetMesh};
use serde::Serialize;
use tokio::sync::broadcast;
use uuid::Uuid;

use crate::error::ApiError;
use crate::payload::{JobEvent, JobInfo, JobState, LayerPayload, MeshSummary};

const EVENT_BUFFER: usize = 1024;

#[derive(Debug, Clone)]
enum AnchorEdit {
    Put(Anchor),
    Delete(usize),
}

/// Output of a finished solve, with the report body serialized once so
/// repeated reads return the same bytes.
pub struct Committed {
    pub revision: u64,
    pub plan: PeelingPlan,
    pub reports: Vec<u8>,
    pub layers: Vec<LayerPayload>,
}

#[derive(Serialize)]
struct Reports<'a> {
    revision: u64,
    status: peel_core::PlanStatus,
    validity: &'a peel_core::planner::PlanValidity,
    metrics: &'a peel_core::planner::PlanMetrics,
    singularity: &'a Option<peel_core::singularity::SingularityReport>,
    curl: &'a Option<peel_core::curlfree::CurlRemovalReport>,
    corrections: &'a [peel_core::planner::CorrectionSummary],
}

impl Committed {
    fn new(revision: u64, plan: PeelingPlan) -> Self {
        let reports = serde_json::to_vec(&Reports {
            revision,
            status: plan.validity.status,
            validity: &plan.validity,
            metrics: &plan.metrics,
            singularity: &plan.singularity,
            curl: &plan.curl,
            corrections: &plan.corrections,
        })
        .expect("reports serialize");
        let layers = plan.layers.layers.iter().enumerate().map(|(i, s)| LayerPayload::of(i, s)).collect();
        Self { revision, plan, reports, layers }
    }
}

#[derive(Clone)]
pub struct Snapshot {
    pub revision: u64,
    pub mesh: Option<Arc<TetMesh>>,
    pub summary: Option<MeshSummary>,
    pub anchors: Arc<AnchorSet>,
    pub queued: usize,
    pub job: JobInfo,
    pub plan: Option<Arc<Committed>>,
}

struct Writer {
    pending: Vec<AnchorEdit>,
}

pub struct Session {
    pub id: Uuid,
    writer: Mutex<Writer>,
    committed: ArcSwap<Snapshot>,
    history: Mutex<Vec<JobEvent>>,
    next_seq: Mutex<u64>,
    events: broadcast::Sender<JobEvent>,
}

impl Session {
    fn new() -> Self {
        let snapshot = Snapshot {
            revision: 0,
            mesh: None,
            summary: None,
            anchors: Arc::new(AnchorSet::new()),
            queued: 0,
            job: JobInfo { job: None, state: JobState::Idle, revision: None, error: None },
            plan: None,
        };
        Self {
            id: Uuid::new_v4(),
            writer: Mutex::new(Writer { pending: Vec::new() }),
            committed: ArcSwap::from_pointee(snapshot),
            history: Mutex::new(Vec::new()),
            next_seq: Mutex::new(0),
            events: broadcast::channel(EVENT_BUFFER).0,
        }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.committed.load_full()
    }

    fn publish(&self, f: impl FnOnce(&mut Snapshot)) -> Arc<Snapshot> {
        let mut next = (*self.committed.load_full()).clone();
        f(&mut next);
        let next = Arc::new(next);
        self.committed.store(next.clone());
        next
    }

    pub fn set_mesh(&self, mesh: TetMesh) -> Result<Arc<Snapshot>, ApiError> {
        let _w = self.writer.lock().expect("writer lock");
        if self.snapshot().job.state == JobState::Running {
            return Err(ApiError::JobAlreadyRunning);
        }
        let summary = MeshSummary::of(&mesh);
        Ok(self.publish(|s| {
            s.revision += 1;
            s.mesh = Some(Arc::new(mesh));
            s.summary = Some(summary);
            s.anchors = Arc::new(AnchorSet::new());
            s.plan = None;
            s.job = JobInfo { job: None, state: JobState::Idle, revision: None, error: None };
        }))
    }

    /// Applies an anchor edit now, or queues it while a job runs.
    pub fn put_anchor(&self, anchor: Anchor, expected: Option<u64>) -> Result<(u64, bool), ApiError> {
        let snap = self.snapshot();
        let mesh = snap.mesh.as_ref().ok_or(ApiError::NoMesh)?;
        if anchor.tet >= mesh.num_tets() {
            return Err(ApiError::BadRequest(format!("tet {} out of range ({} tets)", anchor.tet, mesh.num_tets())));
        }
        // validates direction and weight before anything is queued
        AnchorSet::new().insert(anchor).map_err(|e| ApiError::BadRequest(e.to_string()))?;
        self.edit(AnchorEdit::Put(anchor), expected)
    }

    pub fn delete_anchor(&self, tet: usize, expected: Option<u64>) -> Result<(u64, bool), ApiError> {
        if self.snapshot().mesh.is_none() {
            return Err(ApiError::NoMesh);
        }
        self.edit(AnchorEdit::Delete(tet), expected)
    }

    fn edit(&self, edit: AnchorEdit, expected: Option<u64>) -> Result<(u64, bool), ApiError> {
        let mut w = self.writer.lock().expect("writer lock");
        let snap = self.snapshot();
        if let Some(e) = expected {
            if e != snap.revision {
                return Err(ApiError::StaleRevision { expected: e, current: snap.revision });
            }
        }
        if snap.job.state == JobState::Running {
            w.pending.push(edit);
            let queued = w.pending.len();
            self.publish(|s| s.queued = queued);
            return Ok((snap.revision, true));
        }
        let mut anchors = (*snap.anchors).clone();
        apply(&mut anchors, edit);
        let next = self.publish(|s| {
            s.revision += 1;
            s.anchors = Arc::new(anchors);
        });
        Ok((next.revision, false))
    }

    /// Starts a background solve on the current anchor revision.
    pub fn start_solve(self: &Arc<Self>, mut cfg: PlanConfig) -> Result<(Uuid, u64), ApiError> {
        let _w = self.writer.lock().expect("writer lock");
        let snap = self.snapshot();
        if snap.job.state == JobState::Running {
            return Err(ApiError::JobAlreadyRunning);
        }
        let mesh = snap.mesh.clone().ok_or(ApiError::NoMesh)?;
        // session anchors come after the config's so they win on shared tets
        cfg.anchors.extend(snap.anchors.iter().copied());
        cfg.validate().map_err(|e| ApiError::BadRequest(e.to_string()))?;
        let job = Uuid::new_v4();
        let revision = snap.revision;
        self.history.lock().expect("history lock").clear();
        self.publish(|s| s.job = JobInfo { job: Some(job), state: JobState::Running, revision: Some(revision), error: None });
        let session = Arc::clone(self);
        tokio::task::spawn_blocking(move || {
            let result = run_plan_with_progress(&mesh, &cfg, &mut |p| {
                session.emit(|seq| JobEvent::Progress { seq, job, stage: p.stage, iteration: p.iteration, i_rot: p.i_rot })
            });
            session.commit(job, revision, result);
        });
        Ok((job, revision))
    }

    fn commit(&self, job: Uuid, revision: u64, result: Result<PeelingPlan, peel_core::planner::PlanError>) {
        let mut w = self.writer.lock().expect("writer lock");
        let pending = std::mem::take(&mut w.pending);
        let (committed, error) = match result {
            Ok(plan) => (Some(Arc::new(Committed::new(revision, plan))), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let status = committed.as_ref().map(|c| c.plan.validity.status);
        let next = self.publish(|s| {
            if !pending.is_empty() {
                let mut anchors = (*s.anchors).clone();
                for edit in pending {
                    apply(&mut anchors, edit);
                    s.revision += 1;
                }
                s.anchors = Arc::new(anchors);
                s.queued = 0;
            }
            s.job = JobInfo {
                job: Some(job),
                state: if error.is_some() { JobState::Failed } else { JobState::Done },
                revision: Some(revision),
                error: error.clone(),
            };
            if committed.is_some() {
                s.plan = committed;
            }
        });
        drop(w);
        match (status, error) {
            (Some(status), _) => self.emit(|seq| JobEvent::Finished { seq, job, status, revision: next.revision }),
            (None, err) => self.emit(|seq| JobEvent::Failed { seq, job, error: err.unwrap_or_default() }),
        }
    }

    fn emit(&self, make: impl FnOnce(u64) -> JobEvent) {
        let mut history = self.history.lock().expect("history lock");
        let ev = {
            let mut seq = self.next_seq.lock().expect("seq lock");
            *seq += 1;
            make(*seq)
        };
        history.push(ev.clone());
        // no subscribers is fine; the history serves pollers
        let _ = self.events.send(ev);
    }

    /// Events of the current job with `seq > since`.
    pub fn events_since(&self, since: u64) -> Vec<JobEvent> {
        self.history.lock().expect("history lock").iter().filter(|e| e.seq() > since).cloned().collect()
    }

    /// Subscribes, then reads the backlog, so no event falls between the two.
    pub fn subscribe(&self, since: u64) -> (Vec<JobEvent>, broadcast::Receiver<JobEvent>) {
        let history = self.history.lock().expect("history lock");
        let rx = self.events.subscribe();
        let backlog = history.iter().filter(|e| e.seq() > since).cloned().collect();
        (backlog, rx)
    }

    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>, ApiError> {
        let plan = self.snapshot().plan.clone().ok_or(ApiError::NoPlan)?;
        write_plan_dir(&plan.plan, dir).map_err(|e| ApiError::Internal(e.to_string()))
    }
}

fn apply(anchors: &mut AnchorSet, edit: AnchorEdit) {
    match edit {
        AnchorEdit::Put(a) => {
            anchors.insert(a).expect("anchor validated on submit");
        }
        AnchorEdit::Delete(tet) => {
            anchors.remove(tet);
        }
    }
}

#[derive(Default)]
pub struct Sessions {
    map: RwLock<HashMap<Uuid, Arc<Session>>>,
}

impl Sessions {
    pub fn create(&self) -> Arc<Session> {
        let s = Arc::new(Session::new());
        self.map.write().expect("sessions lock").insert(s.id, s.clone());
        s
    }

    pub fn get(&self, id: Uuid) -> Result<Arc<Session>, ApiError> {
        self.map.read().expect("sessions lock").get(&id).cloned().ok_or(ApiError::SessionNotFound(id))
    }

    pub fn remove(&self, id: Uuid) -> Result<(), ApiError> {
        self.map.write().expect("sessions lock").remove(&id).map(drop).ok_or(ApiError::SessionNotFound(id))
    }

    pub fn ids(&self) -> Vec<Uuid> {
        let mut ids: Vec<Uuid> = self.map.read().expect("sessions lock").keys().copied().collect();
        ids.sort();
        ids
    }
}
