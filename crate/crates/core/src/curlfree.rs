//! Iterative removal of the rotational part of a designed field.
//!
//! Each iteration projects the field onto gradients with a natural-boundary
//! Poisson solve, then re-solves the smooth field with a strong pull toward
//! the normalized projected gradient. Only critical anchors survive into the
//! loop.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffops::{
    gradient, i_rot_with, is_normalized, normalize_field, BoundaryCondition, DiffOpsError, PoissonSolver,
    ScalarField, VectorField, ZERO_VECTOR,
};
use crate::fieldopt::{AnchorSet, FieldOptConfig, FieldOptError, FieldSystem};
use crate::mesh::{TetMesh, Vec3};

/// Stopping threshold on the irrotationality metric.
pub const I_ROT_THRESHOLD: f64 = 4e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurlConfig {
    pub threshold: f64,
    pub max_iters: usize,
}

impl Default for CurlConfig {
    fn default() -> Self {
        Self { threshold: I_ROT_THRESHOLD, max_iters: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurlRemovalReport {
    pub iterations: usize,
    /// Metric of the input field.
    pub initial_i_rot: f64,
    /// Metric after each iteration.
    pub i_rot_history: Vec<f64>,
    pub converged: bool,
    #[serde(skip)]
    pub final_field: VectorField,
    /// Potential of the final field.
    #[serde(skip)]
    pub final_scalar: ScalarField,
    /// Tets whose projected gradient vanished, per iteration (1-based).
    pub zero_gradient_tets: Vec<(usize, Vec<usize>)>,
}

#[derive(Debug, Error)]
pub enum CurlError {
    #[error("no convergence after {} iterations (I_rot {:e})", .0.iterations, .0.i_rot_history.last().copied().unwrap_or(f64::NAN))]
    NonConvergence(Box<CurlRemovalReport>),
    #[error("input field is not normalized")]
    NotNormalized,
    #[error(transparent)]
    DiffOps(#[from] DiffOpsError),
    #[error(transparent)]
    FieldOpt(#[from] FieldOptError),
}

/// One progress record per finished iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurlProgress {
    pub iteration: usize,
    pub i_rot: f64,
}

pub fn remove_curl(
    mesh: &TetMesh,
    field: &[Vec3],
    anchors: &AnchorSet,
    cfg: &FieldOptConfig,
    curl: &CurlConfig,
) -> Result<CurlRemovalReport, CurlError> {
    remove_curl_with_progress(mesh, field, anchors, cfg, curl, &mut |_| {})
}

pub fn remove_curl_with_progress(
    mesh: &TetMesh,
    field: &[Vec3],
    anchors: &AnchorSet,
    cfg: &FieldOptConfig,
    curl: &CurlConfig,
    progress: &mut dyn FnMut(CurlProgress),
) -> Result<CurlRemovalReport, CurlError> {
    if !is_normalized(field) {
        return Err(CurlError::NotNormalized);
    }
    cfg.validate()?;
    let n = mesh.num_tets();
    let critical = anchors.critical_only();
    critical.validate(mesh)?;
    let poisson = PoissonSolver::new(mesh, BoundaryCondition::Natural)?;
    let mut system = FieldSystem::new(mesh, cfg.alpha);
    let beta2 = cfg.beta_critical * cfg.beta_critical;
    let gamma2 = cfg.gamma * cfg.gamma;

    let mut v: VectorField = field.to_vec();
    let (initial, mut phi) = i_rot_with(&poisson, mesh, &v)?;
    let mut report = CurlRemovalReport {
        iterations: 0,
        initial_i_rot: initial,
        i_rot_history: Vec::new(),
        converged: false,
        final_field: Vec::new(),
        final_scalar: Vec::new(),
        zero_gradient_tets: Vec::new(),
    };

    while report.iterations < curl.max_iters.max(1) {
        let grad = gradient(mesh, &phi)?;
        let mut weights = vec![0.0; n];
        let mut rhs = vec![Vec3::zeros(); n];
        let mut dropped = Vec::new();
        for t in 0..n {
            if let Some(a) = critical.get(t) {
                weights[t] = beta2;
                rhs[t] = a.direction * beta2;
                continue;
            }
            let len = grad[t].norm();
            if len < ZERO_VECTOR {
                dropped.push(t);
                continue;
            }
            weights[t] = gamma2;
            rhs[t] = grad[t] * (gamma2 / len);
        }
        let raw = system.solve(&weights, &rhs, None)?;
        v = normalize_field(&raw).map_err(|tet| FieldOptError::ZeroVectorAfterSolve { tet })?;
        report.iterations += 1;
        if !dropped.is_empty() {
            report.zero_gradient_tets.push((report.iterations, dropped));
        }
        let (value, next_phi) = i_rot_with(&poisson, mesh, &v)?;
        phi = next_phi;
        report.i_rot_history.push(value);
        progress(CurlProgress { iteration: report.iterations, i_rot: value });
        log::debug!("curl iteration {}: I_rot {value:e}", report.iterations);
        if value <= curl.threshold {
            report.converged = true;
            break;
        }
    }
    report.final_field = v;
    report.final_scalar = phi;
    if report.converged {
        Ok(report)
    } else {
        Err(CurlError::NonConvergence(Box::new(report)))
    }
}

/// Fraction of tets whose field vector lies within `max_deg` degrees of
/// the gradient of `g`.
pub fn gradient_agreement(mesh: &TetMesh, field: &[Vec3], g: &[f64], max_deg: f64) -> Result<f64, DiffOpsError> {
    let grad = gradient(mesh, g)?;
    let cos_lim = max_deg.to_radians().cos();
    let ok = field
        .iter()
        .zip(&grad)
        .filter(|(v, d)| {
            let len = d.norm();
            len > 0.0 && v.dot(d) / (v.norm() * len) >= cos_lim
        })
        .count();
    Ok(ok as f64 / field.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffops::{i_rot, sample_vertices, solve_poisson};
    use crate::fieldopt::{anchor_residual, interpolate_field};
    use crate::scenes;

    #[test]
    fn gradient_field_converges_immediately() {
        let m = scenes::jittered_cube(3, 0.25, 2);
        let g = sample_vertices(&m, |p| p.x - 2.0 * p.y + 0.5 * p.z);
        let v = normalize_field(&gradient(&m, &g).unwrap()).unwrap();
        let r = remove_curl(&m, &v, &AnchorSet::new(), &FieldOptConfig::default(), &CurlConfig::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
        assert!(r.i_rot_history[0] < 1e-10);
    }

    #[test]
    fn unnormalized_input_is_rejected() {
        let m = scenes::five_tet_cube();
        let v = vec![Vec3::new(2.0, 0.0, 0.0); m.num_tets()];
        assert!(matches!(
            remove_curl(&m, &v, &AnchorSet::new(), &FieldOptConfig::default(), &CurlConfig::default()),
            Err(CurlError::NotNormalized)
        ));
    }

    #[test]
    fn non_convergence_carries_report() {
        let m = scenes::masked_box_mesh(Vec3::repeat(-0.5), Vec3::repeat(0.5), [5, 5, 3], |c| {
            c.x.abs() > 0.15 || c.y.abs() > 0.15
        });
        let v: VectorField = (0..m.num_tets())
            .map(|t| {
                let c = m.tet_centroid(t);
                Vec3::new(-c.y, c.x, 0.0).normalize()
            })
            .collect();
        let curl = CurlConfig { threshold: 1e-30, max_iters: 2 };
        match remove_curl(&m, &v, &AnchorSet::new(), &FieldOptConfig::default(), &curl) {
            Err(CurlError::NonConvergence(r)) => {
                assert!(!r.converged);
                assert_eq!(r.iterations, 2);
                assert_eq!(r.i_rot_history.len(), 2);
            }
            other => panic!("expected NonConvergence, got {other:?}"),
        }
    }

    #[test]
    fn conflicting_anchors_converge_and_keep_critical() {
        let (m, anchors) = scenes::conflicting_anchor_scene(8, 60.0);
        let cfg = FieldOptConfig::default();
        let v = interpolate_field(&m, &anchors, &cfg).unwrap();
        let mut seen = Vec::new();
        let r = remove_curl_with_progress(&m, &v, &anchors, &cfg, &CurlConfig::default(), &mut |p| seen.push(p.i_rot))
            .unwrap();
        assert_eq!(seen, r.i_rot_history);
        assert!(r.initial_i_rot > 1e-2);
        assert!(r.converged);
        assert!(i_rot(&m, &r.final_field).unwrap() <= I_ROT_THRESHOLD);
        assert!(anchor_residual(&r.final_field, &anchors.critical_only()) <= 1e-3);
        let g = solve_poisson(&m, &r.final_field, BoundaryCondition::Natural).unwrap();
        assert!(gradient_agreement(&m, &r.final_field, &g, 10.0).unwrap() >= 0.95);
        // a converged field passes in one iteration
        let again = remove_curl(&m, &r.final_field, &anchors, &cfg, &CurlConfig::default()).unwrap();
        assert_eq!(again.iterations, 1);
    }
}
