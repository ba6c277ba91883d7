//! Fixtures shared by the benchmarks.

use peel_core::diffops::{normalize_field, VectorField};
use peel_core::fieldopt::interpolate_field;
use peel_core::{scenes, AnchorSet, FieldOptConfig, TetMesh, Vec3};

/// Conflicting-anchor box with its interpolated field, about `6 * 2n³` tets.
pub fn conflicting(n: usize) -> (TetMesh, AnchorSet, VectorField) {
    let (m, anchors) = scenes::conflicting_anchor_scene(n, 60.0);
    let v = interpolate_field(&m, &anchors, &FieldOptConfig::default()).expect("anchors are valid");
    (m, anchors, v)
}

/// A smooth non-gradient unit field on the jittered cube.
pub fn swirl(m: &TetMesh) -> VectorField {
    let raw: Vec<Vec3> = (0..m.num_tets())
        .map(|t| {
            let c = m.tet_centroid(t);
            Vec3::new(1.0 + 0.3 * c.y, 0.2 * c.z, 1.0 - 0.3 * c.x)
        })
        .collect();
    normalize_field(&raw).expect("field has no zeros")
}
