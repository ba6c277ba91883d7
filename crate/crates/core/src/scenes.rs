//! Synthetic machining domains used by tests, benches and the `demo` command.
//!
//! Structured meshes use the Kuhn split of each grid cell into six tets
//! around the cell diagonal, which is conforming across cells.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fieldopt::{Anchor, AnchorSet};
use crate::mesh::{BoundaryTag, TetMesh, Vec3};
use crate::trimesh::TriMesh;

/// Corner offsets of the six Kuhn tets, as indices into the 8 cell corners
/// numbered `i + 2j + 4k`.
const KUHN: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

pub fn unit_tet() -> TetMesh {
    TetMesh::new(
        vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        ],
        vec![[0, 1, 2, 3]],
    )
    .expect("unit tet is valid")
}

/// Regular tetrahedron with unit edges.
pub fn regular_tet() -> TetMesh {
    let h = (2.0f64 / 3.0).sqrt();
    TetMesh::new(
        vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.5, 3f64.sqrt() / 2.0, 0.0),
            Vec3::new(0.5, 3f64.sqrt() / 6.0, h),
        ],
        vec![[0, 1, 2, 3]],
    )
    .expect("regular tet is valid")
}

/// The unit cube split into a central tet and four corner tets.
pub fn five_tet_cube() -> TetMesh {
    let verts = (0..8)
        .map(|c| Vec3::new((c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64))
        .collect();
    TetMesh::new(
        verts,
        vec![[1, 2, 4, 7], [0, 1, 2, 4], [3, 1, 2, 7], [5, 1, 4, 7], [6, 2, 4, 7]],
    )
    .expect("five-tet cube is valid")
}

/// Axis-aligned box `[lo, hi]` with `n` cells per axis.
pub fn box_mesh(lo: Vec3, hi: Vec3, n: [usize; 3]) -> TetMesh {
    masked_box_mesh(lo, hi, n, |_| true)
}

/// Box mesh keeping only the cells whose centre passes `keep`. Vertices are
/// compacted so unused grid points are dropped.
pub fn masked_box_mesh(lo: Vec3, hi: Vec3, n: [usize; 3], keep: impl Fn(&Vec3) -> bool) -> TetMesh {
    let h = Vec3::new(
        (hi.x - lo.x) / n[0] as f64,
        (hi.y - lo.y) / n[1] as f64,
        (hi.z - lo.z) / n[2] as f64,
    );
    build_grid(n, |i, j, k| lo + Vec3::new(i as f64 * h.x, j as f64 * h.y, k as f64 * h.z), |i, j, k| {
        keep(&(lo + Vec3::new((i as f64 + 0.5) * h.x, (j as f64 + 0.5) * h.y, (k as f64 + 0.5) * h.z)))
    })
}

/// Structured grid with arbitrary vertex placement. `point(i, j, k)` gives
/// the grid node, `keep(i, j, k)` selects cells.
pub fn build_grid(
    n: [usize; 3],
    point: impl Fn(usize, usize, usize) -> Vec3,
    keep: impl Fn(usize, usize, usize) -> bool,
) -> TetMesh {
    let mut ids: HashMap<[usize; 3], usize> = HashMap::new();
    let mut verts = Vec::new();
    let mut tets = Vec::new();
    for k in 0..n[2] {
        for j in 0..n[1] {
            for i in 0..n[0] {
                if !keep(i, j, k) {
                    continue;
                }
                let mut corner = [0usize; 8];
                for (c, slot) in corner.iter_mut().enumerate() {
                    let key = [i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)];
                    *slot = *ids.entry(key).or_insert_with(|| {
                        verts.push(point(key[0], key[1], key[2]));
                        verts.len() - 1
                    });
                }
                for t in KUHN {
                    tets.push([corner[t[0]], corner[t[1]], corner[t[2]], corner[t[3]]]);
                }
            }
        }
    }
    TetMesh::new(verts, tets).expect("structured grid is valid")
}

/// Unit-cube grid with interior nodes randomly displaced by up to
/// `jitter` cell widths. Used for randomized operator checks.
pub fn jittered_cube(n: usize, jitter: f64, seed: u64) -> TetMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1.0 / n as f64;
    let mut offsets = HashMap::new();
    for k in 0..=n {
        for j in 0..=n {
            for i in 0..=n {
                let mut d = Vec3::zeros();
                for (a, idx) in [i, j, k].into_iter().enumerate() {
                    if idx > 0 && idx < n {
                        d[a] = rng.gen_range(-jitter..=jitter) * h;
                    }
                }
                offsets.insert([i, j, k], d);
            }
        }
    }
    build_grid(
        [n, n, n],
        |i, j, k| Vec3::new(i as f64 * h, j as f64 * h, k as f64 * h) + offsets[&[i, j, k]],
        |_, _, _| true,
    )
}

/// Tags boundary faces PART when `is_part(outward normal, centroid)` holds,
/// STOCK otherwise.
pub fn tag_part_where(mesh: TetMesh, is_part: impl Fn(&Vec3, &Vec3) -> bool) -> TetMesh {
    mesh.with_tag_fn(|n, c| if is_part(n, c) { BoundaryTag::Part } else { BoundaryTag::Stock })
}

/// Unit cube, `n` cells per axis, with the bottom face (z = 0) as the part
/// and everything else stock.
pub fn unit_cube_scene(n: usize) -> TetMesh {
    let m = box_mesh(Vec3::zeros(), Vec3::repeat(1.0), [n, n, n]);
    tag_part_where(m, |_, c| c.z.abs() < 1e-12)
}

/// Box `[0,2]x[0,1]x[0,1]` with `n` cells per unit length and two critical
/// anchors near the centre tilted apart by `angle_deg`. No gradient field
/// matches both directions, so an interpolated field carries rotation.
pub fn conflicting_anchor_scene(n: usize, angle_deg: f64) -> (TetMesh, AnchorSet) {
    let mesh = box_mesh(Vec3::zeros(), Vec3::new(2.0, 1.0, 1.0), [2 * n, n, n]);
    let half = (angle_deg / 2.0).to_radians();
    let mut anchors = AnchorSet::new();
    for (x, sx) in [(0.8, 1.0), (1.2, -1.0)] {
        let tet = mesh.locate_point(&Vec3::new(x, 0.5, 0.5)).expect("anchor point inside box");
        anchors.insert(Anchor {
            tet,
            direction: Vec3::new(sx * half.sin(), 0.0, half.cos()),
            weight: 1e8,
            critical: true,
        })
        .expect("anchor is valid");
    }
    (mesh, anchors)
}

/// Tunnel `[0,2]x[0,1]x[0,1]`, `n` cells per unit, with PART on the four
/// long sides and STOCK on the two ends, plus a field that streams out of
/// the middle towards both ends. The split sits off the grid planes so the
/// conflicted faces cut through cells.
pub fn two_stream_tunnel(n: usize) -> (TetMesh, Vec<Vec3>) {
    let mesh = box_mesh(Vec3::zeros(), Vec3::new(2.0, 1.0, 1.0), [2 * n, n, n]);
    let mesh = tag_part_where(mesh, |normal, _| normal.x.abs() < 0.5);
    let split = 1.0 + 1.0 / (3.0 * n as f64);
    let field = (0..mesh.num_tets())
        .map(|t| if mesh.tet_centroid(t).x < split { -Vec3::x() } else { Vec3::x() })
        .collect();
    (mesh, field)
}

/// Cells of `[-1,1]^3` (`n` per axis) whose centre lies in the unit ball.
pub fn ball_mesh(n: usize) -> TetMesh {
    masked_box_mesh(Vec3::repeat(-1.0), Vec3::repeat(1.0), [n, n, n], |c| c.norm() < 1.0)
}

/// Cells of `[-r_out, r_out]^3` whose centre lies between the two radii.
pub fn shell_mesh(n: usize, r_in: f64, r_out: f64) -> TetMesh {
    masked_box_mesh(Vec3::repeat(-r_out), Vec3::repeat(r_out), [n, n, n], |c| {
        let r = c.norm();
        r_in < r && r < r_out
    })
}

/// Outward icosphere of the given radius after `level` subdivisions.
pub fn icosphere(level: usize, radius: f64) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0), (1.0, t, 0.0), (-1.0, -t, 0.0), (1.0, -t, 0.0),
        (0.0, -1.0, t), (0.0, 1.0, t), (0.0, -1.0, -t), (0.0, 1.0, -t),
        (t, 0.0, -1.0), (t, 0.0, 1.0), (-t, 0.0, -1.0), (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut tris: Vec<[usize; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..level {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) / 2.0).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(tris.len() * 4);
        for [a, b, c] in tris {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        tris = next;
    }
    TriMesh::new(verts.into_iter().map(|v| v * radius).collect(), tris)
}

/// Stock box `[0,4]x[0,4]x[0,3]` around a cup: a solid `[1,3]x[1,3]x[0,2]`
/// with a `[1.5,2.5]x[1.5,2.5]x[0.5,2]` cavity open at the top. `n` cells
/// per unit length (use an even `n`). Faces on the cup are PART.
pub fn cup_scene(n: usize) -> TetMesh {
    let in_cup = |c: &Vec3| {
        let outer = (1.0..3.0).contains(&c.x) && (1.0..3.0).contains(&c.y) && c.z < 2.0;
        let hole = (1.5..2.5).contains(&c.x) && (1.5..2.5).contains(&c.y) && c.z > 0.5;
        outer && !hole
    };
    let m = masked_box_mesh(Vec3::zeros(), Vec3::new(4.0, 4.0, 3.0), [4 * n, 4 * n, 3 * n], |c| !in_cup(c));
    let eps = 1e-9;
    tag_part_where(m, |_, c| {
        (1.0 - eps..=3.0 + eps).contains(&c.x) && (1.0 - eps..=3.0 + eps).contains(&c.y) && c.z > eps && c.z <= 2.0 + eps
    })
}

/// Vertices of the cup solid in [`cup_scene`], for hull seeding.
pub fn cup_points() -> Vec<Vec3> {
    (0..8)
        .map(|c| Vec3::new(1.0 + 2.0 * (c & 1) as f64, 1.0 + 2.0 * ((c >> 1) & 1) as f64, 2.0 * ((c >> 2) & 1) as f64))
        .collect()
}

/// Height of the freeform part surface under the stock of [`freeform_scene`].
pub fn freeform_height(x: f64, y: f64) -> f64 {
    0.8 * (-((x - 2.0).powi(2) + (y - 2.0).powi(2)) / (2.0 * 0.7 * 0.7)).exp()
}

/// Stock `{(x, y, z) : f(x, y) <= z <= 2}` over `[0,4]x[0,4]`, with the
/// bump `f` from [`freeform_height`] as the PART floor and STOCK elsewhere.
/// `n` cells per unit in x and y; columns carry `2n` cells.
pub fn freeform_scene(n: usize) -> TetMesh {
    let h = 1.0 / n as f64;
    let nz = 2 * n;
    let m = build_grid(
        [4 * n, 4 * n, nz],
        |i, j, k| {
            let (x, y) = (i as f64 * h, j as f64 * h);
            let f = freeform_height(x, y);
            Vec3::new(x, y, f + (2.0 - f) * k as f64 / nz as f64)
        },
        |_, _, _| true,
    );
    // the floor is the only face set whose outward normal points down
    tag_part_where(m, |normal, _| normal.z < -0.5)
}

/// The PART faces of a mesh as a surface oriented out of the part.
pub fn part_surface(mesh: &TetMesh) -> TriMesh {
    TriMesh::new(mesh.vertices().to_vec(), mesh.boundary_triangles(&[BoundaryTag::Part])).flipped()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_tet_cube_volume_and_faces() {
        let m = five_tet_cube();
        assert!((m.total_volume() - 1.0).abs() < 1e-12);
        assert_eq!(m.boundary_faces().len(), 12);
    }

    #[test]
    fn box_mesh_is_conforming() {
        let m = box_mesh(Vec3::zeros(), Vec3::new(2.0, 1.0, 1.0), [4, 2, 3]);
        assert_eq!(m.num_tets(), 6 * 24);
        assert!((m.total_volume() - 2.0).abs() < 1e-12);
        // 2 triangles per boundary cell face
        assert_eq!(m.boundary_faces().len(), 2 * 2 * (4 * 2 + 4 * 3 + 2 * 3));
        assert!((m.boundary_enclosed_volume() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn jittered_cube_keeps_volume() {
        let m = jittered_cube(4, 0.25, 7);
        assert!((m.total_volume() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unit_cube_scene_tags_bottom() {
        let m = unit_cube_scene(3);
        assert_eq!(m.tag_counts()[&BoundaryTag::Part], 18);
        assert_eq!(m.tag_counts()[&BoundaryTag::Stock], 90);
    }
}
