use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use peel_core::diffops::sample_vertices;
use peel_core::{save_mesh, scenes, MeshFormat, TetMesh};

fn peel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_peel")).args(args).output().expect("peel runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_mesh(dir: &Path, name: &str, mesh: &TetMesh) -> PathBuf {
    let path = dir.join(format!("{name}.vtk"));
    save_mesh(mesh, &path, MeshFormat::VtkLegacy).unwrap();
    path
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn plan_on_cube_is_valid_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let mesh = write_mesh(tmp.path(), "cube", &scenes::unit_cube_scene(4));
    let cfg = write(tmp.path(), "plan.toml", "name = \"cube\"\nlayers = { layer_count = 4 }\n");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = peel(&["plan", "--mesh", s(&mesh), "--config", s(&cfg), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(a.join("metrics.json").exists());
    assert!(a.join("layers/manifest.json").exists());
    assert_eq!(fs::read_dir(a.join("layers")).unwrap().count(), 5);
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);
}

#[test]
fn unconverged_plan_exits_2_with_report() {
    let tmp = tempfile::tempdir().unwrap();
    let (m, anchors) = scenes::conflicting_anchor_scene(4, 60.0);
    let mesh = write_mesh(tmp.path(), "conflict", &m);
    let mut cfg = String::from("strategy = \"ANCHORS_ONLY\"\n[curl]\nmax_iters = 1\nthreshold = 1e-12\n");
    for a in anchors.iter() {
        cfg.push_str(&format!(
            "[[anchors]]\ntet = {}\ndirection = [{}, {}, {}]\nweight = {}\ncritical = true\n",
            a.tet, a.direction.x, a.direction.y, a.direction.z, a.weight
        ));
    }
    let cfg = write(tmp.path(), "plan.toml", &cfg);
    let out = tmp.path().join("out");
    let o = peel(&["plan", "--mesh", s(&mesh), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(out.join("metrics.json")).unwrap();
    assert!(metrics.contains("\"INVALID\""));
    assert!(metrics.contains("did not converge"));
}

#[test]
fn check_reports_injected_maximum() {
    let tmp = tempfile::tempdir().unwrap();
    let m = scenes::unit_cube_scene(4);
    let mesh = write_mesh(tmp.path(), "cube", &m);
    let mut g = sample_vertices(&m, |p| p.z);
    let clean = write(tmp.path(), "clean.txt", &g.iter().map(|v| format!("{v:e}\n")).collect::<String>());
    let o = peel(&["check", "--mesh", s(&mesh), "--scalar", s(&clean), "--layers", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let bump = (0..m.num_vertices()).find(|&v| !m.is_boundary_vertex(v)).unwrap();
    g[bump] = 2.0;
    let dirty = write(tmp.path(), "dirty.txt", &g.iter().map(|v| format!("{v:e}\n")).collect::<String>());
    let report = tmp.path().join("report.json");
    let o = peel(&["check", "--mesh", s(&mesh), "--scalar", s(&dirty), "--out", s(&report)]);
    assert_eq!(code(&o), 2);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let listed: Vec<u64> = v["interior_extrema"].as_array().unwrap().iter().map(|e| e["vertex"].as_u64().unwrap()).collect();
    assert_eq!(listed, vec![bump as u64]);
    assert_eq!(v["clean"], serde_json::json!(false));
}

#[test]
fn compare_planar_and_conformal() {
    let tmp = tempfile::tempdir().unwrap();
    let m = scenes::freeform_scene(3);
    let mesh = write_mesh(tmp.path(), "freeform", &m);
    let part = write(tmp.path(), "part.obj", &scenes::part_surface(&m).to_obj());
    let planar = write(
        tmp.path(),
        "planar.toml",
        "name = \"planar\"\nstrategy = \"PLANAR\"\npeel_direction = [0.0, 0.0, 1.0]\nlayers = { target_depth = 0.25 }\n",
    );
    let conformal = write(
        tmp.path(),
        "conformal.toml",
        "name = \"conformal\"\nbc = \"DIRICHLET_PART\"\nlayers = { layer_count = 8 }\n",
    );
    let out = tmp.path().join("cmp");
    let o = peel(&["compare", "--mesh", s(&mesh), "--part", s(&part), "--configs", s(&planar), s(&conformal), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("comparison.txt").exists());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("comparison.json")).unwrap()).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    let depth = |i: usize| rows[i]["max_depth"].as_f64().unwrap();
    assert!(depth(1) < depth(0), "conformal {} vs planar {}", depth(1), depth(0));
}

#[test]
fn errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.vtk");
    let cfg = write(tmp.path(), "plan.toml", "");
    let o = peel(&["plan", "--mesh", s(&missing), "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 1);
    let mesh = write_mesh(tmp.path(), "cube", &scenes::unit_cube_scene(2));
    let bad = write(tmp.path(), "bad.toml", "strategy = \"SIDEWAYS\"\n");
    let o = peel(&["plan", "--mesh", s(&mesh), "--config", s(&bad), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn demo_writes_loadable_mesh() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("scenes/cup.vtk");
    let o = peel(&["demo", "--scene", "cup", "--n", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = peel_core::load_mesh(&out, MeshFormat::VtkLegacy).unwrap();
    assert_eq!(m.num_tets(), scenes::cup_scene(1).num_tets());
    assert!(m.boundary_faces().iter().any(|bf| bf.tag == peel_core::BoundaryTag::Part));
    assert!(tmp.path().join("scenes/cup.part.obj").exists());
}
