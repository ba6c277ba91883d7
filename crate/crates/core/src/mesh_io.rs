//! Readers and writers for tetrahedral meshes and boundary-tag sidecars.
//!
//! * TetGen `.node` / `.ele` pairs, 0- or 1-based (detected from the first
//!   index in the `.node` file).
//! * Legacy ASCII VTK unstructured grids (cell type 10).
//! * Sidecar tag files, one `tet_index local_face PART|STOCK` line per face.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::mesh::{BoundaryTag, MeshError, TetMesh, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MeshFormat {
    TetgenNodeEle,
    VtkLegacy,
}

impl MeshFormat {
    /// Guesses the format from a path extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("vtk") => Some(MeshFormat::VtkLegacy),
            Some("node") | Some("ele") => Some(MeshFormat::TetgenNodeEle),
            None => Some(MeshFormat::TetgenNodeEle),
            _ => None,
        }
    }
}

fn parse_err(what: impl Into<String>) -> MeshError {
    MeshError::Parse(what.into())
}

/// Strips `#` comments and blank lines.
fn data_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
}

fn tetgen_base(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("node") | Some("ele") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn with_suffix(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Path of the tag sidecar that accompanies a mesh file.
pub fn sidecar_path(mesh_path: &Path) -> PathBuf {
    let base = match mesh_path.extension().and_then(|e| e.to_str()) {
        Some("node") | Some("ele") | Some("vtk") => mesh_path.with_extension(""),
        _ => mesh_path.to_path_buf(),
    };
    with_suffix(&base, "tags")
}

/// Loads a mesh. If a sidecar `<stem>.tags` exists next to it, its tags are
/// applied.
pub fn load_mesh(path: &Path, format: MeshFormat) -> Result<TetMesh, MeshError> {
    let mesh = match format {
        MeshFormat::TetgenNodeEle => {
            let base = tetgen_base(path);
            let node = fs::read_to_string(with_suffix(&base, "node"))?;
            let ele = fs::read_to_string(with_suffix(&base, "ele"))?;
            parse_tetgen(&node, &ele)?
        }
        MeshFormat::VtkLegacy => parse_vtk(&fs::read_to_string(path)?)?,
    };
    let sidecar = sidecar_path(path);
    if sidecar.exists() {
        let tags = parse_sidecar(&fs::read_to_string(sidecar)?)?;
        mesh.with_tags(tags)
    } else {
        Ok(mesh)
    }
}

pub fn parse_tetgen(node: &str, ele: &str) -> Result<TetMesh, MeshError> {
    let mut lines = data_lines(node);
    let header: Vec<usize> = lines
        .next()
        .ok_or_else(|| parse_err(".node: missing header"))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| parse_err(format!(".node: bad header token `{t}`"))))
        .collect::<Result<_, _>>()?;
    let (count, dim) = match header.as_slice() {
        [n, d, ..] => (*n, *d),
        _ => return Err(parse_err(".node: header needs at least 2 fields")),
    };
    if dim != 3 {
        return Err(parse_err(format!(".node: dimension {dim} unsupported")));
    }
    let mut first_index = None;
    let mut vertices = Vec::with_capacity(count);
    for i in 0..count {
        let line = lines.next().ok_or_else(|| parse_err(format!(".node: missing vertex {i}")))?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 4 {
            return Err(parse_err(format!(".node: short line `{line}`")));
        }
        let id: usize = tok[0].parse().map_err(|_| parse_err(format!(".node: bad id `{}`", tok[0])))?;
        let base = *first_index.get_or_insert(id);
        if id != base + i {
            return Err(parse_err(format!(".node: ids must be consecutive, got {id}")));
        }
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = tok[1 + a]
                .parse()
                .map_err(|_| parse_err(format!(".node: bad coordinate `{}`", tok[1 + a])))?;
        }
        vertices.push(Vec3::new(p[0], p[1], p[2]));
    }
    let offset = first_index.unwrap_or(0);
    if offset > 1 {
        return Err(parse_err(format!(".node: first index must be 0 or 1, got {offset}")));
    }

    let mut lines = data_lines(ele);
    let header: Vec<usize> = lines
        .next()
        .ok_or_else(|| parse_err(".ele: missing header"))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| parse_err(format!(".ele: bad header token `{t}`"))))
        .collect::<Result<_, _>>()?;
    let (ntets, per) = match header.as_slice() {
        [n, k, ..] => (*n, *k),
        _ => return Err(parse_err(".ele: header needs at least 2 fields")),
    };
    if per != 4 {
        return Err(parse_err(format!(".ele: {per} nodes per element unsupported")));
    }
    let mut tets = Vec::with_capacity(ntets);
    for i in 0..ntets {
        let line = lines.next().ok_or_else(|| parse_err(format!(".ele: missing tet {i}")))?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 5 {
            return Err(parse_err(format!(".ele: short line `{line}`")));
        }
        let mut tet = [0usize; 4];
        for a in 0..4 {
            let v: usize = tok[1 + a]
                .parse()
                .map_err(|_| parse_err(format!(".ele: bad index `{}`", tok[1 + a])))?;
            tet[a] = v
                .checked_sub(offset)
                .ok_or_else(|| parse_err(format!(".ele: index {v} below base {offset}")))?;
        }
        tets.push(tet);
    }
    TetMesh::new(vertices, tets)
}

pub fn parse_vtk(text: &str) -> Result<TetMesh, MeshError> {
    let mut tokens = text
        .lines()
        .skip(2) // version line and title
        .flat_map(|l| l.split_whitespace());
    let mut next = |what: &str| tokens.next().ok_or_else(|| parse_err(format!("vtk: expected {what}")));
    let fmt = next("ASCII")?;
    if !fmt.eq_ignore_ascii_case("ASCII") {
        return Err(parse_err("vtk: only ASCII files are supported"));
    }
    if next("DATASET")? != "DATASET" || next("dataset type")? != "UNSTRUCTURED_GRID" {
        return Err(parse_err("vtk: expected DATASET UNSTRUCTURED_GRID"));
    }
    if next("POINTS")? != "POINTS" {
        return Err(parse_err("vtk: expected POINTS"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| parse_err(format!("vtk: bad count `{s}`")));
    let flt = |s: &str| s.parse::<f64>().map_err(|_| parse_err(format!("vtk: bad number `{s}`")));
    let npts = num(next("point count")?)?;
    let _dtype = next("point data type")?;
    let mut vertices = Vec::with_capacity(npts);
    for _ in 0..npts {
        let x = flt(next("x")?)?;
        let y = flt(next("y")?)?;
        let z = flt(next("z")?)?;
        vertices.push(Vec3::new(x, y, z));
    }
    if next("CELLS")? != "CELLS" {
        return Err(parse_err("vtk: expected CELLS"));
    }
    let ncells = num(next("cell count")?)?;
    let _size = next("cell list size")?;
    let mut cells = Vec::with_capacity(ncells);
    for _ in 0..ncells {
        let k = num(next("cell arity")?)?;
        let mut ids = Vec::with_capacity(k);
        for _ in 0..k {
            ids.push(num(next("cell index")?)?);
        }
        cells.push(ids);
    }
    if next("CELL_TYPES")? != "CELL_TYPES" {
        return Err(parse_err("vtk: expected CELL_TYPES"));
    }
    let ntypes = num(next("cell type count")?)?;
    if ntypes != ncells {
        return Err(parse_err("vtk: CELL_TYPES count differs from CELLS"));
    }
    let mut tets = Vec::with_capacity(ncells);
    for ids in cells {
        let ty = num(next("cell type")?)?;
        if ty != 10 || ids.len() != 4 {
            return Err(parse_err(format!("vtk: unsupported cell type {ty}")));
        }
        tets.push([ids[0], ids[1], ids[2], ids[3]]);
    }
    TetMesh::new(vertices, tets)
}

pub fn parse_sidecar(text: &str) -> Result<Vec<(usize, usize, BoundaryTag)>, MeshError> {
    data_lines(text)
        .map(|line| {
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() != 3 {
                return Err(parse_err(format!("tags: expected 3 fields in `{line}`")));
            }
            let t = tok[0].parse().map_err(|_| parse_err(format!("tags: bad tet `{}`", tok[0])))?;
            let f: usize = tok[1].parse().map_err(|_| parse_err(format!("tags: bad face `{}`", tok[1])))?;
            if f > 3 {
                return Err(parse_err(format!("tags: local face {f} out of range")));
            }
            Ok((t, f, tok[2].parse()?))
        })
        .collect()
}

pub fn format_tetgen(mesh: &TetMesh) -> (String, String) {
    let mut node = format!("{} 3 0 0\n", mesh.num_vertices());
    for (i, p) in mesh.vertices().iter().enumerate() {
        let _ = writeln!(node, "{i} {} {} {}", p.x, p.y, p.z);
    }
    let mut ele = format!("{} 4 0\n", mesh.num_tets());
    for (i, t) in mesh.tets().iter().enumerate() {
        let _ = writeln!(ele, "{i} {} {} {} {}", t[0], t[1], t[2], t[3]);
    }
    (node, ele)
}

pub fn format_vtk(mesh: &TetMesh) -> String {
    let mut s = String::from("# vtk DataFile Version 3.0\npeel tet mesh\nASCII\nDATASET UNSTRUCTURED_GRID\n");
    let _ = writeln!(s, "POINTS {} double", mesh.num_vertices());
    for p in mesh.vertices() {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    let _ = writeln!(s, "CELLS {} {}", mesh.num_tets(), mesh.num_tets() * 5);
    for t in mesh.tets() {
        let _ = writeln!(s, "4 {} {} {} {}", t[0], t[1], t[2], t[3]);
    }
    let _ = writeln!(s, "CELL_TYPES {}", mesh.num_tets());
    for _ in mesh.tets() {
        s.push_str("10\n");
    }
    s
}

/// Tagged boundary faces in sidecar form. Untagged faces are omitted.
pub fn format_sidecar(mesh: &TetMesh) -> String {
    let mut s = String::new();
    for bf in mesh.boundary_faces() {
        if bf.tag != BoundaryTag::Untagged {
            let _ = writeln!(s, "{} {} {}", bf.tet, bf.local_face, bf.tag.as_str());
        }
    }
    s
}

/// Writes the mesh plus its tag sidecar. For TetGen, `path` is the basename
/// (or either of the `.node` / `.ele` paths).
pub fn save_mesh(mesh: &TetMesh, path: &Path, format: MeshFormat) -> Result<(), MeshError> {
    match format {
        MeshFormat::TetgenNodeEle => {
            let base = tetgen_base(path);
            let (node, ele) = format_tetgen(mesh);
            fs::write(with_suffix(&base, "node"), node)?;
            fs::write(with_suffix(&base, "ele"), ele)?;
        }
        MeshFormat::VtkLegacy => fs::write(path, format_vtk(mesh))?,
    }
    let tags = format_sidecar(mesh);
    if !tags.is_empty() {
        fs::write(sidecar_path(path), tags)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const UNIT_NODE: &str = "# unit tet\n4 3 0 0\n1 0 0 0\n2 1 0 0\n3 0 1 0\n4 0 0 1\n";
    const UNIT_ELE: &str = "1 4 0\n1 1 2 3 4\n";

    #[test]
    fn one_based_tetgen() {
        let m = parse_tetgen(UNIT_NODE, UNIT_ELE).unwrap();
        assert_eq!(m.num_tets(), 1);
        assert!((m.tet_volume(0) - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(m.boundary_faces().len(), 4);
    }

    #[test]
    fn zero_based_tetgen_and_vtk_agree() {
        let m = parse_tetgen("4 3 0 0\n0 0 0 0\n1 1 0 0\n2 0 1 0\n3 0 0 1\n", "1 4 0\n0 0 1 2 3\n").unwrap();
        let v = parse_vtk(&format_vtk(&m)).unwrap();
        assert_eq!(m.tets(), v.tets());
        assert_eq!(m.vertices(), v.vertices());
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(parse_tetgen("4 3 0 0\n1 0 0\n", UNIT_ELE), Err(MeshError::Parse(_))));
        assert!(matches!(parse_tetgen(UNIT_NODE, "1 10 0\n1 1 2 3 4\n"), Err(MeshError::Parse(_))));
        assert!(matches!(parse_vtk("# vtk\nx\nBINARY\n"), Err(MeshError::Parse(_))));
        assert!(matches!(parse_sidecar("0 7 PART"), Err(MeshError::Parse(_))));
        assert!(matches!(parse_sidecar("0 1 WOOD"), Err(MeshError::Parse(_))));
    }

    #[test]
    fn vtk_rejects_non_tet_cells() {
        let text = "# vtk DataFile Version 3.0\nt\nASCII\nDATASET UNSTRUCTURED_GRID\nPOINTS 3 double\n0 0 0 1 0 0 0 1 0\nCELLS 1 4\n3 0 1 2\nCELL_TYPES 1\n5\n";
        assert!(matches!(parse_vtk(text), Err(MeshError::Parse(_))));
    }

    #[test]
    fn sidecar_parse() {
        let tags = parse_sidecar("# comment\n0 1 PART\n3 2 stock\n").unwrap();
        assert_eq!(tags, vec![(0, 1, BoundaryTag::Part), (3, 2, BoundaryTag::Stock)]);
    }
}
