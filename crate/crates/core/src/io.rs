//! Legacy VTK ASCII and PLY mesh files.
//!
//! Surfaces are POLYDATA, tet meshes UNSTRUCTURED_GRID with cell type 10.
//! Tet files carry a `surface_id` point array (-1 for interior vertices) so
//! the boundary correspondence survives a round trip, and the frame id is
//! kept in the title line.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::isosurface::SurfaceMesh;
use crate::tetmesh::{QualityReport, TetMesh};
use crate::volume::Vec3;

const VTK_TETRA: usize = 10;

fn header(s: &mut String, kind: &str, frame_id: usize, dataset: &str) {
    s.push_str("# vtk DataFile Version 3.0\n");
    let _ = writeln!(s, "lvmesh {kind} frame {frame_id}");
    s.push_str("ASCII\n");
    let _ = writeln!(s, "DATASET {dataset}");
}

fn points(s: &mut String, vertices: &[Vec3]) {
    let _ = writeln!(s, "POINTS {} float", vertices.len());
    for v in vertices {
        let _ = writeln!(s, "{} {} {}", v.x as f32, v.y as f32, v.z as f32);
    }
}

pub fn surface_to_vtk(mesh: &SurfaceMesh) -> String {
    let mut s = String::new();
    header(&mut s, "surface", mesh.frame_id, "POLYDATA");
    points(&mut s, &mesh.vertices);
    let _ = writeln!(s, "POLYGONS {} {}", mesh.triangles.len(), 4 * mesh.triangles.len());
    for t in &mesh.triangles {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    s
}

/// `quality`, when given, must describe `mesh`; its per-cell scaled
/// Jacobian and radius-edge ratio become cell arrays.
pub fn tets_to_vtk(mesh: &TetMesh, quality: Option<&QualityReport>) -> String {
    let mut s = String::new();
    header(&mut s, "tetmesh", mesh.frame_id, "UNSTRUCTURED_GRID");
    points(&mut s, &mesh.vertices);
    let n = mesh.tets.len();
    let _ = writeln!(s, "CELLS {} {}", n, 5 * n);
    for t in &mesh.tets {
        let _ = writeln!(s, "4 {} {} {} {}", t[0], t[1], t[2], t[3]);
    }
    let _ = writeln!(s, "CELL_TYPES {n}");
    for _ in 0..n {
        let _ = writeln!(s, "{VTK_TETRA}");
    }
    if let Some(q) = quality {
        let _ = writeln!(s, "CELL_DATA {n}");
        for (name, vals) in [("scaled_jacobian", &q.scaled_jacobian), ("radius_edge", &q.radius_edge)] {
            let _ = writeln!(s, "SCALARS {name} float 1\nLOOKUP_TABLE default");
            for v in vals {
                let _ = writeln!(s, "{}", *v as f32);
            }
        }
    }
    let mut sid = vec![-1i64; mesh.vertices.len()];
    for (k, &v) in mesh.boundary_map.iter().enumerate() {
        sid[v] = k as i64;
    }
    let _ = writeln!(s, "POINT_DATA {}", mesh.vertices.len());
    s.push_str("SCALARS surface_id int 1\nLOOKUP_TABLE default\n");
    for v in sid {
        let _ = writeln!(s, "{v}");
    }
    s
}

/// ASCII PLY with float vertices and triangle faces.
pub fn surface_to_ply(mesh: &SurfaceMesh) -> String {
    let mut s = String::from("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "comment frame {}", mesh.frame_id);
    let _ = writeln!(s, "element vertex {}", mesh.vertices.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    let _ = writeln!(s, "element face {}", mesh.triangles.len());
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for v in &mesh.vertices {
        let _ = writeln!(s, "{} {} {}", v.x as f32, v.y as f32, v.z as f32);
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_surface_vtk(mesh: &SurfaceMesh, path: &Path) -> Result<()> {
    write_text(path, &surface_to_vtk(mesh))
}

pub fn write_surface_ply(mesh: &SurfaceMesh, path: &Path) -> Result<()> {
    write_text(path, &surface_to_ply(mesh))
}

pub fn write_tets_vtk(mesh: &TetMesh, quality: Option<&QualityReport>, path: &Path) -> Result<()> {
    write_text(path, &tets_to_vtk(mesh, quality))
}

pub fn read_surface_vtk(path: &Path) -> Result<SurfaceMesh> {
    parse_surface_vtk(&read_text(path)?)
}

pub fn read_tets_vtk(path: &Path) -> Result<TetMesh> {
    parse_tets_vtk(&read_text(path)?)
}

/// Whitespace tokens of the body after the three header lines.
struct Tokens<'a> {
    it: std::iter::Peekable<std::str::SplitWhitespace<'a>>,
}

impl<'a> Tokens<'a> {
    fn next(&mut self, what: &str) -> Result<&'a str> {
        self.it.next().ok_or_else(|| Error::Vtk(format!("unexpected end of file reading {what}")))
    }

    fn num<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self.next(what)?;
        tok.parse().map_err(|_| Error::Vtk(format!("bad {what} `{tok}`")))
    }

    fn expect(&mut self, word: &str) -> Result<()> {
        let tok = self.next(word)?;
        if tok.eq_ignore_ascii_case(word) {
            Ok(())
        } else {
            Err(Error::Vtk(format!("expected `{word}`, found `{tok}`")))
        }
    }
}

struct Parsed<'a> {
    frame_id: usize,
    dataset: String,
    tokens: Tokens<'a>,
}

fn open(text: &str) -> Result<Parsed<'_>> {
    let mut lines = text.splitn(4, '\n');
    let magic = lines.next().unwrap_or("");
    if !magic.starts_with("# vtk DataFile") {
        return Err(Error::Vtk("missing `# vtk DataFile` magic line".into()));
    }
    let title = lines.next().ok_or_else(|| Error::Vtk("missing title line".into()))?;
    let frame_id = title
        .split_whitespace()
        .skip_while(|w| *w != "frame")
        .nth(1)
        .and_then(|w| w.parse().ok())
        .unwrap_or(0);
    let format = lines.next().ok_or_else(|| Error::Vtk("missing format line".into()))?;
    if format.trim() != "ASCII" {
        return Err(Error::Vtk(format!("only ASCII files are supported, found `{}`", format.trim())));
    }
    let mut tokens = Tokens {
        it: lines.next().unwrap_or("").split_whitespace().peekable(),
    };
    tokens.expect("DATASET")?;
    let dataset = tokens.next("dataset type")?.to_ascii_uppercase();
    Ok(Parsed {
        frame_id,
        dataset,
        tokens,
    })
}

fn read_points(t: &mut Tokens) -> Result<Vec<Vec3>> {
    t.expect("POINTS")?;
    let n: usize = t.num("point count")?;
    let ty = t.next("point type")?;
    if ty != "float" && ty != "double" {
        return Err(Error::Vtk(format!("unsupported point type `{ty}`")));
    }
    let single = ty == "float";
    let mut coord = || -> Result<f64> {
        if single {
            Ok(t.num::<f32>("coordinate")? as f64)
        } else {
            t.num("coordinate")
        }
    };
    (0..n).map(|_| Ok(Vec3::new(coord()?, coord()?, coord()?))).collect()
}

fn read_cells<const K: usize>(t: &mut Tokens, n: usize, nv: usize) -> Result<Vec<[usize; K]>> {
    (0..n)
        .map(|c| {
            let k: usize = t.num("cell size")?;
            if k != K {
                return Err(Error::Vtk(format!("cell {c} has {k} vertices, expected {K}")));
            }
            let mut cell = [0usize; K];
            for v in cell.iter_mut() {
                *v = t.num("vertex index")?;
                if *v >= nv {
                    return Err(Error::Vtk(format!("cell {c} references vertex {v} of {nv}")));
                }
            }
            Ok(cell)
        })
        .collect()
}

pub fn parse_surface_vtk(text: &str) -> Result<SurfaceMesh> {
    let mut p = open(text)?;
    if p.dataset != "POLYDATA" {
        return Err(Error::Vtk(format!("expected POLYDATA, found {}", p.dataset)));
    }
    let t = &mut p.tokens;
    let vertices = read_points(t)?;
    t.expect("POLYGONS")?;
    let n: usize = t.num("polygon count")?;
    let _size: usize = t.num("polygon list size")?;
    let triangles = read_cells::<3>(t, n, vertices.len())?;
    Ok(SurfaceMesh::new(vertices, triangles, p.frame_id))
}

/// Skips a `SCALARS` block's header and returns its name.
fn scalars_header(t: &mut Tokens) -> Result<String> {
    t.expect("SCALARS")?;
    let name = t.next("array name")?.to_string();
    let _ty = t.next("array type")?;
    if t.it.peek().is_some_and(|w| w.parse::<usize>().is_ok()) {
        let comps: usize = t.num("component count")?;
        if comps != 1 {
            return Err(Error::Vtk(format!("array {name} has {comps} components")));
        }
    }
    t.expect("LOOKUP_TABLE")?;
    t.next("lookup table name")?;
    Ok(name)
}

pub fn parse_tets_vtk(text: &str) -> Result<TetMesh> {
    let mut p = open(text)?;
    if p.dataset != "UNSTRUCTURED_GRID" {
        return Err(Error::Vtk(format!("expected UNSTRUCTURED_GRID, found {}", p.dataset)));
    }
    let t = &mut p.tokens;
    let vertices = read_points(t)?;
    t.expect("CELLS")?;
    let n: usize = t.num("cell count")?;
    let _size: usize = t.num("cell list size")?;
    let tets = read_cells::<4>(t, n, vertices.len())?;
    t.expect("CELL_TYPES")?;
    let nt: usize = t.num("cell type count")?;
    if nt != n {
        return Err(Error::Vtk(format!("{nt} cell types for {n} cells")));
    }
    for c in 0..n {
        let ty: usize = t.num("cell type")?;
        if ty != VTK_TETRA {
            return Err(Error::Vtk(format!("cell {c} has type {ty}, expected {VTK_TETRA}")));
        }
    }

    let mut surface_id: Option<Vec<i64>> = None;
    while let Some(section) = t.it.next() {
        let count: usize = t.num("data count")?;
        let is_point = match section.to_ascii_uppercase().as_str() {
            "CELL_DATA" => false,
            "POINT_DATA" => true,
            other => return Err(Error::Vtk(format!("unexpected section `{other}`"))),
        };
        while t.it.peek().is_some_and(|w| w.eq_ignore_ascii_case("SCALARS")) {
            let name = scalars_header(t)?;
            let vals: Vec<f64> = (0..count).map(|_| t.num(&name)).collect::<Result<_>>()?;
            if is_point && name == "surface_id" {
                surface_id = Some(vals.iter().map(|&v| v as i64).collect());
            }
        }
    }

    let boundary_map = match surface_id {
        Some(ids) => {
            if ids.len() != vertices.len() {
                return Err(Error::Vtk("surface_id length differs from point count".into()));
            }
            let ns = ids.iter().filter(|&&s| s >= 0).count();
            let mut map = vec![usize::MAX; ns];
            for (v, &s) in ids.iter().enumerate() {
                if s >= 0 {
                    let slot = map
                        .get_mut(s as usize)
                        .ok_or_else(|| Error::Vtk(format!("surface_id {s} out of range")))?;
                    if *slot != usize::MAX {
                        return Err(Error::Vtk(format!("surface_id {s} repeated")));
                    }
                    *slot = v;
                }
            }
            map
        }
        None => {
            // No correspondence stored: boundary vertices in ascending order.
            let m = TetMesh {
                vertices: vertices.clone(),
                tets: tets.clone(),
                boundary_map: Vec::new(),
                frame_id: p.frame_id,
            };
            m.boundary_flags().iter().enumerate().filter(|(_, &b)| b).map(|(v, _)| v).collect()
        }
    };
    Ok(TetMesh {
        vertices,
        tets,
        boundary_map,
        frame_id: p.frame_id,
    })
}
