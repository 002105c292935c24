//! Triangle meshes: OBJ/OFF loading, normalization, OBJ export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f32; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

fn sub(a: [f32; 3], b: [f32; 3]) -> [f64; 3] {
    [
        (a[0] - b[0]) as f64,
        (a[1] - b[1]) as f64,
        (a[2] - b[2]) as f64,
    ]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl Mesh {
    pub fn new(vertices: Vec<[f32; 3]>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::DegenerateMesh(format!(
                "triangle {t:?} indexes past {n} vertices"
            )));
        }
        Ok(Self {
            vertices,
            triangles,
        })
    }

    /// Axis-aligned cube with side 1 centered at the origin.
    pub fn unit_cube() -> Self {
        let mut vertices = Vec::with_capacity(8);
        for i in 0..8u32 {
            vertices.push([
                if i & 1 == 0 { -0.5 } else { 0.5 },
                if i & 2 == 0 { -0.5 } else { 0.5 },
                if i & 4 == 0 { -0.5 } else { 0.5 },
            ]);
        }
        let quads = [
            [0, 2, 3, 1],
            [4, 5, 7, 6],
            [0, 1, 5, 4],
            [2, 6, 7, 3],
            [0, 4, 6, 2],
            [1, 3, 7, 5],
        ];
        let triangles = quads
            .iter()
            .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
            .collect();
        Self {
            vertices,
            triangles,
        }
    }

    /// Closed surface of revolution around the y axis from `(y, radius)` samples
    /// ordered bottom to top. Both ends are capped.
    pub fn revolve(profile: &[(f32, f32)], segments: usize) -> Result<Self> {
        if profile.len() < 2 || segments < 3 {
            return Err(Error::DegenerateMesh(
                "revolution needs >= 2 profile samples and >= 3 segments".into(),
            ));
        }
        let mut vertices = Vec::new();
        for &(y, r) in profile {
            for s in 0..segments {
                let a = std::f32::consts::TAU * s as f32 / segments as f32;
                vertices.push([r * a.cos(), y, r * a.sin()]);
            }
        }
        let ring = |i: usize, s: usize| (i * segments + s % segments) as u32;
        let mut triangles = Vec::new();
        for i in 0..profile.len() - 1 {
            for s in 0..segments {
                triangles.push([ring(i, s), ring(i + 1, s), ring(i + 1, s + 1)]);
                triangles.push([ring(i, s), ring(i + 1, s + 1), ring(i, s + 1)]);
            }
        }
        let bottom = vertices.len() as u32;
        vertices.push([0.0, profile[0].0, 0.0]);
        let top = vertices.len() as u32;
        vertices.push([0.0, profile[profile.len() - 1].0, 0.0]);
        let last = profile.len() - 1;
        for s in 0..segments {
            triangles.push([bottom, ring(0, s + 1), ring(0, s)]);
            triangles.push([top, ring(last, s), ring(last, s + 1)]);
        }
        Self::new(vertices, triangles)
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i as usize]);
                let n = cross(sub(b, a), sub(c, a));
                0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
            })
            .sum()
    }

    /// Area-weighted surface centroid moved to the origin, then scaled so the
    /// farthest vertex lies on the unit sphere.
    pub fn normalized(&self) -> Result<Mesh> {
        let mut total = 0.0f64;
        let mut centroid = [0.0f64; 3];
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| self.vertices[i as usize]);
            let n = cross(sub(b, a), sub(c, a));
            let area = 0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            total += area;
            for k in 0..3 {
                centroid[k] += area * (a[k] + b[k] + c[k]) as f64 / 3.0;
            }
        }
        if total <= 0.0 || !total.is_finite() {
            return Err(Error::DegenerateMesh("zero surface area".into()));
        }
        let centroid = centroid.map(|c| c / total);
        let radius = self
            .vertices
            .iter()
            .map(|v| {
                (0..3)
                    .map(|k| (v[k] as f64 - centroid[k]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        if radius <= 0.0 || !radius.is_finite() {
            return Err(Error::DegenerateMesh("zero extent".into()));
        }
        let vertices = self
            .vertices
            .iter()
            .map(|v| std::array::from_fn(|k| ((v[k] as f64 - centroid[k]) / radius) as f32))
            .collect();
        Ok(Mesh {
            vertices,
            triangles: self.triangles.clone(),
        })
    }

    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        out
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_obj()).map_err(|e| Error::io_at(path, e))
    }
}

pub fn load_mesh(path: &Path) -> Result<Mesh> {
    let fail = |reason: String| Error::MeshLoadFailure {
        path: path.to_path_buf(),
        reason,
    };
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    let mesh = match ext.as_deref() {
        Some("obj") => load_obj(path).map_err(fail)?,
        Some("off") => {
            let text = fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
            parse_off(&text).map_err(fail)?
        }
        other => return Err(fail(format!("unsupported mesh format {other:?}"))),
    };
    if mesh.triangles.is_empty() {
        return Err(Error::DegenerateMesh(format!("{}: no faces", path.display())));
    }
    Ok(mesh)
}

fn load_obj(path: &Path) -> std::result::Result<Mesh, String> {
    let options = tobj::LoadOptions {
        triangulate: true,
        single_index: true,
        ..Default::default()
    };
    let (models, _) = tobj::load_obj(path, &options).map_err(|e| e.to_string())?;
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for model in models {
        let offset = vertices.len() as u32;
        vertices.extend(model.mesh.positions.chunks_exact(3).map(|p| [p[0], p[1], p[2]]));
        triangles.extend(
            model
                .mesh
                .indices
                .chunks_exact(3)
                .map(|t| [t[0] + offset, t[1] + offset, t[2] + offset]),
        );
    }
    Mesh::new(vertices, triangles).map_err(|e| e.to_string())
}

/// Parses ASCII OFF. Polygons are fan-triangulated; trailing face colors are ignored.
pub fn parse_off(text: &str) -> std::result::Result<Mesh, String> {
    let mut lines = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty());
    let first = lines.next().ok_or("empty file")?;
    let rest_of_header = first
        .strip_prefix("OFF")
        .ok_or_else(|| format!("missing OFF header: {first:?}"))?
        .trim();
    let counts_line = if rest_of_header.is_empty() {
        lines.next().ok_or("missing counts")?
    } else {
        rest_of_header
    };
    let counts: Vec<usize> = counts_line
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| format!("bad count {t:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let (nv, nf) = match counts.as_slice() {
        [nv, nf, ..] => (*nv, *nf),
        _ => return Err("counts line needs vertex and face counts".into()),
    };
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let line = lines.next().ok_or("truncated vertex list")?;
        let xyz: Vec<f32> = line
            .split_whitespace()
            .take(3)
            .map(|t| t.parse::<f32>().map_err(|e| format!("bad coordinate {t:?}: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        if xyz.len() != 3 {
            return Err(format!("vertex line {line:?} has fewer than 3 values"));
        }
        vertices.push([xyz[0], xyz[1], xyz[2]]);
    }
    let mut triangles = Vec::with_capacity(nf);
    for _ in 0..nf {
        let line = lines.next().ok_or("truncated face list")?;
        let mut it = line.split_whitespace();
        let n: usize = it
            .next()
            .ok_or("empty face line")?
            .parse()
            .map_err(|e| format!("bad face arity: {e}"))?;
        let idx: Vec<u32> = it
            .take(n)
            .map(|t| t.parse::<u32>().map_err(|e| format!("bad index {t:?}: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        if idx.len() != n || n < 3 {
            return Err(format!("face line {line:?} is malformed"));
        }
        for k in 1..n - 1 {
            triangles.push([idx[0], idx[k], idx[k + 1]]);
        }
    }
    Mesh::new(vertices, triangles).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn off_quads_are_triangulated() {
        let text = "OFF\n# square\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3 255 0 0\n";
        let m = parse_off(text).unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3]]);
        assert!((m.surface_area() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn off_header_with_inline_counts() {
        let m = parse_off("OFF 3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n").unwrap();
        assert_eq!(m.vertices.len(), 3);
    }

    #[test]
    fn obj_round_trip_through_tobj() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("cube.obj");
        Mesh::unit_cube().write_obj(&path).unwrap();
        let m = load_mesh(&path).unwrap();
        assert_eq!(m.triangles.len(), 12);
        assert!((m.surface_area() - 6.0).abs() < 1e-5);
    }

    #[test]
    fn normalization_centers_and_scales() {
        let mut cube = Mesh::unit_cube();
        for v in &mut cube.vertices {
            v[0] = v[0] * 4.0 + 10.0;
        }
        let n = cube.normalized().unwrap();
        let max_r = n
            .vertices
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .fold(0.0f32, f32::max);
        assert!((max_r - 1.0).abs() < 1e-5);
        let cx: f32 = n.vertices.iter().map(|v| v[0]).sum::<f32>() / 8.0;
        assert!(cx.abs() < 1e-5);
    }

    #[test]
    fn zero_extent_is_degenerate() {
        let m = Mesh::new(vec![[1.0, 1.0, 1.0]; 3], vec![[0, 1, 2]]).unwrap();
        assert!(matches!(m.normalized(), Err(Error::DegenerateMesh(_))));
    }

    #[test]
    fn unreadable_mesh_is_load_failure() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("bad.off");
        fs::write(&path, "NOPE").unwrap();
        assert!(matches!(load_mesh(&path), Err(Error::MeshLoadFailure { .. })));
    }
}
