//! Fixed-viewpoint software rendering of meshes into gray shaded views.

use std::path::Path;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use super::manifest::ShapeRecord;
use super::mesh::{load_mesh, Mesh};
use crate::error::{Error, Result};

/// Eye distance for perspective views of a unit-sphere mesh.
pub const CAMERA_DISTANCE: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Perspective,
    Orthographic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub view_count: usize,
    pub elevation_deg: f64,
    pub azimuths_deg: Vec<f64>,
    pub image_size: u32,
    pub projection: Projection,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self::ring(12, 20.0, 224, Projection::Perspective)
    }
}

impl CameraRig {
    /// `view_count` azimuths evenly spaced from 0.
    pub fn ring(view_count: usize, elevation_deg: f64, image_size: u32, projection: Projection) -> Self {
        let azimuths_deg = (0..view_count)
            .map(|i| 360.0 * i as f64 / view_count as f64)
            .collect();
        Self {
            view_count,
            elevation_deg,
            azimuths_deg,
            image_size,
            projection,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.view_count == 0 {
            return Err(Error::InvalidRig("view_count must be positive".into()));
        }
        if self.azimuths_deg.len() != self.view_count {
            return Err(Error::InvalidRig(format!(
                "{} azimuths for {} views",
                self.azimuths_deg.len(),
                self.view_count
            )));
        }
        if self
            .azimuths_deg
            .iter()
            .any(|a| !a.is_finite() || *a < 0.0 || *a >= 360.0)
        {
            return Err(Error::InvalidRig("azimuths must lie in [0, 360)".into()));
        }
        if self.azimuths_deg.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidRig("azimuths must be strictly increasing".into()));
        }
        if !self.elevation_deg.is_finite() || self.elevation_deg.abs() >= 90.0 {
            return Err(Error::InvalidRig("elevation must lie in (-90, 90)".into()));
        }
        if self.image_size == 0 {
            return Err(Error::InvalidRig("image_size must be positive".into()));
        }
        Ok(())
    }
}

type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn unit(a: V3) -> V3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

struct Camera {
    eye: V3,
    right: V3,
    up: V3,
    forward: V3,
    projection: Projection,
    tan_half_fov: f64,
}

impl Camera {
    fn new(azimuth_deg: f64, elevation_deg: f64, projection: Projection) -> Self {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let dir = [el.cos() * az.sin(), el.sin(), el.cos() * az.cos()];
        let eye = dir.map(|c| c * CAMERA_DISTANCE);
        let forward = dir.map(|c| -c);
        let right = unit(cross(forward, [0.0, 1.0, 0.0]));
        let up = cross(right, forward);
        // field of view that just contains the unit sphere
        let tan_half_fov = (1.0 / CAMERA_DISTANCE).asin().tan();
        Self {
            eye,
            right,
            up,
            forward,
            projection,
            tan_half_fov,
        }
    }

    /// Normalized device coordinates in [-1, 1] plus view depth.
    fn project(&self, p: V3) -> [f64; 3] {
        let rel = [p[0] - self.eye[0], p[1] - self.eye[1], p[2] - self.eye[2]];
        let (x, y, z) = (dot(rel, self.right), dot(rel, self.up), dot(rel, self.forward));
        match self.projection {
            Projection::Orthographic => [x, y, z],
            Projection::Perspective => {
                let s = z.max(1e-6) * self.tan_half_fov;
                [x / s, y / s, z]
            }
        }
    }
}

/// Renders one view of an already-normalized mesh.
pub fn render_view(mesh: &Mesh, azimuth_deg: f64, elevation_deg: f64, size: u32, projection: Projection) -> GrayImage {
    let camera = Camera::new(azimuth_deg, elevation_deg, projection);
    let n = size as usize;
    let mut depth = vec![f64::INFINITY; n * n];
    let mut img = GrayImage::from_pixel(size, size, Luma([255]));
    let scale = n as f64 / 2.0;
    let to_screen = |q: [f64; 3]| [(q[0] + 1.0) * scale, (1.0 - q[1]) * scale, q[2]];
    for tri in &mesh.triangles {
        let world = tri.map(|i| mesh.vertices[i as usize].map(f64::from));
        let normal = cross(
            [world[1][0] - world[0][0], world[1][1] - world[0][1], world[1][2] - world[0][2]],
            [world[2][0] - world[0][0], world[2][1] - world[0][1], world[2][2] - world[0][2]],
        );
        let len = dot(normal, normal).sqrt();
        if len == 0.0 {
            continue;
        }
        let lambert = (dot(normal, camera.forward) / len).abs();
        let shade = (255.0 * (0.2 + 0.7 * lambert)).round() as u8;
        let s = world.map(|p| to_screen(camera.project(p)));
        let area = (s[1][0] - s[0][0]) * (s[2][1] - s[0][1]) - (s[2][0] - s[0][0]) * (s[1][1] - s[0][1]);
        if area.abs() < 1e-12 {
            continue;
        }
        let min_x = s.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_x = s.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max).ceil().min(n as f64) as usize;
        let min_y = s.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_y = s.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max).ceil().min(n as f64) as usize;
        for py in min_y..max_y {
            for px in min_x..max_x {
                let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                let edge = |a: [f64; 3], b: [f64; 3]| (b[0] - a[0]) * (y - a[1]) - (x - a[0]) * (b[1] - a[1]);
                let w0 = edge(s[1], s[2]) / area;
                let w1 = edge(s[2], s[0]) / area;
                let w2 = edge(s[0], s[1]) / area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let z = w0 * s[0][2] + w1 * s[1][2] + w2 * s[2][2];
                let k = py * n + px;
                if z < depth[k] {
                    depth[k] = z;
                    img.put_pixel(px as u32, py as u32, Luma([shade]));
                }
            }
        }
    }
    img
}

/// Normalizes the mesh and renders every view of the rig.
pub fn render_mesh(mesh: &Mesh, rig: &CameraRig) -> Result<Vec<GrayImage>> {
    rig.validate()?;
    let mesh = mesh.normalized()?;
    Ok(rig
        .azimuths_deg
        .iter()
        .map(|&az| render_view(&mesh, az, rig.elevation_deg, rig.image_size, rig.projection))
        .collect())
}

pub fn render_views(shape: &ShapeRecord, rig: &CameraRig) -> Result<Vec<GrayImage>> {
    rig.validate()?;
    let mesh = load_mesh(&shape.uri)?;
    render_mesh(&mesh, rig)
}

/// Renders a shape's candidate views to `<out_dir>/<index>.png` and returns their paths.
pub fn render_to_dir(shape: &ShapeRecord, rig: &CameraRig, out_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let views = render_views(shape, rig)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io_at(out_dir, e))?;
    let mut paths = Vec::with_capacity(views.len());
    for (i, view) in views.iter().enumerate() {
        let path = out_dir.join(format!("{i:02}.png"));
        view.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}
