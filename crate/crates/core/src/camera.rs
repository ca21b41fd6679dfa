//! Pinhole cameras, the bounded scene space and per-pixel rays.
//!
//! Camera frames follow the usual graphics convention: +x right, +y up and
//! the camera looking down -z. Poses are camera-to-world.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseRecord", into = "PoseRecord")]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    /// Camera center in world (or normalized scene) units.
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub time_index: usize,
}

#[derive(Serialize, Deserialize)]
struct PoseRecord {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    time_index: usize,
}

impl From<PoseRecord> for CameraPose {
    fn from(r: PoseRecord) -> Self {
        let m = r.rotation;
        CameraPose {
            rotation: Matrix3::new(
                m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
            ),
            translation: Vector3::from(r.translation),
            fx: r.fx,
            fy: r.fy,
            cx: r.cx,
            cy: r.cy,
            time_index: r.time_index,
        }
    }
}

impl From<CameraPose> for PoseRecord {
    fn from(p: CameraPose) -> Self {
        let m = p.rotation;
        PoseRecord {
            rotation: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
            translation: [p.translation.x, p.translation.y, p.translation.z],
            fx: p.fx,
            fy: p.fy,
            cx: p.cx,
            cy: p.cy,
            time_index: p.time_index,
        }
    }
}

impl CameraPose {
    /// A camera at `center` looking at `target` with the given world up vector.
    pub fn look_at(
        center: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
        time_index: usize,
    ) -> Self {
        let back = (center - target).normalize();
        let right = up.cross(&back).normalize();
        let true_up = back.cross(&right);
        let rotation = Matrix3::from_columns(&[right, true_up, back]);
        CameraPose {
            rotation,
            translation: center,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            time_index,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rtr = self.rotation.transpose() * self.rotation;
        let err = (rtr - Matrix3::identity()).abs().max();
        if !(err <= 1e-6) {
            return Err(Error::Validation(format!(
                "camera rotation is not orthonormal (|RᵀR - I| = {err:e})"
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Validation(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite())
            || !self.cx.is_finite()
            || !self.cy.is_finite()
        {
            return Err(Error::Validation("camera pose is not finite".into()));
        }
        Ok(())
    }

    /// Unit direction (world frame) of the ray through the center of pixel `(row, col)`.
    pub fn pixel_direction(&self, row: f64, col: f64) -> Vector3<f64> {
        let cam = Vector3::new(
            (col + 0.5 - self.cx) / self.fx,
            -(row + 0.5 - self.cy) / self.fy,
            -1.0,
        );
        (self.rotation * cam).normalize()
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Project a world point to continuous pixel coordinates `(col, row)`, where
    /// pixel centers sit on integers. `None` when the point is not in front of
    /// the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        let c = self.world_to_camera(p);
        let depth = -c.z;
        if depth <= 1e-9 {
            return None;
        }
        Some((
            self.cx + self.fx * c.x / depth - 0.5,
            self.cy - self.fy * c.y / depth - 0.5,
        ))
    }

    /// Derivative of `project` with respect to the world point, as rows
    /// `d col / d p` and `d row / d p`. `None` behind the camera.
    pub fn project_jacobian(&self, p: &Vector3<f64>) -> Option<[Vector3<f64>; 2]> {
        let c = self.world_to_camera(p);
        let depth = -c.z;
        if depth <= 1e-9 {
            return None;
        }
        // col = cx + fx * x / (-z); row = cy - fy * y / (-z)
        let dcol_dc = Vector3::new(self.fx / depth, 0.0, self.fx * c.x / (depth * depth));
        let drow_dc = Vector3::new(0.0, -self.fy / depth, -self.fy * c.y / (depth * depth));
        // c = Rᵀ (p - t) so d/dp = R * d/dc
        Some([self.rotation * dcol_dc, self.rotation * drow_dc])
    }

    /// Depth along the optical axis of a world point.
    pub fn depth_of(&self, p: &Vector3<f64>) -> f64 {
        -self.world_to_camera(p).z
    }

    pub fn forward(&self) -> Vector3<f64> {
        -self.rotation.column(2).into_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn empty() -> Self {
        Aabb {
            min: Vector3::repeat(f64::INFINITY),
            max: Vector3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn grow(&mut self, p: &Vector3<f64>) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn contains(&self, p: &Vector3<f64>, tol: f64) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] - tol && p[a] <= self.max[a] + tol)
    }

    /// Slab intersection; returns `(t_enter, t_exit)` along `origin + t * dir`.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut ta, mut tb) = ((self.min[a] - origin[a]) * inv, (self.max[a] - origin[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t1 >= t0).then_some((t0, t1))
    }
}

/// One ray per pixel. `direction` points from the camera into the scene; the
/// field's view direction ω is its negation, so that samples are `x_t = x - ω t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
    pub row: usize,
    pub col: usize,
    pub time_index: usize,
}

impl Ray {
    pub fn omega(&self) -> Vector3<f64> {
        -self.direction
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin - self.omega() * t
    }
}

/// The bounded, normalized scene space: the padded union of camera frusta,
/// mapped by a similarity transform so its longest axis spans [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpace {
    pub center: Vector3<f64>,
    pub scale: f64,
    /// Scene box in normalized coordinates (inside [-1, 1]³).
    pub bounds: Aabb,
    /// Near/far depths in normalized units.
    pub near: f64,
    pub far: f64,
}

pub const FRUSTUM_PADDING: f64 = 0.05;

impl SceneSpace {
    pub fn from_frusta(
        poses: &[&CameraPose],
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        if !(near > 0.0 && far > near) {
            return Err(Error::Validation(format!(
                "need 0 < near < far, got near={near}, far={far}"
            )));
        }
        let mut world = Aabb::empty();
        for pose in poses {
            world.grow(&pose.translation);
            for (row, col) in [
                (-0.5, -0.5),
                (-0.5, width as f64 - 0.5),
                (height as f64 - 0.5, -0.5),
                (height as f64 - 0.5, width as f64 - 0.5),
            ] {
                let d = pose.pixel_direction(row, col);
                let cos = d.dot(&pose.forward());
                for depth in [near, far] {
                    world.grow(&(pose.translation + d * (depth / cos)));
                }
            }
        }
        let extent = world.max - world.min;
        let pad = extent * FRUSTUM_PADDING;
        world.min -= pad;
        world.max += pad;
        let center = (world.min + world.max) * 0.5;
        let half = (world.max - world.min) * 0.5;
        let scale = 1.0 / half.max();
        Ok(SceneSpace {
            center,
            scale,
            bounds: Aabb {
                min: (world.min - center) * scale,
                max: (world.max - center) * scale,
            },
            near: near * scale,
            far: far * scale,
        })
    }

    pub fn to_normalized(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.center) * self.scale
    }

    pub fn from_normalized(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p / self.scale + self.center
    }

    /// Express a world pose in normalized coordinates. Projections are unchanged.
    pub fn normalize_pose(&self, pose: &CameraPose) -> CameraPose {
        CameraPose {
            translation: self.to_normalized(&pose.translation),
            ..pose.clone()
        }
    }

    /// Rays through every pixel center of a world-space `pose`, in normalized space.
    pub fn generate_rays(&self, pose: &CameraPose, height: usize, width: usize) -> Result<Vec<Ray>> {
        pose.validate()?;
        let npose = self.normalize_pose(pose);
        let forward = npose.forward();
        let mut rays = Vec::with_capacity(height * width);
        for row in 0..height {
            for col in 0..width {
                let dir = npose.pixel_direction(row as f64, col as f64);
                let cos = dir.dot(&forward);
                let (enter, exit) = self
                    .bounds
                    .intersect(&npose.translation, &dir)
                    .ok_or_else(|| {
                        Error::Ray(format!("ray through pixel ({row}, {col}) misses the scene box"))
                    })?;
                let t_near = enter.max(self.near / cos);
                let t_far = exit.min(self.far / cos);
                if !(t_near > 0.0 && t_near < t_far) {
                    return Err(Error::Ray(format!(
                        "frustum of camera at time {} misses the scene box at pixel ({row}, {col})",
                        pose.time_index
                    )));
                }
                rays.push(Ray {
                    origin: npose.translation,
                    direction: dir,
                    t_near,
                    t_far,
                    row,
                    col,
                    time_index: pose.time_index,
                });
            }
        }
        Ok(rays)
    }
}
