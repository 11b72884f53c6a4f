use nalgebra::{Isometry3, Point3};
use serde::{Deserialize, Serialize};

use super::mesh::Vec3;
use crate::error::{invariant, Result};

/// Pinhole camera. World frame is right-handed with +Y up; the camera looks
/// down its local −Z. Pixel `(x, y)` has x to the right and y down.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub id: usize,
    pub world_to_cam: Isometry3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// A point projected into the image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub x: f64,
    pub y: f64,
    /// Distance along the viewing axis, positive in front of the camera.
    pub depth: f64,
}

impl Camera {
    pub fn look_at(
        id: usize,
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fov_y_deg: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(fov_y_deg > 0.0 && fov_y_deg < 180.0) || width == 0 || height == 0 {
            return Err(invariant!(
                "camera needs 0 < fov < 180 and a nonempty image, got {fov_y_deg} deg {width}x{height}"
            ));
        }
        let world_to_cam = Isometry3::look_at_rh(&Point3::from(eye), &Point3::from(target), &up);
        let f = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Ok(Self {
            id,
            world_to_cam,
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
        })
    }

    pub fn eye(&self) -> Vec3 {
        self.world_to_cam.inverse_transform_point(&Point3::origin()).coords
    }

    /// World-space viewing direction.
    pub fn forward(&self) -> Vec3 {
        self.world_to_cam
            .inverse_transform_vector(&Vec3::new(0.0, 0.0, -1.0))
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        self.world_to_cam.transform_point(&Point3::from(p)).coords
    }

    /// `None` for points at or behind the camera plane.
    pub fn project(&self, p: Vec3) -> Option<Projection> {
        let c = self.to_camera(p);
        let depth = -c.z;
        if depth <= 0.0 {
            return None;
        }
        Some(Projection {
            x: self.cx + self.fx * c.x / depth,
            y: self.cy - self.fy * c.y / depth,
            depth,
        })
    }

    pub fn in_image(&self, pr: &Projection) -> bool {
        pr.x >= 0.0 && pr.y >= 0.0 && pr.x < self.width as f64 && pr.y < self.height as f64
    }

    /// World-space ray through image point `(x, y)`; the direction is
    /// scaled so that one unit along it is one unit of depth.
    pub fn ray(&self, x: f64, y: f64) -> (Vec3, Vec3) {
        let d_cam = Vec3::new((x - self.cx) / self.fx, -(y - self.cy) / self.fy, -1.0);
        (self.eye(), self.world_to_cam.inverse_transform_vector(&d_cam))
    }
}

/// Placement of the fixed ring of cameras.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigParams {
    pub views: usize,
    pub radius: f64,
    pub elevation_deg: f64,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for RigParams {
    /// Six views at radius 2.5 and 20° elevation. An 86° field of view keeps
    /// the whole normalized cube `[-1,1]³` inside every frame.
    fn default() -> Self {
        Self {
            views: 6,
            radius: 2.5,
            elevation_deg: 20.0,
            fov_deg: 86.0,
            width: 96,
            height: 96,
        }
    }
}

/// `n` cameras at equal azimuth spacing starting at +Z (azimuth 0 is the
/// front view), all looking at `center`.
pub fn fixed_rig(params: &RigParams, center: Vec3) -> Result<Vec<Camera>> {
    if params.views == 0 {
        return Err(invariant!("camera rig needs at least one view"));
    }
    if !(params.radius > 0.0) {
        return Err(invariant!("rig radius must be positive"));
    }
    let el = params.elevation_deg.to_radians();
    if el.cos().abs() < 1e-9 {
        return Err(invariant!("rig elevation of ±90° has no defined up vector"));
    }
    (0..params.views)
        .map(|i| {
            let az = (360.0 * i as f64 / params.views as f64).to_radians();
            let dir = Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos());
            Camera::look_at(
                i,
                center + params.radius * dir,
                center,
                Vec3::y(),
                params.fov_deg,
                params.width,
                params.height,
            )
        })
        .collect()
}
