//! Pinhole camera in the NeRF-synthetic convention: camera space has x right,
//! y up and looks down -z. Pixel (col, row) has its center at (col+0.5, row+0.5).

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    /// (cx, cy) in pixels.
    pub principal_point: (f64, f64),
    pub cam_to_world: Matrix4<f64>,
}

impl CameraPose {
    /// Builds a pose, checking intrinsics and that the rotation block is a proper rotation.
    pub fn new(
        width: u32,
        height: u32,
        focal: f64,
        principal_point: (f64, f64),
        cam_to_world: Matrix4<f64>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!("image size {width}x{height} must be at least 1x1")));
        }
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(Error::Validation(format!("focal length {focal} must be positive")));
        }
        validate_rigid(&cam_to_world)?;
        Ok(Self { width, height, focal, principal_point, cam_to_world })
    }

    /// Pose centered on the image with the principal point in the middle.
    pub fn centered(width: u32, height: u32, focal: f64, cam_to_world: Matrix4<f64>) -> Result<Self> {
        Self::new(width, height, focal, (width as f64 / 2.0, height as f64 / 2.0), cam_to_world)
    }

    /// Camera at `eye` looking at `target`; `up` only needs to be non-parallel to the view axis.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, width: u32, height: u32, focal: f64) -> Result<Self> {
        let back = (eye - target).normalize();
        let mut right = up.cross(&back);
        if right.norm() < 1e-9 {
            // Looking straight along `up`; any perpendicular will do.
            right = Vec3::x().cross(&back);
            if right.norm() < 1e-9 {
                right = Vec3::y().cross(&back);
            }
        }
        let right = right.normalize();
        let cam_up = back.cross(&right);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 1>(0, 0).copy_from(&right);
        m.fixed_view_mut::<3, 1>(0, 1).copy_from(&cam_up);
        m.fixed_view_mut::<3, 1>(0, 2).copy_from(&back);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye);
        Self::centered(width, height, focal, m)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.cam_to_world.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn origin(&self) -> Vec3 {
        self.cam_to_world.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Viewing axis in world space (camera -z).
    pub fn forward(&self) -> Vec3 {
        -self.cam_to_world.fixed_view::<3, 1>(0, 2).into_owned()
    }

    /// Unit world direction through continuous image coordinates (x right, y down).
    pub fn direction_at(&self, x: f64, y: f64) -> Vec3 {
        let (cx, cy) = self.principal_point;
        let d_cam = Vec3::new((x - cx) / self.focal, -(y - cy) / self.focal, -1.0);
        (self.rotation() * d_cam).normalize()
    }

    /// Projects a world point to continuous image coordinates.
    ///
    /// Returns `None` for points at or behind the camera plane; the result may
    /// lie outside the image.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        let rel = p - self.origin();
        let r = self.rotation();
        // R is orthonormal, so R^T maps world offsets into camera space.
        let xc = r.column(0).dot(&rel);
        let yc = r.column(1).dot(&rel);
        let zc = r.column(2).dot(&rel);
        if zc >= 0.0 {
            return None;
        }
        let depth = -zc;
        let (cx, cy) = self.principal_point;
        Some((cx + self.focal * xc / depth, cy - self.focal * yc / depth))
    }

    /// Pixel index containing a projected point, if it falls inside the image.
    pub fn pixel_of(&self, p: &Vec3) -> Option<(u32, u32)> {
        let (x, y) = self.project(p)?;
        if x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64 {
            Some((y as u32, x as u32))
        } else {
            None
        }
    }

    /// The same camera with image dimensions divided by `factor`.
    pub fn downscaled(&self, factor: u32) -> Result<Self> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::Validation(format!(
                "downscale factor {factor} does not divide {}x{}",
                self.width, self.height
            )));
        }
        let k = factor as f64;
        Self::new(
            self.width / factor,
            self.height / factor,
            self.focal / k,
            (self.principal_point.0 / k, self.principal_point.1 / k),
            self.cam_to_world,
        )
    }
}

/// Focal length in pixels from a horizontal field of view.
pub fn focal_from_fov(width: u32, camera_angle_x: f64) -> f64 {
    0.5 * width as f64 / (0.5 * camera_angle_x).tan()
}

fn validate_rigid(m: &Matrix4<f64>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("pose matrix has non-finite entries".into()));
    }
    let bottom = m.fixed_view::<1, 4>(3, 0);
    if (bottom[0].abs() + bottom[1].abs() + bottom[2].abs() + (bottom[3] - 1.0).abs()) > ORTHONORMAL_TOL {
        return Err(Error::Validation(format!("pose bottom row {bottom} is not [0 0 0 1]")));
    }
    let r = m.fixed_view::<3, 3>(0, 0).into_owned();
    let det = r.determinant();
    if det.abs() < 1e-12 {
        return Err(Error::Validation("pose matrix is not invertible".into()));
    }
    let gram_err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if gram_err > ORTHONORMAL_TOL || (det - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(Error::Validation(format!(
            "pose rotation is not a proper rotation (orthonormality error {gram_err:.3e}, det {det})"
        )));
    }
    Ok(())
}
