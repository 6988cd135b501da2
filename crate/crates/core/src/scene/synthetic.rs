//! Analytic desk-scale scenes with exact occupancy, rendered by dense quadrature.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Aabb, Dataset, Image, Mask, ViewRecord};
use crate::camera::{focal_from_fov, CameraPose, Vec3};
use crate::error::{Error, Result};

/// Fixed-step quadrature resolution for ground-truth renders.
pub const ORACLE_STEPS: usize = 1024;

/// Geometry and albedo of an analytic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SceneSpec {
    Sphere { center: [f64; 3], radius: f64, albedo: [f64; 3] },
    /// Torus around the z axis.
    Torus { center: [f64; 3], major_radius: f64, minor_radius: f64, albedo: [f64; 3] },
    /// Union of two spheres; the waist between them is a dent the hull cannot carve.
    TwoLobe { centers: [[f64; 3]; 2], radii: [f64; 2], albedo: [f64; 3] },
    /// Capsule between two endpoints.
    Rod { a: [f64; 3], b: [f64; 3], radius: f64, albedo: [f64; 3] },
}

impl SceneSpec {
    pub fn default_sphere() -> Self {
        SceneSpec::Sphere { center: [0.0; 3], radius: 0.5, albedo: [0.85, 0.35, 0.2] }
    }

    pub fn default_torus() -> Self {
        SceneSpec::Torus { center: [0.0; 3], major_radius: 0.45, minor_radius: 0.15, albedo: [0.2, 0.6, 0.85] }
    }

    pub fn default_two_lobe() -> Self {
        SceneSpec::TwoLobe {
            centers: [[-0.3, 0.0, 0.0], [0.32, 0.05, 0.05]],
            radii: [0.33, 0.28],
            albedo: [0.4, 0.8, 0.3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            SceneSpec::Sphere { radius, .. } => *radius > 0.0,
            SceneSpec::Torus { major_radius, minor_radius, .. } => *minor_radius > 0.0 && major_radius > minor_radius,
            SceneSpec::TwoLobe { radii, .. } => radii.iter().all(|&r| r > 0.0),
            SceneSpec::Rod { radius, a, b, .. } => *radius > 0.0 && a != b,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("degenerate scene spec {self:?}")))
        }
    }

    /// Signed distance to the surface (negative inside).
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match self {
            SceneSpec::Sphere { center, radius, .. } => (p - Vec3::from(*center)).norm() - radius,
            SceneSpec::Torus { center, major_radius, minor_radius, .. } => {
                let q = p - Vec3::from(*center);
                let ring = (q.x * q.x + q.y * q.y).sqrt() - major_radius;
                (ring * ring + q.z * q.z).sqrt() - minor_radius
            }
            SceneSpec::TwoLobe { centers, radii, .. } => centers
                .iter()
                .zip(radii)
                .map(|(c, r)| (p - Vec3::from(*c)).norm() - r)
                .fold(f64::INFINITY, f64::min),
            SceneSpec::Rod { a, b, radius, .. } => {
                let (a, b) = (Vec3::from(*a), Vec3::from(*b));
                let ab = b - a;
                let h = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
                (p - a - h * ab).norm() - radius
            }
        }
    }

    pub fn albedo(&self) -> [f64; 3] {
        match self {
            SceneSpec::Sphere { albedo, .. }
            | SceneSpec::Torus { albedo, .. }
            | SceneSpec::TwoLobe { albedo, .. }
            | SceneSpec::Rod { albedo, .. } => *albedo,
        }
    }

    /// Whether the segment `o + t d`, `t in [t0, t1]`, enters the open interior.
    pub fn segment_hits(&self, o: &Vec3, d: &Vec3, t0: f64, t1: f64) -> bool {
        match self {
            SceneSpec::Sphere { center, radius, .. } => segment_point_distance(o, d, t0, t1, &Vec3::from(*center)) < *radius,
            SceneSpec::TwoLobe { centers, radii, .. } => centers
                .iter()
                .zip(radii)
                .any(|(c, r)| segment_point_distance(o, d, t0, t1, &Vec3::from(*c)) < *r),
            SceneSpec::Rod { a, b, radius, .. } => {
                segment_segment_distance(&(o + t0 * d), &(o + t1 * d), &Vec3::from(*a), &Vec3::from(*b)) < *radius
            }
            SceneSpec::Torus { .. } => self.sphere_trace(o, d, t0, t1),
        }
    }

    fn sphere_trace(&self, o: &Vec3, d: &Vec3, t0: f64, t1: f64) -> bool {
        let mut t = t0;
        for _ in 0..200_000 {
            if t > t1 {
                return false;
            }
            let dist = self.sdf(&(o + t * d));
            if dist < 1e-10 {
                return true;
            }
            t += dist;
        }
        false
    }
}

fn segment_point_distance(o: &Vec3, d: &Vec3, t0: f64, t1: f64, c: &Vec3) -> f64 {
    let t = (c - o).dot(d).clamp(t0, t1);
    (o + t * d - c).norm()
}

/// Closest distance between segments [p0, p1] and [q0, q1].
fn segment_segment_distance(p0: &Vec3, p1: &Vec3, q0: &Vec3, q1: &Vec3) -> f64 {
    let u = p1 - p0;
    let v = q1 - q0;
    let w = p0 - q0;
    let (a, b, c, d, e) = (u.dot(&u), u.dot(&v), v.dot(&v), u.dot(&w), v.dot(&w));
    let denom = a * c - b * b;
    let mut s = if denom > 1e-14 { ((b * e - c * d) / denom).clamp(0.0, 1.0) } else { 0.0 };
    let mut t = (b * s + e) / c;
    if t < 0.0 {
        t = 0.0;
        s = (-d / a).clamp(0.0, 1.0);
    } else if t > 1.0 {
        t = 1.0;
        s = ((b - d) / a).clamp(0.0, 1.0);
    }
    (w + s * u - t * v).norm()
}

/// Ground truth for a synthetic scene: occupancy, density and radiance.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneOracle {
    pub spec: SceneSpec,
    /// Constant density inside the object.
    pub density_value: f64,
    pub light_dir: Vec3,
    pub ambient: f64,
}

impl SceneOracle {
    pub fn new(spec: SceneSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, density_value: 40.0, light_dir: Vec3::new(0.3, -0.5, 0.8).normalize(), ambient: 0.35 })
    }

    pub fn occupancy(&self, p: &Vec3) -> bool {
        self.spec.sdf(p) < 0.0
    }

    pub fn density(&self, p: &Vec3) -> f64 {
        if self.occupancy(p) {
            self.density_value
        } else {
            0.0
        }
    }

    /// Lambertian shading of the albedo under a fixed directional light; view independent.
    pub fn radiance(&self, p: &Vec3, _dir: &Vec3) -> [f64; 3] {
        let h = 1e-5;
        let grad = Vec3::new(
            self.spec.sdf(&(p + Vec3::x() * h)) - self.spec.sdf(&(p - Vec3::x() * h)),
            self.spec.sdf(&(p + Vec3::y() * h)) - self.spec.sdf(&(p - Vec3::y() * h)),
            self.spec.sdf(&(p + Vec3::z() * h)) - self.spec.sdf(&(p - Vec3::z() * h)),
        );
        let n = grad.try_normalize(1e-12).unwrap_or_else(Vec3::z);
        let shade = self.ambient + (1.0 - self.ambient) * n.dot(&self.light_dir).max(0.0);
        self.spec.albedo().map(|a| a * shade)
    }

    /// Dense fixed-step quadrature of the emission-absorption integral over `[near, far]`,
    /// composited over `background`.
    pub fn render_ray(&self, o: &Vec3, d: &Vec3, near: f64, far: f64, background: [f64; 3]) -> [f64; 3] {
        let h = (far - near) / ORACLE_STEPS as f64;
        let mut trans = 1.0;
        let mut color = [0.0; 3];
        for k in 0..ORACLE_STEPS {
            let p = o + (near + (k as f64 + 0.5) * h) * d;
            let sigma = self.density(&p);
            if sigma == 0.0 {
                continue;
            }
            let alpha = 1.0 - (-sigma * h).exp();
            let c = self.radiance(&p, d);
            for i in 0..3 {
                color[i] += trans * alpha * c[i];
            }
            trans *= 1.0 - alpha;
        }
        std::array::from_fn(|i| color[i] + trans * background[i])
    }
}

/// Placement of cameras on the upper hemisphere around the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraRig {
    pub distance: f64,
    /// Horizontal field of view in radians.
    pub camera_angle_x: f64,
    pub scene_scale: f64,
    pub background: [f64; 3],
}

impl Default for CameraRig {
    fn default() -> Self {
        // The frame spans roughly [-0.75, 0.75] at the scene center, so a mask
        // pixel is about one 128^3 voxel of the default bounds wide.
        Self { distance: 4.0, camera_angle_x: 2.0 * (0.75f64 / 4.0).atan(), scene_scale: 1.0, background: [1.0; 3] }
    }
}

impl CameraRig {
    pub fn bounds(&self) -> Aabb {
        Aabb::default_scene(self.scene_scale)
    }

    /// Ray interval covering the bounds from any camera on the rig.
    pub fn near_far(&self) -> (f64, f64) {
        let reach = self.bounds().extent().norm() / 2.0;
        ((self.distance - reach).max(0.05), self.distance + reach)
    }

    /// Camera directions uniform in area on the upper hemisphere.
    pub fn poses(&self, n: usize, resolution: u32, rng: &mut impl Rng) -> Result<Vec<CameraPose>> {
        let focal = focal_from_fov(resolution, self.camera_angle_x);
        (0..n)
            .map(|_| {
                let z: f64 = rng.gen_range(0.0..1.0);
                let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = (1.0 - z * z).sqrt();
                let eye = self.distance * Vec3::new(r * phi.cos(), r * phi.sin(), z);
                CameraPose::look_at(eye, Vec3::zeros(), Vec3::z(), resolution, resolution, focal)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub oracle: SceneOracle,
    pub rig: CameraRig,
}

impl SyntheticScene {
    pub fn new(spec: SceneSpec, rig: CameraRig) -> Result<Self> {
        Ok(Self { oracle: SceneOracle::new(spec)?, rig })
    }

    /// Exact mask and quadrature image for one pose.
    pub fn render_pose(&self, pose: &CameraPose) -> (Image, Mask) {
        let (near, far) = self.rig.near_far();
        let (w, h) = (pose.width as usize, pose.height as usize);
        let o = pose.origin();
        let mut pixels = Vec::with_capacity(w * h);
        let mut bits = Vec::with_capacity(w * h);
        for row in 0..h {
            for col in 0..w {
                let d = pose.direction_at(col as f64 + 0.5, row as f64 + 0.5);
                let hit = self.oracle.spec.segment_hits(&o, &d, near, far);
                bits.push(hit);
                pixels.push(if hit {
                    self.oracle.render_ray(&o, &d, near, far, self.rig.background)
                } else {
                    self.rig.background
                });
            }
        }
        (Image { width: w, height: h, pixels }, Mask { width: w, height: h, bits })
    }

    pub fn render_views(&self, n_views: usize, resolution: u32, seed: u64) -> Result<Dataset> {
        if n_views < 2 {
            return Err(Error::Config(format!("need at least 2 views, got {n_views}")));
        }
        if resolution < 16 {
            return Err(Error::Config(format!("resolution {resolution} below the minimum of 16")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let poses = self.rig.poses(n_views, resolution, &mut rng)?;
        let views = poses
            .into_par_iter()
            .map(|pose| {
                let (image, mask) = self.render_pose(&pose);
                ViewRecord::new(image, mask, pose)
            })
            .collect::<Result<Vec<_>>>()?;
        let (near, far) = self.rig.near_far();
        Dataset::new(views, near, far, self.rig.bounds(), self.rig.background)
    }
}

/// Renders `n_views` of an analytic scene with the default camera rig.
pub fn generate_synthetic_scene(
    spec: &SceneSpec,
    n_views: usize,
    resolution: u32,
    seed: u64,
) -> Result<(Dataset, SceneOracle)> {
    let scene = SyntheticScene::new(spec.clone(), CameraRig::default())?;
    let ds = scene.render_views(n_views, resolution, seed)?;
    Ok((ds, scene.oracle))
}
