//! Datasets of posed views: loading, mask extraction and analytic test scenes.

mod manifest;
mod mask;
pub mod synthetic;

pub use manifest::{load_dataset, save_dataset, Split};
pub(crate) use manifest::quantize;
pub use mask::{extract_mask, MaskPolicy, DEFAULT_LUMINANCE_THRESHOLD};
pub use synthetic::{generate_synthetic_scene, CameraRig, SceneOracle, SceneSpec, SyntheticScene};

use crate::camera::{CameraPose, Vec3};
use crate::error::{Error, Result};

/// Half extent of the default scene cube before `scene_scale` is applied.
pub const DEFAULT_SCENE_HALF_EXTENT: f64 = 1.5;

/// Axis-aligned box in world units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).all(|k| min[k] < max[k]) {
            Ok(Self { min, max })
        } else {
            Err(Error::Validation(format!("box min {min:?} must be below max {max:?} on every axis")))
        }
    }

    /// The cube [-1.5, 1.5]^3 scaled by `scene_scale`.
    pub fn default_scene(scene_scale: f64) -> Self {
        let h = DEFAULT_SCENE_HALF_EXTENT * scene_scale;
        Self { min: Vec3::repeat(-h), max: Vec3::repeat(h) }
    }

    pub fn cube(half: f64) -> Self {
        Self { min: Vec3::repeat(-half), max: Vec3::repeat(half) }
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }
}

/// Row-major RGB image with channels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self { width, height, pixels: vec![rgb; width * height] }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        self.pixels[row * self.width + col]
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsampled(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::Validation(format!(
                "downsample factor {factor} does not divide {}x{}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut pixels = Vec::with_capacity(w * h);
        for r in 0..h {
            for c in 0..w {
                let mut acc = [0.0; 3];
                for dr in 0..factor {
                    for dc in 0..factor {
                        let p = self.get(r * factor + dr, c * factor + dc);
                        for k in 0..3 {
                            acc[k] += p[k];
                        }
                    }
                }
                pixels.push(acc.map(|v| v * norm));
            }
        }
        Ok(Self { width: w, height: h, pixels })
    }
}

/// Row-major foreground mask (true = object).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn foreground_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    pub image: Image,
    pub mask: Mask,
    pub pose: CameraPose,
}

impl ViewRecord {
    pub fn new(image: Image, mask: Mask, pose: CameraPose) -> Result<Self> {
        let (w, h) = (pose.width as usize, pose.height as usize);
        if image.width != w || image.height != h || mask.width != w || mask.height != h {
            return Err(Error::Validation(format!(
                "view image {}x{} / mask {}x{} do not match pose {w}x{h}",
                image.width, image.height, mask.width, mask.height
            )));
        }
        Ok(Self { image, mask, pose })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub views: Vec<ViewRecord>,
    pub near: f64,
    pub far: f64,
    pub scene_bounds: Aabb,
    pub background: [f64; 3],
}

impl Dataset {
    pub fn new(views: Vec<ViewRecord>, near: f64, far: f64, scene_bounds: Aabb, background: [f64; 3]) -> Result<Self> {
        if !(near > 0.0 && near < far && far.is_finite()) {
            return Err(Error::Validation(format!("need 0 < near < far, got near={near} far={far}")));
        }
        Aabb::new(scene_bounds.min, scene_bounds.max)?;
        Ok(Self { views, near, far, scene_bounds, background })
    }

    pub fn pixel_count(&self) -> usize {
        self.views.iter().map(|v| v.image.width * v.image.height).sum()
    }

    /// Maps a flat index over all pixels of all views to (view, row, col).
    pub fn locate_pixel(&self, mut flat: usize) -> (usize, usize, usize) {
        for (vi, v) in self.views.iter().enumerate() {
            let n = v.image.width * v.image.height;
            if flat < n {
                return (vi, flat / v.image.width, flat % v.image.width);
            }
            flat -= n;
        }
        panic!("pixel index out of range");
    }

    /// A dataset with the first `n` views (others dropped).
    pub fn take_views(&self, n: usize) -> Self {
        Self { views: self.views.iter().take(n).cloned().collect(), ..self.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aabb_validates_order() {
        assert!(Aabb::new(Vec3::zeros(), Vec3::new(1.0, 1.0, 0.0)).is_err());
        let b = Aabb::default_scene(2.0);
        assert_eq!(b.max, Vec3::repeat(3.0));
        assert!((b.volume() - 216.0).abs() < 1e-12);
    }

    #[test]
    fn dataset_rejects_bad_depth_range() {
        let b = Aabb::default_scene(1.0);
        assert!(Dataset::new(vec![], 0.0, 1.0, b, [1.0; 3]).is_err());
        assert!(Dataset::new(vec![], 2.0, 1.0, b, [1.0; 3]).is_err());
        assert!(Dataset::new(vec![], 1.0, 2.0, b, [1.0; 3]).is_ok());
    }

    #[test]
    fn downsample_averages_blocks() {
        let mut img = Image::filled(4, 2, [0.0; 3]);
        img.pixels[0] = [1.0, 0.0, 0.0];
        img.pixels[5] = [0.0, 1.0, 0.0];
        let d = img.downsampled(2).unwrap();
        assert_eq!((d.width, d.height), (2, 1));
        assert_eq!(d.pixels[0], [0.25, 0.25, 0.0]);
        assert!(img.downsampled(3).is_err());
    }
}
