//! NeRF-synthetic `transforms_<split>.json` layout.
//!
//! Required keys: `camera_angle_x` (horizontal FOV, radians) and `frames`, each
//! with `file_path` (relative to the dataset root, `.png` appended when the
//! path has no extension) and a row-major 4x4 `transform_matrix`
//! (camera-to-world). Optional keys: `w`, `h`, `cx`, `cy`, `near`, `far`,
//! `scene_scale`, `scene_bounds` (`[[min xyz], [max xyz]]`) and `background`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Rgba};
use nalgebra::Matrix4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{extract_mask, Aabb, Dataset, Image, MaskPolicy, ViewRecord};
use crate::camera::{focal_from_fov, CameraPose, Vec3};
use crate::error::{Error, Result};

pub const DEFAULT_NEAR: f64 = 2.0;
pub const DEFAULT_FAR: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn manifest_path(self, root: &Path) -> PathBuf {
        root.join(format!("transforms_{}.json", self.name()))
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    camera_angle_x: f64,
    frames: Vec<Frame>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    h: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    far: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene_bounds: Option<[[f64; 3]; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    background: Option<[f64; 3]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Frame {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
}

/// Loads one split of a dataset rooted at `root`.
pub fn load_dataset(root: &Path, split: Split) -> Result<Dataset> {
    let manifest_path = split.manifest_path(root);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::DatasetFormat(format!("cannot read manifest {}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::DatasetFormat(format!("malformed manifest {}: {e}", manifest_path.display())))?;
    let background = manifest.background.unwrap_or([1.0; 3]);

    let loaded: Vec<(Image, super::Mask, u32, u32)> = manifest
        .frames
        .par_iter()
        .map(|frame| {
            let path = resolve_image_path(root, &frame.file_path)?;
            load_view_image(&path, background)
        })
        .collect::<Result<_>>()?;

    let mut views = Vec::with_capacity(loaded.len());
    for ((image, mask, w, h), frame) in loaded.into_iter().zip(&manifest.frames) {
        let (mw, mh) = (manifest.w.unwrap_or(w), manifest.h.unwrap_or(h));
        if (w, h) != (mw, mh) {
            return Err(Error::Validation(format!(
                "image {} is {w}x{h} but the manifest declares {mw}x{mh}",
                frame.file_path
            )));
        }
        if let Some(first) = views.first().map(|v: &ViewRecord| (v.pose.width, v.pose.height)) {
            if first != (w, h) {
                return Err(Error::Validation(format!(
                    "image {} is {w}x{h}, other views are {}x{}",
                    frame.file_path, first.0, first.1
                )));
            }
        }
        let focal = focal_from_fov(w, manifest.camera_angle_x);
        let pp = (manifest.cx.unwrap_or(w as f64 / 2.0), manifest.cy.unwrap_or(h as f64 / 2.0));
        let m = Matrix4::from_fn(|r, c| frame.transform_matrix[r][c]);
        let pose = CameraPose::new(w, h, focal, pp, m)?;
        views.push(ViewRecord::new(image, mask, pose)?);
    }

    let bounds = match manifest.scene_bounds {
        Some([lo, hi]) => Aabb::new(Vec3::from(lo), Vec3::from(hi))?,
        None => Aabb::default_scene(manifest.scene_scale.unwrap_or(1.0)),
    };
    Dataset::new(
        views,
        manifest.near.unwrap_or(DEFAULT_NEAR),
        manifest.far.unwrap_or(DEFAULT_FAR),
        bounds,
        background,
    )
}

/// Writes a split: one RGBA PNG per view (alpha carries the mask) plus its manifest.
///
/// All views must share intrinsics; the FOV is derived from the first view.
pub fn save_dataset(root: &Path, split: Split, dataset: &Dataset) -> Result<()> {
    let dir = root.join(split.name());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let first = dataset
        .views
        .first()
        .ok_or_else(|| Error::Validation("cannot save a dataset without views".into()))?;
    let (w, h) = (first.pose.width, first.pose.height);
    let camera_angle_x = 2.0 * (0.5 * w as f64 / first.pose.focal).atan();

    let frames = dataset
        .views
        .par_iter()
        .enumerate()
        .map(|(i, view)| {
            let rel = format!("./{}/r_{i}", split.name());
            let path = root.join(format!("{}/r_{i}.png", split.name()));
            write_view_png(&path, view)?;
            let m = &view.pose.cam_to_world;
            Ok(Frame { file_path: rel, transform_matrix: std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])) })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest {
        camera_angle_x,
        frames,
        w: Some(w),
        h: Some(h),
        cx: Some(first.pose.principal_point.0),
        cy: Some(first.pose.principal_point.1),
        near: Some(dataset.near),
        far: Some(dataset.far),
        scene_scale: None,
        scene_bounds: Some([dataset.scene_bounds.min.into(), dataset.scene_bounds.max.into()]),
        background: Some(dataset.background),
    };
    let path = split.manifest_path(root);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn resolve_image_path(root: &Path, file_path: &str) -> Result<PathBuf> {
    let direct = root.join(file_path);
    if direct.extension().is_some() && direct.is_file() {
        return Ok(direct);
    }
    let png = root.join(format!("{file_path}.png"));
    if png.is_file() {
        return Ok(png);
    }
    Err(Error::DatasetFormat(format!("frame image {} not found under {}", file_path, root.display())))
}

fn load_view_image(path: &Path, background: [f64; 3]) -> Result<(Image, super::Mask, u32, u32)> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_owned(), source })?;
    let has_alpha = img.color().has_alpha();
    let (w, h) = (img.width(), img.height());
    let rgba: Vec<[f64; 4]> = img.to_rgba32f().pixels().map(|p| p.0.map(f64::from)).collect();
    let (policy, pixels) = if has_alpha {
        let px = rgba
            .iter()
            .map(|p| std::array::from_fn(|k| p[k] * p[3] + (1.0 - p[3]) * background[k]))
            .collect();
        (MaskPolicy::Alpha, px)
    } else {
        (MaskPolicy::default(), rgba.iter().map(|p| [p[0], p[1], p[2]]).collect())
    };
    let mask = extract_mask(w as usize, h as usize, &rgba, policy)?;
    Ok((Image { width: w as usize, height: h as usize, pixels }, mask, w, h))
}

fn write_view_png(path: &Path, view: &ViewRecord) -> Result<()> {
    let (w, h) = (view.image.width as u32, view.image.height as u32);
    let buf = ImageBuffer::<Rgba<u8>, _>::from_fn(w, h, |x, y| {
        let p = view.image.get(y as usize, x as usize);
        let a = if view.mask.get(y as usize, x as usize) { 255 } else { 0 };
        Rgba([quantize(p[0]), quantize(p[1]), quantize(p[2]), a])
    });
    DynamicImage::ImageRgba8(buf)
        .save(path)
        .map_err(|source| Error::Image { path: path.to_owned(), source })
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_synthetic_scene, SceneSpec};

    fn write_manifest(root: &Path, split: &str, body: &str) {
        fs::write(root.join(format!("transforms_{split}.json")), body).unwrap();
    }

    fn write_png(path: &Path, w: u32, h: u32) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        let buf = ImageBuffer::<Rgba<u8>, _>::from_fn(w, h, |x, _| Rgba([10, 20, 30, if x == 0 { 0 } else { 255 }]));
        buf.save(path).unwrap();
    }

    const IDENT: &str = "[[1,0,0,0],[0,1,0,0],[0,0,1,4],[0,0,0,1]]";

    #[test]
    fn focal_from_manifest_fov() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("train/r_0.png"), 800, 2);
        let body = format!(
            r#"{{"camera_angle_x": {}, "frames": [{{"file_path": "./train/r_0", "transform_matrix": {IDENT}}}]}}"#,
            std::f64::consts::FRAC_PI_2
        );
        write_manifest(dir.path(), "train", &body);
        let ds = load_dataset(dir.path(), Split::Train).unwrap();
        assert!((ds.views[0].pose.focal - 400.0).abs() < 1e-9);
        assert!(!ds.views[0].mask.get(0, 0) && ds.views[0].mask.get(0, 1));
        // Transparent pixel composites onto the white background.
        assert_eq!(ds.views[0].image.get(0, 0), [1.0; 3]);
        assert_eq!((ds.near, ds.far), (DEFAULT_NEAR, DEFAULT_FAR));
        assert_eq!(ds.scene_bounds, Aabb::default_scene(1.0));
    }

    #[test]
    fn missing_manifest_and_missing_image() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path(), Split::Val), Err(Error::DatasetFormat(_))));
        let body =
            format!(r#"{{"camera_angle_x": 0.7, "frames": [{{"file_path": "./val/nope", "transform_matrix": {IDENT}}}]}}"#);
        write_manifest(dir.path(), "val", &body);
        assert!(matches!(load_dataset(dir.path(), Split::Val), Err(Error::DatasetFormat(_))));
    }

    #[test]
    fn size_mismatch_and_bad_pose() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("test/a.png"), 4, 4);
        let body = format!(
            r#"{{"camera_angle_x": 0.7, "w": 8, "h": 4, "frames": [{{"file_path": "test/a.png", "transform_matrix": {IDENT}}}]}}"#
        );
        write_manifest(dir.path(), "test", &body);
        assert!(matches!(load_dataset(dir.path(), Split::Test), Err(Error::Validation(_))));

        let singular = "[[1,0,0,0],[0,0,0,0],[0,0,1,4],[0,0,0,1]]";
        let body = format!(
            r#"{{"camera_angle_x": 0.7, "frames": [{{"file_path": "test/a.png", "transform_matrix": {singular}}}]}}"#
        );
        write_manifest(dir.path(), "test", &body);
        assert!(matches!(load_dataset(dir.path(), Split::Test), Err(Error::Validation(_))));
    }

    #[test]
    fn hundred_frames_load_as_hundred_views() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("train/r.png"), 3, 3);
        let frames: Vec<String> = (0..100)
            .map(|_| format!(r#"{{"file_path": "./train/r", "transform_matrix": {IDENT}}}"#))
            .collect();
        write_manifest(dir.path(), "train", &format!(r#"{{"camera_angle_x": 0.7, "frames": [{}]}}"#, frames.join(",")));
        assert_eq!(load_dataset(dir.path(), Split::Train).unwrap().views.len(), 100);
    }

    #[test]
    fn round_trip_preserves_poses_masks_and_metadata() {
        let (ds, _) = generate_synthetic_scene(&SceneSpec::default_sphere(), 4, 16, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), Split::Train, &ds).unwrap();
        let back = load_dataset(dir.path(), Split::Train).unwrap();
        assert_eq!(back.views.len(), 4);
        assert_eq!((back.near, back.far, back.scene_bounds), (ds.near, ds.far, ds.scene_bounds));
        for (a, b) in ds.views.iter().zip(&back.views) {
            assert!((a.pose.cam_to_world - b.pose.cam_to_world).abs().max() <= 1e-9);
            assert!((a.pose.focal - b.pose.focal).abs() < 1e-9);
            assert_eq!(a.mask, b.mask);
            for (p, q) in a.image.pixels.iter().zip(&b.image.pixels) {
                for k in 0..3 {
                    assert!((p[k] - q[k]).abs() <= 0.5 / 255.0 + 1e-6);
                }
            }
        }
        // Re-serializing the loaded manifest reproduces the poses again.
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(dir2.path(), Split::Train, &back).unwrap();
        let again = load_dataset(dir2.path(), Split::Train).unwrap();
        for (a, b) in back.views.iter().zip(&again.views) {
            assert_eq!(a.pose.cam_to_world, b.pose.cam_to_world);
        }
    }
}
