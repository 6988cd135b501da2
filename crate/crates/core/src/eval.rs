//! Full-image rendering and image-quality metrics.

use std::path::Path;

use rayon::prelude::*;

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::hull::VoxelGrid;
use crate::sampling::{pixel_rays, FineDraw};
use crate::scalar::Scalar;
use crate::scene::{Dataset, Image};
use crate::training::{run_pass, Model, PassSpec, TrainConfig, TrainMode};

/// Reported for identical images, where PSNR is unbounded.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Reject fine samples by the hull as well as coarse ones.
    pub hull_on_fine: bool,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    /// Rays per work item; affects speed only.
    pub chunk_rays: usize,
}

impl RenderSettings {
    pub fn for_training(config: &TrainConfig, dataset: &Dataset) -> Self {
        Self {
            n_coarse: config.n_coarse,
            n_fine: config.n_fine,
            hull_on_fine: config.mode == TrainMode::VaxHier,
            near: dataset.near,
            far: dataset.far,
            background: dataset.background,
            chunk_rays: 1024,
        }
    }
}

/// Renders every pixel of `pose` with midpoint coarse samples and evenly
/// spaced fine quantiles. `grid` rejects samples as in training.
pub fn render_image<T: Scalar>(
    model: &Model<T>,
    pose: &CameraPose,
    settings: &RenderSettings,
    grid: Option<&VoxelGrid>,
) -> Result<Image> {
    if model.fine.is_some() != (settings.n_fine > 0) {
        return Err(Error::Validation(format!(
            "model has {} network(s) but n_fine = {}",
            model.networks().len(),
            settings.n_fine
        )));
    }
    let (w, h) = (pose.width as usize, pose.height as usize);
    let pixels: Vec<(u32, u32)> = (0..h as u32).flat_map(|r| (0..w as u32).map(move |c| (r, c))).collect();
    let rays = pixel_rays(pose, &pixels, settings.near, settings.far)?;
    let spec = PassSpec {
        grid,
        n_coarse: settings.n_coarse,
        n_fine: settings.n_fine,
        hull_on_fine: settings.hull_on_fine,
        stratified: false,
        fine_draw: FineDraw::Deterministic,
        batch_seed: 0,
        background: settings.background,
        coarse_capacity: settings.n_coarse,
        fine_capacity: settings.n_coarse + settings.n_fine,
        sigma_noise: 0.0,
    };
    let chunk = settings.chunk_rays.max(1);
    let parts: Vec<Vec<[f64; 3]>> = rays
        .par_chunks(chunk)
        .enumerate()
        .map(|(k, r)| match run_pass(model, r, k * chunk, None, false, &spec) {
            Ok(out) => Ok(out.colors),
            Err(crate::training::PassError::Other(e)) => Err(e),
            Err(crate::training::PassError::Capacity { observed, .. }) => {
                Err(Error::Capacity { capacity: spec.fine_capacity, observed })
            }
        })
        .collect::<Result<_>>()?;
    Ok(Image { width: w, height: h, pixels: parts.concat() })
}

fn check_same_size(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Validation(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same_size(a, b)?;
    let sum: f64 = a.pixels.iter().zip(&b.pixels).map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>()).sum();
    Ok(sum / (3 * a.pixels.len()).max(1) as f64)
}

/// `10 log10(1 / mse)` for images in [0, 1], capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Separable 'valid' filtering of a `w x h` plane.
fn filter(plane: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|k| g[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5), dynamic
/// range 1, averaged over window positions and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_size(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Validation(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}")));
    }
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for k in 0..3 {
        let x: Vec<f64> = a.pixels.iter().map(|p| p[k]).collect();
        let y: Vec<f64> = b.pixels.iter().map(|p| p[k]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter(p, w, h, &g));
        let n = mx.len();
        let sum: f64 = (0..n)
            .map(|i| {
                let (m1, m2) = (mx[i], my[i]);
                let v1 = sxx[i] - m1 * m1;
                let v2 = syy[i] - m2 * m2;
                let cov = sxy[i] - m1 * m2;
                ((2.0 * m1 * m2 + c1) * (2.0 * cov + c2)) / ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2))
            })
            .sum();
        total += sum / n as f64;
    }
    Ok(total / 3.0)
}

/// Writes an 8-bit RGB PNG.
pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(image.width as u32, image.height as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        *px = image::Rgb(image.pixels[i].map(crate::scene::quantize));
    }
    buf.save(path).map_err(|source| Error::Image { path: path.into(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nerf::MlpConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image { width: w, height: h, pixels: (0..w * h).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect() }
    }

    #[test]
    fn psnr_arithmetic() {
        let a = random_image(8, 6, 1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let shifted = Image { pixels: a.pixels.iter().map(|p| p.map(|v| v + 0.1)).collect(), ..a.clone() };
        assert!((psnr(&a, &shifted).unwrap() - 20.0).abs() < 1e-9);
        let b = random_image(8, 6, 2);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &random_image(8, 5, 2)).is_err());
    }

    #[test]
    fn ssim_identities() {
        let a = random_image(24, 20, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = Image { pixels: a.pixels.iter().map(|p| p.map(|v| 1.0 - v)).collect(), ..a.clone() };
        assert!(ssim(&a, &neg).unwrap() < 1.0);
        assert!(ssim(&random_image(10, 30, 1), &random_image(10, 30, 2)).is_err());
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let (m1, m2) = (0.4, 0.5);
        let a = Image::filled(16, 16, [m1; 3]);
        let b = Image::filled(16, 16, [m2; 3]);
        let c1 = SSIM_K1 * SSIM_K1;
        let expect = (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-9);
        assert!(expect < 1.0);
    }

    #[test]
    fn gaussian_window_is_normalized_and_symmetric() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
    }

    fn pose() -> CameraPose {
        CameraPose::look_at(
            crate::camera::Vec3::new(0.0, -4.0, 0.5),
            crate::camera::Vec3::zeros(),
            crate::camera::Vec3::z(),
            20,
            16,
            24.0,
        )
        .unwrap()
    }

    fn settings(n_fine: usize, chunk: usize) -> RenderSettings {
        RenderSettings {
            n_coarse: 8,
            n_fine,
            hull_on_fine: false,
            near: 2.0,
            far: 6.0,
            background: [1.0; 3],
            chunk_rays: chunk,
        }
    }

    #[test]
    fn chunking_does_not_change_pixels() {
        let model = Model::<f32>::init(MlpConfig::compact(2, 16), true, 5).unwrap();
        let a = render_image(&model, &pose(), &settings(8, 7), None).unwrap();
        let b = render_image(&model, &pose(), &settings(8, 320), None).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.width, a.height), (20, 16));
    }

    #[test]
    fn empty_hull_renders_background() {
        let model = Model::<f64>::init(MlpConfig::compact(2, 16), false, 5).unwrap();
        let grid = VoxelGrid::filled([4; 3], crate::scene::Aabb::cube(1.5), false).unwrap();
        let img = render_image(&model, &pose(), &settings(0, 64), Some(&grid)).unwrap();
        assert!(img.pixels.iter().all(|p| *p == [1.0; 3]));
        assert!(render_image(&model, &pose(), &settings(4, 64), None).is_err());
    }
}
