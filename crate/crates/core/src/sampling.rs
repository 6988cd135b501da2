//! Camera rays and per-ray sample placement: stratified coarse samples,
//! importance-weighted fine samples, hull rejection and fixed-capacity packing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{CameraPose, Vec3};
use crate::error::{Error, Result};
use crate::hull::VoxelGrid;
use crate::scene::Dataset;

/// Floor added to every coarse weight before building the fine-sampling CDF.
pub const FINE_WEIGHT_FLOOR: f64 = 1e-5;
/// Default inflation applied to the observed maximum kept-count.
pub const DEFAULT_CAPACITY_SAFETY: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + t * self.direction
    }
}

/// Ordered sample distances along one ray.
///
/// `delta[i] = t[i+1] - t[i]`, and the last spacing closes at `t_far`.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub keep: Vec<bool>,
}

impl RaySamples {
    /// Builds samples from ascending distances, computing spacings.
    pub fn from_t(t: Vec<f64>, t_far: f64) -> Self {
        let delta = spacings(&t, t_far);
        let keep = vec![true; t.len()];
        Self { t, delta, keep }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

fn spacings(t: &[f64], t_far: f64) -> Vec<f64> {
    let n = t.len();
    (0..n).map(|i| if i + 1 < n { t[i + 1] - t[i] } else { t_far - t[i] }).collect()
}

/// Rays through pixel centers, given as (row, col).
pub fn pixel_rays(pose: &CameraPose, pixels: &[(u32, u32)], near: f64, far: f64) -> Result<Vec<Ray>> {
    if !(near < far) {
        return Err(Error::Validation(format!("near {near} must be below far {far}")));
    }
    let origin = pose.origin();
    pixels
        .iter()
        .map(|&(row, col)| {
            if row >= pose.height || col >= pose.width {
                return Err(Error::Validation(format!(
                    "pixel ({row}, {col}) outside {}x{} image",
                    pose.width, pose.height
                )));
            }
            let direction = pose.direction_at(col as f64 + 0.5, row as f64 + 0.5);
            Ok(Ray { origin, direction, t_near: near, t_far: far })
        })
        .collect()
}

/// `n` samples in equal bins over `[t_near, t_far]`: bin midpoints, or one
/// uniform draw per bin when `stratified`.
pub fn sample_coarse(ray: &Ray, n: usize, stratified: bool, rng: &mut impl Rng) -> RaySamples {
    assert!(n >= 1, "need at least one coarse sample");
    let width = (ray.t_far - ray.t_near) / n as f64;
    let t = (0..n)
        .map(|i| {
            let u = if stratified { rng.gen::<f64>() } else { 0.5 };
            ray.t_near + (i as f64 + u) * width
        })
        .collect();
    RaySamples::from_t(t, ray.t_far)
}

/// How fine-sample quantiles are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FineDraw {
    Random,
    /// Evenly spaced quantiles `(k + 0.5) / n`, for evaluation.
    Deterministic,
}

/// Importance samples from the coarse weights, merged with the coarse distances.
///
/// Coarse sample `i` owns the bin between the midpoints to its neighbours
/// (the first and last bins end at the outer samples) and receives probability
/// proportional to `weights[i] + FINE_WEIGHT_FLOOR`; draws are uniform inside a bin.
pub fn sample_fine(
    ray: &Ray,
    coarse_t: &[f64],
    weights: &[f64],
    n_fine: usize,
    draw: FineDraw,
    rng: &mut impl Rng,
) -> Result<RaySamples> {
    if coarse_t.len() != weights.len() || coarse_t.is_empty() {
        return Err(Error::Validation(format!(
            "{} coarse distances but {} weights",
            coarse_t.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::Validation(format!("fine-sampling weight {w} is negative or NaN")));
    }
    let n = coarse_t.len();
    let mut edges = Vec::with_capacity(n + 1);
    edges.push(coarse_t[0]);
    for i in 1..n {
        edges.push(0.5 * (coarse_t[i - 1] + coarse_t[i]));
    }
    edges.push(coarse_t[n - 1]);

    let total: f64 = weights.iter().map(|w| w + FINE_WEIGHT_FLOOR).sum();
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in weights {
        acc += (w + FINE_WEIGHT_FLOOR) / total;
        cdf.push(acc);
    }
    cdf[n] = 1.0;

    let mut t: Vec<f64> = coarse_t.to_vec();
    t.reserve(n_fine);
    for k in 0..n_fine {
        let u = match draw {
            FineDraw::Random => rng.gen::<f64>(),
            FineDraw::Deterministic => (k as f64 + 0.5) / n_fine as f64,
        };
        // Last bin whose cdf start is <= u.
        let bin = cdf[1..n].partition_point(|&c| c <= u);
        let span = cdf[bin + 1] - cdf[bin];
        let frac = if span > 0.0 { ((u - cdf[bin]) / span).clamp(0.0, 1.0) } else { 0.5 };
        t.push(edges[bin] + frac * (edges[bin + 1] - edges[bin]));
    }
    t.sort_by(f64::total_cmp);
    // Coincident distances would give zero spacing; separate them by one ulp.
    for i in 1..t.len() {
        if t[i] <= t[i - 1] {
            t[i] = next_up(t[i - 1]);
        }
    }
    Ok(RaySamples::from_t(t, ray.t_far))
}

fn next_up(x: f64) -> f64 {
    if x >= 0.0 {
        f64::from_bits(x.to_bits() + 1)
    } else {
        f64::from_bits(x.to_bits() - 1)
    }
}

/// Marks which samples fall inside the hull; distances and spacings are untouched.
pub fn reject_by_hull(grid: &VoxelGrid, ray: &Ray, samples: &RaySamples) -> RaySamples {
    let keep = samples.t.iter().map(|&t| grid.contains(&ray.at(t))).collect();
    RaySamples { t: samples.t.clone(), delta: samples.delta.clone(), keep }
}

/// Kept samples of a batch of rays, laid out densely in `capacity` slots per ray.
///
/// Invalid slots hold the ray origin and `valid = false`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatch {
    pub capacity: usize,
    /// `rays * capacity` positions, row-major by ray.
    pub positions: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    pub valid: Vec<bool>,
    /// Index of the source sample within its ray for valid slots.
    pub sample_index: Vec<u32>,
}

impl PackedBatch {
    pub fn rays(&self) -> usize {
        self.directions.len()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Slot range of ray `r`.
    pub fn row(&self, r: usize) -> std::ops::Range<usize> {
        r * self.capacity..(r + 1) * self.capacity
    }

    /// Valid slots as (slot, ray, sample index), in slot order.
    pub fn valid_slots(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.valid
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(s, _)| (s, s / self.capacity.max(1), self.sample_index[s] as usize))
    }
}

pub fn pack_batch(rays: &[Ray], samples: &[RaySamples], capacity: usize) -> Result<PackedBatch> {
    assert_eq!(rays.len(), samples.len(), "one sample set per ray");
    let observed = samples.iter().map(RaySamples::kept).max().unwrap_or(0);
    if observed > capacity {
        return Err(Error::Capacity { capacity, observed });
    }
    let slots = rays.len() * capacity;
    let mut positions = Vec::with_capacity(slots);
    let mut valid = Vec::with_capacity(slots);
    let mut sample_index = Vec::with_capacity(slots);
    for (ray, s) in rays.iter().zip(samples) {
        let mut used = 0;
        for (i, (&t, &k)) in s.t.iter().zip(&s.keep).enumerate() {
            if k {
                positions.push(ray.at(t));
                valid.push(true);
                sample_index.push(i as u32);
                used += 1;
            }
        }
        for _ in used..capacity {
            positions.push(ray.origin);
            valid.push(false);
            sample_index.push(0);
        }
    }
    Ok(PackedBatch { capacity, positions, directions: rays.iter().map(|r| r.direction).collect(), valid, sample_index })
}

/// Uniform pixel draws over all views, with replacement, as (view, row, col).
pub fn sample_pixels(dataset: &Dataset, n: usize, rng: &mut impl Rng) -> Vec<(usize, u32, u32)> {
    let total = dataset.pixel_count();
    (0..n)
        .map(|_| {
            let (v, r, c) = dataset.locate_pixel(rng.gen_range(0..total));
            (v, r as u32, c as u32)
        })
        .collect()
}

/// Rays for (view, row, col) triples, using the dataset's depth range.
pub fn dataset_rays(dataset: &Dataset, pixels: &[(usize, u32, u32)]) -> Vec<Ray> {
    pixels
        .iter()
        .map(|&(v, row, col)| {
            let pose = &dataset.views[v].pose;
            Ray {
                origin: pose.origin(),
                direction: pose.direction_at(col as f64 + 0.5, row as f64 + 0.5),
                t_near: dataset.near,
                t_far: dataset.far,
            }
        })
        .collect()
}

/// Independent random stream for ray `index` of a batch seeded by `batch_seed`.
pub fn ray_rng(batch_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Settings for probing the packed capacity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityProbe {
    pub n_samples: usize,
    pub batch_rays: usize,
    pub safety: f64,
    pub seed: u64,
}

/// Largest kept-count over `probe_iters` random batches of stratified coarse
/// samples, inflated by `safety` and rounded up; never below 1.
pub fn calibrate_capacity(dataset: &Dataset, grid: &VoxelGrid, probe: &CapacityProbe, probe_iters: usize) -> usize {
    let mut observed = 0;
    for it in 0..probe_iters {
        let batch_seed = probe.seed ^ 0xC0FF_EE00_0000_0000 ^ it as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
        let pixels = sample_pixels(dataset, probe.batch_rays, &mut rng);
        for (i, ray) in dataset_rays(dataset, &pixels).iter().enumerate() {
            let s = sample_coarse(ray, probe.n_samples, true, &mut ray_rng(batch_seed, i));
            observed = observed.max(reject_by_hull(grid, ray, &s).kept());
        }
    }
    inflate(observed, probe.safety)
}

/// `ceil(safety * observed)`, clamped to at least 1.
pub fn inflate(observed: usize, safety: f64) -> usize {
    ((observed as f64 * safety).ceil() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Aabb;
    use proptest::prelude::*;
    use rand::Rng;

    fn ray() -> Ray {
        Ray { origin: Vec3::zeros(), direction: Vec3::x(), t_near: 0.0, t_far: 1.0 }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn midpoints() {
        let s = sample_coarse(&ray(), 4, false, &mut rng(0));
        assert_eq!(s.t, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(s.delta, vec![0.25, 0.25, 0.25, 0.125]);
        assert!(s.keep.iter().all(|&k| k));
    }

    #[test]
    fn stratified_draws_stay_in_their_bins() {
        let r = Ray { t_near: 2.0, t_far: 6.0, ..ray() };
        let mut g = rng(3);
        for _ in 0..200 {
            let s = sample_coarse(&r, 16, true, &mut g);
            for (i, &t) in s.t.iter().enumerate() {
                assert!(t >= 2.0 + i as f64 * 0.25 && t < 2.0 + (i + 1) as f64 * 0.25);
            }
        }
    }

    #[test]
    fn stratified_bin_means_within_three_standard_errors() {
        let n = 8;
        let draws = 10_000;
        let mut sums = vec![0.0; n];
        let mut g = rng(17);
        for _ in 0..draws {
            for (i, t) in sample_coarse(&ray(), n, true, &mut g).t.iter().enumerate() {
                sums[i] += t;
            }
        }
        let width = 1.0 / n as f64;
        // Uniform over a bin: sd = width / sqrt(12).
        let se = width / 12f64.sqrt() / (draws as f64).sqrt();
        for (i, s) in sums.iter().enumerate() {
            let mid = (i as f64 + 0.5) * width;
            assert!((s / draws as f64 - mid).abs() < 3.0 * se, "bin {i}");
        }
    }

    #[test]
    fn fine_uniform_weights_give_equal_bin_counts() {
        let coarse = sample_coarse(&ray(), 8, false, &mut rng(0));
        let draws = 10_000;
        let fine = sample_fine(&ray(), &coarse.t, &[0.3; 8], draws, FineDraw::Random, &mut rng(5)).unwrap();
        let mut edges = vec![coarse.t[0]];
        edges.extend(coarse.t.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        edges.push(coarse.t[7]);
        let mut counts = [0usize; 8];
        let mut merged = fine.t.clone();
        for c in &coarse.t {
            let i = merged.iter().position(|t| t == c).unwrap();
            merged.remove(i);
        }
        for t in merged {
            let b = edges[1..8].partition_point(|&e| e <= t);
            counts[b] += 1;
        }
        let expected = draws as f64 / 8.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of chi-squared with 7 degrees of freedom.
        assert!(chi2 < 18.475, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn fine_one_hot_concentrates_in_bin() {
        let coarse = sample_coarse(&ray(), 8, false, &mut rng(0));
        let mut w = [0.0; 8];
        w[3] = 1.0;
        let (lo, hi) = (0.5 * (coarse.t[2] + coarse.t[3]), 0.5 * (coarse.t[3] + coarse.t[4]));
        let fine = sample_fine(&ray(), &coarse.t, &w, 32, FineDraw::Deterministic, &mut rng(0)).unwrap();
        let extra: Vec<f64> = fine.t.iter().copied().filter(|t| !coarse.t.contains(t)).collect();
        assert!(extra.iter().all(|&t| t >= lo && t <= hi));

        // Random draws leak only through the weight floor: 7e-5 mass outside.
        let fine = sample_fine(&ray(), &coarse.t, &w, 10_000, FineDraw::Random, &mut rng(9)).unwrap();
        let outside = fine.t.iter().filter(|&&t| (t < lo || t > hi) && !coarse.t.contains(&t)).count();
        assert!(outside <= 5, "{outside} draws escaped the one-hot bin");
    }

    #[test]
    fn fine_rejects_negative_weights_and_length_mismatch() {
        let c = [0.1, 0.5, 0.9];
        assert!(matches!(
            sample_fine(&ray(), &c, &[0.1, -0.2, 0.0], 4, FineDraw::Random, &mut rng(0)),
            Err(Error::Validation(_))
        ));
        assert!(sample_fine(&ray(), &c, &[0.1, 0.2], 4, FineDraw::Random, &mut rng(0)).is_err());
    }

    #[test]
    fn pixel_ray_geometry() {
        let pose = CameraPose::look_at(Vec3::new(0.3, -4.0, 1.0), Vec3::zeros(), Vec3::z(), 64, 48, 55.0).unwrap();
        let rays = pixel_rays(&pose, &[(24, 32), (0, 0), (47, 63)], 1.0, 5.0).unwrap();
        // (24, 32) is the pixel whose corner sits on the principal point; probe the exact axis instead.
        assert!((pose.direction_at(32.0, 24.0) - pose.forward()).norm() < 1e-12);
        assert!(rays.iter().all(|r| r.origin == pose.origin()));
        for r in &rays {
            assert!((r.direction.norm() - 1.0).abs() < 1e-12);
        }
        // Corner ray angle.
        let corner = pose.direction_at(0.0, 0.0);
        let expect = ((32.0f64.powi(2) + 24.0f64.powi(2)).sqrt() / 55.0).atan();
        assert!((corner.dot(&pose.forward()).acos() - expect).abs() < 1e-6);
        assert!(matches!(pixel_rays(&pose, &[(48, 0)], 1.0, 5.0), Err(Error::Validation(_))));
        assert!(pixel_rays(&pose, &[(0, 64)], 1.0, 5.0).is_err());
    }

    #[test]
    fn on_axis_pixel_with_odd_image() {
        let pose = CameraPose::look_at(Vec3::new(2.0, 1.0, 3.0), Vec3::zeros(), Vec3::z(), 33, 21, 40.0).unwrap();
        let r = pixel_rays(&pose, &[(10, 16)], 1.0, 2.0).unwrap();
        assert!((r[0].direction - pose.forward()).norm() < 1e-12);
    }

    #[test]
    fn hull_rejection_extremes() {
        let r = Ray { origin: Vec3::new(-0.9, 0.0, 0.0), ..ray() };
        let s = sample_coarse(&r, 16, false, &mut rng(0));
        let full = VoxelGrid::filled([4; 3], Aabb::cube(1.0), true).unwrap();
        let empty = VoxelGrid::filled([4; 3], Aabb::cube(1.0), false).unwrap();
        let kept = reject_by_hull(&full, &r, &s);
        assert!(kept.keep.iter().all(|&k| k));
        assert_eq!((kept.t.clone(), kept.delta.clone()), (s.t.clone(), s.delta.clone()));
        assert!(reject_by_hull(&empty, &r, &s).keep.iter().all(|&k| !k));
    }

    #[test]
    fn packing_layout_and_capacity() {
        let rays = vec![ray(), Ray { origin: Vec3::y(), ..ray() }];
        let mut a = sample_coarse(&rays[0], 4, false, &mut rng(0));
        a.keep = vec![false, true, false, true];
        let mut b = sample_coarse(&rays[1], 4, false, &mut rng(0));
        b.keep = vec![false; 4];
        let packed = pack_batch(&rays, &[a.clone(), b.clone()], 2).unwrap();
        assert_eq!(packed.valid, vec![true, true, false, false]);
        assert_eq!(packed.positions[0], rays[0].at(0.375));
        assert_eq!(packed.positions[1], rays[0].at(0.875));
        assert_eq!(packed.positions[2], rays[1].origin);
        assert_eq!(packed.sample_index[..2], [1, 3]);
        match pack_batch(&rays, &[a, b], 1) {
            Err(Error::Capacity { capacity: 1, observed: 2 }) => {}
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn capacity_calibration() {
        let (ds, _) = crate::scene::generate_synthetic_scene(&crate::scene::SceneSpec::default_sphere(), 3, 16, 0).unwrap();
        // Bounds large enough that every sample of every ray is inside.
        let full = VoxelGrid::filled([4; 3], Aabb::cube(20.0), true).unwrap();
        let probe = CapacityProbe { n_samples: 64, batch_rays: 32, safety: DEFAULT_CAPACITY_SAFETY, seed: 1 };
        assert_eq!(calibrate_capacity(&ds, &full, &probe, 3), (1.1f64 * 64.0).ceil() as usize);
        let empty = VoxelGrid::filled([4; 3], Aabb::cube(20.0), false).unwrap();
        assert_eq!(calibrate_capacity(&ds, &empty, &probe, 3), 1);

        let hull = crate::hull::carve(&ds, [24; 3]).unwrap();
        let dilated = crate::hull::dilate(&hull, 2);
        let probe = CapacityProbe { n_samples: 48, ..probe };
        assert!(calibrate_capacity(&ds, &dilated, &probe, 4) >= calibrate_capacity(&ds, &hull, &probe, 4));
    }

    proptest! {
        #[test]
        fn sample_invariants(
            near in 0.1f64..3.0,
            span in 0.1f64..5.0,
            n in 1usize..40,
            n_fine in 0usize..40,
            seed in any::<u64>(),
            weights_seed in any::<u64>(),
        ) {
            let r = Ray { origin: Vec3::zeros(), direction: Vec3::z(), t_near: near, t_far: near + span };
            let mut g = rng(seed);
            let c = sample_coarse(&r, n, true, &mut g);
            let again = sample_coarse(&r, n, true, &mut rng(seed));
            prop_assert_eq!(&c, &again);
            prop_assert!(c.t.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(c.delta.iter().all(|&d| d > 0.0));
            // Spacings telescope from the first sample to t_far.
            let sum: f64 = c.delta.iter().sum();
            prop_assert!((sum - (r.t_far - c.t[0])).abs() < 1e-9);

            let mut wg = rng(weights_seed);
            let w: Vec<f64> = (0..n).map(|_| if wg.gen_bool(0.3) { 0.0 } else { wg.gen::<f64>() }).collect();
            let f = sample_fine(&r, &c.t, &w, n_fine, FineDraw::Random, &mut g).unwrap();
            prop_assert_eq!(f.len(), n + n_fine);
            prop_assert!(f.t.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(f.delta.iter().all(|&d| d > 0.0));
            let (lo, hi) = (c.t[0], c.t[n - 1]);
            prop_assert!(f.t.iter().all(|&t| t >= lo && t <= next_up(hi) + 1e-12));
        }
    }
}
