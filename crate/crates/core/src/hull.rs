//! Visual-hull occupancy grid: carving from silhouettes, dilation, membership.

use std::fs;
use std::path::Path;

use bitvec::prelude::*;
use rayon::prelude::*;

use crate::camera::{CameraPose, Vec3};
use crate::error::{Error, Result};
use crate::scene::{Aabb, Dataset, Mask};

pub const GRID_MAGIC: &[u8; 8] = b"VAXGRID1";
/// Magic, three u32 resolutions, six f64 bounds.
pub const GRID_HEADER_LEN: usize = 8 + 3 * 4 + 6 * 8;

/// Default carve resolution for full-size scenes.
pub const DEFAULT_RESOLUTION: usize = 400;
/// Default carve resolution for desk-scale scenes.
pub const DESK_RESOLUTION: usize = 128;

/// Axis-aligned binary occupancy grid. Cell `(x, y, z)` lives at bit
/// `x + nx * (y + ny * z)`; true means the object may be there.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    resolution: [usize; 3],
    bounds: Aabb,
    occupancy: BitVec<u8, Lsb0>,
}

impl VoxelGrid {
    pub fn filled(resolution: [usize; 3], bounds: Aabb, value: bool) -> Result<Self> {
        if resolution.iter().any(|&n| n == 0 || n > u32::MAX as usize) {
            return Err(Error::Config(format!("invalid grid resolution {resolution:?}")));
        }
        let bounds = Aabb::new(bounds.min, bounds.max)?;
        let len = resolution.iter().product();
        Ok(Self { resolution, bounds, occupancy: BitVec::repeat(value, len) })
    }

    /// Grid whose cell `(x, y, z)` is occupied iff `f` says so for its center.
    pub fn from_fn(resolution: [usize; 3], bounds: Aabb, f: impl Fn(&Vec3) -> bool + Sync) -> Result<Self> {
        let mut grid = Self::filled(resolution, bounds, false)?;
        let bits: Vec<bool> = (0..grid.len()).into_par_iter().map(|i| f(&grid.cell_center(grid.coords(i)))).collect();
        grid.occupancy = bits.into_iter().collect();
        Ok(grid)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy.is_empty()
    }

    pub fn cell_size(&self) -> Vec3 {
        let e = self.bounds.extent();
        Vec3::new(e.x / self.resolution[0] as f64, e.y / self.resolution[1] as f64, e.z / self.resolution[2] as f64)
    }

    #[inline]
    pub fn index(&self, [x, y, z]: [usize; 3]) -> usize {
        x + self.resolution[0] * (y + self.resolution[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.resolution;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    pub fn get(&self, c: [usize; 3]) -> bool {
        self.occupancy[self.index(c)]
    }

    pub fn set(&mut self, c: [usize; 3], value: bool) {
        let i = self.index(c);
        self.occupancy.set(i, value);
    }

    pub fn cell_center(&self, [x, y, z]: [usize; 3]) -> Vec3 {
        let cell = self.cell_size();
        self.bounds.min + Vec3::new((x as f64 + 0.5) * cell.x, (y as f64 + 0.5) * cell.y, (z as f64 + 0.5) * cell.z)
    }

    /// Cell enclosing `p`, or `None` outside the bounds. Points on the max
    /// face belong to the last cell.
    #[inline]
    pub fn cell_of(&self, p: &Vec3) -> Option<[usize; 3]> {
        let mut c = [0usize; 3];
        for k in 0..3 {
            let (lo, hi) = (self.bounds.min[k], self.bounds.max[k]);
            if !(p[k] >= lo && p[k] <= hi) {
                return None;
            }
            let n = self.resolution[k];
            let i = ((p[k] - lo) / (hi - lo) * n as f64).floor() as usize;
            c[k] = i.min(n - 1);
        }
        Some(c)
    }

    /// Membership test used for sample rejection.
    #[inline]
    pub fn contains(&self, p: &Vec3) -> bool {
        match self.cell_of(p) {
            Some(c) => self.occupancy[self.index(c)],
            None => false,
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.count_ones()
    }

    pub fn occupancy_fraction(&self) -> f64 {
        self.occupied_count() as f64 / self.len() as f64
    }

    /// Occupied set is a subset of `other`'s (same shape required).
    pub fn is_subset_of(&self, other: &VoxelGrid) -> bool {
        self.resolution == other.resolution && self.occupancy.iter_ones().all(|i| other.occupancy[i])
    }

    pub fn occupancy_bits(&self) -> &BitSlice<u8, Lsb0> {
        &self.occupancy
    }

    /// Length of `o + t d`, `t in [t0, t1]`, that lies inside occupied cells.
    ///
    /// Exact cell traversal; `d` must be unit length.
    pub fn occupied_length(&self, o: &Vec3, d: &Vec3, t0: f64, t1: f64) -> f64 {
        // Clip the segment to the bounds (slab test).
        let (mut lo, mut hi) = (t0, t1);
        for k in 0..3 {
            if d[k].abs() < 1e-300 {
                if o[k] < self.bounds.min[k] || o[k] > self.bounds.max[k] {
                    return 0.0;
                }
            } else {
                let a = (self.bounds.min[k] - o[k]) / d[k];
                let b = (self.bounds.max[k] - o[k]) / d[k];
                lo = lo.max(a.min(b));
                hi = hi.min(a.max(b));
            }
        }
        if hi <= lo {
            return 0.0;
        }
        let cell = self.cell_size();
        let start = o + d * lo;
        let Some(mut c) = self.cell_of(&start).or_else(|| self.cell_of(&(o + d * (lo + 1e-12)))) else {
            return 0.0;
        };
        let mut step = [0i64; 3];
        let mut t_next = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for k in 0..3 {
            if d[k] > 0.0 {
                step[k] = 1;
                let boundary = self.bounds.min[k] + (c[k] + 1) as f64 * cell[k];
                t_next[k] = (boundary - o[k]) / d[k];
                t_delta[k] = cell[k] / d[k];
            } else if d[k] < 0.0 {
                step[k] = -1;
                let boundary = self.bounds.min[k] + c[k] as f64 * cell[k];
                t_next[k] = (boundary - o[k]) / d[k];
                t_delta[k] = -cell[k] / d[k];
            }
        }
        let mut t = lo;
        let mut total = 0.0;
        loop {
            let axis = (0..3).min_by(|&a, &b| t_next[a].total_cmp(&t_next[b])).unwrap();
            let exit = t_next[axis].min(hi);
            if self.get(c) {
                total += (exit - t).max(0.0);
            }
            if t_next[axis] >= hi {
                break;
            }
            t = exit;
            let ni = c[axis] as i64 + step[axis];
            if ni < 0 || ni >= self.resolution[axis] as i64 {
                break;
            }
            c[axis] = ni as usize;
            t_next[axis] += t_delta[axis];
        }
        total
    }
}

/// Carves the visual hull of the dataset's masks into a grid over `dataset.scene_bounds`.
///
/// A cell is emptied when some view sees all nine of its probe points (center
/// and eight corners) inside the image on background pixels. Cells with no
/// such evidence stay occupied, including those outside every frustum.
pub fn carve(dataset: &Dataset, resolution: [usize; 3]) -> Result<VoxelGrid> {
    if dataset.views.is_empty() {
        return Err(Error::Config("cannot carve a hull from zero views".into()));
    }
    if resolution.iter().any(|&n| n < 2) {
        return Err(Error::Config(format!("carve resolution {resolution:?} must be at least 2 per axis")));
    }
    let mut grid = VoxelGrid::filled(resolution, dataset.scene_bounds, true)?;
    let [nx, ny, nz] = resolution;
    let (lx, ly) = (nx + 1, ny + 1);
    let cell = grid.cell_size();
    let min = grid.bounds.min;
    let mut carved = vec![false; grid.len()];

    for (vi, view) in dataset.views.iter().enumerate() {
        if view.mask.foreground_count() == 0 {
            log::warn!("view {vi} has an all-background mask; its whole frustum will be carved");
        }
        let evidence = |p: Vec3| background_evidence(&view.pose, &view.mask, &p);
        let corners: Vec<bool> = (0..lx * ly * (nz + 1))
            .into_par_iter()
            .map(|i| {
                let (x, y, z) = (i % lx, (i / lx) % ly, i / (lx * ly));
                evidence(min + Vec3::new(x as f64 * cell.x, y as f64 * cell.y, z as f64 * cell.z))
            })
            .collect();
        carved.par_chunks_mut(nx * ny).enumerate().for_each(|(z, slab)| {
            for y in 0..ny {
                for x in 0..nx {
                    let out = &mut slab[x + nx * y];
                    if *out {
                        continue;
                    }
                    let all_corners = (0..8).all(|k| {
                        let (dx, dy, dz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
                        corners[(x + dx) + lx * ((y + dy) + ly * (z + dz))]
                    });
                    if all_corners {
                        let center = min
                            + Vec3::new((x as f64 + 0.5) * cell.x, (y as f64 + 0.5) * cell.y, (z as f64 + 0.5) * cell.z);
                        *out = evidence(center);
                    }
                }
            }
        });
    }
    grid.occupancy = carved.into_iter().map(|c| !c).collect();
    Ok(grid)
}

/// The point projects inside the image onto a background pixel.
#[inline]
fn background_evidence(pose: &CameraPose, mask: &Mask, p: &Vec3) -> bool {
    match pose.pixel_of(p) {
        Some((row, col)) => !mask.get(row as usize, col as usize),
        None => false,
    }
}

/// Max-pool over cubes of half-width `radius_cells` (Chebyshev ball).
pub fn dilate(grid: &VoxelGrid, radius_cells: usize) -> VoxelGrid {
    if radius_cells == 0 {
        return grid.clone();
    }
    let [nx, ny, _] = grid.resolution;
    let mut cur: Vec<bool> = grid.occupancy.iter().by_vals().collect();
    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let n = grid.resolution[axis];
        let stride = strides[axis];
        let mut next = vec![false; cur.len()];
        // Every line along `axis` is dilated independently.
        let lines: Vec<usize> = (0..cur.len()).filter(|&i| (i / stride) % n == 0).collect();
        let results: Vec<(usize, Vec<bool>)> = lines
            .par_iter()
            .map(|&start| {
                let line: Vec<bool> = (0..n).map(|k| cur[start + k * stride]).collect();
                (start, dilate_line(&line, radius_cells))
            })
            .collect();
        for (start, line) in results {
            for (k, v) in line.into_iter().enumerate() {
                next[start + k * stride] = v;
            }
        }
        cur = next;
    }
    VoxelGrid { resolution: grid.resolution, bounds: grid.bounds, occupancy: cur.into_iter().collect() }
}

fn dilate_line(line: &[bool], r: usize) -> Vec<bool> {
    let n = line.len();
    // Prefix counts give O(1) window queries.
    let mut prefix = vec![0usize; n + 1];
    for (i, &b) in line.iter().enumerate() {
        prefix[i + 1] = prefix[i] + b as usize;
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(r);
            let hi = (i + r + 1).min(n);
            prefix[hi] > prefix[lo]
        })
        .collect()
}

/// Dilation radius in cells matching one ray-sample spacing:
/// `ceil(grid / samples)` when samples are coarser than the grid, else 0.
pub fn dilation_radius(grid_resolution: usize, n_samples_per_ray: usize) -> usize {
    if n_samples_per_ray == 0 || n_samples_per_ray >= grid_resolution {
        0
    } else {
        grid_resolution.div_ceil(n_samples_per_ray)
    }
}

/// Serializes a grid in the `VAXGRID1` little-endian layout.
pub fn encode_grid(grid: &VoxelGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(GRID_HEADER_LEN + grid.len().div_ceil(8));
    out.extend_from_slice(GRID_MAGIC);
    for &n in &grid.resolution {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for v in grid.bounds.min.iter().chain(grid.bounds.max.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut bits = grid.occupancy.clone();
    bits.set_uninitialized(false);
    out.extend_from_slice(bits.as_raw_slice());
    out
}

pub fn decode_grid(bytes: &[u8], path: &Path) -> Result<VoxelGrid> {
    if bytes.len() < GRID_HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[..8] != GRID_MAGIC {
        return Err(Error::format(path, "bad magic; expected VAXGRID1"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let resolution = [u32_at(8), u32_at(12), u32_at(16)];
    let min = Vec3::new(f64_at(20), f64_at(28), f64_at(36));
    let max = Vec3::new(f64_at(44), f64_at(52), f64_at(60));
    let bounds = Aabb::new(min, max).map_err(|e| Error::format(path, e.to_string()))?;
    let len: usize = resolution
        .iter()
        .try_fold(1usize, |acc, &n| if n == 0 { None } else { acc.checked_mul(n) })
        .ok_or_else(|| Error::format(path, format!("invalid resolution {resolution:?}")))?;
    let payload = &bytes[GRID_HEADER_LEN..];
    if payload.len() != len.div_ceil(8) {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, expected {} for {resolution:?}", payload.len(), len.div_ceil(8)),
        ));
    }
    let mut occupancy = BitVec::<u8, Lsb0>::from_slice(payload);
    occupancy.truncate(len);
    Ok(VoxelGrid { resolution, bounds, occupancy })
}

pub fn save_grid(grid: &VoxelGrid, path: &Path) -> Result<()> {
    fs::write(path, encode_grid(grid)).map_err(|e| Error::io(path, e))
}

pub fn load_grid(path: &Path) -> Result<VoxelGrid> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::format(path, "file not found"),
        _ => Error::io(path, e),
    })?;
    decode_grid(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Image, ViewRecord};
    use proptest::prelude::*;

    fn unit_bounds() -> Aabb {
        Aabb::cube(1.0)
    }

    #[test]
    fn contains_boundaries() {
        let mut g = VoxelGrid::filled([4, 4, 4], unit_bounds(), false).unwrap();
        g.set([3, 3, 3], true);
        assert!(g.contains(&Vec3::repeat(1.0)));
        assert!(!g.contains(&Vec3::new(1.0 + 1e-12, 0.0, 0.0)));
        assert!(!g.contains(&Vec3::repeat(-1.0)));
        let full = VoxelGrid::filled([4, 4, 4], unit_bounds(), true).unwrap();
        assert!(full.contains(&Vec3::new(-1.0, 0.3, 0.99)));
        assert!(!full.contains(&Vec3::new(0.0, 2.0, 0.0)));
        assert_eq!(g.cell_of(&Vec3::new(-0.5, 0.0, 0.49)), Some([1, 2, 2]));
    }

    #[test]
    fn dilate_single_voxel() {
        let mut g = VoxelGrid::filled([9, 9, 9], unit_bounds(), false).unwrap();
        g.set([4, 4, 4], true);
        assert_eq!(dilate(&g, 1).occupied_count(), 27);
        assert_eq!(dilate(&g, 2).occupied_count(), 125);
        assert_eq!(dilate(&g, 0), g);
        let full = VoxelGrid::filled([5, 6, 7], unit_bounds(), true).unwrap();
        assert_eq!(dilate(&full, 3), full);
        let mut corner = VoxelGrid::filled([9, 9, 9], unit_bounds(), false).unwrap();
        corner.set([0, 0, 0], true);
        assert_eq!(dilate(&corner, 1).occupied_count(), 8);
    }

    #[test]
    fn dilation_radius_rule() {
        assert_eq!(dilation_radius(400, 64), 7);
        assert_eq!(dilation_radius(400, 800), 0);
        assert_eq!(dilation_radius(128, 128), 0);
        assert_eq!(dilation_radius(128, 16), 8);
    }

    #[test]
    fn occupancy_fraction_extremes() {
        assert_eq!(VoxelGrid::filled([3, 3, 3], unit_bounds(), true).unwrap().occupancy_fraction(), 1.0);
        assert_eq!(VoxelGrid::filled([3, 3, 3], unit_bounds(), false).unwrap().occupancy_fraction(), 0.0);
    }

    #[test]
    fn grid_file_round_trip_and_errors() {
        let g = VoxelGrid::from_fn([5, 3, 7], unit_bounds(), |p| p.x + p.y * 0.5 > p.z).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.bin");
        save_grid(&g, &path).unwrap();
        assert_eq!(load_grid(&path).unwrap(), g);

        let mut bytes = encode_grid(&g);
        bytes[0] = b'X';
        assert!(matches!(decode_grid(&bytes, &path), Err(Error::Format { .. })));
        let bytes = encode_grid(&g);
        assert!(decode_grid(&bytes[..bytes.len() - 1], &path).is_err());
        assert!(decode_grid(&bytes[..20], &path).is_err());
        assert!(matches!(load_grid(&dir.path().join("missing")), Err(Error::Format { .. })));
    }

    #[test]
    fn payload_size_for_128_cubed() {
        let g = VoxelGrid::filled([128; 3], unit_bounds(), true).unwrap();
        assert_eq!(encode_grid(&g).len(), GRID_HEADER_LEN + (128usize.pow(3)).div_ceil(8));
        assert_eq!(GRID_HEADER_LEN, 68);
    }

    #[test]
    fn bit_order_is_lsb_first_x_fastest() {
        let mut g = VoxelGrid::filled([3, 2, 2], unit_bounds(), false).unwrap();
        g.set([1, 0, 0], true);
        g.set([0, 1, 1], true); // index 0 + 3*(1 + 2*1) = 9
        let bytes = encode_grid(&g);
        assert_eq!(&bytes[GRID_HEADER_LEN..], &[0b0000_0010, 0b0000_0010]);
    }

    fn flat_view(pose: CameraPose, fg: impl Fn(usize, usize) -> bool) -> ViewRecord {
        let (w, h) = (pose.width as usize, pose.height as usize);
        let bits = (0..w * h).map(|i| fg(i / w, i % w)).collect();
        ViewRecord::new(Image::filled(w, h, [1.0; 3]), Mask { width: w, height: h, bits }, pose).unwrap()
    }

    #[test]
    fn all_foreground_view_carves_nothing() {
        let pose = CameraPose::look_at(Vec3::new(0.0, 0.0, 5.0), Vec3::zeros(), Vec3::y(), 32, 32, 30.0).unwrap();
        let ds = Dataset::new(vec![flat_view(pose, |_, _| true)], 1.0, 9.0, unit_bounds(), [1.0; 3]).unwrap();
        let g = carve(&ds, [16; 3]).unwrap();
        assert_eq!(g.occupancy_fraction(), 1.0);
    }

    #[test]
    fn carve_rejects_bad_inputs() {
        let ds = Dataset::new(vec![], 1.0, 9.0, unit_bounds(), [1.0; 3]).unwrap();
        assert!(matches!(carve(&ds, [8; 3]), Err(Error::Config(_))));
        let pose = CameraPose::look_at(Vec3::new(0.0, 0.0, 5.0), Vec3::zeros(), Vec3::y(), 8, 8, 8.0).unwrap();
        let ds = Dataset::new(vec![flat_view(pose, |_, _| true)], 1.0, 9.0, unit_bounds(), [1.0; 3]).unwrap();
        assert!(carve(&ds, [1, 8, 8]).is_err());
    }

    #[test]
    fn all_background_view_empties_its_frustum() {
        // The frustum covers the whole bounds, so everything is carved.
        let pose = CameraPose::look_at(Vec3::new(0.0, 0.0, 8.0), Vec3::zeros(), Vec3::y(), 64, 64, 64.0).unwrap();
        let ds = Dataset::new(vec![flat_view(pose, |_, _| false)], 1.0, 12.0, unit_bounds(), [1.0; 3]).unwrap();
        assert_eq!(carve(&ds, [16; 3]).unwrap().occupied_count(), 0);
    }

    #[test]
    fn occupied_length_matches_dense_marching() {
        let g = VoxelGrid::from_fn([16, 12, 10], Aabb::cube(1.0), |p| (p - Vec3::new(0.2, -0.1, 0.0)).norm() < 0.6).unwrap();
        let mut state = 7u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..200 {
            let o = Vec3::new(next() * 6.0 - 3.0, next() * 6.0 - 3.0, next() * 6.0 - 3.0);
            let d = (Vec3::new(next() - 0.5, next() - 0.5, next() - 0.5)).normalize();
            let (t0, t1) = (0.1, 6.0);
            let exact = g.occupied_length(&o, &d, t0, t1);
            let n = 200_000;
            let h = (t1 - t0) / n as f64;
            let dense: f64 = (0..n).filter(|&k| g.contains(&(o + (t0 + (k as f64 + 0.5) * h) * d))).count() as f64 * h;
            assert!((exact - dense).abs() < 1e-3, "exact {exact} dense {dense}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn dilation_monotone_and_additive(
            seeds in prop::collection::vec(0usize..(10 * 9 * 8), 1..6),
            a in 0usize..4,
            b in 0usize..4,
        ) {
            let mut g = VoxelGrid::filled([10, 9, 8], unit_bounds(), false).unwrap();
            for i in seeds {
                let c = g.coords(i);
                g.set(c, true);
            }
            let da = dilate(&g, a);
            prop_assert!(g.is_subset_of(&da));
            prop_assert_eq!(dilate(&da, b), dilate(&g, a + b));
            // Brute-force Chebyshev-ball oracle.
            for i in 0..g.len() {
                let c = g.coords(i);
                let expect = g.occupancy.iter_ones().any(|j| {
                    let o = g.coords(j);
                    (0..3).all(|k| o[k].abs_diff(c[k]) <= a)
                });
                prop_assert_eq!(da.get(c), expect);
            }
        }

        #[test]
        fn file_round_trip(res in prop::array::uniform3(1usize..9), fill in any::<u64>()) {
            let mut g = VoxelGrid::filled(res, Aabb::cube(2.5), false).unwrap();
            for i in 0..g.len() {
                let c = g.coords(i);
                g.set(c, (fill.rotate_left(i as u32 % 64) & 1) == 1);
            }
            let back = decode_grid(&encode_grid(&g), Path::new("mem")).unwrap();
            prop_assert_eq!(back, g);
        }
    }
}
