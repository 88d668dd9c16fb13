//! Volumetric images on physical grids.
//!
//! Voxel `(i, j, k)` sits at `origin + (i, j, k) * spacing` in millimetres and
//! data is stored x-fastest: `index = i + nx * (j + ny * k)`.

mod distance;
mod morphology;
mod resample;

pub use distance::signed_distance;
pub use morphology::{count_components, dilate, erode, largest_component, morph_open, sphere_element};
pub use resample::{resample, resample_to_grid, sample_trilinear, sample_trilinear_clamped, spanning_dims};

use crate::error::{Error, Result};

/// Geometry of a regular 3-D grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("grid dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("grid spacing must be > 0, got {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid(format!("grid origin must be finite, got {origin:?}")));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Grid of the given dims and spacing whose centre lies at `center`.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3], center: [f64; 3]) -> Result<Self> {
        let mut origin = [0.0; 3];
        for a in 0..3 {
            origin[a] = center[a] - (dims[a] as f64 - 1.0) * 0.5 * spacing[a];
        }
        Self::new(dims, spacing, origin)
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn position(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    /// Fractional voxel index of a physical point.
    #[inline]
    pub fn continuous_index(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Physical centre of the grid (midpoint of the first and last voxel centres).
    pub fn center(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = self.origin[a] + (self.dims[a] as f64 - 1.0) * 0.5 * self.spacing[a];
        }
        c
    }

    /// Physical span `[first centre, last centre]` per axis.
    pub fn bounds(&self) -> Aabb {
        let mut end = [0.0; 3];
        for a in 0..3 {
            end[a] = self.origin[a] + (self.dims[a] as f64 - 1.0) * self.spacing[a];
        }
        Aabb { start: self.origin, end }
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }
}

/// Axis-aligned physical box, `start <= end` per axis (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub start: [f64; 3],
    pub end: [f64; 3],
}

impl Aabb {
    pub fn size(&self) -> [f64; 3] {
        [self.end[0] - self.start[0], self.end[1] - self.start[1], self.end[2] - self.start[2]]
    }

    pub fn center(&self) -> [f64; 3] {
        [
            0.5 * (self.start[0] + self.end[0]),
            0.5 * (self.start[1] + self.end[1]),
            0.5 * (self.start[2] + self.end[2]),
        ]
    }

    /// Grow by `margin` per side, then clip to `limit`.
    pub fn expanded_clipped(&self, margin: f64, limit: &Aabb) -> Aabb {
        let mut out = *self;
        for a in 0..3 {
            out.start[a] = (self.start[a] - margin).max(limit.start[a]);
            out.end[a] = (self.end[a] + margin).min(limit.end[a]);
        }
        out
    }

    pub fn contains(&self, p: [f64; 3], tol: f64) -> bool {
        (0..3).all(|a| p[a] >= self.start[a] - tol && p[a] <= self.end[a] + tol)
    }
}

/// Scalar volume on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::invalid(format!(
                "data length {} does not match grid {:?}",
                data.len(),
                grid.dims
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self { data: vec![0.0; grid.len()], grid }
    }

    pub fn filled(grid: Grid, value: f64) -> Self {
        Self { data: vec![value; grid.len()], grid }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut([f64; 3]) -> f64) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    data.push(f(grid.position(i, j, k)));
                }
            }
        }
        Self { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.grid.origin
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.grid.index(i, j, k);
        self.data[idx] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume { grid: self.grid, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn with_grid(self, grid: Grid) -> Result<Volume> {
        Volume::new(grid, self.data)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Binary volume; every voxel is exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask(Volume);

impl Mask {
    pub fn from_volume(v: Volume) -> Result<Self> {
        if let Some(bad) = v.data.iter().find(|&&x| x != 0.0 && x != 1.0) {
            return Err(Error::invalid(format!("mask voxel value {bad} is not 0 or 1")));
        }
        Ok(Mask(v))
    }

    /// Foreground wherever `pred` holds.
    pub fn from_predicate(v: &Volume, pred: impl Fn(f64) -> bool) -> Self {
        Mask(v.map(|x| if pred(x) { 1.0 } else { 0.0 }))
    }

    pub fn empty(grid: Grid) -> Self {
        Mask(Volume::zeros(grid))
    }

    pub fn from_bools(grid: Grid, bits: &[bool]) -> Result<Self> {
        let data = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Ok(Mask(Volume::new(grid, data)?))
    }

    pub fn from_fn(grid: Grid, f: impl FnMut([f64; 3]) -> bool) -> Self {
        let mut f = f;
        Mask(Volume::from_fn(grid, |p| if f(p) { 1.0 } else { 0.0 }))
    }

    pub fn as_volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }

    pub fn grid(&self) -> &Grid {
        &self.0.grid
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.0.get(i, j, k) != 0.0
    }

    #[inline]
    pub fn at(&self, idx: usize) -> bool {
        self.0.data[idx] != 0.0
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, on: bool) {
        self.0.set(i, j, k, if on { 1.0 } else { 0.0 });
    }

    pub fn count(&self) -> usize {
        self.0.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.iter().all(|&v| v == 0.0)
    }

    pub fn bits(&self) -> Vec<bool> {
        self.0.data.iter().map(|&v| v != 0.0).collect()
    }

    pub fn complement(&self) -> Mask {
        Mask(self.0.map(|v| 1.0 - v))
    }

    /// Foreground centroid in mm.
    pub fn centroid(&self) -> Result<[f64; 3]> {
        let g = self.grid();
        let mut acc = [0.0; 3];
        let mut n = 0usize;
        for (idx, &v) in self.0.data.iter().enumerate() {
            if v != 0.0 {
                let [i, j, k] = g.coords(idx);
                let p = g.position(i, j, k);
                for a in 0..3 {
                    acc[a] += p[a];
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::degenerate("centroid of an empty mask"));
        }
        Ok(acc.map(|s| s / n as f64))
    }
}

/// Volume with every voxel in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap(Volume);

impl ProbMap {
    pub fn from_volume(v: Volume) -> Result<Self> {
        if let Some(bad) = v.data.iter().find(|&&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::invalid(format!("probability {bad} outside [0, 1]")));
        }
        Ok(ProbMap(v))
    }

    /// Clamp into `[0, 1]`; absorbs rounding from interpolation.
    pub fn clamped(v: Volume) -> Self {
        ProbMap(v.map(|x| if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) }))
    }

    pub fn as_volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }

    pub fn grid(&self) -> &Grid {
        &self.0.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }
}

impl From<Mask> for ProbMap {
    fn from(m: Mask) -> Self {
        ProbMap(m.0)
    }
}

/// Centred crop / symmetric zero pad to `target` dims. When the size difference
/// is odd the extra voxel is taken from (or added on) the high-index side.
pub fn crop_or_pad(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    if target.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("target dims must be >= 1, got {target:?}")));
    }
    let src = v.grid();
    // Signed offset: output index o maps to input index o + shift.
    let mut shift = [0isize; 3];
    let mut origin = src.origin;
    for a in 0..3 {
        let n_in = src.dims[a] as isize;
        let n_out = target[a] as isize;
        shift[a] = if n_in >= n_out { (n_in - n_out) / 2 } else { -((n_out - n_in) / 2) };
        origin[a] = src.origin[a] + shift[a] as f64 * src.spacing[a];
    }
    let grid = Grid::new(target, src.spacing, origin)?;
    let mut out = Volume::zeros(grid);
    for k in 0..target[2] {
        let sk = k as isize + shift[2];
        if sk < 0 || sk >= src.dims[2] as isize {
            continue;
        }
        for j in 0..target[1] {
            let sj = j as isize + shift[1];
            if sj < 0 || sj >= src.dims[1] as isize {
                continue;
            }
            let i_lo = (-shift[0]).max(0) as usize;
            let i_hi = ((src.dims[0] as isize - shift[0]).min(target[0] as isize)).max(0) as usize;
            if i_lo >= i_hi {
                continue;
            }
            let dst = grid.index(i_lo, j, k);
            let s = src.index((i_lo as isize + shift[0]) as usize, sj as usize, sk as usize);
            let n = i_hi - i_lo;
            out.data[dst..dst + n].copy_from_slice(&v.data[s..s + n]);
        }
    }
    Ok(out)
}

/// Zero mean, unit population standard deviation.
pub fn normalize(v: &Volume) -> Result<Volume> {
    if v.data.len() < 2 {
        return Err(Error::degenerate("normalize needs at least two voxels"));
    }
    let mean = v.mean();
    let std = v.std();
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::degenerate("normalize of a constant volume"));
    }
    Ok(v.map(|x| (x - mean) / std))
}

/// Foreground iff `p >= t` (inclusive).
pub fn threshold(p: &ProbMap, t: f64) -> Mask {
    Mask::from_predicate(p.as_volume(), |x| x >= t)
}

/// Tight physical box of the foreground voxel centres.
pub fn tight_box(m: &Mask) -> Result<Aabb> {
    let g = m.grid();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (idx, &v) in m.as_volume().data().iter().enumerate() {
        if v != 0.0 {
            let c = g.coords(idx);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
            any = true;
        }
    }
    if !any {
        return Err(Error::degenerate("tight box of an empty mask"));
    }
    Ok(Aabb { start: g.position(lo[0], lo[1], lo[2]), end: g.position(hi[0], hi[1], hi[2]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(dims: [usize; 3]) -> Grid {
        Grid::new(dims, [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn grid_rejects_bad_geometry() {
        assert!(Grid::new([0, 1, 1], [1.0; 3], [0.0; 3]).is_err());
        assert!(Grid::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Volume::new(grid([2, 2, 2]), vec![0.0; 7]).is_err());
    }

    #[test]
    fn crop_or_pad_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = grid([12, 10, 6]);
        let v = Volume::from_fn(g, |_| rng.random());
        assert_eq!(crop_or_pad(&v, [12, 10, 6]).unwrap(), v);
    }

    #[test]
    fn crop_or_pad_mixed_axes() {
        // 130x128x70 -> 128x128x72: x cropped by 1 per side, z padded 1 low + 1 high.
        let g = Grid::new([130, 128, 70], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume::from_fn(g, |p| p[0] + 1000.0 * p[2] + 1.0);
        let out = crop_or_pad(&v, [128, 128, 72]).unwrap();
        assert_eq!(out.dims(), [128, 128, 72]);
        assert_eq!(out.origin(), [1.0, 0.0, -1.0]);
        assert_eq!(out.get(0, 5, 1), v.get(1, 5, 0));
        assert_eq!(out.get(127, 5, 70), v.get(128, 5, 69));
        for j in 0..128 {
            for i in 0..128 {
                assert_eq!(out.get(i, j, 0), 0.0);
                assert_eq!(out.get(i, j, 71), 0.0);
            }
        }
    }

    #[test]
    fn crop_or_pad_odd_difference_goes_high() {
        let v = Volume::filled(grid([3, 1, 1]), 1.0);
        let out = crop_or_pad(&v, [6, 1, 1]).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        let v = Volume::new(grid([6, 1, 1]), vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(crop_or_pad(&v, [3, 1, 1]).unwrap().data(), &[2., 3., 4.]);
    }

    #[test]
    fn pad_adds_nothing() {
        let v = Volume::filled(grid([4, 4, 4]), 1.0);
        let out = crop_or_pad(&v, [6, 6, 6]).unwrap();
        assert_eq!(out.data().iter().sum::<f64>(), 64.0);
    }

    #[test]
    fn normalize_two_points() {
        let v = Volume::new(grid([2, 1, 1]), vec![0.0, 2.0]).unwrap();
        assert_eq!(normalize(&v).unwrap().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn normalize_rejects_constant() {
        let v = Volume::filled(grid([3, 3, 3]), 4.0);
        assert!(matches!(normalize(&v), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn normalize_random_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = Volume::from_fn(grid([9, 7, 5]), |_| rng.random_range(-3.0..11.0));
        let n = normalize(&v).unwrap();
        assert!(n.mean().abs() < 1e-6);
        assert!((n.std() - 1.0).abs() < 1e-6);
        let nn = normalize(&n).unwrap();
        for (a, b) in n.data().iter().zip(nn.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn threshold_is_inclusive() {
        let p = ProbMap::from_volume(Volume::new(grid([3, 1, 1]), vec![0.5, 0.49, 0.0]).unwrap())
            .unwrap();
        assert_eq!(threshold(&p, 0.5).as_volume().data(), &[1.0, 0.0, 0.0]);
        let z = ProbMap::from_volume(Volume::zeros(grid([4, 4, 4]))).unwrap();
        assert!(threshold(&z, 0.5).is_empty());
    }

    #[test]
    fn threshold_matches_comparison() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ProbMap::from_volume(Volume::from_fn(grid([8, 8, 8]), |_| rng.random())).unwrap();
        let m = threshold(&p, 0.5);
        for (a, b) in p.data().iter().zip(m.as_volume().data()) {
            assert_eq!(*b == 1.0, *a >= 0.5);
        }
    }

    #[test]
    fn tight_box_cases() {
        let g = Grid::new([10, 10, 10], [1.0, 2.0, 0.5], [5.0, 0.0, -1.0]).unwrap();
        let mut m = Mask::empty(g);
        assert!(tight_box(&m).is_err());
        m.set(2, 3, 4, true);
        let b = tight_box(&m).unwrap();
        assert_eq!(b.start, g.position(2, 3, 4));
        assert_eq!(b.end, b.start);
        m.set(7, 1, 9, true);
        let b = tight_box(&m).unwrap();
        assert_eq!(b.start, [7.0, 2.0, 1.0]);
        assert_eq!(b.end, [12.0, 6.0, 3.5]);
    }

    #[test]
    fn sphere_tight_box_is_twenty_mm() {
        let g = Grid::centered([31, 31, 31], [1.0; 3], [0.0; 3]).unwrap();
        let m = Mask::from_fn(g, |p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() <= 10.0);
        let s = tight_box(&m).unwrap().size();
        for a in 0..3 {
            assert!((s[a] - 20.0).abs() <= 1.0, "{s:?}");
        }
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(Mask::from_volume(Volume::filled(grid([2, 2, 2]), 0.5)).is_err());
        assert!(ProbMap::from_volume(Volume::filled(grid([2, 2, 2]), 1.5)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn pad_then_crop_restores(
                dims in prop::array::uniform3(1usize..7),
                extra in prop::array::uniform3(0usize..5),
                seed in any::<u64>(),
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let v = Volume::from_fn(grid(dims), |_| rng.random());
                let big = [dims[0] + extra[0], dims[1] + extra[1], dims[2] + extra[2]];
                let back = crop_or_pad(&crop_or_pad(&v, big).unwrap(), dims).unwrap();
                prop_assert_eq!(back, v);
            }

            #[test]
            fn threshold_monotone(seed in any::<u64>(), t1 in 0.01f64..0.99, dt in 0.0f64..0.5) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = ProbMap::from_volume(Volume::from_fn(grid([6, 5, 4]), |_| rng.random())).unwrap();
                let t2 = (t1 + dt).min(0.999);
                let lo = threshold(&p, t1);
                let hi = threshold(&p, t2);
                for (a, b) in lo.bits().iter().zip(hi.bits()) {
                    prop_assert!(!b || *a);
                }
            }
        }
    }
}
