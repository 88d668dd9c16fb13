//! Training-time augmentation: shape-model deformation, integer shifts and
//! additive Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::shapemodel::{alignment, ShapeCoeffs, ShapeModel};
use crate::volume::{sample_trilinear_clamped, Grid, Mask, Volume};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub noise_std: f64,
    pub deform_probability: f64,
    pub coeff_spread: f64,
    /// Gaussian bandwidth `h` of the dense displacement interpolation (mm).
    pub bandwidth_mm: f64,
    /// Largest integer shift per axis (voxels).
    pub max_shift: usize,
    pub max_points: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.03,
            deform_probability: 0.5,
            coeff_spread: 2.0,
            bandwidth_mm: 8.0,
            max_shift: 5,
            max_points: 500,
        }
    }
}

impl AugmentConfig {
    /// No deformation, no shift, no noise.
    pub fn disabled() -> Self {
        Self { noise_std: 0.0, deform_probability: 0.0, max_shift: 0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!("noise std must be >= 0, got {}", self.noise_std)));
        }
        if !(0.0..=1.0).contains(&self.deform_probability) {
            return Err(Error::invalid(format!(
                "deform probability must be in [0, 1], got {}",
                self.deform_probability
            )));
        }
        if !(self.bandwidth_mm > 0.0 && self.bandwidth_mm.is_finite()) {
            return Err(Error::invalid(format!("bandwidth must be > 0, got {}", self.bandwidth_mm)));
        }
        if !(self.coeff_spread >= 0.0) {
            return Err(Error::invalid(format!("coefficient spread must be >= 0, got {}", self.coeff_spread)));
        }
        if self.max_points == 0 {
            return Err(Error::invalid("max_points must be >= 1"));
        }
        Ok(())
    }
}

/// Dense displacement field in mm, one component per axis, on a volume grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    grid: Grid,
    comps: [Vec<f64>; 3],
}

impl DisplacementField {
    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        Self { grid, comps: [vec![0.0; n], vec![0.0; n], vec![0.0; n]] }
    }

    pub fn constant(grid: Grid, d: [f64; 3]) -> Self {
        let n = grid.len();
        Self { grid, comps: d.map(|v| vec![v; n]) }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn at(&self, idx: usize) -> [f64; 3] {
        [self.comps[0][idx], self.comps[1][idx], self.comps[2][idx]]
    }

    pub fn component(&self, axis: usize) -> Volume {
        Volume::new(self.grid, self.comps[axis].clone()).expect("field sized to grid")
    }

    pub fn max_magnitude(&self) -> f64 {
        (0..self.grid.len())
            .map(|i| self.at(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// Foreground voxels with a background (or out-of-image) 6-neighbour, as mm
/// positions, deterministically strided down to at most `max_points`.
pub fn surface_points(m: &Mask, max_points: usize) -> Result<Vec<[f64; 3]>> {
    if m.is_empty() {
        return Err(Error::degenerate("surface of an empty mask"));
    }
    if max_points == 0 {
        return Err(Error::invalid("max_points must be >= 1"));
    }
    let g = m.grid();
    let [nx, ny, nz] = g.dims;
    let mut pts = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if !m.get(i, j, k) {
                    continue;
                }
                let boundary = i == 0
                    || j == 0
                    || k == 0
                    || i + 1 == nx
                    || j + 1 == ny
                    || k + 1 == nz
                    || !m.get(i - 1, j, k)
                    || !m.get(i + 1, j, k)
                    || !m.get(i, j - 1, k)
                    || !m.get(i, j + 1, k)
                    || !m.get(i, j, k - 1)
                    || !m.get(i, j, k + 1);
                if boundary {
                    pts.push(g.position(i, j, k));
                }
            }
        }
    }
    if pts.len() > max_points {
        let n = pts.len();
        pts = (0..max_points).map(|i| pts[i * n / max_points]).collect();
    }
    Ok(pts)
}

/// Dense field moving `mask`'s surface from the model shape `b` toward `b2`
/// along the normals of `SDF_b`, spread by normalized Gaussian weights.
pub fn shape_displacement(
    model: &ShapeModel,
    mask: &Mask,
    b: &[f64],
    b2: &[f64],
    cfg: &AugmentConfig,
) -> Result<DisplacementField> {
    cfg.validate()?;
    let pose = alignment(mask)?;
    let sdf_b = model.sdf(b)?;
    let sdf_b2 = model.sdf(b2)?;
    let cg = model.grid();
    let at = |v: &Volume, q: [f64; 3]| sample_trilinear_clamped(v, cg.continuous_index(q));

    let mut controls: Vec<([f64; 3], [f64; 3])> = Vec::new();
    for x in surface_points(mask, cfg.max_points)? {
        let q = pose.to_canonical(x);
        let delta = at(&sdf_b2, q) - at(&sdf_b, q);
        if delta == 0.0 {
            controls.push((x, [0.0; 3]));
            continue;
        }
        let h = 0.5;
        let grad: [f64; 3] = std::array::from_fn(|a| {
            let mut lo = q;
            let mut hi = q;
            lo[a] -= h;
            hi[a] += h;
            (at(&sdf_b, hi) - at(&sdf_b, lo)) / (2.0 * h)
        });
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        let d = std::array::from_fn(|a| -delta * grad[a] / norm * pose.scale[a]);
        controls.push((x, d));
    }
    Ok(interpolate_field(mask.grid(), &controls, cfg.bandwidth_mm))
}

/// Normalized Gaussian scattered-data interpolation. A fixed anchor weight
/// `exp(-4.5)` (the weight at `3h`) pulls the field to zero away from the
/// controls, and nodes with no control within `3h` are exactly zero. The field
/// is evaluated on a lattice of spacing `h / 2` and trilinearly refined.
fn interpolate_field(grid: &Grid, controls: &[([f64; 3], [f64; 3])], h: f64) -> DisplacementField {
    if controls.iter().all(|(_, d)| d.iter().all(|&v| v == 0.0)) {
        return DisplacementField::zeros(*grid);
    }
    let cut = 3.0 * h;
    let anchor = (-4.5f64).exp();
    let step = 0.5 * h;
    let bounds = grid.bounds();
    let cdims: [usize; 3] =
        std::array::from_fn(|a| ((bounds.end[a] - bounds.start[a]) / step).ceil() as usize + 1);
    let coarse = Grid::new(cdims, [step; 3], bounds.start).expect("positive lattice");

    // Bin controls by lattice cells of size `cut` for the neighbour search.
    let bin_dims: [usize; 3] = std::array::from_fn(|a| (cdims[a] as f64 * step / cut).ceil() as usize + 1);
    let bin_of = |x: [f64; 3]| -> [usize; 3] {
        std::array::from_fn(|a| (((x[a] - bounds.start[a]) / cut).floor().max(0.0) as usize).min(bin_dims[a] - 1))
    };
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); bin_dims.iter().product()];
    for (i, (p, _)) in controls.iter().enumerate() {
        let b = bin_of(*p);
        bins[b[0] + bin_dims[0] * (b[1] + bin_dims[1] * b[2])].push(i);
    }

    let mut comps = [vec![0.0; coarse.len()], vec![0.0; coarse.len()], vec![0.0; coarse.len()]];
    for idx in 0..coarse.len() {
        let [i, j, k] = coarse.coords(idx);
        let x = coarse.position(i, j, k);
        let b = bin_of(x);
        let mut wsum = 0.0;
        let mut acc = [0.0; 3];
        for bz in b[2].saturating_sub(1)..=(b[2] + 1).min(bin_dims[2] - 1) {
            for by in b[1].saturating_sub(1)..=(b[1] + 1).min(bin_dims[1] - 1) {
                for bx in b[0].saturating_sub(1)..=(b[0] + 1).min(bin_dims[0] - 1) {
                    for &c in &bins[bx + bin_dims[0] * (by + bin_dims[1] * bz)] {
                        let (p, d) = &controls[c];
                        let r2: f64 = (0..3).map(|a| (x[a] - p[a]).powi(2)).sum();
                        if r2 > cut * cut {
                            continue;
                        }
                        let w = (-r2 / (2.0 * h * h)).exp();
                        wsum += w;
                        for a in 0..3 {
                            acc[a] += w * d[a];
                        }
                    }
                }
            }
        }
        if wsum > 0.0 {
            for a in 0..3 {
                comps[a][idx] = acc[a] / (wsum + anchor);
            }
        }
    }
    let lattice = comps.map(|c| Volume::new(coarse, c).expect("lattice sized"));
    let mut out = DisplacementField::zeros(*grid);
    for idx in 0..grid.len() {
        let [i, j, k] = grid.coords(idx);
        let ci = coarse.continuous_index(grid.position(i, j, k));
        for a in 0..3 {
            out.comps[a][idx] = sample_trilinear_clamped(&lattice[a], ci);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

/// Backward warp: `out(x) = v(x - d(x))`, edge-extended outside the grid.
pub fn warp(v: &Volume, field: &DisplacementField, interp: Interpolation) -> Result<Volume> {
    if field.grid().dims != v.dims() {
        return Err(Error::invalid(format!(
            "field dims {:?} do not match volume dims {:?}",
            field.grid().dims,
            v.dims()
        )));
    }
    let g = *v.grid();
    let mut out = Volume::zeros(g);
    for idx in 0..g.len() {
        let [i, j, k] = g.coords(idx);
        let x = g.position(i, j, k);
        let d = field.at(idx);
        let ci = g.continuous_index([x[0] - d[0], x[1] - d[1], x[2] - d[2]]);
        out.data_mut()[idx] = match interp {
            Interpolation::Trilinear => sample_trilinear_clamped(v, ci),
            Interpolation::Nearest => {
                let n: [usize; 3] =
                    std::array::from_fn(|a| ci[a].round().clamp(0.0, (g.dims[a] - 1) as f64) as usize);
                v.get(n[0], n[1], n[2])
            }
        };
    }
    Ok(out)
}

pub fn warp_mask(m: &Mask, field: &DisplacementField) -> Result<Mask> {
    Mask::from_volume(warp(m.as_volume(), field, Interpolation::Nearest)?)
}

/// Integer-voxel translation: `out[i] = v[i - s]`; uncovered voxels take `fill`
/// or, when `fill` is `None`, the nearest edge value.
pub fn shift(v: &Volume, s: [i64; 3], fill: Option<f64>) -> Volume {
    let g = *v.grid();
    let mut out = Volume::zeros(g);
    for idx in 0..g.len() {
        let c = g.coords(idx);
        let mut src = [0usize; 3];
        let mut outside = false;
        for a in 0..3 {
            let t = c[a] as i64 - s[a];
            let n = g.dims[a] as i64;
            if t < 0 || t >= n {
                outside = true;
            }
            src[a] = t.clamp(0, n - 1) as usize;
        }
        out.data_mut()[idx] = match (outside, fill) {
            (true, Some(f)) => f,
            _ => v.get(src[0], src[1], src[2]),
        };
    }
    out
}

/// Record of what [`augment_sample`] did.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentRecord {
    pub deformed: bool,
    pub target_coeffs: Option<ShapeCoeffs>,
    pub shift: [i64; 3],
}

/// One augmented copy of `(image, mask)`; the inputs are left untouched.
pub fn augment_sample<R: Rng + ?Sized>(
    image: &Volume,
    mask: &Mask,
    model: Option<&ShapeModel>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Volume, Mask, AugmentRecord)> {
    cfg.validate()?;
    if image.grid() != mask.grid() {
        return Err(Error::invalid("image and mask must share a grid"));
    }
    let mut img = image.clone();
    let mut msk = mask.clone();
    let mut record = AugmentRecord { deformed: false, target_coeffs: None, shift: [0; 3] };

    let deform = rng.random::<f64>() < cfg.deform_probability;
    if deform && !mask.is_empty() {
        let model = model.ok_or_else(|| Error::invalid("shape deformation requires a shape model"))?;
        let b = model.project(mask)?;
        let b2 = model.sample_coeffs(rng, cfg.coeff_spread)?;
        let field = shape_displacement(model, mask, &b, &b2, cfg)?;
        let warped = warp_mask(mask, &field)?;
        if !warped.is_empty() {
            img = warp(image, &field, Interpolation::Trilinear)?;
            msk = warped;
            record.deformed = true;
        }
        record.target_coeffs = Some(b2);
    }

    let m = cfg.max_shift as i64;
    let s: [i64; 3] = std::array::from_fn(|_| if m > 0 { rng.random_range(-m..=m) } else { 0 });
    if s != [0; 3] {
        img = shift(&img, s, None);
        msk = Mask::from_volume(shift(msk.as_volume(), s, Some(0.0)))?;
    }
    record.shift = s;

    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).expect("validated std");
        img.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    Ok((img, msk, record))
}
