//! Organ localization: PSO fit of the shape model to the global probability
//! map, box extraction, and the local-network resampling round trip.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::shapemodel::{Pose, ShapeCoeffs, ShapeModel};
use crate::volume::{normalize, resample_to_grid, tight_box, Aabb, Grid, Mask, ProbMap, Volume};

/// Soft-rasterization temperature of the fitting objective (mm).
pub const FIT_TEMPERATURE_MM: f64 = 2.0;
/// Translation search half-width around the probability centroid (mm).
pub const FIT_TRANSLATION_MM: f64 = 20.0;
/// Coefficients searched by the fit, at most.
pub const FIT_MAX_COEFFS: usize = 6;
/// Threshold a probability map must reach somewhere to be fit at all.
pub const LOCALIZATION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsoConfig {
    pub particles: usize,
    pub iterations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    /// Velocity clamp as a fraction of each dimension's search range.
    pub velocity_clamp: f64,
    pub seed: u64,
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self { particles: 40, iterations: 60, inertia: 0.72, cognitive: 1.49, social: 1.49, velocity_clamp: 0.5, seed: 0 }
    }
}

impl PsoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles < 1 {
            return Err(Error::invalid("PSO needs at least one particle"));
        }
        if self.iterations < 1 {
            return Err(Error::invalid("PSO needs at least one iteration"));
        }
        if !(self.inertia > 0.0 && self.inertia < 1.0) {
            return Err(Error::invalid(format!("PSO inertia must be in (0, 1), got {}", self.inertia)));
        }
        if !(self.velocity_clamp > 0.0) || self.cognitive < 0.0 || self.social < 0.0 {
            return Err(Error::invalid("PSO coefficients must be non-negative with a positive velocity clamp"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsoResult {
    pub best: Vec<f64>,
    pub value: f64,
    /// Global best value after each iteration (the first entry is the initial swarm).
    pub history: Vec<f64>,
}

/// Particle swarm minimization within `bounds`.
pub fn pso_minimize(
    objective: impl FnMut(&[f64]) -> f64,
    bounds: &[(f64, f64)],
    cfg: &PsoConfig,
) -> Result<PsoResult> {
    pso_minimize_seeded(objective, bounds, cfg, &[])
}

/// As [`pso_minimize`], with the first particles placed at `seeds` (clipped
/// to the bounds) instead of at random.
pub fn pso_minimize_seeded(
    mut objective: impl FnMut(&[f64]) -> f64,
    bounds: &[(f64, f64)],
    cfg: &PsoConfig,
    seeds: &[Vec<f64>],
) -> Result<PsoResult> {
    cfg.validate()?;
    if bounds.is_empty() {
        return Err(Error::invalid("PSO needs at least one dimension"));
    }
    for (d, &(lo, hi)) in bounds.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!("invalid PSO bounds [{lo}, {hi}] in dimension {d}")));
        }
    }
    if let Some(s) = seeds.iter().find(|s| s.len() != bounds.len()) {
        return Err(Error::invalid(format!("seed particle has {} dims, bounds have {}", s.len(), bounds.len())));
    }
    let dims = bounds.len();
    let vmax: Vec<f64> = bounds.iter().map(|(lo, hi)| cfg.velocity_clamp * (hi - lo)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut eval = |x: &[f64]| {
        let v = objective(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut pos: Vec<Vec<f64>> = Vec::with_capacity(cfg.particles);
    let mut vel: Vec<Vec<f64>> = Vec::with_capacity(cfg.particles);
    for p in 0..cfg.particles {
        let x: Vec<f64> = match seeds.get(p) {
            Some(s) => s.iter().zip(bounds).map(|(v, (lo, hi))| v.clamp(*lo, *hi)).collect(),
            None => bounds.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect(),
        };
        pos.push(x);
        vel.push(vmax.iter().map(|&m| rng.random_range(-m..=m)).collect());
    }
    let mut pbest = pos.clone();
    let mut pval: Vec<f64> = pos.iter().map(|x| eval(x)).collect();
    let mut g = argmin(&pval);
    let mut gbest = pbest[g].clone();
    let mut gval = pval[g];
    let mut history = vec![gval];

    for _ in 1..cfg.iterations {
        for p in 0..cfg.particles {
            for d in 0..dims {
                let r1: f64 = rng.random();
                let r2: f64 = rng.random();
                let v = cfg.inertia * vel[p][d]
                    + cfg.cognitive * r1 * (pbest[p][d] - pos[p][d])
                    + cfg.social * r2 * (gbest[d] - pos[p][d]);
                vel[p][d] = v.clamp(-vmax[d], vmax[d]);
                pos[p][d] = (pos[p][d] + vel[p][d]).clamp(bounds[d].0, bounds[d].1);
            }
            let v = eval(&pos[p]);
            if v < pval[p] {
                pval[p] = v;
                pbest[p].clone_from(&pos[p]);
            }
        }
        g = argmin(&pval);
        if pval[g] < gval {
            gval = pval[g];
            gbest.clone_from(&pbest[g]);
        }
        history.push(gval);
    }
    Ok(PsoResult { best: gbest, value: gval, history })
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub pose: Pose,
    pub coeffs: ShapeCoeffs,
    /// Rasterized fitted shape on the probability map's grid.
    pub mask: Mask,
    /// `1 - softDice` at the optimum, in `[0, 1]`.
    pub objective: f64,
    /// Probability-weighted centroid the translation search was centred on.
    pub centroid: [f64; 3],
    /// Moment-matched scale the log-scale search was centred on.
    pub base_scale: [f64; 3],
}

/// Soft-Dice objective of a posed shape against a probability map, evaluated
/// over the image voxels covered by the posed canonical grid (the soft shape is
/// zero elsewhere).
pub struct FitObjective<'a> {
    model: &'a ShapeModel,
    p: &'a ProbMap,
    k: usize,
    /// `[mean, phi_1 .. phi_k]` interleaved per canonical voxel.
    basis: Vec<f64>,
    sum_p: f64,
    temperature: f64,
}

impl<'a> FitObjective<'a> {
    pub fn new(model: &'a ShapeModel, p: &'a ProbMap, k: usize) -> Self {
        let k = k.min(model.num_modes());
        let n = model.grid().len();
        let mut basis = vec![0.0; n * (k + 1)];
        for (i, v) in model.mean_sdf().data().iter().enumerate() {
            basis[i * (k + 1)] = *v;
        }
        for (j, phi) in model.modes().iter().take(k).enumerate() {
            for (i, v) in phi.data().iter().enumerate() {
                basis[i * (k + 1) + j + 1] = *v;
            }
        }
        let sum_p = p.data().iter().sum();
        Self { model, p, k, basis, sum_p, temperature: FIT_TEMPERATURE_MM }
    }

    pub fn num_coeffs(&self) -> usize {
        self.k
    }

    /// `1 - softDice(sigmoid(-SDF / tau), p)` for a pose and the first `k` coefficients.
    pub fn evaluate(&self, pose: &Pose, b: &[f64]) -> f64 {
        let cg = self.model.grid();
        let ig = self.p.grid();
        let w = self.k + 1;
        let mut coef = vec![1.0; w];
        coef[1..].copy_from_slice(&b[..self.k]);
        let to_mm = pose.mean_scale() / self.temperature;

        // Pose is axis-aligned, so canonical indices separate per axis.
        let axis: [Vec<(usize, usize, f64)>; 3] = std::array::from_fn(|a| {
            let n = cg.dims[a];
            (0..ig.dims[a])
                .filter_map(|i| {
                    let x = ig.origin[a] + i as f64 * ig.spacing[a];
                    let q = (x - pose.translation[a]) / pose.scale[a];
                    let c = (q - cg.origin[a]) / cg.spacing[a];
                    if !(c >= 0.0 && c <= (n - 1) as f64) {
                        return None;
                    }
                    let (b0, t) = if n == 1 {
                        (0, 0.0)
                    } else {
                        let b0 = (c.floor() as usize).min(n - 2);
                        (b0, c - b0 as f64)
                    };
                    Some((i, b0, t))
                })
                .collect()
        });
        let [nx, ny] = [cg.dims[0], cg.dims[1]];
        let sx = usize::from(cg.dims[0] > 1);
        let sy = if cg.dims[1] > 1 { nx } else { 0 };
        let sz = if cg.dims[2] > 1 { nx * ny } else { 0 };
        let pd = self.p.data();
        let sdf_at = |idx: usize| -> f64 {
            let s = &self.basis[idx * w..(idx + 1) * w];
            s.iter().zip(&coef).map(|(a, c)| a * c).sum()
        };
        let mut s_qp = 0.0;
        let mut s_q = 0.0;
        for &(k, bz, tz) in &axis[2] {
            for &(j, by, ty) in &axis[1] {
                let row = (k * ig.dims[1] + j) * ig.dims[0];
                for &(i, bx, tx) in &axis[0] {
                    let i0 = bx + nx * (by + ny * bz);
                    let c00 = sdf_at(i0) * (1.0 - tx) + sdf_at(i0 + sx) * tx;
                    let c10 = sdf_at(i0 + sy) * (1.0 - tx) + sdf_at(i0 + sy + sx) * tx;
                    let c01 = sdf_at(i0 + sz) * (1.0 - tx) + sdf_at(i0 + sz + sx) * tx;
                    let c11 = sdf_at(i0 + sz + sy) * (1.0 - tx) + sdf_at(i0 + sz + sy + sx) * tx;
                    let sdf = (c00 * (1.0 - ty) + c10 * ty) * (1.0 - tz) + (c01 * (1.0 - ty) + c11 * ty) * tz;
                    let q = 1.0 / (1.0 + (sdf * to_mm).exp());
                    s_q += q;
                    s_qp += q * pd[row + i];
                }
            }
        }
        let dice = (2.0 * s_qp + crate::autodiff::DICE_EPS) / (s_q + self.sum_p + crate::autodiff::DICE_EPS);
        (1.0 - dice).clamp(0.0, 1.0)
    }
}

/// Probability-weighted centroid (mm).
pub fn prob_centroid(p: &ProbMap) -> Result<[f64; 3]> {
    let g = p.grid();
    let mut acc = [0.0; 3];
    let mut total = 0.0;
    for (idx, &w) in p.data().iter().enumerate() {
        if w > 0.0 {
            let [i, j, k] = g.coords(idx);
            let x = g.position(i, j, k);
            for a in 0..3 {
                acc[a] += w * x[a];
            }
            total += w;
        }
    }
    if total <= 0.0 {
        return Err(Error::degenerate("probability map has no mass"));
    }
    Ok(acc.map(|v| v / total))
}

/// Per-axis standard deviation of voxel positions where `inside` holds.
fn spread(grid: &Grid, inside: impl Fn(usize) -> bool) -> Option<[f64; 3]> {
    let mut n = 0.0;
    let mut s1 = [0.0; 3];
    let mut s2 = [0.0; 3];
    for idx in 0..grid.len() {
        if inside(idx) {
            let [i, j, k] = grid.coords(idx);
            let x = grid.position(i, j, k);
            n += 1.0;
            for a in 0..3 {
                s1[a] += x[a];
                s2[a] += x[a] * x[a];
            }
        }
    }
    if n == 0.0 {
        return None;
    }
    Some(std::array::from_fn(|a| (s2[a] / n - (s1[a] / n).powi(2)).max(0.0).sqrt()))
}

/// Scale that matches the mean shape's per-axis spread to the spread of the
/// thresholded map.
pub fn moment_scale(model: &ShapeModel, p: &ProbMap) -> Result<[f64; 3]> {
    let mean = model.mean_sdf().data();
    let sm = spread(model.grid(), |i| mean[i] < 0.0).ok_or_else(|| Error::degenerate("mean shape is empty"))?;
    let pd = p.data();
    let sp = spread(p.grid(), |i| pd[i] >= LOCALIZATION_THRESHOLD)
        .ok_or_else(|| Error::degenerate("probability map has no voxel above threshold"))?;
    let min_sp = p.grid().spacing;
    Ok(std::array::from_fn(|a| {
        let s = sp[a].max(0.5 * min_sp[a]);
        if sm[a] > 0.0 {
            s / sm[a]
        } else {
            1.0
        }
    }))
}

/// Fit the shape model to a probability map by PSO over
/// `(translation, log-scale, first coefficients)`.
pub fn fit_shape(model: &ShapeModel, p: &ProbMap, cfg: &PsoConfig) -> Result<FitResult> {
    let max_prob = p.as_volume().max();
    if !(max_prob >= LOCALIZATION_THRESHOLD) {
        return Err(Error::LocalizationFailure { max_prob, threshold: LOCALIZATION_THRESHOLD });
    }
    let centroid = prob_centroid(p)?;
    let base_scale = moment_scale(model, p)?;
    let obj = FitObjective::new(model, p, FIT_MAX_COEFFS);
    let k = obj.num_coeffs();

    let ln_range = 1.5f64.ln();
    let mut bounds = Vec::with_capacity(6 + k);
    for c in centroid {
        bounds.push((c - FIT_TRANSLATION_MM, c + FIT_TRANSLATION_MM));
    }
    for s in base_scale {
        bounds.push((s.ln() - ln_range, s.ln() + ln_range));
    }
    for l in &model.eigenvalues()[..k] {
        let r = 2.0 * l.sqrt();
        bounds.push((-r, r));
    }
    let mut seed = centroid.to_vec();
    seed.extend(base_scale.map(f64::ln));
    seed.extend(std::iter::repeat_n(0.0, k));

    let decode = |x: &[f64]| -> (Pose, Vec<f64>) {
        let pose = Pose { translation: [x[0], x[1], x[2]], scale: [x[3].exp(), x[4].exp(), x[5].exp()] };
        (pose, x[6..].to_vec())
    };
    // Zero-width coefficient ranges (zero eigenvalues) are pinned at 0.
    let free: Vec<usize> = (0..bounds.len()).filter(|&d| bounds[d].0 < bounds[d].1).collect();
    let expand = |y: &[f64]| -> Vec<f64> {
        let mut x = seed.clone();
        for (v, &d) in y.iter().zip(&free) {
            x[d] = *v;
        }
        x
    };
    let fb: Vec<(f64, f64)> = free.iter().map(|&d| bounds[d]).collect();
    let fs: Vec<f64> = free.iter().map(|&d| seed[d]).collect();
    let res = pso_minimize_seeded(
        |y| {
            let (pose, b) = decode(&expand(y));
            obj.evaluate(&pose, &b)
        },
        &fb,
        cfg,
        &[fs],
    )?;
    let (pose, b) = decode(&expand(&res.best));
    let mut coeffs = vec![0.0; model.num_modes()];
    coeffs[..k].copy_from_slice(&b);
    let mask = model.instance(&coeffs, &pose, p.grid())?;
    Ok(FitResult { pose, coeffs, mask, objective: res.value, centroid, base_scale })
}

/// Tight box of the fitted mask grown by `margin_mm` per side, clipped to the image.
pub fn extract_box(fit: &FitResult, margin_mm: f64) -> Result<Aabb> {
    if fit.mask.is_empty() {
        return Err(Error::degenerate("fitted mask is empty"));
    }
    if !(margin_mm >= 0.0) {
        return Err(Error::invalid(format!("box margin must be >= 0, got {margin_mm}")));
    }
    Ok(tight_box(&fit.mask)?.expanded_clipped(margin_mm, &fit.mask.grid().bounds()))
}

/// Extent of the local network's input and how many voxels the box spans.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalGeometry {
    pub dims: [usize; 3],
    pub box_voxels: [f64; 3],
}

impl Default for LocalGeometry {
    fn default() -> Self {
        Self { dims: [128, 128, 72], box_voxels: [80.0, 80.0, 48.0] }
    }
}

impl LocalGeometry {
    /// Both extents multiplied by `factor` (dims rounded).
    pub fn scaled(factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::invalid(format!("scale factor must be > 0, got {factor}")));
        }
        let d = Self::default();
        Ok(Self {
            dims: d.dims.map(|n| ((n as f64 * factor).round() as usize).max(1)),
            box_voxels: d.box_voxels.map(|v| v * factor),
        })
    }
}

/// Mapping between the local network grid and physical space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxTransform {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub spacing: [f64; 3],
    pub dims: [usize; 3],
}

impl BoxTransform {
    pub fn new(b: &Aabb, geom: &LocalGeometry) -> Result<Self> {
        let size = b.size();
        if size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::degenerate(format!("box size must be > 0 per axis, got {size:?}")));
        }
        let spacing = std::array::from_fn(|a| size[a] / geom.box_voxels[a]);
        Ok(Self { center: b.center(), size, spacing, dims: geom.dims })
    }

    pub fn grid(&self) -> Grid {
        Grid::centered(self.dims, self.spacing, self.center).expect("validated box")
    }
}

/// Resample `image` onto the local grid of `b` and normalize it.
pub fn resample_local(image: &Volume, b: &Aabb, geom: &LocalGeometry) -> Result<(Volume, BoxTransform)> {
    let t = BoxTransform::new(b, geom)?;
    let local = normalize(&resample_to_grid(image, &t.grid()))?;
    Ok((local, t))
}

/// Local probability map back on `target`; zero outside the local field of view.
pub fn map_back(local: &ProbMap, t: &BoxTransform, target: &Grid) -> Result<ProbMap> {
    if local.grid().dims != t.dims {
        return Err(Error::invalid(format!(
            "local map dims {:?} do not match transform dims {:?}",
            local.grid().dims,
            t.dims
        )));
    }
    let placed = local.as_volume().clone().with_grid(t.grid())?;
    Ok(ProbMap::clamped(resample_to_grid(&placed, target)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapemodel::{alignment, ShapeModel};

    fn sphere_fn(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    #[test]
    fn pso_sphere() {
        let bounds = vec![(-5.0, 5.0); 6];
        let cfg = PsoConfig { seed: 3, ..PsoConfig::default() };
        let r = pso_minimize(sphere_fn, &bounds, &cfg).unwrap();
        assert!(r.value < 1e-3, "{}", r.value);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(r.history.len(), cfg.iterations);
    }

    #[test]
    fn pso_single_particle_single_iteration() {
        let bounds = vec![(-5.0, 5.0); 3];
        let cfg = PsoConfig { particles: 1, iterations: 1, seed: 11, ..PsoConfig::default() };
        let r = pso_minimize(sphere_fn, &bounds, &cfg).unwrap();
        assert_eq!(r.value, sphere_fn(&r.best));
        let mut count = 0;
        pso_minimize(
            |x| {
                count += 1;
                sphere_fn(x)
            },
            &bounds,
            &cfg,
        )
        .unwrap();
        assert_eq!(count, 1);
    }

    #[test]
    fn pso_deterministic_and_seeded() {
        let bounds = vec![(-3.0, 3.0); 4];
        let cfg = PsoConfig { particles: 10, iterations: 15, seed: 7, ..PsoConfig::default() };
        let a = pso_minimize(sphere_fn, &bounds, &cfg).unwrap();
        let b = pso_minimize(sphere_fn, &bounds, &cfg).unwrap();
        assert_eq!(a, b);
        let c = pso_minimize(sphere_fn, &bounds, &PsoConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.best, c.best);
        // A seeded optimum is never lost.
        let s = pso_minimize_seeded(sphere_fn, &bounds, &cfg, &[vec![0.0; 4]]).unwrap();
        assert_eq!(s.value, 0.0);
    }

    #[test]
    fn pso_never_worse_than_initial_best() {
        let bounds = vec![(-4.0, 4.0); 5];
        for seed in 0..10 {
            let f = |x: &[f64]| x.iter().map(|v| (v * 3.0).sin() + 0.1 * v * v).sum::<f64>();
            let cfg = PsoConfig { particles: 8, iterations: 20, seed, ..PsoConfig::default() };
            let r = pso_minimize(f, &bounds, &cfg).unwrap();
            assert!(r.value <= r.history[0]);
        }
    }

    #[test]
    fn pso_rejects_bad_input() {
        let cfg = PsoConfig::default();
        assert!(pso_minimize(sphere_fn, &[(1.0, 1.0)], &cfg).is_err());
        assert!(pso_minimize(sphere_fn, &[(0.0, f64::INFINITY)], &cfg).is_err());
        assert!(pso_minimize(sphere_fn, &[(0.0, 1.0)], &PsoConfig { particles: 0, ..cfg }).is_err());
        assert!(pso_minimize(sphere_fn, &[(0.0, 1.0)], &PsoConfig { inertia: 1.0, ..cfg }).is_err());
    }

    fn ellipsoid(grid: &Grid, c: [f64; 3], r: [f64; 3]) -> Mask {
        Mask::from_fn(*grid, |p| (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0)
    }

    fn small_model() -> ShapeModel {
        let g = Grid::centered([64, 64, 48], [1.0; 3], [0.0; 3]).unwrap();
        let masks: Vec<Mask> = (0..5)
            .map(|i| {
                let base = ellipsoid(&g, [0.0; 3], [18.0, 15.0, 10.0]);
                let bump = ellipsoid(&g, [10.0, 0.0, 0.0], [6.0 + i as f64, 8.0, 6.0]);
                Mask::from_bools(g, &base.bits().iter().zip(bump.bits()).map(|(a, b)| *a || b).collect::<Vec<_>>())
                    .unwrap()
            })
            .collect();
        ShapeModel::build(&masks, 4).unwrap()
    }

    #[test]
    fn fit_recovers_known_instance() {
        let model = small_model();
        let grid = Grid::new([64, 64, 40], [1.5, 1.5, 1.5], [0.0; 3]).unwrap();
        let pose = Pose { scale: [0.45, 0.4, 0.5], translation: [50.0, 45.0, 28.0] };
        let mut b = vec![0.0; model.num_modes()];
        b[0] = model.eigenvalues()[0].sqrt();
        let truth = model.instance(&b, &pose, &grid).unwrap();
        let p = ProbMap::from(truth.clone());
        let fit = fit_shape(&model, &p, &PsoConfig { seed: 1, ..PsoConfig::default() }).unwrap();
        let tb = tight_box(&truth).unwrap();
        let fb = tight_box(&fit.mask).unwrap();
        for a in 0..3 {
            assert!((tb.center()[a] - fb.center()[a]).abs() <= 2.0 * grid.spacing[a], "{tb:?} vs {fb:?}");
            assert!((tb.size()[a] - fb.size()[a]).abs() <= 3.0 * grid.spacing[a], "{tb:?} vs {fb:?}");
        }
        let inter = truth.bits().iter().zip(fit.mask.bits()).filter(|(x, y)| **x && *y).count();
        let dice = 2.0 * inter as f64 / (truth.count() + fit.mask.count()) as f64;
        assert!(dice > 0.9, "dice {dice}");
        assert!((0.0..=1.0).contains(&fit.objective));

        // The fit beats the seeded mean-shape guess.
        let obj = FitObjective::new(&model, &p, FIT_MAX_COEFFS);
        let guess = Pose { scale: fit.base_scale, translation: fit.centroid };
        assert!(fit.objective <= obj.evaluate(&guess, &vec![0.0; obj.num_coeffs()]));
    }

    #[test]
    fn mean_shape_at_centre_gives_zero_translation() {
        let model = small_model();
        let grid = Grid::centered([64, 64, 48], [1.0; 3], [0.0; 3]).unwrap();
        let mean = model.instance(&[], &Pose { scale: [0.4; 3], translation: [0.0; 3] }, &grid).unwrap();
        let fit = fit_shape(&model, &ProbMap::from(mean), &PsoConfig { seed: 4, ..PsoConfig::default() }).unwrap();
        for a in 0..3 {
            assert!(fit.pose.translation[a].abs() <= 2.0, "{:?}", fit.pose);
        }
    }

    #[test]
    fn fit_objective_matches_direct_soft_dice() {
        let model = small_model();
        let grid = Grid::centered([40, 40, 30], [1.0; 3], [0.0; 3]).unwrap();
        let p = ProbMap::from(ellipsoid(&grid, [1.0, -1.0, 0.5], [8.0, 6.0, 4.0]));
        let pose = Pose { scale: [0.5, 0.45, 0.4], translation: [0.5, 0.0, 0.0] };
        let b: Vec<f64> = model.eigenvalues().iter().map(|l| 0.5 * l.sqrt()).collect();
        let obj = FitObjective::new(&model, &p, FIT_MAX_COEFFS);
        let got = obj.evaluate(&pose, &b);

        let sdf = model.sdf(&b).unwrap();
        let (mut sqp, mut sq) = (0.0, 0.0);
        for idx in 0..grid.len() {
            let [i, j, k] = grid.coords(idx);
            let q = pose.to_canonical(grid.position(i, j, k));
            let ci = model.grid().continuous_index(q);
            if let Some(s) = crate::volume::sample_trilinear(&sdf, ci) {
                let soft = 1.0 / (1.0 + (s * pose.mean_scale() / FIT_TEMPERATURE_MM).exp());
                sq += soft;
                sqp += soft * p.data()[idx];
            }
        }
        let sp: f64 = p.data().iter().sum();
        let eps = crate::autodiff::DICE_EPS;
        let want = 1.0 - (2.0 * sqp + eps) / (sq + sp + eps);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn fit_rejects_empty_map() {
        let model = small_model();
        let grid = Grid::centered([20, 20, 20], [1.0; 3], [0.0; 3]).unwrap();
        let p = ProbMap::from_volume(Volume::filled(grid, 0.3)).unwrap();
        match fit_shape(&model, &p, &PsoConfig::default()) {
            Err(Error::LocalizationFailure { max_prob, .. }) => assert!((max_prob - 0.3).abs() < 1e-12),
            other => panic!("expected localization failure, got {other:?}"),
        }
    }

    #[test]
    fn box_margin_and_clipping() {
        let grid = Grid::new([50, 50, 50], [1.0; 3], [0.0; 3]).unwrap();
        let mask = ellipsoid(&grid, [25.0, 25.0, 10.0], [8.0, 6.0, 8.0]);
        let fit = FitResult {
            pose: alignment(&mask).unwrap(),
            coeffs: vec![],
            mask: mask.clone(),
            objective: 0.0,
            centroid: [0.0; 3],
            base_scale: [1.0; 3],
        };
        let tb = tight_box(&mask).unwrap();
        assert_eq!(extract_box(&fit, 0.0).unwrap(), tb);
        let b5 = extract_box(&fit, 5.0).unwrap();
        assert_eq!(b5.size()[0], tb.size()[0] + 10.0);
        assert_eq!(b5.start[2], 0.0);
    }

    #[test]
    fn local_spacing_arithmetic() {
        let geom = LocalGeometry::default();
        let mk = |s: [f64; 3]| BoxTransform::new(&Aabb { start: [0.0; 3], end: s }, &geom).unwrap().spacing;
        assert_eq!(mk([40.0, 32.0, 36.0]), [0.5, 0.4, 0.75]);
        assert_eq!(mk([80.0, 80.0, 48.0]), [1.0, 1.0, 1.0]);
        assert_eq!(mk([160.0, 160.0, 96.0]), [2.0, 2.0, 2.0]);
        assert!(BoxTransform::new(&Aabb { start: [0.0; 3], end: [1.0, 0.0, 1.0] }, &geom).is_err());
        let half = LocalGeometry::scaled(0.5).unwrap();
        assert_eq!(half.dims, [64, 64, 36]);
        assert_eq!(half.box_voxels, [40.0, 40.0, 24.0]);
    }

    #[test]
    fn local_box_spans_box_voxels() {
        let grid = Grid::new([100, 90, 60], [1.0, 1.0, 1.5], [0.0; 3]).unwrap();
        let mask = ellipsoid(&grid, [50.0, 40.0, 45.0], [20.0, 15.0, 18.0]);
        let b = tight_box(&mask).unwrap();
        let geom = LocalGeometry::default();
        let t = BoxTransform::new(&b, &geom).unwrap();
        let local = Mask::from_predicate(&resample_to_grid(mask.as_volume(), &t.grid()), |v| v >= 0.5);
        let lb = tight_box(&local).unwrap();
        for a in 0..3 {
            let vox = lb.size()[a] / t.spacing[a];
            assert!((vox - geom.box_voxels[a]).abs() <= 2.0, "axis {a}: {vox}");
        }
    }

    #[test]
    fn map_back_identity_and_fov() {
        let target = Grid::new([100, 100, 60], [1.0; 3], [0.0; 3]).unwrap();
        let b = Aabb { start: [10.5, 10.5, 6.5], end: [90.5, 90.5, 54.5] };
        let t = BoxTransform::new(&b, &LocalGeometry::default()).unwrap();
        assert_eq!(t.spacing, [1.0; 3]);
        let lg = t.grid();
        let smooth = |p: [f64; 3]| 0.5 + 0.4 * (p[0] * 0.05).sin() * (p[1] * 0.04).cos();
        let local = ProbMap::from_volume(Volume::from_fn(lg, smooth)).unwrap();
        let back = map_back(&local, &t, &target).unwrap();
        for idx in (0..target.len()).step_by(97) {
            let [i, j, k] = target.coords(idx);
            let p = target.position(i, j, k);
            if lg.bounds().contains(p, 1e-9) {
                assert!((back.data()[idx] - smooth(p)).abs() < 1e-5);
            }
        }

        let c = ProbMap::from_volume(Volume::filled(lg, 0.8)).unwrap();
        let big = Grid::new([200, 200, 120], [1.0; 3], [-50.0; 3]).unwrap();
        let back = map_back(&c, &t, &big).unwrap();
        for idx in (0..big.len()).step_by(101) {
            let [i, j, k] = big.coords(idx);
            let p = big.position(i, j, k);
            let want = if lg.bounds().contains(p, 1e-9) { 0.8 } else { 0.0 };
            assert!((back.data()[idx] - want).abs() < 1e-9, "{p:?}");
        }
    }

    #[test]
    fn local_round_trip_smooth_field() {
        let grid = Grid::new([96, 96, 60], [1.0; 3], [0.0; 3]).unwrap();
        let f = |p: [f64; 3]| 0.5 + 0.3 * (p[0] * 0.07).sin() * (p[2] * 0.05).cos();
        let v = Volume::from_fn(grid, f);
        let b = Aabb { start: [30.0, 25.0, 20.0], end: [62.0, 70.0, 44.0] };
        let t = BoxTransform::new(&b, &LocalGeometry::default()).unwrap();
        let local = ProbMap::from_volume(resample_to_grid(&v, &t.grid())).unwrap();
        let back = map_back(&local, &t, &grid).unwrap();
        for idx in 0..grid.len() {
            let [i, j, k] = grid.coords(idx);
            let p = grid.position(i, j, k);
            if b.contains(p, 0.0) {
                assert!((back.data()[idx] - f(p)).abs() < 0.05);
            }
        }
    }

    #[test]
    fn resample_local_normalizes() {
        let grid = Grid::new([60, 60, 40], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume::from_fn(grid, |p| 3.0 + p[0] * 0.1);
        let b = Aabb { start: [10.0; 3], end: [50.0, 50.0, 30.0] };
        let (local, t) = resample_local(&v, &b, &LocalGeometry::default()).unwrap();
        assert_eq!(local.dims(), [128, 128, 72]);
        assert!(local.mean().abs() < 1e-9);
        assert!((local.std() - 1.0).abs() < 1e-9);
        assert_eq!(t.spacing, [0.5, 0.5, 20.0 / 48.0]);
    }
}
