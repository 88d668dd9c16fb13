//! Synthetic organ phantoms: a bumpy ellipsoid in a partial shell of brighter
//! tissue, blurred, with a multiplicative bias field and additive noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{largest_component, Grid, Mask, Volume};

pub const PHANTOM_DIMS: [usize; 3] = [128, 128, 72];
pub const PHANTOM_SPACING_MM: f64 = 1.0;

const INTERIOR: f64 = 1.0;
const SHELL: f64 = 1.4;
const BACKGROUND: f64 = 0.2;
const SHELL_MM: f64 = 4.0;
const BLUR_SIGMA_MM: f64 = 1.5;
const NOISE_STD: f64 = 0.05;
const MAX_BIAS: f64 = 0.2;
const MAX_PERTURBATION: f64 = 0.2;
/// In-plane semi-axis range (mm); the through-plane range is narrower so the
/// organ and its shell fit in 72 mm.
const SEMI_AXIS_XY: (f64, f64) = (15.0, 35.0);
const SEMI_AXIS_Z: (f64, f64) = (15.0, 25.0);
const EDGE_MARGIN_MM: f64 = 2.0;

/// Parameters of one phantom, kept for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomShape {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// Weights of the low-order radial perturbation terms.
    pub perturbation: [f64; 8],
    /// Direction the partial shell faces.
    pub shell_direction: [f64; 3],
}

fn basis(u: [f64; 3]) -> [f64; 8] {
    let [x, y, z] = u;
    [x, y, z, 2.0 * x * y, 2.0 * y * z, 2.0 * x * z, x * x - y * y, 0.5 * (3.0 * z * z - 1.0)]
}

impl PhantomShape {
    /// Normalized radius of `p` and the radial boundary in that direction.
    fn radial(&self, p: [f64; 3]) -> (f64, f64, [f64; 3]) {
        let d: [f64; 3] = std::array::from_fn(|a| (p[a] - self.center[a]) / self.semi_axes[a]);
        let rho = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if rho == 0.0 {
            return (0.0, 1.0, [0.0; 3]);
        }
        let u = d.map(|v| v / rho);
        let r = 1.0 + basis(u).iter().zip(&self.perturbation).map(|(b, c)| b * c).sum::<f64>();
        (rho, r, u)
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (rho, r, _) = self.radial(p);
        rho <= r
    }

    fn in_shell(&self, p: [f64; 3]) -> bool {
        let (rho, r, u) = self.radial(p);
        let mean_axis = (self.semi_axes[0] + self.semi_axes[1] + self.semi_axes[2]) / 3.0;
        let facing = u[0] * self.shell_direction[0] + u[1] * self.shell_direction[1] + u[2] * self.shell_direction[2];
        rho > r && rho <= r + SHELL_MM / mean_axis && facing > -0.3
    }

    fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let semi_axes = [
            rng.random_range(SEMI_AXIS_XY.0..=SEMI_AXIS_XY.1),
            rng.random_range(SEMI_AXIS_XY.0..=SEMI_AXIS_XY.1),
            rng.random_range(SEMI_AXIS_Z.0..=SEMI_AXIS_Z.1),
        ];
        let mut perturbation = [0.0f64; 8];
        perturbation.iter_mut().for_each(|c| *c = rng.random_range(-1.0..=1.0));
        let total: f64 = perturbation.iter().map(|c| c.abs()).sum();
        let amp = rng.random_range(0.05..=MAX_PERTURBATION);
        perturbation.iter_mut().for_each(|c| *c *= amp / total.max(1e-12));
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        let mut dir: [f64; 3] = [n.sample(rng), n.sample(rng), n.sample(rng)];
        let len = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt().max(1e-12);
        dir.iter_mut().for_each(|v| *v /= len);
        // Keep organ plus shell inside the field of view.
        let center = std::array::from_fn(|a| {
            let extent = PHANTOM_DIMS[a] as f64 * PHANTOM_SPACING_MM;
            let reach = semi_axes[a] * (1.0 + amp) + SHELL_MM + EDGE_MARGIN_MM;
            let (lo, hi) = (reach, extent - 1.0 - reach);
            if lo < hi {
                rng.random_range(lo..=hi)
            } else {
                0.5 * (extent - 1.0)
            }
        });
        Self { center, semi_axes, perturbation, shell_direction: dir }
    }
}

/// Separable Gaussian blur with edge clamping, truncated at 3 sigma.
pub fn gaussian_blur(v: &Volume, sigma_mm: f64) -> Result<Volume> {
    if !(sigma_mm > 0.0) {
        return Err(Error::invalid(format!("blur sigma must be > 0, got {sigma_mm}")));
    }
    let g = *v.grid();
    let mut cur = v.data().to_vec();
    let mut next = vec![0.0; cur.len()];
    for axis in 0..3 {
        let s = sigma_mm / g.spacing[axis];
        let half = (3.0 * s).ceil() as isize;
        let mut kernel: Vec<f64> = (-half..=half).map(|o| (-0.5 * (o as f64 / s).powi(2)).exp()).collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|w| *w /= total);
        let n = g.dims[axis] as isize;
        let stride = match axis {
            0 => 1,
            1 => g.dims[0],
            _ => g.dims[0] * g.dims[1],
        };
        for (idx, out) in next.iter_mut().enumerate() {
            let c = g.coords(idx)[axis] as isize;
            let base = idx - c as usize * stride;
            *out = kernel
                .iter()
                .enumerate()
                .map(|(t, w)| w * cur[base + (c + t as isize - half).clamp(0, n - 1) as usize * stride])
                .sum();
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Volume::new(g, cur)
}

/// One phantom image and its ground-truth mask.
pub fn make_phantom<R: Rng + ?Sized>(rng: &mut R) -> Result<(Volume, Mask, PhantomShape)> {
    let grid = Grid::new(PHANTOM_DIMS, [PHANTOM_SPACING_MM; 3], [0.0; 3])?;
    let shape = PhantomShape::random(rng);
    let mask = largest_component(&Mask::from_fn(grid, |p| shape.contains(p)));
    let labels = Volume::from_fn(grid, |p| {
        if shape.contains(p) {
            INTERIOR
        } else if shape.in_shell(p) {
            SHELL
        } else {
            BACKGROUND
        }
    });
    let mut image = gaussian_blur(&labels, BLUR_SIGMA_MM)?;

    let mut coeffs = [0.0f64; 4];
    coeffs.iter_mut().for_each(|c| *c = rng.random_range(-1.0..=1.0));
    let total: f64 = coeffs.iter().map(|c| c.abs()).sum();
    let amp = rng.random_range(0.0..=MAX_BIAS);
    coeffs.iter_mut().for_each(|c| *c *= amp / total.max(1e-12));
    let extent = grid.dims.map(|d| (d.max(2) - 1) as f64);
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    for (idx, v) in image.data_mut().iter_mut().enumerate() {
        let c = grid.coords(idx);
        let t: [f64; 3] = std::array::from_fn(|a| 2.0 * c[a] as f64 / extent[a] - 1.0);
        let bias = 1.0 + coeffs[0] * t[0] + coeffs[1] * t[1] + coeffs[2] * t[2] + coeffs[3] * t[0] * t[1];
        *v = *v * bias + noise.sample(rng);
    }
    Ok((image, mask, shape))
}

/// `n` phantoms drawn in sequence from `rng`.
pub fn make_phantoms<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<(Volume, Mask)>> {
    if n == 0 {
        return Err(Error::invalid("phantom count must be >= 1"));
    }
    (0..n).map(|_| make_phantom(rng).map(|(v, m, _)| (v, m))).collect()
}
