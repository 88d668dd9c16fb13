use super::{Grid, Volume};
use crate::error::{Error, Result};

const EDGE_TOL: f64 = 1e-9;

/// Trilinear sample at a fractional voxel index; `None` outside the support
/// `[0, n-1]` on any axis.
#[inline]
pub fn sample_trilinear(v: &Volume, ci: [f64; 3]) -> Option<f64> {
    let g = v.grid();
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let n = g.dims[a];
        let c = ci[a];
        if !(c >= -EDGE_TOL && c <= (n - 1) as f64 + EDGE_TOL) {
            return None;
        }
        let c = c.clamp(0.0, (n - 1) as f64);
        let f = c.floor();
        let mut b = f as usize;
        let mut t = c - f;
        if b + 1 >= n {
            // Upper edge (or single-voxel axis): fold onto the last cell.
            if n == 1 {
                b = 0;
                t = 0.0;
            } else {
                b = n - 2;
                t = c - b as f64;
            }
        }
        base[a] = b;
        frac[a] = t;
    }
    let d = v.data();
    let nx = g.dims[0];
    let nxy = nx * g.dims[1];
    let sx = if g.dims[0] > 1 { 1 } else { 0 };
    let sy = if g.dims[1] > 1 { nx } else { 0 };
    let sz = if g.dims[2] > 1 { nxy } else { 0 };
    let i0 = base[0] + nx * base[1] + nxy * base[2];
    let [tx, ty, tz] = frac;
    let c00 = d[i0] * (1.0 - tx) + d[i0 + sx] * tx;
    let c10 = d[i0 + sy] * (1.0 - tx) + d[i0 + sy + sx] * tx;
    let c01 = d[i0 + sz] * (1.0 - tx) + d[i0 + sz + sx] * tx;
    let c11 = d[i0 + sz + sy] * (1.0 - tx) + d[i0 + sz + sy + sx] * tx;
    let c0 = c00 * (1.0 - ty) + c10 * ty;
    let c1 = c01 * (1.0 - ty) + c11 * ty;
    Some(c0 * (1.0 - tz) + c1 * tz)
}

/// Trilinear sample with the index clamped into the grid (edge extension).
#[inline]
pub fn sample_trilinear_clamped(v: &Volume, ci: [f64; 3]) -> f64 {
    let dims = v.grid().dims;
    let c: [f64; 3] = std::array::from_fn(|a| {
        let x = ci[a];
        if x.is_nan() {
            0.0
        } else {
            x.clamp(0.0, (dims[a] - 1) as f64)
        }
    });
    sample_trilinear(v, c).expect("clamped index is inside the grid")
}

/// Trilinear resampling of `v` onto an arbitrary target grid; target voxels
/// outside `v`'s support read 0.
pub fn resample_to_grid(v: &Volume, target: &Grid) -> Volume {
    let src = v.grid();
    let mut out = Volume::zeros(*target);
    let data = out.data_mut();
    let mut idx = 0;
    for k in 0..target.dims[2] {
        for j in 0..target.dims[1] {
            for i in 0..target.dims[0] {
                let p = target.position(i, j, k);
                if let Some(val) = sample_trilinear(v, src.continuous_index(p)) {
                    data[idx] = val;
                }
                idx += 1;
            }
        }
    }
    out
}

/// Resample onto a grid of `target_dims` voxels at `target_spacing` centred at
/// `center` (mm).
pub fn resample(
    v: &Volume,
    target_spacing: [f64; 3],
    target_dims: [usize; 3],
    center: [f64; 3],
) -> Result<Volume> {
    if target_spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid(format!("target spacing must be > 0, got {target_spacing:?}")));
    }
    if target_dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("target dims must be >= 1, got {target_dims:?}")));
    }
    let grid = Grid::centered(target_dims, target_spacing, center)?;
    Ok(resample_to_grid(v, &grid))
}

/// Voxel counts needed to cover `grid`'s physical extent at `spacing`.
pub fn spanning_dims(grid: &Grid, spacing: [f64; 3]) -> [usize; 3] {
    let mut dims = [1usize; 3];
    for a in 0..3 {
        let extent = grid.dims[a] as f64 * grid.spacing[a];
        dims[a] = ((extent / spacing[a]).round() as usize).max(1);
    }
    dims
}
