//! Exact Euclidean distance transform (separable lower-envelope method) and the
//! signed distance map built on it.

use super::{Mask, Volume};
use crate::error::{Error, Result};

/// Signed distance in mm: negative inside, positive outside.
///
/// Each voxel gets the centre-to-centre distance to the nearest voxel of the
/// opposite class, less half the smallest spacing, so voxels adjacent to the
/// boundary sit at about `±h/2`.
pub fn signed_distance(m: &Mask) -> Result<Volume> {
    let n = m.count();
    if n == 0 {
        return Err(Error::degenerate("signed distance of an empty mask"));
    }
    if n == m.grid().len() {
        return Err(Error::degenerate("signed distance of a full mask"));
    }
    let g = *m.grid();
    let bits = m.bits();
    let to_fg = squared_edt(&g.dims, &g.spacing, |i| bits[i]);
    let to_bg = squared_edt(&g.dims, &g.spacing, |i| !bits[i]);
    let half = 0.5 * g.spacing.iter().copied().fold(f64::INFINITY, f64::min);
    let data = bits
        .iter()
        .enumerate()
        .map(|(i, &inside)| {
            if inside {
                -(to_bg[i].sqrt() - half)
            } else {
                to_fg[i].sqrt() - half
            }
        })
        .collect();
    Volume::new(g, data)
}

/// Squared distance (mm²) from every voxel to the nearest voxel where
/// `is_site` holds.
pub(crate) fn squared_edt(
    dims: &[usize; 3],
    spacing: &[f64; 3],
    is_site: impl Fn(usize) -> bool,
) -> Vec<f64> {
    let [nx, ny, nz] = *dims;
    let len = nx * ny * nz;
    let mut d: Vec<f64> = (0..len).map(|i| if is_site(i) { 0.0 } else { f64::INFINITY }).collect();
    let max_n = nx.max(ny).max(nz);
    let mut line = vec![0.0; max_n];
    let mut out = vec![0.0; max_n];
    let mut env = Envelope::with_capacity(max_n);

    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let w = spacing[axis] * spacing[axis];
        // Enumerate the starting index of every line along `axis`.
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..dims[ob] {
            for a in 0..dims[oa] {
                let start = a * strides[oa] + b * strides[ob];
                for t in 0..n {
                    line[t] = d[start + t * stride];
                }
                env.transform(&line[..n], w, &mut out[..n]);
                for t in 0..n {
                    d[start + t * stride] = out[t];
                }
            }
        }
    }
    d
}

struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self { v: Vec::with_capacity(n), z: Vec::with_capacity(n + 1) }
    }

    /// `out[p] = min_q w (p - q)^2 + f[q]`.
    fn transform(&mut self, f: &[f64], w: f64, out: &mut [f64]) {
        self.v.clear();
        self.z.clear();
        for q in 0..f.len() {
            if !f[q].is_finite() {
                continue;
            }
            loop {
                match self.v.last() {
                    None => {
                        self.v.push(q);
                        self.z.push(f64::NEG_INFINITY);
                        break;
                    }
                    Some(&r) => {
                        let s = ((f[q] + w * (q * q) as f64) - (f[r] + w * (r * r) as f64))
                            / (2.0 * w * (q - r) as f64);
                        if s <= *self.z.last().unwrap() {
                            self.v.pop();
                            self.z.pop();
                        } else {
                            self.v.push(q);
                            self.z.push(s);
                            break;
                        }
                    }
                }
            }
        }
        if self.v.is_empty() {
            out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (p, o) in out.iter_mut().enumerate() {
            while k + 1 < self.v.len() && self.z[k + 1] < p as f64 {
                k += 1;
            }
            let q = self.v[k];
            let dq = p as f64 - q as f64;
            *o = w * dq * dq + f[q];
        }
    }
}
