//! Strided "same" 3-D cross-correlation kernels: chunked im2col + GEMM, with a
//! shifted-row variant for unit stride.
//!
//! Padding is `(k - 1) / 2` on every side, so an output voxel `o` reads input
//! positions `o * stride + t - pad` for `t in 0..k`, and the output extent is
//! `ceil(n / stride)`.

/// Target im2col (or shifted-row) buffer size in values per chunk.
const CHUNK_VALUES: usize = 1 << 16;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

pub(crate) fn out_extent(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, in_dims: [usize; 3]) -> Self {
        let out_dims = in_dims.map(|n| out_extent(n, stride));
        Self { cin, cout, k, stride, in_dims, out_dims }
    }

    fn pad(&self) -> usize {
        (self.k - 1) / 2
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    pub fn in_len(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Output row ranges `(r0, r1)` over the flattened (y, z) output rows.
    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let ox = self.out_dims[0];
        let total_rows = self.out_dims[1] * self.out_dims[2];
        let per = (CHUNK_VALUES / (self.rows() * ox)).max(1);
        (0..total_rows).step_by(per).map(move |r0| (r0, (r0 + per).min(total_rows)))
    }

    /// Valid `ox` range for kernel tap `tx`.
    #[inline]
    fn x_range(&self, tx: usize) -> (usize, usize) {
        let p = self.pad();
        let s = self.stride;
        let nx = self.in_dims[0];
        let lo = if tx >= p { 0 } else { (p - tx).div_ceil(s) };
        // ox * s + tx - p <= nx - 1
        let hi = if nx + p < tx + 1 { 0 } else { (nx - 1 + p - tx) / s + 1 };
        (lo, hi.min(self.out_dims[0]))
    }

    /// Input (iy, iz) row for output row `r` at taps (ty, tz), if in bounds.
    #[inline]
    fn in_row(&self, r: usize, ty: usize, tz: usize) -> Option<usize> {
        let oy = r % self.out_dims[1];
        let oz = r / self.out_dims[1];
        let p = self.pad() as isize;
        let iy = (oy * self.stride + ty) as isize - p;
        let iz = (oz * self.stride + tz) as isize - p;
        if iy < 0 || iz < 0 || iy >= self.in_dims[1] as isize || iz >= self.in_dims[2] as isize {
            None
        } else {
            Some(iy as usize + self.in_dims[1] * iz as usize)
        }
    }

    fn im2col(&self, x: &[f64], r0: usize, r1: usize, col: &mut [f64]) {
        let k = self.k;
        let ox = self.out_dims[0];
        let nx = self.in_dims[0];
        let ncols = (r1 - r0) * ox;
        let in_len = self.in_len();
        let s = self.stride;
        let p = self.pad();
        for ci in 0..self.cin {
            let xc = &x[ci * in_len..(ci + 1) * in_len];
            for tz in 0..k {
                for ty in 0..k {
                    for tx in 0..k {
                        let row = ((ci * k + tz) * k + ty) * k + tx;
                        let dst_row = &mut col[row * ncols..(row + 1) * ncols];
                        let (lo, hi) = self.x_range(tx);
                        for r in r0..r1 {
                            let dst = &mut dst_row[(r - r0) * ox..(r - r0 + 1) * ox];
                            match self.in_row(r, ty, tz) {
                                Some(irow) if lo < hi => {
                                    dst[..lo].fill(0.0);
                                    dst[hi..].fill(0.0);
                                    let base = irow * nx;
                                    let start = base + lo * s + tx - p;
                                    if s == 1 {
                                        dst[lo..hi].copy_from_slice(&xc[start..start + (hi - lo)]);
                                    } else {
                                        for (o, d) in dst[lo..hi].iter_mut().enumerate() {
                                            *d = xc[start + o * s];
                                        }
                                    }
                                }
                                _ => dst.fill(0.0),
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, col: &[f64], r0: usize, r1: usize, dx: &mut [f64]) {
        let k = self.k;
        let ox = self.out_dims[0];
        let nx = self.in_dims[0];
        let ncols = (r1 - r0) * ox;
        let in_len = self.in_len();
        let s = self.stride;
        let p = self.pad();
        for ci in 0..self.cin {
            let dxc = &mut dx[ci * in_len..(ci + 1) * in_len];
            for tz in 0..k {
                for ty in 0..k {
                    for tx in 0..k {
                        let row = ((ci * k + tz) * k + ty) * k + tx;
                        let src_row = &col[row * ncols..(row + 1) * ncols];
                        let (lo, hi) = self.x_range(tx);
                        if lo >= hi {
                            continue;
                        }
                        for r in r0..r1 {
                            if let Some(irow) = self.in_row(r, ty, tz) {
                                let src = &src_row[(r - r0) * ox..(r - r0 + 1) * ox];
                                let start = irow * nx + lo * s + tx - p;
                                if s == 1 {
                                    for (d, v) in dxc[start..start + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                        *d += v;
                                    }
                                } else {
                                    for (o, v) in src[lo..hi].iter().enumerate() {
                                        dxc[start + o * s] += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Unit stride: rows are `(ci, tz, ty)` input rows zero-padded in x to
    /// `nx + k - 1`, so tap `tx` is the same buffer viewed `tx` columns later.
    /// Output columns use the padded row pitch; the last `k - 1` of each row
    /// are junk and discarded.
    fn padded_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn pitch(&self) -> usize {
        self.in_dims[0] + self.k - 1
    }

    fn padded_chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let total_rows = self.out_dims[1] * self.out_dims[2];
        let per = (CHUNK_VALUES / (self.padded_rows() * self.pitch())).max(1);
        (0..total_rows).step_by(per).map(move |r0| (r0, (r0 + per).min(total_rows)))
    }

    /// Fill the shifted-row buffer for output rows `r0..r1`; returns its row length.
    fn fill_padded(&self, x: &[f64], r0: usize, r1: usize, buf: &mut Vec<f64>) -> usize {
        let k = self.k;
        let nx = self.in_dims[0];
        let px = self.pitch();
        let p = self.pad();
        let len = (r1 - r0) * px + k - 1;
        let in_len = self.in_len();
        buf.clear();
        buf.resize(self.padded_rows() * len, 0.0);
        for ci in 0..self.cin {
            let xc = &x[ci * in_len..(ci + 1) * in_len];
            for tz in 0..k {
                for ty in 0..k {
                    let row = (ci * k + tz) * k + ty;
                    let dst = &mut buf[row * len..(row + 1) * len];
                    for r in r0..r1 {
                        if let Some(irow) = self.in_row(r, ty, tz) {
                            let at = (r - r0) * px + p;
                            dst[at..at + nx].copy_from_slice(&xc[irow * nx..(irow + 1) * nx]);
                        }
                    }
                }
            }
        }
        len
    }

    fn forward_unit_stride(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        let k = self.k;
        let rows = self.rows();
        let prows = self.padded_rows();
        let (ox, px) = (self.out_dims[0], self.pitch());
        let out_len = self.out_len();
        let mut buf = Vec::new();
        let mut tmp = Vec::new();
        for (r0, r1) in self.padded_chunks() {
            let len = self.fill_padded(x, r0, r1, &mut buf);
            let n = (r1 - r0) * px;
            tmp.clear();
            tmp.resize(self.cout * n, 0.0);
            for tx in 0..k {
                // SAFETY: view `tx` reads buf[tx + row * len + j] with j < n <= len - tx,
                // and w[tx + co * rows + row * k] with row < prows.
                unsafe {
                    matrixmultiply::dgemm(
                        n,
                        prows,
                        self.cout,
                        1.0,
                        buf.as_ptr().add(tx),
                        1,
                        len as isize,
                        w.as_ptr().add(tx),
                        k as isize,
                        rows as isize,
                        1.0,
                        tmp.as_mut_ptr(),
                        1,
                        n as isize,
                    );
                }
            }
            for co in 0..self.cout {
                for r in r0..r1 {
                    let src = &tmp[co * n + (r - r0) * px..][..ox];
                    let dst = &mut out[co * out_len + r * ox..][..ox];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
    }

    fn backward_weight_unit_stride(&self, x: &[f64], dout: &[f64], dw: &mut [f64]) {
        let k = self.k;
        let rows = self.rows();
        let prows = self.padded_rows();
        let (ox, px) = (self.out_dims[0], self.pitch());
        let out_len = self.out_len();
        let mut buf = Vec::new();
        let mut dpad = Vec::new();
        for (r0, r1) in self.padded_chunks() {
            let len = self.fill_padded(x, r0, r1, &mut buf);
            let n = (r1 - r0) * px;
            // Junk columns get zero gradient so they contribute nothing.
            dpad.clear();
            dpad.resize(self.cout * n, 0.0);
            for co in 0..self.cout {
                for r in r0..r1 {
                    dpad[co * n + (r - r0) * px..][..ox].copy_from_slice(&dout[co * out_len + r * ox..][..ox]);
                }
            }
            for tx in 0..k {
                // SAFETY: as in `forward_unit_stride`; dw[tx + co * rows + row * k] is in bounds.
                unsafe {
                    matrixmultiply::dgemm(
                        self.cout,
                        n,
                        prows,
                        1.0,
                        dpad.as_ptr(),
                        n as isize,
                        1,
                        buf.as_ptr().add(tx),
                        1,
                        len as isize,
                        1.0,
                        dw.as_mut_ptr().add(tx),
                        rows as isize,
                        k as isize,
                    );
                }
            }
        }
    }

    /// `out += W * im2col(x)` for one batch element.
    pub fn forward(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        if self.stride == 1 {
            self.forward_unit_stride(x, w, out)
        } else {
            self.forward_im2col(x, w, out)
        }
    }

    fn forward_im2col(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        let rows = self.rows();
        let out_len = self.out_len();
        let ox = self.out_dims[0];
        let mut col = Vec::new();
        for (r0, r1) in self.chunks() {
            let ncols = (r1 - r0) * ox;
            col.resize(rows * ncols, 0.0);
            self.im2col(x, r0, r1, &mut col);
            let o0 = r0 * ox;
            // SAFETY: all slices are sized for the (m, k, n) operands and strides below.
            unsafe {
                matrixmultiply::dgemm(
                    self.cout,
                    rows,
                    ncols,
                    1.0,
                    w.as_ptr(),
                    rows as isize,
                    1,
                    col.as_ptr(),
                    ncols as isize,
                    1,
                    1.0,
                    out.as_mut_ptr().add(o0),
                    out_len as isize,
                    1,
                );
            }
        }
    }

    /// `dx += col2im(W^T * dout)`; the adjoint of [`forward`](Self::forward).
    pub fn backward_data(&self, dout: &[f64], w: &[f64], dx: &mut [f64]) {
        if self.stride == 1 {
            // Unit stride: the adjoint is a "same" correlation of `dout` with the
            // spatially flipped, channel-transposed kernel.
            let taps = self.k * self.k * self.k;
            let mut flipped = vec![0.0; w.len()];
            for co in 0..self.cout {
                for ci in 0..self.cin {
                    let src = &w[(co * self.cin + ci) * taps..][..taps];
                    let dst = &mut flipped[(ci * self.cout + co) * taps..][..taps];
                    dst.iter_mut().zip(src.iter().rev()).for_each(|(d, s)| *d = *s);
                }
            }
            ConvGeom::new(self.cout, self.cin, self.k, 1, self.out_dims).forward(dout, &flipped, dx);
            return;
        }
        let rows = self.rows();
        let out_len = self.out_len();
        let ox = self.out_dims[0];
        let mut col = Vec::new();
        for (r0, r1) in self.chunks() {
            let ncols = (r1 - r0) * ox;
            col.resize(rows * ncols, 0.0);
            let o0 = r0 * ox;
            // SAFETY: see `forward`.
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    self.cout,
                    ncols,
                    1.0,
                    w.as_ptr(),
                    1,
                    rows as isize,
                    dout.as_ptr().add(o0),
                    out_len as isize,
                    1,
                    0.0,
                    col.as_mut_ptr(),
                    ncols as isize,
                    1,
                );
            }
            self.col2im_add(&col, r0, r1, dx);
        }
    }

    /// `dw += dout * im2col(x)^T`.
    pub fn backward_weight(&self, x: &[f64], dout: &[f64], dw: &mut [f64]) {
        if self.stride == 1 {
            self.backward_weight_unit_stride(x, dout, dw)
        } else {
            self.backward_weight_im2col(x, dout, dw)
        }
    }

    fn backward_weight_im2col(&self, x: &[f64], dout: &[f64], dw: &mut [f64]) {
        let rows = self.rows();
        let out_len = self.out_len();
        let ox = self.out_dims[0];
        let mut col = Vec::new();
        for (r0, r1) in self.chunks() {
            let ncols = (r1 - r0) * ox;
            col.resize(rows * ncols, 0.0);
            self.im2col(x, r0, r1, &mut col);
            let o0 = r0 * ox;
            // SAFETY: see `forward`.
            unsafe {
                matrixmultiply::dgemm(
                    self.cout,
                    ncols,
                    rows,
                    1.0,
                    dout.as_ptr().add(o0),
                    out_len as isize,
                    1,
                    col.as_ptr(),
                    1,
                    ncols as isize,
                    1.0,
                    dw.as_mut_ptr(),
                    rows as isize,
                    1,
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let [nx, ny, nz] = g.in_dims;
        let [ox, oy, oz] = g.out_dims;
        let k = g.k;
        let p = g.pad() as isize;
        let mut out = vec![0.0; g.cout * g.out_len()];
        for co in 0..g.cout {
            for z in 0..oz {
                for y in 0..oy {
                    for xo in 0..ox {
                        let mut acc = 0.0;
                        for ci in 0..g.cin {
                            for tz in 0..k {
                                for ty in 0..k {
                                    for tx in 0..k {
                                        let ix = (xo * g.stride + tx) as isize - p;
                                        let iy = (y * g.stride + ty) as isize - p;
                                        let iz = (z * g.stride + tz) as isize - p;
                                        if ix < 0 || iy < 0 || iz < 0 {
                                            continue;
                                        }
                                        let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
                                        if ix >= nx || iy >= ny || iz >= nz {
                                            continue;
                                        }
                                        acc += w[(((co * g.cin + ci) * k + tz) * k + ty) * k + tx]
                                            * x[ci * nx * ny * nz + ix + nx * (iy + ny * iz)];
                                    }
                                }
                            }
                        }
                        out[co * g.out_len() + xo + ox * (y + oy * z)] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (k, s, dims) in [(3, 1, [5, 6, 4]), (5, 2, [9, 7, 8]), (3, 4, [9, 9, 9]), (7, 1, [4, 5, 3])] {
            let g = ConvGeom::new(2, 3, k, s, dims);
            let x: Vec<f64> = (0..2 * g.in_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..3 * g.rows()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut out = vec![0.0; 3 * g.out_len()];
            g.forward(&x, &w, &mut out);
            for (a, b) in out.iter().zip(naive(&g, &x, &w)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn backward_data_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = ConvGeom::new(2, 3, 3, 2, [7, 6, 5]);
        let x: Vec<f64> = (0..2 * g.in_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..3 * g.out_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..3 * g.rows()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut ax = vec![0.0; y.len()];
        g.forward(&x, &w, &mut ax);
        let mut aty = vec![0.0; x.len()];
        g.backward_data(&y, &w, &mut aty);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn unit_stride_path_matches_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (cin, cout, k, dims) in [(2, 3, 3, [5, 6, 4]), (3, 2, 5, [7, 3, 6]), (1, 4, 1, [4, 4, 4]), (4, 8, 3, [40, 30, 9])] {
            let g = ConvGeom::new(cin, cout, k, 1, dims);
            let x: Vec<f64> = (0..cin * g.in_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..cout * g.rows()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..cout * g.out_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (mut a, mut b) = (vec![0.5; y.len()], vec![0.5; y.len()]);
            g.forward_unit_stride(&x, &w, &mut a);
            g.forward_im2col(&x, &w, &mut b);
            assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-10));
            let (mut a, mut b) = (vec![0.25; w.len()], vec![0.25; w.len()]);
            g.backward_weight_unit_stride(&x, &y, &mut a);
            g.backward_weight_im2col(&x, &y, &mut b);
            assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-9));
        }
    }

    #[test]
    fn out_extent_is_ceil() {
        assert_eq!(ConvGeom::new(1, 1, 3, 2, [128, 128, 72]).out_dims, [64, 64, 36]);
        assert_eq!(ConvGeom::new(1, 1, 3, 2, [9, 9, 9]).out_dims, [5, 5, 5]);
        assert_eq!(ConvGeom::new(1, 1, 9, 16, [128, 128, 72]).out_dims, [8, 8, 5]);
    }
}
