//! Binary morphology with arbitrary structuring elements.
//!
//! Elements are masks with odd dims whose centre voxel is the origin. Voxels
//! outside the image are background.

use super::{Grid, Mask};
use crate::error::{Error, Result};

/// Ball of physical radius `radius_mm` rasterized at `spacing`.
pub fn sphere_element(radius_mm: f64, spacing: [f64; 3]) -> Result<Mask> {
    if !(radius_mm > 0.0) {
        return Err(Error::invalid(format!("element radius must be > 0, got {radius_mm}")));
    }
    let half: [usize; 3] = std::array::from_fn(|a| (radius_mm / spacing[a]).floor() as usize);
    let dims = half.map(|h| 2 * h + 1);
    let grid = Grid::centered(dims, spacing, [0.0; 3])?;
    let r2 = radius_mm * radius_mm;
    Ok(Mask::from_fn(grid, |p| p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= r2 + 1e-9))
}

fn offsets(elem: &Mask) -> Result<Vec<[isize; 3]>> {
    let g = elem.grid();
    if g.dims.iter().any(|d| d % 2 == 0) {
        return Err(Error::invalid(format!("element dims must be odd, got {:?}", g.dims)));
    }
    let c = g.dims.map(|d| (d / 2) as isize);
    let mut out = Vec::new();
    for k in 0..g.dims[2] {
        for j in 0..g.dims[1] {
            for i in 0..g.dims[0] {
                if elem.get(i, j, k) {
                    out.push([i as isize - c[0], j as isize - c[1], k as isize - c[2]]);
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("structuring element is empty"));
    }
    Ok(out)
}

#[inline]
fn shifted(g: &Grid, c: [usize; 3], e: [isize; 3], sign: isize) -> Option<usize> {
    let mut p = [0usize; 3];
    for a in 0..3 {
        let v = c[a] as isize + sign * e[a];
        if v < 0 || v >= g.dims[a] as isize {
            return None;
        }
        p[a] = v as usize;
    }
    Some(g.index(p[0], p[1], p[2]))
}

/// Voxel kept iff every element translate lands on foreground.
pub fn erode(m: &Mask, elem: &Mask) -> Result<Mask> {
    let offs = offsets(elem)?;
    let g = *m.grid();
    let bits = m.bits();
    let mut out = vec![false; g.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        if !bits[idx] && offs.contains(&[0, 0, 0]) {
            continue;
        }
        let c = g.coords(idx);
        *o = offs.iter().all(|&e| shifted(&g, c, e, 1).is_some_and(|n| bits[n]));
    }
    Mask::from_bools(g, &out)
}

/// Union of element translates placed at every foreground voxel.
pub fn dilate(m: &Mask, elem: &Mask) -> Result<Mask> {
    let offs = offsets(elem)?;
    let g = *m.grid();
    let mut out = vec![false; g.len()];
    for idx in 0..g.len() {
        if !m.at(idx) {
            continue;
        }
        let c = g.coords(idx);
        for &e in &offs {
            if let Some(n) = shifted(&g, c, e, 1) {
                out[n] = true;
            }
        }
    }
    Mask::from_bools(g, &out)
}

/// Opening: erosion followed by dilation.
pub fn morph_open(m: &Mask, elem: &Mask) -> Result<Mask> {
    dilate(&erode(m, elem)?, elem)
}

/// 6-connected component labels (0 = background, 1.. = components in scan order).
fn label_components(m: &Mask) -> (Vec<u32>, Vec<usize>) {
    let g = *m.grid();
    let mut labels = vec![0u32; g.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for seed in 0..g.len() {
        if !m.at(seed) || labels[seed] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        let mut size = 0;
        labels[seed] = id;
        stack.push(seed);
        while let Some(idx) = stack.pop() {
            size += 1;
            let c = g.coords(idx);
            for e in [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]] {
                if let Some(n) = shifted(&g, c, e, 1) {
                    if m.at(n) && labels[n] == 0 {
                        labels[n] = id;
                        stack.push(n);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Number of 6-connected foreground components.
pub fn count_components(m: &Mask) -> usize {
    label_components(m).1.len()
}

/// Largest 6-connected component (ties go to the first in scan order).
pub fn largest_component(m: &Mask) -> Mask {
    let (labels, sizes) = label_components(m);
    let Some(best) = (0..sizes.len()).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i))) else {
        return m.clone();
    };
    let id = best as u32 + 1;
    let bits: Vec<bool> = labels.iter().map(|&l| l == id).collect();
    Mask::from_bools(*m.grid(), &bits).expect("label grid matches mask grid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Opening as the union of all element placements that fit inside `m`.
    fn brute_open(m: &Mask, elem: &Mask) -> Vec<bool> {
        let g = *m.grid();
        let eg = *elem.grid();
        let c = eg.dims.map(|d| (d / 2) as isize);
        let mut placements = Vec::new();
        for idx in 0..g.len() {
            let [x, y, z] = g.coords(idx).map(|v| v as isize);
            let mut fits = true;
            let mut covered = Vec::new();
            'e: for k in 0..eg.dims[2] {
                for j in 0..eg.dims[1] {
                    for i in 0..eg.dims[0] {
                        if !elem.get(i, j, k) {
                            continue;
                        }
                        let p = [x + i as isize - c[0], y + j as isize - c[1], z + k as isize - c[2]];
                        if (0..3).any(|a| p[a] < 0 || p[a] >= g.dims[a] as isize)
                            || !m.get(p[0] as usize, p[1] as usize, p[2] as usize)
                        {
                            fits = false;
                            break 'e;
                        }
                        covered.push(g.index(p[0] as usize, p[1] as usize, p[2] as usize));
                    }
                }
            }
            if fits {
                placements.extend(covered);
            }
        }
        let mut out = vec![false; g.len()];
        for p in placements {
            out[p] = true;
        }
        out
    }

    #[test]
    fn sphere_element_counts() {
        let e = sphere_element(2.0, [1.0; 3]).unwrap();
        assert_eq!(e.grid().dims, [5, 5, 5]);
        assert_eq!(e.count(), 33);
        let e = sphere_element(0.4, [1.0; 3]).unwrap();
        assert_eq!(e.count(), 1);
        assert!(e.get(0, 0, 0));
        let e = sphere_element(2.0, [0.5, 0.5, 1.0]).unwrap();
        assert_eq!(e.grid().dims, [9, 9, 5]);
        assert!(e.get(4, 4, 2));
    }

    #[test]
    fn opening_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let g = Grid::new([16, 16, 16], [1.0; 3], [0.0; 3]).unwrap();
        let elems = [
            sphere_element(1.0, [1.0; 3]).unwrap(),
            sphere_element(1.5, [1.0; 3]).unwrap(),
            sphere_element(2.0, [1.0; 3]).unwrap(),
        ];
        for trial in 0..24 {
            let p = 0.5 + 0.02 * trial as f64;
            let bits: Vec<bool> = (0..g.len()).map(|_| rng.random_bool(p.min(0.95))).collect();
            let m = Mask::from_bools(g, &bits).unwrap();
            let elem = &elems[trial % 3];
            assert_eq!(morph_open(&m, elem).unwrap().bits(), brute_open(&m, elem));
        }
    }

    #[test]
    fn solid_cube_keeps_interior_and_rounds_corners() {
        let g = Grid::new([20, 20, 20], [1.0; 3], [0.0; 3]).unwrap();
        let m = Mask::from_fn(g, |p| (0..3).all(|a| (3.0..=16.0).contains(&p[a])));
        let e = sphere_element(2.0, [1.0; 3]).unwrap();
        let o = morph_open(&m, &e).unwrap();
        assert_eq!(o.bits(), brute_open(&m, &e));
        assert!(o.get(10, 10, 10) && o.get(3, 10, 10));
        assert!(!o.get(3, 3, 3));
    }

    #[test]
    fn isolated_voxel_removed_and_empty_stays_empty() {
        let g = Grid::new([9, 9, 9], [1.0; 3], [0.0; 3]).unwrap();
        let e = sphere_element(2.0, [1.0; 3]).unwrap();
        let mut m = Mask::empty(g);
        assert!(morph_open(&m, &e).unwrap().is_empty());
        m.set(4, 4, 4, true);
        assert!(morph_open(&m, &e).unwrap().is_empty());
    }

    #[test]
    fn rejects_even_or_empty_elements() {
        let g = Grid::new([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        let m = Mask::empty(g);
        let even = Mask::empty(Grid::new([2, 3, 3], [1.0; 3], [0.0; 3]).unwrap()).complement();
        assert!(erode(&m, &even).is_err());
        let empty = Mask::empty(Grid::new([3, 3, 3], [1.0; 3], [0.0; 3]).unwrap());
        assert!(dilate(&m, &empty).is_err());
    }

    #[test]
    fn components_counted_and_largest_kept() {
        let g = Grid::new([10, 6, 4], [1.0; 3], [0.0; 3]).unwrap();
        let m = Mask::from_fn(g, |p| (p[0] <= 2.0 && p[1] <= 2.0) || (p[0] >= 5.0 && p[2] <= 1.0));
        assert_eq!(count_components(&m), 2);
        let big = largest_component(&m);
        assert_eq!(big.count(), 5 * 6 * 2);
        assert_eq!(count_components(&big), 1);
        // Diagonal contact is not 6-connected.
        let d = Mask::from_fn(g, |p| (p[0] == 0.0 && p[1] == 0.0) || (p[0] == 1.0 && p[1] == 1.0));
        assert_eq!(count_components(&d), 2);
        assert_eq!(count_components(&Mask::empty(g)), 0);
    }
}
