//! Overlap and extent metrics.

use crate::error::{Error, Result};
use crate::volume::{tight_box, Mask};

/// `2|A∩B| / (|A|+|B|)`; 1 when both masks are empty.
pub fn dice_hard(a: &Mask, b: &Mask) -> Result<f64> {
    if a.grid() != b.grid() {
        return Err(Error::invalid("dice of masks on different grids"));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (x, y) in a.as_volume().data().iter().zip(b.as_volume().data()) {
        let (x, y) = (*x != 0.0, *y != 0.0);
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Per-axis absolute differences of tight-box faces and sizes (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtentErrors {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub size: [f64; 3],
}

pub fn extent_errors(pred: &Mask, gt: &Mask) -> Result<ExtentErrors> {
    let p = tight_box(pred)?;
    let g = tight_box(gt)?;
    let (ps, gs) = (p.size(), g.size());
    Ok(ExtentErrors {
        start: std::array::from_fn(|a| (p.start[a] - g.start[a]).abs()),
        end: std::array::from_fn(|a| (p.end[a] - g.end[a]).abs()),
        size: std::array::from_fn(|a| (ps[a] - gs[a]).abs()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub dice: f64,
    /// `None` when either mask is empty.
    pub extent: Option<ExtentErrors>,
}

pub fn evaluate_masks(pred: &Mask, gt: &Mask) -> Result<EvalResult> {
    let dice = dice_hard(pred, gt)?;
    let extent = if pred.is_empty() || gt.is_empty() { None } else { Some(extent_errors(pred, gt)?) };
    Ok(EvalResult { dice, extent })
}

/// Header of the per-case report.
pub const REPORT_HEADER: &str = "id,dice,start_x,end_x,start_y,end_y,start_z,end_z";

/// One report row; missing extents are written as `nan`.
pub fn report_row(id: &str, r: &EvalResult) -> String {
    let mut s = format!("{id},{:.6}", r.dice);
    for a in 0..3 {
        match &r.extent {
            Some(e) => s.push_str(&format!(",{:.3},{:.3}", e.start[a], e.end[a])),
            None => s.push_str(",nan,nan"),
        }
    }
    s
}
