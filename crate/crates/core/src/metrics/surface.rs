//! Boundary extraction and boundary-to-boundary distances.
//!
//! Distances come from an exact Euclidean distance transform of the target
//! boundary (two passes of the lower-envelope-of-parabolas algorithm), read
//! off at the source boundary's pixels.

use crate::error::{Error, Result};

/// Physical size of a pixel as `(row, column)`.
pub type Spacing = (f64, f64);

pub const UNIT_SPACING: Spacing = (1.0, 1.0);

/// Foreground pixels with a 4-neighbour that is background or off-image.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |i: isize, j: isize| -> bool {
        i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w && mask[i as usize * w + j as usize]
    };
    (0..h * w)
        .map(|k| {
            let (i, j) = ((k / w) as isize, (k % w) as isize);
            mask[k] && !(at(i - 1, j) && at(i + 1, j) && at(i, j - 1) && at(i, j + 1))
        })
        .collect()
}

/// Squared distances along one line: `out[x] = min_q ((x - q)·s)² + f[q]`.
/// Entries of `f` that are infinite are not sources.
fn envelope_1d(f: &[f64], s: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    let pos = |i: usize| i as f64 * s;
    for q in (0..n).filter(|&q| f[q].is_finite()) {
        let mut sect = f64::NEG_INFINITY;
        while let Some(&r) = v.last() {
            sect = ((f[q] + pos(q) * pos(q)) - (f[r] + pos(r) * pos(r))) / (2.0 * (pos(q) - pos(r)));
            if sect <= z[v.len() - 1] {
                v.pop();
                z.pop();
                sect = f64::NEG_INFINITY;
            } else {
                break;
            }
        }
        if v.is_empty() {
            z.clear();
            z.push(f64::NEG_INFINITY);
        } else {
            z.push(sect);
        }
        v.push(q);
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (x, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(x) {
            k += 1;
        }
        let d = pos(x) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Euclidean distance from every pixel to the nearest `true` pixel of
/// `sources`; infinite everywhere when there are none.
pub fn distance_transform(sources: &[bool], h: usize, w: usize, spacing: Spacing) -> Vec<f64> {
    let mut grid: Vec<f64> = sources.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let mut line = vec![0.0; h.max(w)];
    let mut out = vec![0.0; h.max(w)];
    for j in 0..w {
        for i in 0..h {
            line[i] = grid[i * w + j];
        }
        envelope_1d(&line[..h], spacing.0, &mut out[..h]);
        for i in 0..h {
            grid[i * w + j] = out[i];
        }
    }
    for row in grid.chunks_mut(w.max(1)) {
        line[..w].copy_from_slice(row);
        envelope_1d(&line[..w], spacing.1, &mut out[..w]);
        row.copy_from_slice(&out[..w]);
    }
    grid.iter_mut().for_each(|v| *v = v.sqrt());
    grid
}

/// `rank = ⌈q·n / 100⌉` on an ascending slice.
pub fn percentile_nearest_rank(sorted: &[f64], q: u32) -> f64 {
    let n = sorted.len();
    let rank = ((q as usize * n).div_ceil(100)).clamp(1, n);
    sorted[rank - 1]
}

/// Directed nearest-neighbour distances between the boundaries of two masks.
#[derive(Clone, Debug)]
pub struct SurfaceDistances {
    /// For each prediction boundary pixel, distance to the nearest truth
    /// boundary pixel; ascending.
    pub pred_to_gt: Vec<f64>,
    /// The reverse direction; ascending.
    pub gt_to_pred: Vec<f64>,
}

impl SurfaceDistances {
    pub fn new(pred: &[bool], gt: &[bool], h: usize, w: usize, spacing: Spacing) -> Result<Self> {
        if pred.len() != h * w || gt.len() != h * w {
            return Err(Error::shape("surface distance", format!("masks for {h}x{w}")));
        }
        if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.0.is_finite() && spacing.1.is_finite()) {
            return Err(Error::InvalidArgument(format!("pixel spacing must be positive, got {spacing:?}")));
        }
        let bp = boundary(pred, h, w);
        let bg = boundary(gt, h, w);
        if !bp.contains(&true) {
            return Err(Error::EmptySurface("prediction"));
        }
        if !bg.contains(&true) {
            return Err(Error::EmptySurface("ground truth"));
        }
        let directed = |from: &[bool], to: &[bool]| {
            let dt = distance_transform(to, h, w, spacing);
            let mut d: Vec<f64> = from.iter().zip(&dt).filter(|(f, _)| **f).map(|(_, d)| *d).collect();
            d.sort_by(f64::total_cmp);
            d
        };
        Ok(Self {
            pred_to_gt: directed(&bp, &bg),
            gt_to_pred: directed(&bg, &bp),
        })
    }

    /// Max of the two directed 95th percentiles.
    pub fn hd95(&self) -> f64 {
        percentile_nearest_rank(&self.pred_to_gt, 95).max(percentile_nearest_rank(&self.gt_to_pred, 95))
    }

    pub fn hausdorff(&self) -> f64 {
        let last = |v: &[f64]| *v.last().expect("nonempty");
        last(&self.pred_to_gt).max(last(&self.gt_to_pred))
    }

    /// Symmetric mean of all directed distances.
    pub fn asd(&self) -> f64 {
        let n = self.pred_to_gt.len() + self.gt_to_pred.len();
        (self.pred_to_gt.iter().sum::<f64>() + self.gt_to_pred.iter().sum::<f64>()) / n as f64
    }
}

pub fn hd95(pred: &[bool], gt: &[bool], h: usize, w: usize, spacing: Spacing) -> Result<f64> {
    Ok(SurfaceDistances::new(pred, gt, h, w, spacing)?.hd95())
}

pub fn asd(pred: &[bool], gt: &[bool], h: usize, w: usize, spacing: Spacing) -> Result<f64> {
    Ok(SurfaceDistances::new(pred, gt, h, w, spacing)?.asd())
}
