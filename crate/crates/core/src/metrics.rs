//! Evaluation metrics: Dice score on binary masks, Hausdorff distance
//! between voxel grids with anisotropic spacing, and top-label expected
//! calibration error.

use thiserror::Error;

use crate::data::Mask;
use crate::fusion::FusedScores;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("masks have different grid dimensions")]
    DimMismatch,
    #[error("{which} mask is empty, Hausdorff distance is undefined")]
    EmptyMask { which: &'static str },
    #[error("calibration needs at least one bin")]
    InvalidBins,
}

/// `2|P∩G| / (|P| + |G|)`; two empty masks count as a perfect match.
pub fn dice_score(pred: &[bool], gt: &[bool]) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut g = 0usize;
    for (&a, &b) in pred.iter().zip(gt) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Exact Hausdorff distance between the voxel-center point sets of two
/// masks, Euclidean with per-axis spacing.
pub fn hausdorff(pred: &Mask, gt: &Mask, spacing: [f64; 3]) -> Result<f64, MetricsError> {
    let (da, db) = directed_distances(pred, gt, spacing)?;
    let max_a = da.into_iter().fold(0.0f64, f64::max);
    let max_b = db.into_iter().fold(0.0f64, f64::max);
    Ok(max_a.max(max_b).sqrt())
}

/// Quantile variant (e.g. `q = 0.95` for HD95): the larger of the two
/// directed distance quantiles.
pub fn hausdorff_quantile(
    pred: &Mask,
    gt: &Mask,
    spacing: [f64; 3],
    q: f64,
) -> Result<f64, MetricsError> {
    let (mut da, mut db) = directed_distances(pred, gt, spacing)?;
    let pick = |d: &mut Vec<f64>| {
        d.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
        let idx = ((q * d.len() as f64).ceil() as usize).clamp(1, d.len()) - 1;
        d[idx]
    };
    Ok(pick(&mut da).max(pick(&mut db)).sqrt())
}

/// Squared point-to-set distances in both directions.
fn directed_distances(
    pred: &Mask,
    gt: &Mask,
    spacing: [f64; 3],
) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    if pred.dims() != gt.dims() {
        return Err(MetricsError::DimMismatch);
    }
    if pred.count() == 0 {
        return Err(MetricsError::EmptyMask { which: "predicted" });
    }
    if gt.count() == 0 {
        return Err(MetricsError::EmptyMask { which: "ground-truth" });
    }
    Ok((
        directed_sq(pred, gt, spacing),
        directed_sq(gt, pred, spacing),
    ))
}

/// For each voxel of `from`, squared distance to the nearest voxel of
/// `to`. The nearest member of `to` for an outside point always lies on
/// the 6-boundary of `to`, so only boundary voxels are scanned.
fn directed_sq(from: &Mask, to: &Mask, spacing: [f64; 3]) -> Vec<f64> {
    let boundary = boundary_points(to, spacing);
    let [sx, sy, sz] = spacing;
    let mut out = Vec::with_capacity(from.count());
    for (x, y, z) in from.iter_set() {
        if to.get(x, y, z) {
            out.push(0.0);
            continue;
        }
        let px = x as f64 * sx;
        let py = y as f64 * sy;
        let pz = z as f64 * sz;
        let mut best = f64::INFINITY;
        for &[bx, by, bz] in &boundary {
            let d = (px - bx) * (px - bx) + (py - by) * (py - by) + (pz - bz) * (pz - bz);
            if d < best {
                best = d;
            }
        }
        out.push(best);
    }
    out
}

fn boundary_points(mask: &Mask, spacing: [f64; 3]) -> Vec<[f64; 3]> {
    let [dx, dy, dz] = mask.dims();
    let mut points = Vec::new();
    for (x, y, z) in mask.iter_set() {
        let on_edge = x == 0
            || y == 0
            || z == 0
            || x + 1 == dx
            || y + 1 == dy
            || z + 1 == dz
            || !mask.get(x - 1, y, z)
            || !mask.get(x + 1, y, z)
            || !mask.get(x, y - 1, z)
            || !mask.get(x, y + 1, z)
            || !mask.get(x, y, z - 1)
            || !mask.get(x, y, z + 1);
        if on_edge {
            points.push([
                x as f64 * spacing[0],
                y as f64 * spacing[1],
                z as f64 * spacing[2],
            ]);
        }
    }
    points
}

/// Top-label expected calibration error over equal-width confidence bins:
/// `Σ_b (n_b/N)·|acc_b − conf_b|`. Empty bins contribute nothing.
pub fn ece(scores: &[FusedScores], labels: &[usize], bins: usize) -> Result<f64, MetricsError> {
    if bins == 0 {
        return Err(MetricsError::InvalidBins);
    }
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    if scores.is_empty() {
        return Ok(0.0);
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for (s, &label) in scores.iter().zip(labels) {
        let pred = crate::fusion::predicted_label(s);
        let conf = s.values()[pred];
        let bin = ((conf * bins as f64) as usize).min(bins - 1);
        count[bin] += 1;
        conf_sum[bin] += conf;
        correct[bin] += (pred == label) as usize;
    }
    let n = scores.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let acc = correct[b] as f64 / count[b] as f64;
        let conf = conf_sum[b] / count[b] as f64;
        total += count[b] as f64 / n * (acc - conf).abs();
    }
    Ok(total)
}
