//! Multi-modality evidence fusion.
//!
//! Each source's contour function is weakened by a per-class reliability
//! vector (contextual discounting), the discounted contours are fused by
//! elementwise product, and the products are normalized into per-class
//! scores. Reliabilities live in a per-source-per-class matrix, stored
//! raw and squashed through a logistic on read.

use std::sync::Arc;

use thiserror::Error;

use crate::dst::{contextual_discount_contour, ContourFunction, DstError, Frame};
use crate::es::logistic;

/// Below this normalizing sum the fused products carry no information.
pub const DEGENERATE_EPS: f64 = 1e-30;

/// Direct products are fine for small `K·H`; beyond this the per-voxel
/// product runs in log space to keep far-from-one factors stable.
pub const LOG_SPACE_THRESHOLD: usize = 32;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("expected {expected} source contours, got {got}")]
    SourceCountMismatch { expected: usize, got: usize },
    #[error("contour frame does not match the reliability matrix frame")]
    FrameMismatch,
    #[error("degenerate fusion{}: all discounted products vanished", voxel_suffix(.0))]
    DegenerateFusion(Option<usize>),
    #[error("invalid scores: {0}")]
    InvalidScores(String),
    #[error(transparent)]
    Dst(#[from] DstError),
}

fn voxel_suffix(voxel: &Option<usize>) -> String {
    voxel.map(|n| format!(" at voxel {n}")).unwrap_or_default()
}

/// Per-source per-class reliability coefficients, kept as unconstrained
/// raw values; `β = logistic(raw)` stays strictly inside (0, 1) for
/// finite raw entries.
#[derive(Debug, Clone)]
pub struct ReliabilityMatrix {
    frame: Arc<Frame>,
    sources: usize,
    beta_raw: Vec<f64>, // H × K, row-major
}

impl ReliabilityMatrix {
    /// All-zero raw values: every β starts at 0.5.
    pub fn init(frame: Arc<Frame>, sources: usize) -> Self {
        let k = frame.class_count();
        ReliabilityMatrix {
            frame,
            sources,
            beta_raw: vec![0.0; sources * k],
        }
    }

    pub fn from_raw(
        frame: Arc<Frame>,
        sources: usize,
        beta_raw: Vec<f64>,
    ) -> Result<Self, FusionError> {
        if beta_raw.len() != sources * frame.class_count() {
            return Err(FusionError::InvalidScores(format!(
                "expected {}x{} raw entries, got {}",
                sources,
                frame.class_count(),
                beta_raw.len()
            )));
        }
        Ok(ReliabilityMatrix {
            frame,
            sources,
            beta_raw,
        })
    }

    pub fn frame(&self) -> &Arc<Frame> {
        &self.frame
    }

    pub fn sources(&self) -> usize {
        self.sources
    }

    pub fn beta(&self, source: usize, class: usize) -> f64 {
        logistic(self.beta_raw[source * self.frame.class_count() + class])
    }

    pub fn beta_row(&self, source: usize) -> Vec<f64> {
        let k = self.frame.class_count();
        self.beta_raw[source * k..(source + 1) * k]
            .iter()
            .map(|&r| logistic(r))
            .collect()
    }

    pub fn raw(&self) -> &[f64] {
        &self.beta_raw
    }

    pub fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.beta_raw
    }

    /// Single-source view: row `source` as its own 1×K matrix.
    pub fn row_matrix(&self, source: usize) -> ReliabilityMatrix {
        let k = self.frame.class_count();
        ReliabilityMatrix {
            frame: self.frame.clone(),
            sources: 1,
            beta_raw: self.beta_raw[source * k..(source + 1) * k].to_vec(),
        }
    }
}

/// Normalized per-class scores for one voxel: non-negative, sum to one.
#[derive(Debug, Clone)]
pub struct FusedScores {
    values: Vec<f64>,
}

impl FusedScores {
    pub fn new(values: Vec<f64>) -> Result<Self, FusionError> {
        if values.is_empty() {
            return Err(FusionError::InvalidScores("no classes".into()));
        }
        let mut sum = 0.0;
        for &v in &values {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(FusionError::InvalidScores(format!("score {v}")));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-10 {
            return Err(FusionError::InvalidScores(format!("scores sum to {sum}")));
        }
        Ok(FusedScores { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn class_count(&self) -> usize {
        self.values.len()
    }
}

/// Hard decision: argmax class, ties broken toward the lowest index.
pub fn predicted_label(scores: &FusedScores) -> usize {
    let mut best = 0;
    let mut best_v = scores.values[0];
    for (k, &v) in scores.values.iter().enumerate().skip(1) {
        if v > best_v {
            best_v = v;
            best = k;
        }
    }
    best
}

/// Discount each source's contour by its β row, multiply across sources,
/// normalize over classes.
pub fn fuse_voxel(
    contours: &[ContourFunction],
    beta: &ReliabilityMatrix,
) -> Result<FusedScores, FusionError> {
    let refs: Vec<&ContourFunction> = contours.iter().collect();
    fuse_refs(&refs, beta, None)
}

/// Elementwise [`fuse_voxel`] over `H × N` contours (outer index: source).
pub fn fuse_volume(
    per_source: &[Vec<ContourFunction>],
    beta: &ReliabilityMatrix,
) -> Result<Vec<FusedScores>, FusionError> {
    if per_source.len() != beta.sources {
        return Err(FusionError::SourceCountMismatch {
            expected: beta.sources,
            got: per_source.len(),
        });
    }
    let n = per_source.first().map_or(0, Vec::len);
    if per_source.iter().any(|s| s.len() != n) {
        return Err(FusionError::InvalidScores(
            "sources disagree on voxel count".into(),
        ));
    }
    (0..n)
        .map(|v| {
            let refs: Vec<&ContourFunction> = per_source.iter().map(|s| &s[v]).collect();
            fuse_refs(&refs, beta, Some(v))
        })
        .collect()
}

fn fuse_refs(
    contours: &[&ContourFunction],
    beta: &ReliabilityMatrix,
    voxel: Option<usize>,
) -> Result<FusedScores, FusionError> {
    if contours.len() != beta.sources {
        return Err(FusionError::SourceCountMismatch {
            expected: beta.sources,
            got: contours.len(),
        });
    }
    let k = beta.frame.class_count();
    for c in contours {
        if *c.frame() != beta.frame {
            return Err(FusionError::FrameMismatch);
        }
    }

    let discounted: Vec<ContourFunction> = contours
        .iter()
        .enumerate()
        .map(|(h, c)| contextual_discount_contour(c, &beta.beta_row(h)))
        .collect::<Result<_, _>>()?;

    let mut unnorm = vec![0.0; k];
    if k * beta.sources > LOG_SPACE_THRESHOLD {
        // Log-space products; a zero factor short-circuits to zero.
        for (c, u) in unnorm.iter_mut().enumerate() {
            let mut log_sum = 0.0;
            let mut zero = false;
            for d in &discounted {
                let v = d.values()[c];
                if v == 0.0 {
                    zero = true;
                    break;
                }
                log_sum += v.ln();
            }
            *u = if zero { 0.0 } else { log_sum.exp() };
        }
    } else {
        for (c, u) in unnorm.iter_mut().enumerate() {
            *u = discounted.iter().map(|d| d.values()[c]).product();
        }
    }

    let total: f64 = unnorm.iter().sum();
    if total < DEGENERATE_EPS {
        return Err(FusionError::DegenerateFusion(voxel));
    }
    for u in &mut unnorm {
        *u /= total;
    }
    FusedScores::new(unnorm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn frame2() -> Arc<Frame> {
        Frame::new(vec!["a", "b"]).unwrap()
    }

    fn contour(frame: &Arc<Frame>, values: Vec<f64>) -> ContourFunction {
        ContourFunction::new(frame.clone(), values).unwrap()
    }

    /// raw = ±750 saturates the logistic to exactly 0 / 1 in f64.
    const RAW_ONE: f64 = 750.0;
    const RAW_ZERO: f64 = -750.0;

    #[test]
    fn single_source_full_trust_one_hot() {
        let frame = frame2();
        let beta = ReliabilityMatrix::from_raw(frame.clone(), 1, vec![RAW_ONE, RAW_ONE]).unwrap();
        let scores = fuse_voxel(&[contour(&frame, vec![1.0, 0.0])], &beta).unwrap();
        assert_eq!(scores.values(), &[1.0, 0.0]);
        assert_eq!(predicted_label(&scores), 0);
    }

    #[test]
    fn zero_reliability_gives_uniform_scores() {
        let frame = frame2();
        let beta =
            ReliabilityMatrix::from_raw(frame.clone(), 2, vec![RAW_ZERO; 4]).unwrap();
        let scores = fuse_voxel(
            &[
                contour(&frame, vec![0.9, 0.1]),
                contour(&frame, vec![0.2, 0.7]),
            ],
            &beta,
        )
        .unwrap();
        assert!((scores.values()[0] - 0.5).abs() < 1e-12);
        assert!((scores.values()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn two_source_fusion_matches_direct_substitution() {
        // β = 1 keeps the contours; products (0.32, 0.27), sum 0.59.
        let frame = frame2();
        let beta = ReliabilityMatrix::from_raw(frame.clone(), 2, vec![RAW_ONE; 4]).unwrap();
        let scores = fuse_voxel(
            &[
                contour(&frame, vec![0.8, 0.3]),
                contour(&frame, vec![0.4, 0.9]),
            ],
            &beta,
        )
        .unwrap();
        assert!((scores.values()[0] - 0.32 / 0.59).abs() < 1e-12);
        assert!((scores.values()[1] - 0.27 / 0.59).abs() < 1e-12);
        assert_eq!(predicted_label(&scores), 0);
    }

    #[test]
    fn degenerate_fusion_is_an_error() {
        let frame = frame2();
        let beta = ReliabilityMatrix::from_raw(frame.clone(), 1, vec![RAW_ONE, RAW_ONE]).unwrap();
        let res = fuse_voxel(&[contour(&frame, vec![0.0, 0.0])], &beta);
        assert!(matches!(res, Err(FusionError::DegenerateFusion(None))));

        let volume = fuse_volume(
            &[vec![
                contour(&frame, vec![1.0, 0.5]),
                contour(&frame, vec![0.0, 0.0]),
            ]],
            &beta,
        );
        assert!(matches!(volume, Err(FusionError::DegenerateFusion(Some(1)))));
    }

    #[test]
    fn fuse_volume_is_elementwise() {
        let frame = frame2();
        let beta = ReliabilityMatrix::init(frame.clone(), 2);
        assert!(fuse_volume(&[vec![], vec![]], &beta).unwrap().is_empty());

        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let n = 100;
        let per_source: Vec<Vec<ContourFunction>> = (0..2)
            .map(|_| {
                (0..n)
                    .map(|_| contour(&frame, vec![rng.random(), rng.random()]))
                    .collect()
            })
            .collect();
        let fused = fuse_volume(&per_source, &beta).unwrap();
        assert_eq!(fused.len(), n);
        for v in 0..n {
            let single = fuse_voxel(
                &[per_source[0][v].clone(), per_source[1][v].clone()],
                &beta,
            )
            .unwrap();
            for (a, b) in fused[v].values().iter().zip(single.values()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn predicted_label_tie_breaks_low() {
        assert_eq!(predicted_label(&FusedScores::new(vec![1.0, 0.0, 0.0]).unwrap()), 0);
        assert_eq!(predicted_label(&FusedScores::new(vec![0.5, 0.5]).unwrap()), 0);
        assert_eq!(predicted_label(&FusedScores::new(vec![0.2, 0.3, 0.5]).unwrap()), 2);
    }

    #[test]
    fn scores_sum_to_one_and_source_order_is_irrelevant() {
        let mut rng = ChaCha20Rng::seed_from_u64(43);
        let frame = Frame::numbered(3).unwrap();
        for _ in 0..30 {
            let c: Vec<ContourFunction> = (0..3)
                .map(|_| {
                    contour(
                        &frame,
                        (0..3).map(|_| rng.random::<f64>()).collect(),
                    )
                })
                .collect();
            let raw: Vec<f64> = (0..9).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let beta = ReliabilityMatrix::from_raw(frame.clone(), 3, raw.clone()).unwrap();
            let scores = fuse_voxel(&c, &beta).unwrap();
            let sum: f64 = scores.values().iter().sum();
            assert!((sum - 1.0).abs() < 1e-10);

            // Permute sources 0→2, 1→0, 2→1 together with their β rows.
            let perm = [2usize, 0, 1];
            let pc: Vec<ContourFunction> = perm.iter().map(|&h| c[h].clone()).collect();
            let praw: Vec<f64> = perm
                .iter()
                .flat_map(|&h| raw[h * 3..(h + 1) * 3].to_vec())
                .collect();
            let pbeta = ReliabilityMatrix::from_raw(frame.clone(), 3, praw).unwrap();
            let pscores = fuse_voxel(&pc, &pbeta).unwrap();
            for (a, b) in scores.values().iter().zip(pscores.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vacuous_sources_are_neutral() {
        let mut rng = ChaCha20Rng::seed_from_u64(47);
        let frame = Frame::numbered(3).unwrap();
        for _ in 0..20 {
            let c1 = contour(&frame, (0..3).map(|_| rng.random::<f64>()).collect());
            let raw: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let beta1 = ReliabilityMatrix::from_raw(frame.clone(), 1, raw.clone()).unwrap();
            let base = fuse_voxel(&[c1.clone()], &beta1).unwrap();

            // Appended source with β ≈ 0: no effect.
            let mut raw2 = raw.clone();
            raw2.extend_from_slice(&[RAW_ZERO; 3]);
            let beta2 = ReliabilityMatrix::from_raw(frame.clone(), 2, raw2).unwrap();
            let noisy = contour(&frame, (0..3).map(|_| rng.random::<f64>()).collect());
            let with_discounted = fuse_voxel(&[c1.clone(), noisy], &beta2).unwrap();

            // Appended all-ones contour with arbitrary β: no effect.
            let mut raw3 = raw.clone();
            raw3.extend((0..3).map(|_| rng.random::<f64>() * 4.0 - 2.0));
            let beta3 = ReliabilityMatrix::from_raw(frame.clone(), 2, raw3).unwrap();
            let ones = contour(&frame, vec![1.0, 1.0, 1.0]);
            let with_ones = fuse_voxel(&[c1.clone(), ones], &beta3).unwrap();

            for k in 0..3 {
                assert!((with_discounted.values()[k] - base.values()[k]).abs() < 1e-12);
                assert!((with_ones.values()[k] - base.values()[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_space_path_agrees_with_direct_products() {
        // K·H = 5·7 = 35 > 32 exercises the log-space branch; compare
        // against a direct-product reference computed here.
        let mut rng = ChaCha20Rng::seed_from_u64(53);
        let frame = Frame::numbered(5).unwrap();
        let h = 7;
        let contours: Vec<ContourFunction> = (0..h)
            .map(|_| contour(&frame, (0..5).map(|_| 0.05 + 0.95 * rng.random::<f64>()).collect()))
            .collect();
        let raw: Vec<f64> = (0..h * 5).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let beta = ReliabilityMatrix::from_raw(frame.clone(), h, raw).unwrap();
        let scores = fuse_voxel(&contours, &beta).unwrap();

        let mut expect = vec![1.0; 5];
        for (hh, c) in contours.iter().enumerate() {
            for (k, e) in expect.iter_mut().enumerate() {
                let b = beta.beta(hh, k);
                *e *= 1.0 - b + b * c.values()[k];
            }
        }
        let total: f64 = expect.iter().sum();
        for (a, e) in scores.values().iter().zip(&expect) {
            assert!((a - e / total).abs() < 1e-12);
        }
    }

    #[test]
    fn single_source_uniform_beta_matches_classical_discounting() {
        // argmax of fused scores == argmax of the contour of the
        // classically discounted mass, for uniform β.
        let mut rng = ChaCha20Rng::seed_from_u64(59);
        let frame = Frame::numbered(4).unwrap();
        for _ in 0..30 {
            let m = crate::dst::tests::random_simple(&frame, &mut rng);
            let raw = rng.random::<f64>() * 6.0 - 3.0;
            let b = logistic(raw);
            let beta = ReliabilityMatrix::from_raw(frame.clone(), 1, vec![raw; 4]).unwrap();
            let scores = fuse_voxel(&[m.contour()], &beta).unwrap();

            let discounted = m.to_mass_function().discount(b).unwrap().contour();
            let mut ref_best = 0;
            for k in 1..4 {
                if discounted.values()[k] > discounted.values()[ref_best] {
                    ref_best = k;
                }
            }
            assert_eq!(predicted_label(&scores), ref_best);
        }
    }
}
