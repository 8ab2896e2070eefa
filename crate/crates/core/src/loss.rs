//! Discounted Dice loss and the exact reverse pass through the whole
//! pipeline: prototype activations → per-prototype masses → closed-form
//! Dempster combination → contextual discounting → product fusion →
//! per-voxel score normalization → per-class Dice.
//!
//! The computation graph is small and fixed, so gradients are derived by
//! hand rather than through an autodiff framework; `finite_diff_check`
//! verifies them against central differences.
//!
//! Voxels are processed in fixed-size chunks. Chunks may run in parallel
//! but are always reduced in index order, so results are identical at
//! any thread count.

use rayon::prelude::*;

use thiserror::Error;

use crate::dst::Frame;
use crate::es::{logistic, squared_distance, EsError, EsParams, MEMBERSHIP_GUARD};
use crate::fusion::{FusedScores, FusionError, ReliabilityMatrix};

/// Smoothing added to the Dice denominator (only) so empty-class batches
/// stay finite while perfect predictions still score ≈ 0.
pub const DICE_EPSILON: f64 = 1e-6;

/// Guard on the per-voxel combination normalizer.
pub const COMBINE_EPS: f64 = 1e-12;

/// Guard on the per-voxel fused-score normalizer.
pub const FUSE_EPS: f64 = 1e-30;

/// Voxels per work unit; fixed so parallel reductions are reproducible.
const CHUNK: usize = 512;

/// Denominator floor when turning gradient differences into relative errors.
pub const GRAD_ABS_FLOOR: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("evidence combination collapsed at voxel {voxel} (total conflict)")]
    TotalConflict { voxel: usize },
    #[error("fused products vanished at voxel {voxel}")]
    DegenerateFusion { voxel: usize },
    #[error(transparent)]
    Es(#[from] EsError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

/// Per-voxel class indices plus an implicit one-hot view.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    labels: Vec<usize>,
    classes: usize,
}

impl GroundTruth {
    pub fn new(labels: Vec<usize>, classes: usize) -> Result<Self, LossError> {
        if classes == 0 {
            return Err(LossError::ShapeMismatch("zero classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(LossError::ShapeMismatch(format!(
                "label {bad} outside 0..{classes}"
            )));
        }
        Ok(GroundTruth { labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn one_hot(&self, voxel: usize, class: usize) -> f64 {
        if self.labels[voxel] == class {
            1.0
        } else {
            0.0
        }
    }

    /// Per-class voxel counts, `Σ_n G_{n,c}`.
    pub fn class_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.classes];
        for &l in &self.labels {
            sums[l] += 1.0;
        }
        sums
    }
}

/// Features of one source over a batch, flattened `n × dim` row-major.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    data: Vec<f64>,
    dim: usize,
}

impl FeatureBatch {
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self, LossError> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(LossError::ShapeMismatch(format!(
                "feature data of length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        Ok(FeatureBatch { data, dim })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.dim..(n + 1) * self.dim]
    }
}

/// One feature batch per source, all covering the same voxels.
#[derive(Debug, Clone)]
pub struct Batch {
    sources: Vec<FeatureBatch>,
    len: usize,
}

impl Batch {
    pub fn new(sources: Vec<FeatureBatch>) -> Result<Self, LossError> {
        let first = sources
            .first()
            .ok_or_else(|| LossError::ShapeMismatch("batch needs at least one source".into()))?;
        let len = first.len();
        if sources.iter().any(|s| s.len() != len) {
            return Err(LossError::ShapeMismatch(
                "sources disagree on voxel count".into(),
            ));
        }
        Ok(Batch { sources, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn source_count(&self) -> usize {
        self.sources.len()
    }

    pub fn source(&self, h: usize) -> &FeatureBatch {
        &self.sources[h]
    }
}

/// Every trainable parameter of the fused model: one evidence layer per
/// source plus the reliability matrix.
#[derive(Debug, Clone)]
pub struct ModelParams {
    sources: Vec<EsParams>,
    reliability: ReliabilityMatrix,
}

impl ModelParams {
    pub fn new(sources: Vec<EsParams>, reliability: ReliabilityMatrix) -> Result<Self, LossError> {
        if sources.is_empty() {
            return Err(LossError::ShapeMismatch("no sources".into()));
        }
        if sources.len() != reliability.sources() {
            return Err(LossError::ShapeMismatch(format!(
                "{} evidence layers vs {} reliability rows",
                sources.len(),
                reliability.sources()
            )));
        }
        if sources.iter().any(|s| s.frame() != reliability.frame()) {
            return Err(LossError::ShapeMismatch(
                "sources and reliability matrix disagree on the frame".into(),
            ));
        }
        Ok(ModelParams {
            sources,
            reliability,
        })
    }

    pub fn frame(&self) -> &std::sync::Arc<Frame> {
        self.reliability.frame()
    }

    pub fn source_count(&self) -> usize {
        self.sources.len()
    }

    pub fn sources(&self) -> &[EsParams] {
        &self.sources
    }

    pub fn sources_mut(&mut self) -> &mut [EsParams] {
        &mut self.sources
    }

    pub fn reliability(&self) -> &ReliabilityMatrix {
        &self.reliability
    }

    pub fn reliability_mut(&mut self) -> &mut ReliabilityMatrix {
        &mut self.reliability
    }

    pub fn param_count(&self) -> usize {
        self.sources.iter().map(EsParams::raw_len).sum::<usize>() + self.reliability.raw().len()
    }

    /// All raw parameters in a fixed order: per source (prototypes,
    /// alpha_raw, gamma_raw, membership_raw), then the β raw matrix.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for s in &self.sources {
            s.flatten_into(&mut out);
        }
        out.extend_from_slice(self.reliability.raw());
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length");
        let mut pos = 0;
        for s in &mut self.sources {
            let len = s.raw_len();
            s.set_from_flat(&flat[pos..pos + len]);
            pos += len;
        }
        self.reliability.raw_mut().copy_from_slice(&flat[pos..]);
    }
}

/// Gradient arrays mirroring one evidence layer's raw parameters.
#[derive(Debug, Clone)]
pub struct EsGrads {
    pub prototypes: Vec<f64>,
    pub alpha_raw: Vec<f64>,
    pub gamma_raw: Vec<f64>,
    pub membership_raw: Vec<f64>,
}

/// Gradients for every raw parameter in [`ModelParams`], same shapes.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub sources: Vec<EsGrads>,
    pub beta_raw: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradientBundle {
            sources: params
                .sources
                .iter()
                .map(|s| EsGrads {
                    prototypes: vec![0.0; s.prototypes().len()],
                    alpha_raw: vec![0.0; s.alpha_raw().len()],
                    gamma_raw: vec![0.0; s.gamma_raw().len()],
                    membership_raw: vec![0.0; s.membership_raw().len()],
                })
                .collect(),
            beta_raw: vec![0.0; params.reliability.raw().len()],
        }
    }

    pub fn add_assign(&mut self, other: &GradientBundle) {
        for (a, b) in self.sources.iter_mut().zip(&other.sources) {
            add_slice(&mut a.prototypes, &b.prototypes);
            add_slice(&mut a.alpha_raw, &b.alpha_raw);
            add_slice(&mut a.gamma_raw, &b.gamma_raw);
            add_slice(&mut a.membership_raw, &b.membership_raw);
        }
        add_slice(&mut self.beta_raw, &other.beta_raw);
    }

    /// Same order as [`ModelParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for s in &self.sources {
            out.extend_from_slice(&s.prototypes);
            out.extend_from_slice(&s.alpha_raw);
            out.extend_from_slice(&s.gamma_raw);
            out.extend_from_slice(&s.membership_raw);
        }
        out.extend_from_slice(&self.beta_raw);
        out
    }
}

fn add_slice(acc: &mut [f64], inc: &[f64]) {
    for (a, b) in acc.iter_mut().zip(inc) {
        *a += b;
    }
}

/// Constrained parameter values of one source, computed once per batch.
struct SourceDerived {
    alpha: Vec<f64>,   // I
    gamma: Vec<f64>,   // I
    u: Vec<f64>,       // I × K
    sq_norm: Vec<f64>, // I, Σ_k h_ik²
    guarded: Vec<bool>,
}

impl SourceDerived {
    fn from(params: &EsParams) -> Self {
        let count = params.prototype_count();
        let k = params.frame().class_count();
        let mut u = Vec::with_capacity(count * k);
        let mut sq_norm = Vec::with_capacity(count);
        let mut guarded = Vec::with_capacity(count);
        for i in 0..count {
            let row = &params.membership_raw()[i * k..(i + 1) * k];
            let norm: f64 = row.iter().map(|h| h * h).sum();
            sq_norm.push(norm);
            if norm < MEMBERSHIP_GUARD {
                guarded.push(true);
                u.extend(std::iter::repeat_n(1.0 / k as f64, k));
            } else {
                guarded.push(false);
                u.extend(row.iter().map(|h| h * h / norm));
            }
        }
        SourceDerived {
            alpha: (0..count).map(|i| params.alpha(i)).collect(),
            gamma: (0..count).map(|i| params.gamma(i)).collect(),
            u,
            sq_norm,
            guarded,
        }
    }
}

/// Intermediates of one source over one chunk of voxels.
struct ChunkSource {
    dist2: Vec<f64>, // len × I
    act: Vec<f64>,   // len × I, s_i
    sing: Vec<f64>,  // len × K, A_k = Π_i (1 − s_i(1 − u_ik))
    omg: Vec<f64>,   // len, B = Π_i (1 − s_i)
    norm: Vec<f64>,  // len, Z = Σ_k A_k − (K−1)·B
    pl: Vec<f64>,    // len × K, A_k / Z
}

struct ChunkData {
    start: usize,
    len: usize,
    sources: Vec<ChunkSource>,
    prod: Vec<f64>,   // len × K, P_k = Π_h c_hk
    total: Vec<f64>,  // len, T = Σ_k P_k
    scores: Vec<f64>, // len × K, S = P / T
    dot: Vec<f64>,    // K, Σ_n S·G over this chunk
    ssum: Vec<f64>,   // K, Σ_n S over this chunk
}

struct ForwardRun {
    k: usize,
    chunks: Vec<ChunkData>,
    dot: Vec<f64>,
    ssum: Vec<f64>,
}

fn check_shapes(
    batch: &Batch,
    gt: Option<&GroundTruth>,
    params: &ModelParams,
) -> Result<(), LossError> {
    if batch.source_count() != params.source_count() {
        return Err(LossError::ShapeMismatch(format!(
            "batch has {} sources, model has {}",
            batch.source_count(),
            params.source_count()
        )));
    }
    for (h, (fb, es)) in batch.sources.iter().zip(&params.sources).enumerate() {
        if fb.dim() != es.dim() {
            return Err(LossError::ShapeMismatch(format!(
                "source {h}: features have dim {}, parameters expect {}",
                fb.dim(),
                es.dim()
            )));
        }
    }
    if let Some(gt) = gt {
        if gt.len() != batch.len() {
            return Err(LossError::ShapeMismatch(format!(
                "{} voxels vs {} labels",
                batch.len(),
                gt.len()
            )));
        }
        if gt.classes() != params.frame().class_count() {
            return Err(LossError::ShapeMismatch(format!(
                "{} label classes vs {} frame classes",
                gt.classes(),
                params.frame().class_count()
            )));
        }
    }
    Ok(())
}

fn forward_chunk(
    batch: &Batch,
    gt: Option<&GroundTruth>,
    params: &ModelParams,
    derived: &[SourceDerived],
    beta: &[f64],
    start: usize,
    len: usize,
    keep: bool,
) -> Result<ChunkData, LossError> {
    let k = params.frame().class_count();
    let hn = params.source_count();

    let mut sources = Vec::with_capacity(if keep { hn } else { 0 });
    // Discounted contours of every source, len × K, reused for fusion.
    let mut disc = vec![0.0; len * k * hn];

    for (h, (es, der)) in params.sources.iter().zip(derived).enumerate() {
        let count = es.prototype_count();
        let feats = batch.source(h);
        let mut dist2 = vec![0.0; len * count];
        let mut act = vec![0.0; len * count];
        let mut sing = vec![1.0; len * k];
        let mut omg = vec![1.0; len];
        let mut norm = vec![0.0; len];
        let mut pl = vec![0.0; len * k];

        for v in 0..len {
            let x = feats.row(start + v);
            let d_row = &mut dist2[v * count..(v + 1) * count];
            let s_row = &mut act[v * count..(v + 1) * count];
            let a_row = &mut sing[v * k..(v + 1) * k];
            for i in 0..count {
                let d2 = squared_distance(x, es.prototype(i));
                let s = der.alpha[i] * (-der.gamma[i] * d2).exp();
                d_row[i] = d2;
                s_row[i] = s;
                omg[v] *= 1.0 - s;
                let u_row = &der.u[i * k..(i + 1) * k];
                for (a, &u) in a_row.iter_mut().zip(u_row) {
                    *a *= 1.0 - s * (1.0 - u);
                }
            }
            let z = a_row.iter().sum::<f64>() - (k as f64 - 1.0) * omg[v];
            if !(z > COMBINE_EPS) {
                return Err(LossError::TotalConflict { voxel: start + v });
            }
            norm[v] = z;
            let pl_row = &mut pl[v * k..(v + 1) * k];
            for (p, &a) in pl_row.iter_mut().zip(a_row.iter()) {
                *p = a / z;
            }
            // Contextual discounting at the contour level.
            let beta_row = &beta[h * k..(h + 1) * k];
            let d_out = &mut disc[(v * hn + h) * k..(v * hn + h + 1) * k];
            for ((d, &b), &p) in d_out.iter_mut().zip(beta_row).zip(pl_row.iter()) {
                *d = 1.0 - b + b * p;
            }
        }

        if keep {
            sources.push(ChunkSource {
                dist2,
                act,
                sing,
                omg,
                norm,
                pl,
            });
        }
    }

    let mut prod = vec![1.0; len * k];
    let mut total = vec![0.0; len];
    let mut scores = vec![0.0; len * k];
    let mut dot = vec![0.0; k];
    let mut ssum = vec![0.0; k];
    for v in 0..len {
        let p_row = &mut prod[v * k..(v + 1) * k];
        for h in 0..hn {
            let d_row = &disc[(v * hn + h) * k..(v * hn + h + 1) * k];
            for (p, &c) in p_row.iter_mut().zip(d_row) {
                *p *= c;
            }
        }
        let t: f64 = p_row.iter().sum();
        if !(t > FUSE_EPS) {
            return Err(LossError::DegenerateFusion { voxel: start + v });
        }
        total[v] = t;
        let s_row = &mut scores[v * k..(v + 1) * k];
        for (s, &p) in s_row.iter_mut().zip(p_row.iter()) {
            *s = p / t;
        }
        if let Some(gt) = gt {
            let label = gt.labels()[start + v];
            dot[label] += s_row[label];
            for (acc, &s) in ssum.iter_mut().zip(s_row.iter()) {
                *acc += s;
            }
        }
    }

    Ok(ChunkData {
        start,
        len,
        sources,
        prod,
        total,
        scores,
        dot,
        ssum,
    })
}

fn run_forward(
    batch: &Batch,
    gt: Option<&GroundTruth>,
    params: &ModelParams,
    keep: bool,
) -> Result<ForwardRun, LossError> {
    check_shapes(batch, gt, params)?;
    let k = params.frame().class_count();
    let derived: Vec<SourceDerived> = params.sources.iter().map(SourceDerived::from).collect();
    let beta: Vec<f64> = params
        .reliability
        .raw()
        .iter()
        .map(|&r| logistic(r))
        .collect();

    let ranges: Vec<(usize, usize)> = (0..batch.len())
        .step_by(CHUNK.max(1))
        .map(|start| (start, CHUNK.min(batch.len() - start)))
        .collect();
    let chunks: Vec<ChunkData> = ranges
        .into_par_iter()
        .map(|(start, len)| forward_chunk(batch, gt, params, &derived, &beta, start, len, keep))
        .collect::<Result<_, _>>()?;

    // Index-ordered reduction keeps sums identical at any thread count.
    let mut dot = vec![0.0; k];
    let mut ssum = vec![0.0; k];
    for c in &chunks {
        add_slice(&mut dot, &c.dot);
        add_slice(&mut ssum, &c.ssum);
    }
    Ok(ForwardRun {
        k,
        chunks,
        dot,
        ssum,
    })
}

fn loss_from_sums(dot: &[f64], ssum: &[f64], gsum: &[f64], k: usize) -> f64 {
    let mut loss = 0.0;
    for c in 0..k {
        loss += 1.0 - 2.0 * dot[c] / (ssum[c] + gsum[c] + DICE_EPSILON);
    }
    loss / k as f64
}

/// Per-class soft Dice losses averaged over all classes (macro average,
/// background included), on normalized fused scores.
pub fn discounted_dice_loss(scores: &[FusedScores], gt: &GroundTruth) -> Result<f64, LossError> {
    if scores.len() != gt.len() {
        return Err(LossError::ShapeMismatch(format!(
            "{} score rows vs {} labels",
            scores.len(),
            gt.len()
        )));
    }
    let k = gt.classes();
    if let Some(s) = scores.iter().find(|s| s.class_count() != k) {
        return Err(LossError::ShapeMismatch(format!(
            "score row has {} classes, expected {k}",
            s.class_count()
        )));
    }
    let mut dot = vec![0.0; k];
    let mut ssum = vec![0.0; k];
    for (n, s) in scores.iter().enumerate() {
        dot[gt.labels()[n]] += s.values()[gt.labels()[n]];
        for (acc, &v) in ssum.iter_mut().zip(s.values()) {
            *acc += v;
        }
    }
    Ok(loss_from_sums(&dot, &ssum, &gt.class_sums(), k))
}

/// Forward pass producing fused per-voxel scores, flattened `n × K`.
pub fn forward_scores(batch: &Batch, params: &ModelParams) -> Result<Vec<f64>, LossError> {
    let run = run_forward(batch, None, params, false)?;
    let mut out = Vec::with_capacity(batch.len() * run.k);
    for c in &run.chunks {
        out.extend_from_slice(&c.scores);
    }
    Ok(out)
}

/// Loss of a batch without gradients; the scalar `backward` differentiates.
pub fn forward_loss(
    batch: &Batch,
    gt: &GroundTruth,
    params: &ModelParams,
) -> Result<f64, LossError> {
    if batch.is_empty() {
        return Err(LossError::ShapeMismatch("empty batch".into()));
    }
    let run = run_forward(batch, Some(gt), params, false)?;
    Ok(loss_from_sums(&run.dot, &run.ssum, &gt.class_sums(), run.k))
}

/// Ratio `product / factor`, falling back to an exact leave-one-out
/// product when the factor is zero (possible only at saturated
/// parameters, where the plain division would be 0/0).
#[inline]
fn ratio_or_loo(product: f64, factor: f64, loo: impl Fn() -> f64) -> f64 {
    if factor != 0.0 {
        product / factor
    } else {
        loo()
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_chunk(
    chunk: &ChunkData,
    batch: &Batch,
    gt: &GroundTruth,
    params: &ModelParams,
    derived: &[SourceDerived],
    beta: &[f64],
    coef_g: &[f64],
    coef_s: &[f64],
) -> GradientBundle {
    let k = params.frame().class_count();
    let hn = params.source_count();
    let mut grads = GradientBundle::zeros_like(params);

    // Accumulators for Σ_n dc·(pl − 1); scaled by β(1−β) at the end.
    let mut beta_acc = vec![0.0; hn * k];
    let mut d_scores = vec![0.0; k];
    let mut d_prod = vec![0.0; k];
    let mut d_pl = vec![0.0; k];
    let mut d_sing = vec![0.0; k];

    for v in 0..chunk.len {
        let voxel = chunk.start + v;
        let label = gt.labels()[voxel];
        let s_row = &chunk.scores[v * k..(v + 1) * k];
        let p_row = &chunk.prod[v * k..(v + 1) * k];

        // dL/dS_{n,c} = coef_g[c]·G_{n,c} + coef_s[c].
        for c in 0..k {
            d_scores[c] = coef_s[c] + if c == label { coef_g[c] } else { 0.0 };
        }
        // Through the score normalization S = P / T.
        let mix: f64 = (0..k).map(|c| d_scores[c] * s_row[c]).sum();
        let t = chunk.total[v];
        for c in 0..k {
            d_prod[c] = (d_scores[c] - mix) / t;
        }

        for (h, (es, der)) in params.sources.iter().zip(derived).enumerate() {
            let src = &chunk.sources[h];
            let beta_row = &beta[h * k..(h + 1) * k];
            let pl_row = &src.pl[v * k..(v + 1) * k];
            for c in 0..k {
                let b = beta_row[c];
                let disc = 1.0 - b + b * pl_row[c];
                let d_disc = d_prod[c]
                    * ratio_or_loo(p_row[c], disc, || {
                        (0..hn)
                            .filter(|&hh| hh != h)
                            .map(|hh| {
                                let other_pl = chunk.sources[hh].pl[v * k + c];
                                let ob = beta[hh * k + c];
                                1.0 - ob + ob * other_pl
                            })
                            .product()
                    });
                beta_acc[h * k + c] += d_disc * (pl_row[c] - 1.0);
                d_pl[c] = d_disc * b;
            }

            // Through pl = A / Z with Z = Σ A − (K−1)·B.
            let z = src.norm[v];
            let w: f64 = (0..k).map(|c| d_pl[c] * pl_row[c]).sum();
            let a_row = &src.sing[v * k..(v + 1) * k];
            for c in 0..k {
                d_sing[c] = (d_pl[c] - w) / z;
            }
            let d_omg = (k as f64 - 1.0) * w / z;

            let count = es.prototype_count();
            let act_row = &src.act[v * count..(v + 1) * count];
            let dist_row = &src.dist2[v * count..(v + 1) * count];
            let x = batch.source(h).row(voxel);
            let g = &mut grads.sources[h];

            for i in 0..count {
                let s = act_row[i];
                let u_row = &der.u[i * k..(i + 1) * k];
                let mut d_s = 0.0;
                let mut d_u = [0.0f64; 16];
                for c in 0..k {
                    let factor = 1.0 - s * (1.0 - u_row[c]);
                    let a_wo = ratio_or_loo(a_row[c], factor, || {
                        (0..count)
                            .filter(|&j| j != i)
                            .map(|j| 1.0 - act_row[j] * (1.0 - der.u[j * k + c]))
                            .product()
                    });
                    d_s += d_sing[c] * a_wo * (u_row[c] - 1.0);
                    d_u[c] = d_sing[c] * a_wo * s;
                }
                let b_wo = ratio_or_loo(src.omg[v], 1.0 - s, || {
                    (0..count)
                        .filter(|&j| j != i)
                        .map(|j| 1.0 - act_row[j])
                        .product()
                });
                d_s -= d_omg * b_wo;

                // Raw-parameter chain: α = σ(ξ), γ = η², s = α·e^{−γD}.
                g.alpha_raw[i] += d_s * s * (1.0 - der.alpha[i]);
                g.gamma_raw[i] += d_s * (-dist_row[i] * s) * 2.0 * es.gamma_raw()[i];
                let coeff = d_s * 2.0 * der.gamma[i] * s;
                let p_i = es.prototype(i);
                for (j, gp) in g.prototypes[i * es.dim()..(i + 1) * es.dim()]
                    .iter_mut()
                    .enumerate()
                {
                    *gp += coeff * (x[j] - p_i[j]);
                }

                // u = h² / Σ h²; guarded rows are constant in h.
                if !der.guarded[i] {
                    let du_dot: f64 = (0..k).map(|c| d_u[c] * u_row[c]).sum();
                    let h_row = &es.membership_raw()[i * k..(i + 1) * k];
                    for c in 0..k {
                        g.membership_raw[i * k + c] +=
                            2.0 * h_row[c] / der.sq_norm[i] * (d_u[c] - du_dot);
                    }
                }
            }
        }
    }

    for (acc, (out, &raw)) in beta_acc.iter().zip(
        grads
            .beta_raw
            .iter_mut()
            .zip(params.reliability.raw()),
    ) {
        let b = logistic(raw);
        *out = acc * b * (1.0 - b);
    }
    grads
}

/// Loss plus exact gradients for every raw parameter.
pub fn backward(
    batch: &Batch,
    gt: &GroundTruth,
    params: &ModelParams,
) -> Result<(f64, GradientBundle), LossError> {
    if batch.is_empty() {
        return Err(LossError::ShapeMismatch("empty batch".into()));
    }
    let run = run_forward(batch, Some(gt), params, true)?;
    let k = run.k;
    let gsum = gt.class_sums();
    let loss = loss_from_sums(&run.dot, &run.ssum, &gsum, k);

    // dL/dN_c and dL/d(Σ_n S_{n,c}) from L_c = 1 − 2N_c/(D_c + ε).
    let mut coef_g = vec![0.0; k];
    let mut coef_s = vec![0.0; k];
    for c in 0..k {
        let denom = run.ssum[c] + gsum[c] + DICE_EPSILON;
        coef_g[c] = -2.0 / (k as f64 * denom);
        coef_s[c] = 2.0 * run.dot[c] / (k as f64 * denom * denom);
    }

    let derived: Vec<SourceDerived> = params.sources.iter().map(SourceDerived::from).collect();
    let beta: Vec<f64> = params
        .reliability
        .raw()
        .iter()
        .map(|&r| logistic(r))
        .collect();

    let partials: Vec<GradientBundle> = run
        .chunks
        .par_iter()
        .map(|chunk| backward_chunk(chunk, batch, gt, params, &derived, &beta, &coef_g, &coef_s))
        .collect();
    let mut grads = GradientBundle::zeros_like(params);
    for p in &partials {
        grads.add_assign(p);
    }
    Ok((loss, grads))
}

/// Central-difference gradient of an arbitrary scalar function.
pub fn central_diff_grad<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    point: &[f64],
    step: f64,
) -> Vec<f64> {
    let mut work = point.to_vec();
    let mut grads = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        work[i] = point[i] + step;
        let plus = f(&work);
        work[i] = point[i] - step;
        let minus = f(&work);
        work[i] = point[i];
        grads.push((plus - minus) / (2.0 * step));
    }
    grads
}

/// Worst relative error between [`backward`] gradients and central
/// differences of the forward loss at the given point.
pub fn finite_diff_check(
    batch: &Batch,
    gt: &GroundTruth,
    params: &ModelParams,
    step: f64,
) -> Result<f64, LossError> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let (_, grads) = backward(batch, gt, params)?;
    let analytic = grads.flatten();

    let point = params.flatten();
    let mut scratch = params.clone();
    let numeric = central_diff_grad(
        |theta| {
            scratch.set_from_flat(theta);
            forward_loss(batch, gt, &scratch).expect("forward failed during finite differences")
        },
        &point,
        step,
    );

    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_ABS_FLOOR))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::es::es_forward_batch;
    use crate::fusion::fuse_volume;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    use crate::gradcheck::random_instance;

    fn scores_of(values: Vec<Vec<f64>>) -> Vec<FusedScores> {
        values.into_iter().map(|v| FusedScores::new(v).unwrap()).collect()
    }

    #[test]
    fn dice_loss_is_zero_for_perfect_scores() {
        let gt = GroundTruth::new(vec![0, 1, 0, 1], 2).unwrap();
        let scores = scores_of(vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ]);
        let loss = discounted_dice_loss(&scores, &gt).unwrap();
        assert!(loss.abs() < 1e-5, "loss {loss}");
    }

    #[test]
    fn dice_loss_uniform_scores_balanced_labels() {
        // Closed form: L_c = 1 − (2N/K²)/(2N/K) = 1 − 1/K.
        for k in [2usize, 3, 4] {
            let n = 12 * k;
            let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
            let gt = GroundTruth::new(labels, k).unwrap();
            let uniform = scores_of(vec![vec![1.0 / k as f64; k]; n]);
            let loss = discounted_dice_loss(&uniform, &gt).unwrap();
            assert!((loss - (1.0 - 1.0 / k as f64)).abs() < 1e-5, "K={k}: {loss}");
        }
    }

    #[test]
    fn dice_loss_disjoint_supports_is_one() {
        let gt = GroundTruth::new(vec![1; 10], 2).unwrap();
        let scores = scores_of(vec![vec![1.0, 0.0]; 10]);
        let loss = discounted_dice_loss(&scores, &gt).unwrap();
        assert_eq!(loss, 1.0);
    }

    #[test]
    fn dice_loss_stays_in_unit_interval() {
        let mut rng = ChaCha20Rng::seed_from_u64(61);
        for _ in 0..50 {
            let k = rng.random_range(2..5);
            let n = rng.random_range(1..40);
            let gt = GroundTruth::new(
                (0..n).map(|_| rng.random_range(0..k)).collect(),
                k,
            )
            .unwrap();
            let scores: Vec<FusedScores> = (0..n)
                .map(|_| {
                    let mut v: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
                    let sum: f64 = v.iter().sum();
                    v.iter_mut().for_each(|x| *x /= sum);
                    FusedScores::new(v).unwrap()
                })
                .collect();
            let loss = discounted_dice_loss(&scores, &gt).unwrap();
            assert!((0.0..=1.0).contains(&loss), "loss {loss}");
        }
    }

    #[test]
    fn ground_truth_rejects_out_of_range_labels() {
        assert!(GroundTruth::new(vec![0, 3], 3).is_err());
        assert!(GroundTruth::new(vec![], 0).is_err());
        let gt = GroundTruth::new(vec![0, 2, 1], 3).unwrap();
        assert_eq!(gt.class_sums(), vec![1.0, 1.0, 1.0]);
        assert_eq!(gt.one_hot(1, 2), 1.0);
        assert_eq!(gt.one_hot(1, 0), 0.0);
    }

    #[test]
    fn forward_scores_match_public_operation_chain() {
        // Dual route: chunked pipeline vs es_forward_batch → contours →
        // fuse_volume, which goes through combine_simple and
        // contextual_discount_contour.
        let mut rng = ChaCha20Rng::seed_from_u64(67);
        let (batch, _, params) = random_instance(40, 3, 2, 4, 2, &mut rng);
        let fast = forward_scores(&batch, &params).unwrap();

        let per_source: Vec<Vec<crate::dst::ContourFunction>> = (0..2)
            .map(|h| {
                es_forward_batch(batch.source(h).data(), &params.sources()[h])
                    .unwrap()
                    .iter()
                    .map(|m| m.contour())
                    .collect()
            })
            .collect();
        let fused = fuse_volume(&per_source, params.reliability()).unwrap();
        for (n, f) in fused.iter().enumerate() {
            for (c, &v) in f.values().iter().enumerate() {
                assert!((fast[n * 3 + c] - v).abs() < 1e-12, "voxel {n} class {c}");
            }
        }
    }

    #[test]
    fn backward_loss_matches_forward() {
        let mut rng = ChaCha20Rng::seed_from_u64(71);
        let (batch, gt, params) = random_instance(30, 3, 2, 3, 2, &mut rng);
        let fwd = forward_loss(&batch, &gt, &params).unwrap();
        let (bwd, _) = backward(&batch, &gt, &params).unwrap();
        assert!((fwd - bwd).abs() < 1e-12);
    }

    #[test]
    fn beta_gradients_vanish_on_vacuous_contours() {
        // Features far from every prototype underflow the activations to
        // exactly zero, so each source's contour is exactly all-ones and
        // discounting has no effect.
        let mut rng = ChaCha20Rng::seed_from_u64(73);
        let (_, gt, params) = random_instance(10, 3, 2, 3, 2, &mut rng);
        let far: Vec<FeatureBatch> = (0..2)
            .map(|_| {
                FeatureBatch::new(
                    (0..10 * 2).map(|_| 1.0e6 + rng.random::<f64>()).collect(),
                    2,
                )
                .unwrap()
            })
            .collect();
        let batch = Batch::new(far).unwrap();
        let (_, grads) = backward(&batch, &gt, &params).unwrap();
        assert!(grads.beta_raw.iter().all(|&g| g == 0.0), "{:?}", grads.beta_raw);
    }

    #[test]
    fn gamma_gradient_vanishes_at_eta_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(79);
        let (batch, gt, mut params) = random_instance(15, 2, 1, 3, 2, &mut rng);
        // Stationary point of γ = η² at η = 0.
        let mut flat = params.flatten();
        let es = &params.sources()[0];
        let gamma_offset = es.prototypes().len() + es.alpha_raw().len();
        flat[gamma_offset + 1] = 0.0;
        params.set_from_flat(&flat);
        let (_, grads) = backward(&batch, &gt, &params).unwrap();
        assert_eq!(grads.sources[0].gamma_raw[1], 0.0);
        assert!(grads.sources[0].gamma_raw[0] != 0.0);
    }

    #[test]
    fn gradients_match_finite_differences_on_reference_instance() {
        let mut rng = ChaCha20Rng::seed_from_u64(83);
        let (batch, gt, params) = random_instance(20, 3, 2, 3, 2, &mut rng);
        let err = finite_diff_check(&batch, &gt, &params, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn coarse_steps_are_less_accurate() {
        let mut rng = ChaCha20Rng::seed_from_u64(89);
        let (batch, gt, params) = random_instance(20, 3, 2, 3, 2, &mut rng);
        let fine = finite_diff_check(&batch, &gt, &params, 1e-5).unwrap();
        let coarse = finite_diff_check(&batch, &gt, &params, 1e-1).unwrap();
        assert!(coarse > fine, "coarse {coarse} vs fine {fine}");
    }

    #[test]
    fn central_differences_are_nearly_exact_on_quadratics() {
        let point: Vec<f64> = vec![0.7, -1.3, 2.1, 0.0];
        let f = |x: &[f64]| {
            x.iter()
                .enumerate()
                .map(|(i, v)| (i + 1) as f64 * v * v)
                .sum::<f64>()
        };
        let grads = central_diff_grad(f, &point, 1e-5);
        for (i, (&g, &x)) in grads.iter().zip(&point).enumerate() {
            let exact = 2.0 * (i + 1) as f64 * x;
            let err = (g - exact).abs() / exact.abs().max(1.0);
            assert!(err < 1e-9, "coordinate {i}: {g} vs {exact}");
        }
    }

    #[test]
    fn flatten_round_trip_preserves_parameters() {
        let mut rng = ChaCha20Rng::seed_from_u64(97);
        let (_, _, params) = random_instance(5, 3, 2, 4, 3, &mut rng);
        let flat = params.flatten();
        assert_eq!(flat.len(), params.param_count());
        let mut copy = params.clone();
        copy.set_from_flat(&flat);
        assert_eq!(copy.flatten(), flat);
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(101);
        let (batch, gt, params) = random_instance(10, 3, 2, 3, 2, &mut rng);
        let (short_batch, ..) = random_instance(9, 3, 2, 3, 2, &mut rng);
        assert!(matches!(
            forward_loss(&short_batch, &gt, &params),
            Err(LossError::ShapeMismatch(_))
        ));
        let (wrong_dim, ..) = random_instance(10, 3, 2, 3, 4, &mut rng);
        assert!(matches!(
            forward_loss(&wrong_dim, &gt, &params),
            Err(LossError::ShapeMismatch(_))
        ));
        let bad_gt = GroundTruth::new(vec![0; 10], 4).unwrap();
        assert!(matches!(
            forward_loss(&batch, &bad_gt, &params),
            Err(LossError::ShapeMismatch(_))
        ));
    }
}
