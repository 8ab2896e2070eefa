//! Prototype-based evidence layer.
//!
//! One instance per source/modality: a feature vector is compared to `I`
//! prototype centers, each prototype emits a simple mass function
//! (its class memberships scaled by a distance-decaying activation plus
//! an ignorance remainder), and the `I` masses are Dempster-combined.
//!
//! Trainable parameters are kept in unconstrained (raw) form and mapped
//! to their constrained values on read: `α = logistic(ξ)`, `γ = η²`,
//! `u_k = h_k² / Σ_j h_j²`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::dst::{combine_simple, DstError, Frame, SimpleClassMass};

/// A per-voxel feature vector, `d` reals.
pub type FeatureVector = Vec<f64>;

/// If a membership row's squared norm falls below this, the row is
/// treated as uniform `1/K` (no division by zero, no gradient spike).
pub const MEMBERSHIP_GUARD: f64 = 1e-12;

/// Centroid-movement threshold that stops Lloyd iterations.
pub const KMEANS_TOL: f64 = 1e-6;
pub const KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Error)]
pub enum EsError {
    #[error("feature vector has dimension {got}, parameters expect {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite feature value at index {0}")]
    NonFiniteFeature(usize),
    #[error("invalid parameter shape: {0}")]
    InvalidShape(String),
    #[error("k-means asked for {requested} centers from {sample} samples")]
    SampleTooSmall { sample: usize, requested: usize },
    #[error(transparent)]
    Dst(#[from] DstError),
}

/// Parameters of one evidence layer: prototypes plus raw activation,
/// spread and membership parameters.
#[derive(Debug, Clone)]
pub struct EsParams {
    frame: Arc<Frame>,
    dim: usize,
    prototypes: Vec<f64>,      // I × d, row-major
    alpha_raw: Vec<f64>,       // I
    gamma_raw: Vec<f64>,       // I
    membership_raw: Vec<f64>,  // I × K, row-major
}

impl EsParams {
    pub fn new(
        frame: Arc<Frame>,
        dim: usize,
        prototypes: Vec<f64>,
        alpha_raw: Vec<f64>,
        gamma_raw: Vec<f64>,
        membership_raw: Vec<f64>,
    ) -> Result<Self, EsError> {
        if dim == 0 {
            return Err(EsError::InvalidShape("feature dimension is zero".into()));
        }
        let count = alpha_raw.len();
        if count == 0 {
            return Err(EsError::InvalidShape("no prototypes".into()));
        }
        if prototypes.len() != count * dim {
            return Err(EsError::InvalidShape(format!(
                "prototypes: expected {}x{} values, got {}",
                count,
                dim,
                prototypes.len()
            )));
        }
        if gamma_raw.len() != count {
            return Err(EsError::InvalidShape("gamma_raw length mismatch".into()));
        }
        if membership_raw.len() != count * frame.class_count() {
            return Err(EsError::InvalidShape("membership_raw length mismatch".into()));
        }
        for (name, values) in [
            ("prototypes", &prototypes),
            ("alpha_raw", &alpha_raw),
            ("gamma_raw", &gamma_raw),
            ("membership_raw", &membership_raw),
        ] {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(EsError::InvalidShape(format!("{name} has non-finite entries")));
            }
        }
        Ok(EsParams {
            frame,
            dim,
            prototypes,
            alpha_raw,
            gamma_raw,
            membership_raw,
        })
    }

    /// Standard initialization: α = 0.5 (ξ = 0), γ = 0.01 (η = 0.1),
    /// memberships drawn uniformly then square-normalized, prototypes as
    /// given (typically k-means centers).
    pub fn init(
        frame: Arc<Frame>,
        dim: usize,
        prototypes: Vec<f64>,
        rng: &mut impl Rng,
    ) -> Result<Self, EsError> {
        let count = prototypes.len() / dim.max(1);
        let membership_raw = (0..count * frame.class_count())
            .map(|_| rng.random::<f64>())
            .collect();
        EsParams::new(
            frame,
            dim,
            prototypes,
            vec![0.0; count],
            vec![0.1; count],
            membership_raw,
        )
    }

    pub fn frame(&self) -> &Arc<Frame> {
        &self.frame
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prototype_count(&self) -> usize {
        self.alpha_raw.len()
    }

    pub fn prototypes(&self) -> &[f64] {
        &self.prototypes
    }

    pub fn prototype(&self, i: usize) -> &[f64] {
        &self.prototypes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn alpha_raw(&self) -> &[f64] {
        &self.alpha_raw
    }

    pub fn gamma_raw(&self) -> &[f64] {
        &self.gamma_raw
    }

    pub fn membership_raw(&self) -> &[f64] {
        &self.membership_raw
    }

    /// `α_i = 1 / (1 + exp(−ξ_i))`, always inside (0, 1).
    pub fn alpha(&self, i: usize) -> f64 {
        logistic(self.alpha_raw[i])
    }

    /// `γ_i = η_i² ≥ 0`.
    pub fn gamma(&self, i: usize) -> f64 {
        self.gamma_raw[i] * self.gamma_raw[i]
    }

    /// Normalized membership row `u_i·` (square-then-normalize, with the
    /// degenerate-row guard).
    pub fn memberships(&self, i: usize) -> Vec<f64> {
        let k = self.frame.class_count();
        let row = &self.membership_raw[i * k..(i + 1) * k];
        let norm: f64 = row.iter().map(|h| h * h).sum();
        if norm < MEMBERSHIP_GUARD {
            return vec![1.0 / k as f64; k];
        }
        row.iter().map(|h| h * h / norm).collect()
    }

    pub(crate) fn raw_len(&self) -> usize {
        self.prototypes.len() + self.alpha_raw.len() + self.gamma_raw.len() + self.membership_raw.len()
    }

    /// Append all raw parameters in a fixed order:
    /// prototypes, alpha_raw, gamma_raw, membership_raw.
    pub(crate) fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.prototypes);
        out.extend_from_slice(&self.alpha_raw);
        out.extend_from_slice(&self.gamma_raw);
        out.extend_from_slice(&self.membership_raw);
    }

    /// Inverse of [`flatten_into`]; consumes exactly `raw_len` values.
    pub(crate) fn set_from_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for dst in [
            &mut self.prototypes,
            &mut self.alpha_raw,
            &mut self.gamma_raw,
            &mut self.membership_raw,
        ] {
            dst.copy_from_slice(&flat[pos..pos + dst.len()]);
            pos += dst.len();
        }
        debug_assert_eq!(pos, flat.len());
    }
}

#[inline]
pub(crate) fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_features(x: &[f64], params: &EsParams) -> Result<(), EsError> {
    if x.len() != params.dim {
        return Err(EsError::DimensionMismatch {
            expected: params.dim,
            got: x.len(),
        });
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(EsError::NonFiniteFeature(i));
    }
    Ok(())
}

#[inline]
pub(crate) fn squared_distance(x: &[f64], p: &[f64]) -> f64 {
    x.iter()
        .zip(p)
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .sum()
}

/// Prototype activations `s_i = α_i · exp(−γ_i · ‖x − p_i‖²)`.
pub fn prototype_activations(x: &[f64], params: &EsParams) -> Result<Vec<f64>, EsError> {
    check_features(x, params)?;
    Ok((0..params.prototype_count())
        .map(|i| {
            let d2 = squared_distance(x, params.prototype(i));
            params.alpha(i) * (-params.gamma(i) * d2).exp()
        })
        .collect())
}

/// Full evidence-layer forward pass for one feature vector: build each
/// prototype's simple mass `m_i({ω_k}) = u_ik·s_i`, `m_i(Ω) = 1 − s_i`,
/// then Dempster-combine across prototypes.
pub fn es_forward(x: &[f64], params: &EsParams) -> Result<SimpleClassMass, EsError> {
    let activations = prototype_activations(x, params)?;
    let masses: Vec<SimpleClassMass> = activations
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let singletons = params.memberships(i).iter().map(|u| u * s).collect();
            SimpleClassMass::new(params.frame.clone(), singletons, 1.0 - s)
        })
        .collect::<Result<_, _>>()?;
    // Total conflict is unreachable while every α_i < 1 (each prototype
    // keeps ignorance mass 1 − s_i > 0); still surfaced, never swallowed.
    Ok(combine_simple(&masses)?)
}

/// Elementwise [`es_forward`] over a flattened batch (`n × d`).
pub fn es_forward_batch(xs: &[f64], params: &EsParams) -> Result<Vec<SimpleClassMass>, EsError> {
    if xs.len() % params.dim != 0 {
        return Err(EsError::DimensionMismatch {
            expected: params.dim,
            got: xs.len() % params.dim,
        });
    }
    xs.chunks_exact(params.dim)
        .map(|x| es_forward(x, params))
        .collect()
}

/// Seeded Lloyd clustering over a flattened sample (`n × d`); returns
/// `centers × d` prototype coordinates. Initial centers are drawn from
/// distinct sample points; empty clusters keep their previous center.
pub fn kmeans_init(
    sample: &[f64],
    dim: usize,
    centers: usize,
    seed: u64,
) -> Result<Vec<f64>, EsError> {
    if dim == 0 || sample.len() % dim != 0 {
        return Err(EsError::InvalidShape(format!(
            "sample length {} is not a multiple of dim {}",
            sample.len(),
            dim
        )));
    }
    let n = sample.len() / dim;
    if n < centers || centers == 0 {
        return Err(EsError::SampleTooSmall {
            sample: n,
            requested: centers,
        });
    }
    let point = |i: usize| &sample[i * dim..(i + 1) * dim];

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }

    // Prefer pairwise-distinct starting points; reuse duplicates only if
    // the sample has fewer distinct points than requested centers.
    let mut centroids: Vec<f64> = Vec::with_capacity(centers * dim);
    let mut chosen = 0usize;
    for &i in &order {
        let candidate = point(i);
        let duplicate = (0..chosen)
            .any(|c| centroids[c * dim..(c + 1) * dim] == *candidate);
        if !duplicate {
            centroids.extend_from_slice(candidate);
            chosen += 1;
            if chosen == centers {
                break;
            }
        }
    }
    for &i in order.iter().cycle() {
        if chosen == centers {
            break;
        }
        centroids.extend_from_slice(point(i));
        chosen += 1;
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITERS {
        for (i, slot) in assignment.iter_mut().enumerate() {
            let x = point(i);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..centers {
                let d = squared_distance(x, &centroids[c * dim..(c + 1) * dim]);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            *slot = best;
        }

        let mut sums = vec![0.0; centers * dim];
        let mut counts = vec![0usize; centers];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(point(i)) {
                *s += v;
            }
        }

        let mut movement: f64 = 0.0;
        for c in 0..centers {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            let mut shift = 0.0;
            for j in 0..dim {
                let new = sums[c * dim + j] * inv;
                let old = centroids[c * dim + j];
                shift += (new - old) * (new - old);
                centroids[c * dim + j] = new;
            }
            movement = movement.max(shift.sqrt());
        }
        if movement < KMEANS_TOL {
            break;
        }
    }
    Ok(centroids)
}
