//! Frame-of-discernment and mass-function algebra.
//!
//! Mass functions are stored densely: a frame of `K` classes has `2^K`
//! subsets, indexed by bitmask (bit `k` set means class `k` is in the
//! subset). This keeps belief/plausibility sums and Dempster's rule as
//! plain loops over subset indices, which is exact and fast for the
//! small frames this crate works with.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Frames are capped so dense subset enumeration stays cheap.
pub const MAX_CLASSES: usize = 16;

/// Tolerance for "masses sum to one" checks.
pub const MASS_SUM_TOL: f64 = 1e-12;

/// Below this normalizer Dempster's rule is treated as undefined.
pub const TOTAL_CONFLICT_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DstError {
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("label {0:?} is not part of the frame")]
    UnknownLabel(String),
    #[error("subset bitmask {bits:#x} out of range for a frame of {classes} classes")]
    SubsetOutOfRange { bits: u16, classes: usize },
    #[error("operands are defined over different frames")]
    FrameMismatch,
    #[error("invalid mass assignment: {0}")]
    InvalidMass(String),
    #[error("total conflict: combined evidence has no common focal set")]
    TotalConflict,
    #[error("discount rate {0} outside [0, 1]")]
    InvalidBeta(f64),
    #[error("operation needs at least one input")]
    EmptyInput,
}

/// An ordered set of distinct class labels, `1..=16` of them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    labels: Vec<String>,
}

impl Frame {
    pub fn new<S: Into<String>>(labels: Vec<S>) -> Result<Arc<Self>, DstError> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() || labels.len() > MAX_CLASSES {
            return Err(DstError::InvalidFrame(format!(
                "need 1..={MAX_CLASSES} labels, got {}",
                labels.len()
            )));
        }
        for (i, a) in labels.iter().enumerate() {
            if labels[..i].contains(a) {
                return Err(DstError::InvalidFrame(format!("duplicate label {a:?}")));
            }
        }
        Ok(Arc::new(Frame { labels }))
    }

    /// Frame with labels `c0, c1, ..`, used for synthetic datasets.
    pub fn numbered(classes: usize) -> Result<Arc<Self>, DstError> {
        Frame::new((0..classes).map(|k| format!("c{k}")).collect())
    }

    pub fn class_count(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, k: usize) -> &str {
        &self.labels[k]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Number of subsets, `2^K`.
    pub fn subset_count(&self) -> usize {
        1usize << self.labels.len()
    }

    /// The full set Ω as a bitmask.
    pub fn omega(&self) -> Subset {
        Subset(((1usize << self.labels.len()) - 1) as u16)
    }

    pub fn singleton(&self, k: usize) -> Result<Subset, DstError> {
        if k >= self.class_count() {
            return Err(DstError::SubsetOutOfRange {
                bits: 1u16 << k.min(15),
                classes: self.class_count(),
            });
        }
        Ok(Subset(1 << k))
    }

    /// Build a subset from labels, e.g. `frame.subset(&["a", "b"])`.
    pub fn subset(&self, labels: &[&str]) -> Result<Subset, DstError> {
        let mut bits = 0u16;
        for l in labels {
            let k = self
                .index_of(l)
                .ok_or_else(|| DstError::UnknownLabel((*l).to_string()))?;
            bits |= 1 << k;
        }
        Ok(Subset(bits))
    }

    fn check_subset(&self, a: Subset) -> Result<(), DstError> {
        if (a.0 as usize) >= self.subset_count() {
            return Err(DstError::SubsetOutOfRange {
                bits: a.0,
                classes: self.class_count(),
            });
        }
        Ok(())
    }
}

/// A subset of the frame, one bit per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Subset(u16);

impl Subset {
    pub const EMPTY: Subset = Subset(0);

    pub fn from_bits(bits: u16) -> Self {
        Subset(bits)
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    /// Position in a dense mass vector.
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn contains(self, class: usize) -> bool {
        class < 16 && self.0 & (1 << class) != 0
    }

    pub fn intersection(self, other: Subset) -> Subset {
        Subset(self.0 & other.0)
    }

    pub fn union(self, other: Subset) -> Subset {
        Subset(self.0 | other.0)
    }

    pub fn complement_in(self, frame: &Frame) -> Subset {
        Subset(!self.0 & frame.omega().0)
    }

    pub fn members(self) -> impl Iterator<Item = usize> {
        let bits = self.0;
        (0..16).filter(move |k| bits & (1 << k) != 0)
    }
}

/// A mass function over all `2^K` subsets of a frame.
///
/// Invariants: entries are non-negative, sum to one within
/// [`MASS_SUM_TOL`], and the empty set carries no mass.
#[derive(Debug, Clone)]
pub struct MassFunction {
    frame: Arc<Frame>,
    masses: Vec<f64>,
}

impl MassFunction {
    pub fn new(frame: Arc<Frame>, masses: Vec<f64>) -> Result<Self, DstError> {
        if masses.len() != frame.subset_count() {
            return Err(DstError::InvalidMass(format!(
                "expected {} entries, got {}",
                frame.subset_count(),
                masses.len()
            )));
        }
        if masses[0] != 0.0 {
            return Err(DstError::InvalidMass(format!(
                "empty set carries mass {}",
                masses[0]
            )));
        }
        let mut sum = 0.0;
        for (i, &m) in masses.iter().enumerate() {
            if !(m >= 0.0) || !m.is_finite() {
                return Err(DstError::InvalidMass(format!("masses[{i}] = {m}")));
            }
            sum += m;
        }
        if (sum - 1.0).abs() > MASS_SUM_TOL {
            return Err(DstError::InvalidMass(format!("masses sum to {sum}")));
        }
        Ok(MassFunction { frame, masses })
    }

    /// Build from focal sets; unlisted subsets get zero mass.
    pub fn from_focal(frame: Arc<Frame>, focal: &[(Subset, f64)]) -> Result<Self, DstError> {
        let mut masses = vec![0.0; frame.subset_count()];
        for &(a, m) in focal {
            frame.check_subset(a)?;
            masses[a.index()] += m;
        }
        MassFunction::new(frame, masses)
    }

    /// The vacuous mass function: total ignorance, all mass on Ω.
    pub fn vacuous(frame: Arc<Frame>) -> Self {
        let mut masses = vec![0.0; frame.subset_count()];
        *masses.last_mut().expect("frame has at least one class") = 1.0;
        MassFunction { frame, masses }
    }

    pub fn frame(&self) -> &Arc<Frame> {
        &self.frame
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn mass(&self, a: Subset) -> f64 {
        self.masses[a.index()]
    }

    /// `Bel(A)`: total mass of non-empty subsets of `A`.
    pub fn belief(&self, a: Subset) -> Result<f64, DstError> {
        self.frame.check_subset(a)?;
        // Enumerate submasks of `a`.
        let mut total = 0.0;
        let mut b = a.0;
        loop {
            if b != 0 {
                total += self.masses[b as usize];
            }
            if b == 0 {
                break;
            }
            b = (b - 1) & a.0;
        }
        Ok(total)
    }

    /// `Pl(A)`: total mass of subsets intersecting `A`.
    pub fn plausibility(&self, a: Subset) -> Result<f64, DstError> {
        self.frame.check_subset(a)?;
        let mut total = 0.0;
        for (bits, &m) in self.masses.iter().enumerate() {
            if bits & a.0 as usize != 0 {
                total += m;
            }
        }
        Ok(total)
    }

    /// Plausibility restricted to singletons.
    pub fn contour(&self) -> ContourFunction {
        let k = self.frame.class_count();
        let values = (0..k)
            .map(|c| {
                self.plausibility(Subset(1 << c))
                    .expect("singleton is always in range")
            })
            .collect();
        ContourFunction::new(self.frame.clone(), values).expect("plausibilities lie in [0, 1]")
    }

    /// Degree of conflict κ: mass product landing on disjoint pairs.
    pub fn conflict(&self, other: &MassFunction) -> Result<f64, DstError> {
        if self.frame != other.frame {
            return Err(DstError::FrameMismatch);
        }
        let mut kappa = 0.0;
        for (b, &mb) in self.masses.iter().enumerate() {
            if mb == 0.0 {
                continue;
            }
            for (c, &mc) in other.masses.iter().enumerate() {
                if b & c == 0 {
                    kappa += mb * mc;
                }
            }
        }
        Ok(kappa.min(1.0))
    }

    /// Dempster's rule: conflict-renormalized conjunctive combination.
    pub fn combine(&self, other: &MassFunction) -> Result<MassFunction, DstError> {
        if self.frame != other.frame {
            return Err(DstError::FrameMismatch);
        }
        let n = self.frame.subset_count();
        let mut out = vec![0.0; n];
        for (b, &mb) in self.masses.iter().enumerate() {
            if mb == 0.0 {
                continue;
            }
            for (c, &mc) in other.masses.iter().enumerate() {
                if mc == 0.0 {
                    continue;
                }
                out[b & c] += mb * mc;
            }
        }
        let normalizer = 1.0 - out[0];
        if normalizer < TOTAL_CONFLICT_EPS {
            return Err(DstError::TotalConflict);
        }
        out[0] = 0.0;
        for m in &mut out[1..] {
            *m /= normalizer;
        }
        Ok(MassFunction {
            frame: self.frame.clone(),
            masses: out,
        })
    }

    /// Classical discounting: `β·m + (1−β)·m_Ω`.
    pub fn discount(&self, beta: f64) -> Result<MassFunction, DstError> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(DstError::InvalidBeta(beta));
        }
        let mut masses: Vec<f64> = self.masses.iter().map(|m| beta * m).collect();
        let omega = masses.len() - 1;
        masses[omega] += 1.0 - beta;
        Ok(MassFunction {
            frame: self.frame.clone(),
            masses,
        })
    }

    pub fn to_doc(&self) -> MassFunctionDoc {
        let mut masses = BTreeMap::new();
        for (bits, &m) in self.masses.iter().enumerate() {
            if m > 0.0 {
                let mut labels: Vec<&str> = Subset(bits as u16)
                    .members()
                    .map(|k| self.frame.label(k))
                    .collect();
                labels.sort_unstable();
                masses.insert(labels.join("|"), m);
            }
        }
        MassFunctionDoc {
            frame: self.frame.labels().to_vec(),
            masses,
        }
    }

    pub fn from_doc(doc: &MassFunctionDoc) -> Result<Self, DstError> {
        let frame = Frame::new(doc.frame.clone())?;
        let mut masses = vec![0.0; frame.subset_count()];
        for (key, &m) in &doc.masses {
            if key.is_empty() {
                return Err(DstError::InvalidMass(
                    "the empty set cannot be a focal set".into(),
                ));
            }
            let labels: Vec<&str> = key.split('|').collect();
            let subset = frame.subset(&labels)?;
            if labels.len() != subset.members().count() {
                return Err(DstError::InvalidMass(format!(
                    "subset key {key:?} repeats a label"
                )));
            }
            if !(m >= 0.0) || !m.is_finite() {
                return Err(DstError::InvalidMass(format!("mass of {key:?} is {m}")));
            }
            masses[subset.index()] += m;
        }
        let sum: f64 = masses.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DstError::InvalidMass(format!("masses sum to {sum}")));
        }
        for m in &mut masses {
            *m /= sum;
        }
        MassFunction::new(frame, masses)
    }
}

/// JSON form of a mass function: subsets keyed by `|`-joined sorted labels,
/// e.g. `{"frame": ["a", "b"], "masses": {"a": 0.6, "a|b": 0.4}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MassFunctionDoc {
    pub frame: Vec<String>,
    pub masses: BTreeMap<String, f64>,
}

/// The restricted mass family produced by the evidence layer:
/// singletons plus Ω, nothing else.
#[derive(Debug, Clone)]
pub struct SimpleClassMass {
    frame: Arc<Frame>,
    singletons: Vec<f64>,
    omega: f64,
}

impl SimpleClassMass {
    pub fn new(frame: Arc<Frame>, singletons: Vec<f64>, omega: f64) -> Result<Self, DstError> {
        if singletons.len() != frame.class_count() {
            return Err(DstError::InvalidMass(format!(
                "expected {} singleton masses, got {}",
                frame.class_count(),
                singletons.len()
            )));
        }
        let mut sum = omega;
        for &m in &singletons {
            if !(m >= 0.0) || m > 1.0 + MASS_SUM_TOL {
                return Err(DstError::InvalidMass(format!("singleton mass {m}")));
            }
            sum += m;
        }
        if !(omega >= 0.0) || omega > 1.0 + MASS_SUM_TOL {
            return Err(DstError::InvalidMass(format!("omega mass {omega}")));
        }
        if (sum - 1.0).abs() > MASS_SUM_TOL {
            return Err(DstError::InvalidMass(format!("masses sum to {sum}")));
        }
        Ok(SimpleClassMass {
            frame,
            singletons,
            omega,
        })
    }

    pub fn vacuous(frame: Arc<Frame>) -> Self {
        let k = frame.class_count();
        SimpleClassMass {
            frame,
            singletons: vec![0.0; k],
            omega: 1.0,
        }
    }

    pub fn frame(&self) -> &Arc<Frame> {
        &self.frame
    }

    pub fn singleton_masses(&self) -> &[f64] {
        &self.singletons
    }

    pub fn omega_mass(&self) -> f64 {
        self.omega
    }

    /// `pl(ω_k) = m({ω_k}) + m(Ω)`.
    pub fn contour(&self) -> ContourFunction {
        let values = self
            .singletons
            .iter()
            .map(|&m| (m + self.omega).min(1.0))
            .collect();
        ContourFunction::new(self.frame.clone(), values)
            .expect("singleton + omega masses lie in [0, 1]")
    }

    /// Expand into the dense representation (for cross-checks and the CLI).
    pub fn to_mass_function(&self) -> MassFunction {
        let mut masses = vec![0.0; self.frame.subset_count()];
        for (k, &m) in self.singletons.iter().enumerate() {
            masses[1 << k] += m;
        }
        let omega_idx = self.frame.subset_count() - 1;
        masses[omega_idx] += self.omega;
        MassFunction {
            frame: self.frame.clone(),
            masses,
        }
    }
}

/// Dempster-combine mass functions whose focal sets are singletons and Ω.
///
/// The family is closed under the rule, so the combination reduces to
/// per-class products: the unnormalized result is
/// `μ({ω_k}) = Π_i (m_i({ω_k}) + m_i(Ω)) − Π_i m_i(Ω)` and
/// `μ(Ω) = Π_i m_i(Ω)`, normalized at the end. `O(I·K)` instead of the
/// exponential general rule.
pub fn combine_simple(inputs: &[SimpleClassMass]) -> Result<SimpleClassMass, DstError> {
    let first = inputs.first().ok_or(DstError::EmptyInput)?;
    let frame = first.frame.clone();
    let k = frame.class_count();
    let mut sing_prod = vec![1.0; k];
    let mut omega_prod = 1.0;
    for m in inputs {
        if m.frame != frame {
            return Err(DstError::FrameMismatch);
        }
        for (c, p) in sing_prod.iter_mut().enumerate() {
            *p *= m.singletons[c] + m.omega;
        }
        omega_prod *= m.omega;
    }
    let mut singletons: Vec<f64> = sing_prod
        .iter()
        .map(|&p| (p - omega_prod).max(0.0))
        .collect();
    let normalizer = sing_prod.iter().sum::<f64>() - (k as f64 - 1.0) * omega_prod;
    if normalizer < TOTAL_CONFLICT_EPS {
        return Err(DstError::TotalConflict);
    }
    for m in &mut singletons {
        *m /= normalizer;
    }
    let omega = omega_prod / normalizer;
    SimpleClassMass::new(frame, singletons, omega)
}

/// Per-class plausibilities `pl(ω_k)`, each in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ContourFunction {
    frame: Arc<Frame>,
    values: Vec<f64>,
}

impl ContourFunction {
    pub fn new(frame: Arc<Frame>, values: Vec<f64>) -> Result<Self, DstError> {
        if values.len() != frame.class_count() {
            return Err(DstError::InvalidMass(format!(
                "expected {} contour values, got {}",
                frame.class_count(),
                values.len()
            )));
        }
        let mut clamped = values;
        for v in &mut clamped {
            if !v.is_finite() || *v < -1e-9 || *v > 1.0 + 1e-9 {
                return Err(DstError::InvalidMass(format!("contour value {v}")));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(ContourFunction {
            frame,
            values: clamped,
        })
    }

    pub fn frame(&self) -> &Arc<Frame> {
        &self.frame
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Contextual discounting at the contour level:
/// `pl'(ω_k) = 1 − β_k + β_k·pl(ω_k)` with one reliability per class.
pub fn contextual_discount_contour(
    pl: &ContourFunction,
    beta: &[f64],
) -> Result<ContourFunction, DstError> {
    if beta.len() != pl.frame.class_count() {
        return Err(DstError::InvalidMass(format!(
            "expected {} discount rates, got {}",
            pl.frame.class_count(),
            beta.len()
        )));
    }
    for &b in beta {
        if !(0.0..=1.0).contains(&b) {
            return Err(DstError::InvalidBeta(b));
        }
    }
    let values = pl
        .values
        .iter()
        .zip(beta)
        .map(|(&v, &b)| 1.0 - b + b * v)
        .collect();
    ContourFunction::new(pl.frame.clone(), values)
}

/// Elementwise product of contour functions across sources.
///
/// Deliberately unnormalized: the combined contour is only proportional
/// to the product, and the downstream per-voxel score normalization
/// cancels the constant, so the joint conflict never has to be computed.
pub fn fused_contour(contours: &[ContourFunction]) -> Result<Vec<f64>, DstError> {
    let first = contours.first().ok_or(DstError::EmptyInput)?;
    let mut product = vec![1.0; first.frame.class_count()];
    for c in contours {
        if c.frame != first.frame {
            return Err(DstError::FrameMismatch);
        }
        for (p, &v) in product.iter_mut().zip(&c.values) {
            *p *= v;
        }
    }
    Ok(product)
}
