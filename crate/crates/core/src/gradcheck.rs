//! Randomized gradient verification: builds small random model/batch
//! instances and compares the analytic reverse pass against central
//! finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::dst::Frame;
use crate::es::EsParams;
use crate::fusion::ReliabilityMatrix;
use crate::loss::{finite_diff_check, Batch, FeatureBatch, GroundTruth, LossError, ModelParams};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients must match central differences to this relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// A random, well-conditioned instance: raw parameters of moderate
/// magnitude, features and prototypes in the unit cube, random labels.
pub fn random_instance(
    voxels: usize,
    classes: usize,
    sources: usize,
    prototypes: usize,
    dim: usize,
    rng: &mut impl Rng,
) -> (Batch, GroundTruth, ModelParams) {
    let frame = Frame::numbered(classes).expect("class count within frame bounds");
    let layers: Vec<EsParams> = (0..sources)
        .map(|_| {
            EsParams::new(
                frame.clone(),
                dim,
                (0..prototypes * dim).map(|_| rng.random::<f64>()).collect(),
                (0..prototypes)
                    .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                    .collect(),
                (0..prototypes)
                    .map(|_| rng.random::<f64>() * 0.8 + 0.1)
                    .collect(),
                (0..prototypes * classes)
                    .map(|_| rng.random::<f64>() * 0.9 + 0.1)
                    .collect(),
            )
            .expect("generated shapes are consistent")
        })
        .collect();
    let reliability = ReliabilityMatrix::from_raw(
        frame.clone(),
        sources,
        (0..sources * classes)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect(),
    )
    .expect("generated shapes are consistent");
    let params = ModelParams::new(layers, reliability).expect("consistent frames");

    let feats: Vec<FeatureBatch> = (0..sources)
        .map(|_| {
            FeatureBatch::new(
                (0..voxels * dim).map(|_| rng.random::<f64>()).collect(),
                dim,
            )
            .expect("multiple of dim")
        })
        .collect();
    let batch = Batch::new(feats).expect("equal voxel counts");
    let gt = GroundTruth::new(
        (0..voxels).map(|_| rng.random_range(0..classes)).collect(),
        classes,
    )
    .expect("labels in range");
    (batch, gt, params)
}

#[derive(Debug, Clone, Serialize)]
pub struct InstanceReport {
    pub classes: usize,
    pub sources: usize,
    pub prototypes: usize,
    pub dim: usize,
    pub voxels: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub instances: Vec<InstanceReport>,
    pub step: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Run `instances` random configurations drawn from the verification
/// grid (K ∈ {2,3,4}, H ∈ {1,2,3}, I ∈ {1,3,5}) and report the worst
/// relative error against central differences.
pub fn run_gradcheck(
    seed: u64,
    instances: usize,
    step: f64,
    tolerance: f64,
) -> Result<GradcheckReport, LossError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let class_grid = [2usize, 3, 4];
    let source_grid = [1usize, 2, 3];
    let proto_grid = [1usize, 3, 5];

    let mut reports = Vec::with_capacity(instances);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let classes = class_grid[rng.random_range(0..class_grid.len())];
        let sources = source_grid[rng.random_range(0..source_grid.len())];
        let prototypes = proto_grid[rng.random_range(0..proto_grid.len())];
        let dim = rng.random_range(2..4);
        let voxels = rng.random_range(12..32);
        let (batch, gt, params) =
            random_instance(voxels, classes, sources, prototypes, dim, &mut rng);
        let err = finite_diff_check(&batch, &gt, &params, step)?;
        worst = worst.max(err);
        reports.push(InstanceReport {
            classes,
            sources,
            prototypes,
            dim,
            voxels,
            max_rel_error: err,
        });
    }
    Ok(GradcheckReport {
        seed,
        instances: reports,
        step,
        tolerance,
        max_rel_error: worst,
        passed: worst < tolerance,
    })
}
