//! The simulation mechanism, ground-truth oracles and replication study.

pub mod scm;
pub mod study;
pub mod truth;

use sha2::{Digest, Sha256};

pub use scm::{simulate_observed, CovariateMode, ScmConfig, Setting, TrueNuisance};
pub use study::{compute_metrics, read_records, run_study, MetricRow, Record, StudyConfig, StudyFiles, StudyMetrics, StudyOutput};
pub use truth::{truth_by_counterfactuals, truth_by_enumeration, CounterfactualTruth, Truth};

/// A stable 64-bit seed derived from labelled parts, independent of platform
/// and of the order in which work is scheduled.
pub fn derive_seed(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
