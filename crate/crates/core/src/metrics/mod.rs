//! Evaluation: pixel-quality scores, a moment-based distribution distance,
//! and probes of how well fused metadata and trained models carry each
//! attribute.

mod moments;
mod probes;
mod quality;
mod report;

pub use moments::{frechet_from_features, moment_distance, moment_features, MomentDistance, MomentOptions};
pub use probes::{
    fidelity_probe, image_statistic, recoverability_probe, spearman, FidelityResult,
    FidelityStatistic, ProbeFusion, RecoverabilityConfig, RecoverabilityResult,
};
pub use quality::{psnr, psnr_unit, ssim, ssim_unit, PSNR_CAP};
pub use report::{MetricReport, PairScore};
