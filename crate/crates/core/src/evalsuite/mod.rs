//! Metrics, perturbation benchmarks, empirical certification and the
//! loss-term ablation.

mod ablation;
mod bench;
mod certify;
mod metrics;
pub mod plot;

pub use ablation::{ablation_run, cumulative_configs, term_label, AblationRow, AblationTable};
pub use bench::{
    bench, clean_row, evaluate, input_noise, input_perturb_eval, input_perturb_metrics, latent_perturb_eval,
    latent_perturb_metrics, mean_std, perturb_gru2, predict_all, BenchReport, BenchRow, Condition,
};
pub use certify::{certification_csv, certify_secure, certify_secure_sweep, CertificationResult};
pub use metrics::{average_precision, evaluate_predictions, mtta, pr_area, thresholds, MetricResult, ThresholdRow};
