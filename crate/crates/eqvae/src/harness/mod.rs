//! Experiment orchestration: dataset ingestion, config-driven training
//! runs with checkpoints and per-step metrics, evaluation commands, and
//! run-to-run comparison.

mod config;
mod dataset;
mod evals;
mod shapes;
mod trainer;

pub use config::{config_hash, ExperimentConfig, Mode};
pub use dataset::{ingest_dataset, DatasetHandle};
pub use evals::{
    build_latent_dataset, compare_runs, estimate_id, eval_equivariance, eval_gen, eval_recon,
    probe_latent_transforms, train_latentgen, visualize_pca, write_grid_png, ComparisonReport,
    GenEvalReport, ReconReport, TransformProbeReport,
};
pub use shapes::generate_shapes_corpus;
pub use trainer::{run_experiment, FinalReport, MetricsRow, METRICS_HEADER};
