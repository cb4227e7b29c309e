//! Training, inference, evaluation and ablation drivers behind the CLI.

pub mod ablate;
pub mod config;
pub mod infer;
pub mod train;

pub use ablate::{ablate, ablate_seed, AblationReport, SeedResult, Variant, VariantResult};
pub use config::{FreezeConfig, OptimConfig, Paths, Profile, RunConfig};
pub use infer::{
    evaluate_samples, ideal_results, infer_maps, infer_samples, load_predictions, overlay, predict_maps, write_overlay,
    MagnificationMode,
};
pub use train::{build_model, load_model, train, EpochRecord, TrainHistory, Trained};
