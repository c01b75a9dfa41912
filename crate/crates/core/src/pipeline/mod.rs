//! CLI orchestration: configs, dataset generation, training, estimation,
//! evaluation, and heatmaps.

pub mod config;
pub mod dataset;
pub mod estimate;
pub mod evaluate;
pub mod heatmap;
pub mod train;

pub use config::{PriorChoice, RunConfig};
pub use dataset::{gen_data, load_dataset, load_manifest, manifest_path, DatasetKind, DatasetManifest};
pub use estimate::{cmd_estimate, estimate_one, EstimateMode, InstanceEstimate, ObservationSource};
pub use evaluate::cmd_evaluate;
pub use heatmap::{cmd_heatmap, HeatmapObjective, MOMENT_CLIP_DEFAULT};
pub use train::{cmd_train, TrainResult};
