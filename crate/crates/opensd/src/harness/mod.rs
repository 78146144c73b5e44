//! Synthetic data, configuration, the training loop and evaluation drivers.

pub mod coco;
pub mod config;
pub mod evalrun;
pub mod model;
pub mod scene;
pub mod train;

pub use coco::{export_dataset, ingest_coco_panoptic, load_dataset};
pub use config::RunConfig;
pub use evalrun::{evaluate, evaluate_oracle, evaluate_sequential, predict_scene, EvalOptions};
pub use model::{Pipeline, TemplateRule};
pub use scene::{generate_scene, Instance, Scene, SceneSpec, SegmentInfo};
pub use train::{synthesize_dataset, train, Dataset, TrainOutcome};
