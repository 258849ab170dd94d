//! Datasets, episodes, training, evaluation and persistence.

pub mod ablation;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod episode;
pub mod eval;
pub mod formats;
pub mod loader;
pub mod model;
pub mod train;

pub use ablation::{run_ablation, AblationReport, AblationVariant, VARIANTS};
pub use augment::AugmentConfig;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainState};
pub use config::Config;
pub use data::{synth_dataset, synth_splits, Dataset, Split, Splits};
pub use episode::{sample_episode, Episode, EpisodeBatch, EpisodeShape};
pub use eval::{confidence_interval, evaluate, EpisodeScorer, EvalReport};
pub use model::{accuracy, EpisodeOutput, Model, ModelConfig};
pub use train::{prepare_data, train, LogRecord, TrainOptions, TrainOutcome};
