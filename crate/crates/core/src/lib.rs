//! Neuron-level fine-tuning (NeFT) on a small residual-MLP classifier.
//!
//! The pipeline compares an original and a fine-tuned checkpoint row by row,
//! selects the rows that moved most, retrains only those rows under gradient
//! masking, and measures how neuron utilization shifts between models.
//!
//! ```
//! use neft_core::{ModelConfig, ParameterSet, neuron_similarity, select_neurons, SelectionMode};
//!
//! let config = ModelConfig::small(7);
//! let org = ParameterSet::<f32>::init(&config).unwrap();
//! let report = neuron_similarity(&org, &org).unwrap();
//! let mask = select_neurons(&report, 0.03, SelectionMode::Sensitive).unwrap();
//! assert_eq!(mask.len(), (0.03 * config.neuron_count() as f64).round() as usize);
//! ```

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod hash;
pub mod io;
pub mod model;
pub mod selector;
pub mod tensor;
pub mod trainer;

pub use analysis::{
    categorize, pearson, rank_diff, utilization_profile, CategoryReport, RankDiffReport,
    Threshold, UtilizationProfile,
};
pub use autodiff::{Activation, Tape, Var};
pub use error::{Error, Result};
pub use io::reports::JsonArtifact;
pub use io::{Dataset, Example, PlantedTask, SyntheticKind};
pub use model::{ActivationTrace, ModelConfig, NeuronId, ParameterSet, Role};
pub use selector::{
    cosine, fit_probe, neuron_similarity, overlap, probe_select, select_neurons, union_masks,
    NeuronMask, ProbeModel, SelectionMode, SimilarityReport,
};
pub use tensor::{DType, Scalar, Tensor};
pub use trainer::{evaluate, train, Optimizer, TrainLog, TrainOptions, Trainer, TrainingMask};
