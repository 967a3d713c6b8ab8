//! Group-relative policy optimization on a simulated multiple-choice
//! recognition task, with a similarity curriculum and group-diversity
//! prompt augmentation.
//!
//! The student is a softmax policy over answer options whose log-probabilities,
//! gradients and KL divergences are closed-form, so every part of the
//! training objective can be checked numerically.

pub mod augment;
pub mod config;
pub mod curriculum;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod grpo;
pub mod io;
pub mod metrics;
pub mod policy;
pub mod rng;

pub use augment::{AugmentConfig, Augmenter, TemplateBank, VariantPrompt};
pub use config::{Prepared, ProviderKind, RunConfig};
pub use curriculum::{BinStrategy, CurriculumBin, CurriculumSettings, CurriculumState};
pub use dataset::{load_dataset, synth_generate, Dataset, OptionEntry, QuestionRecord, SynthSpec};
pub use embedding::{DifficultyScore, Embedding, EmbeddingProvider, HashProvider, TableProvider};
pub use error::{Error, ErrorKind, Result};
pub use grpo::{GrpoConfig, RolloutGroup, RunInputs, Strategy, TrainOutcome, TrainState};
pub use io::Provenance;
pub use metrics::{EvalResult, MetricsLog, MetricsRow};
pub use policy::{PolicyParams, PolicySnapshot, ResponseSample};
