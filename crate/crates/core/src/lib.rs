//! Few-shot out-of-distribution detection by prompt learning against a
//! frozen text encoder, with entropy regularization on ID-irrelevant local
//! regions and MCM / GL-MCM test-time scoring.

pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod error;
pub mod matrix;
pub mod metrics;
pub mod report;
pub mod rng;
pub mod scoring;
pub mod store;
pub mod sweep;
pub mod synthworld;
pub mod training;

pub use backbone::{encode_text, reference_context, ClassVocabulary, EncoderSpec, FrozenEncoder, PromptContext};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use metrics::{auroc, evaluate, fpr_at_tpr, EvalReport, MetricResult, OodSplit};
pub use scoring::{RegionProbs, ScoreKind, ScoreReport};
pub use sweep::{run_sweep, Benchmark, SweepParam, SweepResult, SweepRow};
pub use synthworld::{build_synthetic, FeatureRecord, WorldConfig};
pub use training::{train, ExtractionStrategy, Objective, TrainConfig, TrainOutcome};
