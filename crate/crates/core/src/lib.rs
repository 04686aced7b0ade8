//! Explainable hate-speech classification with rationale-supervised
//! attention.
//!
//! The crate covers the whole pipeline: corpus ingestion and annotator
//! agreement ([`corpus`], [`agreement`]), a [CLS]-attention classifier and the
//! [`Predictor`] abstraction ([`predictor`]), two-stage attention-supervised
//! training ([`trainer`]), n-gram explainability scores ([`xngram`]), LLM
//! rationale fusion ([`fusion`]) and plausibility/faithfulness evaluation
//! ([`metrics`], [`pipeline`]).

pub mod agreement;
pub mod corpus;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod pipeline;
pub mod predictor;
pub mod synthetic;
pub mod trainer;
pub mod xngram;

pub use corpus::{tokenize, Corpus, Label, Language, RationaleVector, Sample, TokenSequence};
pub use error::{Error, Result};
pub use metrics::MetricReport;
pub use predictor::{Predictor, ProbDist, ReferenceAttentionClassifier, StubPredictor};
pub use trainer::TrainingConfig;
pub use xngram::{Explainer, NgramWeights, ProbeMode};
