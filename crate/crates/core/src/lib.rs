//! A desk-scale laboratory for studying autoregressive language models
//! as finite-order Markov kernels over a synthetic inference language.
//!
//! The crate provides:
//! - finite vocabularies, contexts, and distributions ([`vocab`], [`dist`]);
//! - tabular and empirical n-gram kernels with rollout and scoring
//!   ([`kernel`]);
//! - a synthetic modus-ponens language with an exact entailment oracle
//!   ([`synth`]);
//! - meaning-preserving corpus transformations ([`transform`]);
//! - transformation- and inference-invariance metrics ([`metrics`]);
//! - a small trainable transformer kernel with exact f64 gradients
//!   ([`model`]);
//! - a deterministic experiment pipeline ([`harness`]).

pub mod dist;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod transform;
pub mod vocab;

pub use dist::Distribution;
pub use error::{Error, Result};
pub use kernel::{
    estimate_ngram, greedy_rollout, log_likelihood, sample_rollout, FallbackMode, Kernel,
    LogLikelihood, NGramKernel, TabularKernel,
};
pub use metrics::{combined_report, inferential_invariance, transformation_invariance, tv_distance};
pub use model::{NeuralKernel, ModelConfig, Parameters, TrainConfig};
pub use synth::{GeneratedSequence, InferenceInstance, LanguageSpec, SynthLayout};
pub use transform::{Transformation, TransformKind};
pub use vocab::{Context, Vocabulary};
