//! Crossing-location inference for pedestrians with a small causal language model.
//!
//! The pipeline turns structured crossing observations into knowledge-augmented
//! prompts, fine-tunes low-rank adapters on a frozen (optionally 4-bit quantized)
//! decoder-only transformer with an answer-token-only loss, and evaluates the
//! result under stratified and site-held-out protocols. Exact Shapley values over
//! the seven prompt components explain individual predictions and the corpus as a
//! whole.
//!
//! Module map:
//!
//! - [`corpus`]: observation/site records, CSV I/O, synthetic generator, splits
//! - [`vision`]: per-site built-environment descriptions (template stub or HTTP service)
//! - [`prompting`]: prompt assembly, rendering, vocabulary, answer masking
//! - [`lm`]: the decoder-only model with hand-written backward pass
//! - [`lora`]: low-rank adapters on the attention projections
//! - [`nf4`]: blockwise 4-bit NormalFloat quantization of frozen weights
//! - [`training`]: AdamW, cosine schedule, clipping, accumulation, early stopping
//! - [`eval`]: decoding, metrics, evaluation protocols
//! - [`attribution`]: exact Shapley attribution over prompt components
//! - [`baselines`]: logistic and per-site-intercept logistic regression
//! - [`config`] and [`pipeline`]: run configuration and end-to-end orchestration

pub mod attribution;
pub mod baselines;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod lm;
pub mod lora;
pub mod nf4;
pub mod pipeline;
pub mod prompting;
pub mod real;
pub mod seeds;
pub mod training;
pub mod vision;

mod error;

pub use error::{Error, Result};

pub use corpus::{
    AgeGroup, GreenInterval, GreenOnsetInterval, Label, LandUse, PedestrianObservation,
    SiteRecord, SplitAssignment, SplitStrategy, WalkingContext, Weather, Gender,
};
pub use eval::{MetricReport, Prediction};
pub use lm::{ModelConfig, ModelParams};
pub use lora::LoraConfig;
pub use prompting::{KnowledgeConfig, Prompt, PromptComponentKind, TokenizedPrompt, Vocabulary};
pub use real::Real;
pub use training::TrainConfig;
pub use vision::VisionDescription;
