//! Review-driven recommendation pipeline.
//!
//! Raw reviews are mined into structured Like/Dislike preference lists,
//! aggregated into user and item profiles, and fed to a chat-completion
//! backend that produces step-by-step reasoning followed by a rating
//! token. The final prediction is the expected value of the integer
//! rating scale under a softmax over the numeric-token scores, which
//! yields a continuous rating from a discrete decoder.
//!
//! The same machinery reranks candidate items produced by native CF
//! engines (biased MF, BPR-MF) or loaded from external files, and
//! exports the teacher-annotated instruction datasets used to fine-tune
//! a student model out of process.
//!
//! Modules follow the pipeline order:
//!
//! * [`corpus`] — ingestion, k-core filtering, temporal split, subset tags
//! * [`gateway`] — prompt templates and the chat-completion abstraction
//! * [`profiling`] — preference extraction and profile construction
//! * [`similarity`] — adjusted-cosine user neighborhoods
//! * [`cf`] — MF / BPR-MF engines and candidate lists
//! * [`reasoner`] — prediction prompts and expected-rating decoding
//! * [`ranking`] — multi-stage candidate reranking
//! * [`distill`] — instruction-dataset construction and SFT export
//! * [`eval`] — RMSE/MAE and Recall/NDCG harnesses
//! * [`config`] / [`pipeline`] — declarative runs with manifest chaining

pub mod cf;
pub mod config;
pub mod corpus;
pub mod distill;
mod error;
pub mod eval;
pub mod gateway;
pub mod pipeline;
pub mod profiling;
pub mod ranking;
pub mod reasoner;
pub mod scale;
pub mod similarity;
pub mod util;

pub use error::{Error, Result};
pub use scale::RatingScale;
