//! Training-free self-improving zero-shot named entity recognition.
//!
//! An LLM self-annotates an unlabeled corpus with self-consistency voting,
//! reliable annotations are selected from the result, and at test time
//! demonstrations are retrieved from that pool for in-context inference.

pub mod annotator;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod pipeline;
pub mod prompting;
pub mod retrieval;
pub mod rng;
pub mod selection;

pub use annotator::{entity_votes, Annotator, SCConfig};
pub use corpus::{
    load_dataset, normalize_span, subsample, AnnotatedSample, EntityPair, EntityPrediction, LabelSet, Sample,
};
pub use error::{Error, Result};
pub use eval::{micro_f1, multi_seed_report, ScoreReport};
pub use gateway::{Gateway, NoiseProfile, PromptRequest};
pub use prompting::{build_icl_prompt, build_zero_shot_prompt, parse_answer};
pub use retrieval::{knn, retrieve, RetrievalKind, RetrievalPolicy};
pub use selection::{two_stage_majority_vote, SelectionKind, SelectionPolicy};
