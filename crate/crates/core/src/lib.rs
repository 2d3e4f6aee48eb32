//! Schema-driven information extraction from clinical free text with a
//! locally hosted language model, and the benchmark metric suite used to score it.

pub mod evaluation;
pub mod http;
pub mod ingest;
pub mod model_client;
pub mod output_pipeline;
pub mod par;
pub mod prompting;
pub mod runner;
pub mod synth;
pub mod task_model;
