//! Generative recommendation over quantized item identifiers.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod generation;
pub mod graph_encoder;
pub mod numeric;
pub mod pipeline;
pub mod rec_id;
pub mod recommender;
pub mod rq_vae;
pub mod training;
