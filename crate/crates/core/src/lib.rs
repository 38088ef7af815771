pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod fg_encoder;
pub mod image;
pub mod nn;
pub mod query_encoder;
pub mod retrieval;
pub mod rng;
pub mod schema;
pub mod types;
pub mod vector;
