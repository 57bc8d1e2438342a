pub mod cli;
pub mod contrastive;
pub mod data;
pub mod encoders;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod retrieval;
pub mod tensor;
pub mod training;
pub mod vocab;
