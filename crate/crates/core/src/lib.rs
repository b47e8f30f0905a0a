pub mod textnorm;
pub mod tokenizer;
pub mod corpus;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod training;
pub mod cli;
