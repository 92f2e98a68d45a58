pub mod augment;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod intent;
pub mod metrics;
pub mod numcore;
pub mod retrieval;
pub mod tokenizer;
pub mod trainer;
