pub mod backbone;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod data;
pub mod embedding;
pub mod encoders;
pub mod error;
pub mod experiments;
pub mod optim;
pub mod prompt;
pub mod rng;
pub mod train;
pub mod words;
