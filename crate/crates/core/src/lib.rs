//! Prognostic-score stratified experimental design.

pub mod cli;
pub mod config;
pub mod data;
pub mod estimation;
pub mod harness;
pub mod predictor;
pub mod randomization;
pub mod rng;
pub mod scoring;
pub mod stratification;
