pub mod chain_model;
pub mod cli;
pub mod config;
pub mod geometry;
pub mod kinetostatics;
pub mod link_compliance;
pub mod models;
pub mod numeric;
