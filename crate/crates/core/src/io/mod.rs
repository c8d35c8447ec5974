pub mod config;
pub mod container;
pub mod dataset;
pub mod features;
pub mod manifest;
pub mod synthetic;
