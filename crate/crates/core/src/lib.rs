pub mod densities;
pub mod knn;
pub mod sampling;
pub mod risk;
pub mod kselect;
pub mod theory;
pub mod config;
pub mod emit;
pub mod experiment;
pub mod dataset;
