pub mod dataset;
pub mod experiment;
pub mod kt_models;
pub mod mp_pipeline;
pub mod seeds;
pub mod synthetic;
pub mod training;
