//! Multi-domain multi-task recommendation with a mixture of shared, domain
//! and task experts fused by learned weights.

pub mod autodiff;
pub mod data;
pub mod embedding;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod variants;
