pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod training;
pub mod wavelet;
