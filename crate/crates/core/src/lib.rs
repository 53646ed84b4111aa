pub mod augment;
pub mod encoder;
pub mod error;
pub mod frame;
pub mod linalg;
pub mod sampling;
pub mod superimage;
pub mod types;
pub mod losses;
pub mod optim;
pub mod checkpoint;
pub mod datasets;
pub mod trainer;
pub mod eval;
pub mod experiment;
pub mod config;
pub mod ablation;
