pub mod autodiff;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod ewc;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scorer;
pub mod strategies;
pub mod train;
pub mod vcl;

pub use error::{Error, Result};
