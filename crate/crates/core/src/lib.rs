pub mod error;
pub mod linalg;
pub mod ode;
pub mod quadrature;
pub mod special;
pub mod targets;
pub mod vp;
pub mod flow;
pub mod metrics;
pub mod nn;
pub mod score_learn;
pub mod iresnet;

pub use error::{Result, VpError};
