pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod field;
pub mod flow;
pub mod kernels;
pub mod loss;
pub mod manifold;
pub mod paths;
pub mod special;
pub mod train;
pub mod validate;

pub use error::{Error, Result};
pub use manifold::{Factor, Manifold};
