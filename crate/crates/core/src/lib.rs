pub mod autodiff;
pub mod coupling;
pub mod error;
pub mod gns;
pub mod graph;
pub mod grids;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod rollout;
pub mod synthdata;
pub mod unet;

pub use error::{Error, Result};
