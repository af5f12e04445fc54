//! Trajectory denoising and temporal interpolation of interface frames.

mod kalman;
mod sdf;

pub use kalman::{kalman_rts_smooth, kalman_rts_states, CaState, KalmanConfig, StateMat, StateVec};
pub use sdf::{euclidean_sdf, resample_sequence, sdf_interpolate, squared_edt, SignedDistanceField};
