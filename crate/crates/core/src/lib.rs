//! Continuous-time lidar/radar-inertial odometry on a white-noise-on-acceleration
//! SE(3) trajectory prior, solved as a sliding-window Gauss-Newton problem.

// `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod frontend;
pub mod gp_prior;
pub mod icp;
pub mod imu;
pub mod sim;
pub mod solver;
pub mod voxel_map;
pub mod liegroup;
pub mod eval;
pub mod io;

pub use error::{Error, Result};
