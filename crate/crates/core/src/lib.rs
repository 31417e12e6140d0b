//! Joint-torque estimation for robots without joint-torque sensors.
//!
//! An unscented Kalman filter per FT-delimited submodel fuses encoder, motor
//! current, force/torque and IMU readings over rigid-body dynamics. The
//! [`control`] and [`simulation`] modules close the loop around a simulated
//! plant so the estimate can be compared against ground truth and against a
//! recursive Newton-Euler baseline.

pub mod control;
pub mod dynamics;
pub mod estimator;
pub mod friction;
pub mod model;
pub mod simulation;
pub mod ukf;
