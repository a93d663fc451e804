//! Pose-only multiple-view geometry.

pub mod baseline;
pub mod cli;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod ligt;
pub mod linalg;
pub mod pa;
pub mod reconstruct;
pub mod sim;
