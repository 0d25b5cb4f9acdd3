//! Flip-consistency student-teacher training for a small anchor-based
//! object detector, built on a self-contained reverse-mode autodiff.

pub mod autodiff;
pub mod boxgeom;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod trainer;
