//! Skeleton-to-mesh pipeline for multi-person 3D pose and shape estimation.
//!
//! The library covers the full parameter path: analytic twist-and-swing
//! inverse kinematics from 3D skeletons onto a deformable body model, a
//! relation-aware transformer that refines the resulting parameters jointly
//! over nearby persons, the training losses (including least-squares
//! adversarial terms), the standard 3D pose/mesh evaluation metrics, and a
//! synthetic experiment harness with deterministic seeding.
//!
//! Start with the `examples/` directory: each example exercises one major
//! capability end to end. The thin `bodyik` binary exposes the same flows
//! as subcommands for scripted use.

pub mod autodiff;
pub mod bodymodel;
pub mod error;
pub mod harness;
pub mod ik;
pub mod losses;
pub mod metrics;
pub mod refiner;
pub mod rotmath;

pub use error::{Error, Result};
