//! Globally stable full-pose motion policies learned from a single demonstration.
//!
//! A policy couples a linear-parameter-varying position field, certified by a
//! quadratic Lyapunov function, with a quaternion field defined on the tangent
//! plane of the goal orientation. Policies can be reshaped in real time when
//! the goal moves: the Gaussian mixture behind the field is edited through a
//! chain of joints with Laplacian editing, and the Lyapunov matrix and linear
//! systems are refit with a fast convex program.
//!
//! Module map:
//!
//! * [`manifold`] quaternion sphere geometry (log/exp maps, transport, bases)
//! * [`mixture`] Gaussian mixtures over positions and tangent-plane orientations
//! * [`lyapunov`] convex learning of the quadratic Lyapunov matrix
//! * [`dslearn`] stable linear systems, policy evaluation and rollouts
//! * [`elastic`] joint extraction, Laplacian editing and policy adaptation
//! * [`runtime`] obstacle modulation and multi-step task sequencing
//! * [`bench`] LASA ingestion, the P-QLF benchmark and vector-field export

// `!(x > 0.0)` guards are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bench;
pub mod dslearn;
pub mod elastic;
mod error;
pub mod linalg;
pub mod lyapunov;
pub mod manifold;
pub mod mixture;
pub mod policy;
pub mod runtime;
pub mod trajectory;

pub use error::{Error, Result};
pub use manifold::UnitQuaternion;
pub use policy::{Pose, Se3Policy};
pub use trajectory::PoseTrajectory;
