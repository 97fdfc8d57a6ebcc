//! Reduced-dimension Koopman generalized-eigenfunction model of quadrotor
//! rigid-body dynamics, exact-linearization LQ control against a least-squares
//! pseudoinverse baseline, and a deterministic closed-loop simulation harness
//! with sensor noise and delay emulation.
//!
//! The core math ([`rigid_body`], [`lift`], [`reduce`], [`control`]) is generic
//! over the scalar type via [`scalar::Real`]; the simulation harness and its
//! CSV/metrics output are `f64`-concrete. Type aliases for the `f64`
//! instantiations live at the crate root.

pub mod scalar;
pub mod rigid_body;
pub mod lift;
pub mod reduce;
pub mod control;

pub use scalar::Real;

/// `f64` rigid-body state.
pub type BodyState64 = rigid_body::BodyState<f64>;
/// `f64` plant parameters.
pub type RigidBodyParams64 = rigid_body::RigidBodyParams<f64>;
/// `f64` thrust/torque input.
pub type QuadInput64 = rigid_body::QuadInput<f64>;
/// `f64` force/torque pair.
pub type Wrench64 = rigid_body::Wrench<f64>;
