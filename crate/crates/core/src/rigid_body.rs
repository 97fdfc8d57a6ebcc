//! Continuous-time rigid-body / quadrotor dynamics, fixed-step RK4 integration,
//! and rotation-matrix maintenance.
//!
//! State convention: the attitude is a rotation matrix `R` mapping body-frame
//! vectors into the inertial frame, `nu` is the body angular rate, `p` the
//! inertial position and `v` the body-frame linear velocity:
//!
//! ```text
//! R' = R S(nu)
//! J nu' = M - S(nu) J nu
//! p' = R v
//! v' = F/m - S(nu) v - g R^T e3
//! ```
//!
//! The quadrotor restricts the force to a body-z thrust, `F = T e3`.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::scalar::{real, Real};

/// Errors raised by integration and rotation maintenance.
#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    /// A propagated state contained NaN or infinity.
    #[error("non-finite value produced while integrating ({what})")]
    NonFinite { what: &'static str },
    /// The orthogonal polar factor has determinant -1: the stored attitude has
    /// degenerated into a reflection and cannot be repaired.
    #[error("rotation projection produced a reflection (det = -1)")]
    Reflection,
    /// The polar iteration failed to converge; the input was too far from any
    /// rotation matrix.
    #[error("rotation projection did not converge")]
    ProjectionDiverged,
}

/// Diagonal-inertia rigid-body parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidBodyParams<T: Real> {
    /// Principal moments of inertia (Ix, Iy, Iz), kg m^2.
    pub inertia: Vector3<T>,
    /// Total mass, kg.
    pub mass: T,
    /// Gravitational acceleration, m/s^2 (non-negative).
    pub gravity: T,
}

impl<T: Real> RigidBodyParams<T> {
    pub fn new(inertia: Vector3<T>, mass: T, gravity: T) -> Self {
        assert!(
            inertia.x > T::zero() && inertia.y > T::zero() && inertia.z > T::zero(),
            "inertia must be positive"
        );
        assert!(mass > T::zero(), "mass must be positive");
        assert!(gravity >= T::zero(), "gravity must be non-negative");
        Self { inertia, mass, gravity }
    }

    /// Representative small-quadrotor scale: m = 1 kg, J = diag(0.01, 0.01, 0.02),
    /// g = 9.81 m/s^2.
    pub fn small_quad() -> Self {
        Self::new(
            Vector3::new(real(0.01), real(0.01), real(0.02)),
            T::one(),
            real(9.81),
        )
    }

    #[inline]
    pub fn inertia_inv(&self) -> Vector3<T> {
        Vector3::new(
            T::one() / self.inertia.x,
            T::one() / self.inertia.y,
            T::one() / self.inertia.z,
        )
    }

    /// Thrust that balances gravity at level attitude.
    #[inline]
    pub fn hover_thrust(&self) -> T {
        self.mass * self.gravity
    }
}

/// Rigid-body state: attitude matrix, body rates, inertial position, body velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyState<T: Real> {
    /// Body-to-inertial rotation matrix.
    pub rot: Matrix3<T>,
    /// Angular rate in the body frame, rad/s.
    pub rates: Vector3<T>,
    /// Position in the inertial frame, m.
    pub pos: Vector3<T>,
    /// Linear velocity in the body frame, m/s.
    pub vel: Vector3<T>,
}

impl<T: Real> BodyState<T> {
    /// At-rest state with level attitude at the given position.
    pub fn hover(pos: Vector3<T>) -> Self {
        Self {
            rot: Matrix3::identity(),
            rates: Vector3::zeros(),
            pos,
            vel: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rot.iter().all(|x| x.is_finite())
            && self.rates.iter().all(|x| x.is_finite())
            && self.pos.iter().all(|x| x.is_finite())
            && self.vel.iter().all(|x| x.is_finite())
    }

    /// Frobenius distance of `R^T R` from the identity plus determinant defect.
    pub fn rotation_defect(&self) -> T {
        let ortho = (self.rot.transpose() * self.rot - Matrix3::identity()).norm();
        let det = (self.rot.determinant() - T::one()).abs();
        ortho + det
    }
}

/// External force and torque, both in the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wrench<T: Real> {
    /// Force, N.
    pub force: Vector3<T>,
    /// Torque, N m.
    pub torque: Vector3<T>,
}

/// Quadrotor input: collective thrust along body z plus a body torque.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadInput<T: Real> {
    /// Collective thrust, N.
    pub thrust: T,
    /// Body torque, N m.
    pub torque: Vector3<T>,
}

impl<T: Real> QuadInput<T> {
    pub fn new(thrust: T, torque: Vector3<T>) -> Self {
        Self { thrust, torque }
    }

    /// Hover trim: gravity-balancing thrust, zero torque.
    pub fn hover_trim(params: &RigidBodyParams<T>) -> Self {
        Self { thrust: params.hover_thrust(), torque: Vector3::zeros() }
    }

    pub fn wrench(&self) -> Wrench<T> {
        Wrench { force: Vector3::new(T::zero(), T::zero(), self.thrust), torque: self.torque }
    }

    pub fn is_finite(&self) -> bool {
        self.thrust.is_finite() && self.torque.iter().all(|x| x.is_finite())
    }
}

/// Time derivative of a [`BodyState`].
#[derive(Debug, Clone, Copy)]
pub struct StateDerivative<T: Real> {
    pub rot: Matrix3<T>,
    pub rates: Vector3<T>,
    pub pos: Vector3<T>,
    pub vel: Vector3<T>,
}

/// Skew-symmetric (cross-product) matrix: `skew(a) * b == a x b`.
#[inline]
pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(), -v.z, v.y,
        v.z, T::zero(), -v.x,
        -v.y, v.x, T::zero(),
    )
}

/// Unit vector along the third axis.
#[inline]
pub fn e3<T: Real>() -> Vector3<T> {
    Vector3::new(T::zero(), T::zero(), T::one())
}

/// Closed-form rotation exponential (Rodrigues formula), `exp(S(v))`.
pub fn exp_so3<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    let angle = v.norm();
    if angle < real(1e-12) {
        // Second-order series keeps small perturbations orthonormal to roundoff.
        let s = skew(v);
        return Matrix3::identity() + s + s * s * real::<T>(0.5);
    }
    let axis = *v / angle;
    let s = skew(&axis);
    Matrix3::identity() + s * angle.sin() + s * s * (T::one() - angle.cos())
}

/// Continuous-time rigid-body derivative under a general wrench.
pub fn rigid_body_derivative<T: Real>(
    state: &BodyState<T>,
    w: &Wrench<T>,
    params: &RigidBodyParams<T>,
) -> StateDerivative<T> {
    let j_nu = params.inertia.component_mul(&state.rates);
    StateDerivative {
        rot: state.rot * skew(&state.rates),
        rates: params
            .inertia_inv()
            .component_mul(&(w.torque - state.rates.cross(&j_nu))),
        pos: state.rot * state.vel,
        vel: w.force / params.mass
            - state.rates.cross(&state.vel)
            - state.rot.tr_mul(&e3()) * params.gravity,
    }
}

/// Quadrotor derivative: the rigid-body dynamics with `F = thrust * e3`, `M = torque`.
pub fn quad_derivative<T: Real>(
    state: &BodyState<T>,
    input: &QuadInput<T>,
    params: &RigidBodyParams<T>,
) -> StateDerivative<T> {
    rigid_body_derivative(state, &input.wrench(), params)
}

fn advance<T: Real>(state: &BodyState<T>, d: &StateDerivative<T>, h: T) -> BodyState<T> {
    BodyState {
        rot: state.rot + d.rot * h,
        rates: state.rates + d.rates * h,
        pos: state.pos + d.pos * h,
        vel: state.vel + d.vel * h,
    }
}

/// One RK4 step with zero-order-hold input; no manifold projection.
///
/// `dt` may be negative (used by the finite-difference oracles to step the
/// flow backwards).
pub(crate) fn rk4_raw<T: Real>(
    state: &BodyState<T>,
    input: &QuadInput<T>,
    params: &RigidBodyParams<T>,
    dt: T,
) -> BodyState<T> {
    let half = dt * real(0.5);
    let k1 = quad_derivative(state, input, params);
    let k2 = quad_derivative(&advance(state, &k1, half), input, params);
    let k3 = quad_derivative(&advance(state, &k2, half), input, params);
    let k4 = quad_derivative(&advance(state, &k3, dt), input, params);
    let sixth = dt / real(6.0);
    let two = real::<T>(2.0);
    BodyState {
        rot: state.rot + (k1.rot + k2.rot * two + k3.rot * two + k4.rot) * sixth,
        rates: state.rates + (k1.rates + k2.rates * two + k3.rates * two + k4.rates) * sixth,
        pos: state.pos + (k1.pos + k2.pos * two + k3.pos * two + k4.pos) * sixth,
        vel: state.vel + (k1.vel + k2.vel * two + k3.vel * two + k4.vel) * sixth,
    }
}

/// Advances the state by `dt` (RK4, zero-order-hold input) and re-projects the
/// attitude onto SO(3).
pub fn integrate_step<T: Real>(
    state: &BodyState<T>,
    input: &QuadInput<T>,
    params: &RigidBodyParams<T>,
    dt: T,
) -> Result<BodyState<T>, DynamicsError> {
    let mut next = rk4_raw(state, input, params, dt);
    if !next.is_finite() {
        return Err(DynamicsError::NonFinite { what: "rk4 state" });
    }
    next.rot = so3_project(&next.rot)?;
    Ok(next)
}

/// Projects a near-rotation matrix onto SO(3) via its orthogonal polar factor.
///
/// Uses the Newton iteration `X <- (X + X^-T)/2`, which converges quadratically
/// to the polar factor for any nonsingular input. A matrix that already
/// satisfies the orthonormality test is returned unchanged, so projection is
/// bitwise idempotent. Fails if the polar factor is a reflection.
pub fn so3_project<T: Real>(m: &Matrix3<T>) -> Result<Matrix3<T>, DynamicsError> {
    let tol = T::default_epsilon() * real(100.0);
    let mut x = *m;
    for _ in 0..30 {
        let defect = (x.transpose() * x - Matrix3::identity()).norm();
        if !defect.is_finite() {
            return Err(DynamicsError::NonFinite { what: "polar iteration" });
        }
        if defect < tol {
            if x.determinant() < T::zero() {
                return Err(DynamicsError::Reflection);
            }
            return Ok(x);
        }
        let inv = x
            .try_inverse()
            .ok_or(DynamicsError::ProjectionDiverged)?;
        x = (x + inv.transpose()) * real::<T>(0.5);
    }
    Err(DynamicsError::ProjectionDiverged)
}

/// ZYX Euler angles extracted from a rotation matrix (logging convention).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerZyx<T: Real> {
    pub roll: T,
    pub pitch: T,
    pub yaw: T,
    /// Set when |pitch| is within ~1e-6 rad of the gimbal singularity; the
    /// roll/yaw split is then conventional (yaw forced to zero), not unique.
    pub gimbal: bool,
}

/// Extracts ZYX (yaw-pitch-roll) Euler angles: `R = Rz(yaw) Ry(pitch) Rx(roll)`.
pub fn euler_zyx<T: Real>(rot: &Matrix3<T>) -> EulerZyx<T> {
    let sp = -rot[(2, 0)];
    // sin(pitch) at the guard boundary |pitch| = pi/2 - 1e-6.
    let guard = real::<T>((core::f64::consts::FRAC_PI_2 - 1e-6).sin());
    if sp.abs() >= guard {
        let pitch = if sp > T::zero() { T::frac_pi_2() } else { -T::frac_pi_2() };
        EulerZyx {
            roll: rot[(0, 1)].atan2(rot[(1, 1)]) * if sp > T::zero() { T::one() } else { -T::one() },
            pitch,
            yaw: T::zero(),
            gimbal: true,
        }
    } else {
        EulerZyx {
            roll: rot[(2, 1)].atan2(rot[(2, 2)]),
            pitch: sp.asin(),
            yaw: rot[(1, 0)].atan2(rot[(0, 0)]),
            gimbal: false,
        }
    }
}

/// Rebuilds the rotation matrix from ZYX Euler angles.
pub fn rotation_zyx<T: Real>(roll: T, pitch: T, yaw: T) -> Matrix3<T> {
    exp_so3(&(e3::<T>() * yaw))
        * exp_so3(&(Vector3::new(T::zero(), T::one(), T::zero()) * pitch))
        * exp_so3(&(Vector3::new(T::one(), T::zero(), T::zero()) * roll))
}
