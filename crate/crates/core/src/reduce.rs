//! Linear combinations of chain elements, zero-order truncation, and the
//! square input gain matrix.
//!
//! A fixed coefficient vector per chain turns each chain into a single
//! composite observable `y_0 = sum_k c_k x_k` with coupling row
//! `g_0 = sum_k c_k B_k`. Stacking the four composites gives `Upsilon` with
//!
//! ```text
//! Upsilon' = y_1 + G(kappa) du        (exact)
//! Upsilon' ~ G(kappa) du              (zero-order truncation)
//! ```
//!
//! where `y_1 = sum_k c_k x_{k+1}` is the term the truncation neglects. The
//! controller logs `|y_1| / |g_0 . du|` per composite as a validity
//! diagnostic rather than assuming it small.
//!
//! Default coefficients: position chains use the expansion of `(s + lambda)^3`
//! so that driving the composite to zero imposes a stable error polynomial on
//! the position error; the yaw chain uses `(1, 0.1)`.

use nalgebra::{Matrix4, Vector3, Vector4};
use thiserror::Error;

use crate::lift::{lift_chain_set, Chain, ChainSet, LiftConfig, MAX_DEPTH};
use crate::rigid_body::{BodyState, RigidBodyParams};
use crate::scalar::{real, Real};

/// Condition-number limit past which the gain matrix is flagged singular.
pub const GAIN_COND_LIMIT: f64 = 1e8;

#[derive(Debug, Error, PartialEq)]
pub enum ReduceError {
    #[error("coefficient vector for {chain} must have {expected} entries, got {got}")]
    CoeffLength { chain: &'static str, expected: usize, got: usize },
    #[error("coefficient vector for {chain} is all zero")]
    AllZero { chain: &'static str },
    #[error("position coefficients must have nonzero entries at indices 1 and 3, got {c1} and {c3}")]
    StructurallySingular { c1: f64, c3: f64 },
}

/// Gain matrix flagged as numerically singular.
#[derive(Debug, Error, Clone, Copy, PartialEq)]
#[error("gain matrix singular: condition number {cond} exceeds {limit}")]
pub struct SingularGain<T: Real> {
    pub cond: T,
    pub limit: T,
}

/// Per-chain combination coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationCoeffs<T: Real> {
    /// Yaw-rate chain coefficients (length = yaw chain depth, 1..=4).
    pub yaw: Vec<T>,
    /// Position chain coefficients, shared by the three axes (length 4).
    pub pos: Vec<T>,
}

impl<T: Real> CombinationCoeffs<T> {
    pub fn new(yaw: Vec<T>, pos: Vec<T>) -> Result<Self, ReduceError> {
        if yaw.is_empty() || yaw.len() > MAX_DEPTH {
            return Err(ReduceError::CoeffLength { chain: "yaw", expected: 2, got: yaw.len() });
        }
        if yaw.iter().all(|c| *c == T::zero()) {
            return Err(ReduceError::AllZero { chain: "yaw" });
        }
        if pos.len() != MAX_DEPTH {
            return Err(ReduceError::CoeffLength { chain: "position", expected: MAX_DEPTH, got: pos.len() });
        }
        // Thrust coupling lives in row 1, torque coupling in row 3; losing
        // either zeroes a column block of G for every state.
        if pos[1] == T::zero() || pos[3] == T::zero() {
            return Err(ReduceError::StructurallySingular {
                c1: pos[1].to_subset().unwrap_or(0.0),
                c3: pos[3].to_subset().unwrap_or(0.0),
            });
        }
        Ok(Self { yaw, pos })
    }

    /// Position coefficients from `(s + lambda)^3`, yaw `(1, 0.1)`.
    pub fn from_lambda(lambda: T) -> Self {
        let three = real::<T>(3.0);
        Self {
            yaw: vec![T::one(), real(0.1)],
            pos: vec![
                lambda * lambda * lambda,
                lambda * lambda * three,
                lambda * three,
                T::one(),
            ],
        }
    }

    /// Lift depths implied by the coefficient lengths.
    pub fn lift_config(&self) -> LiftConfig {
        LiftConfig { angular_depth: self.yaw.len(), position_depth: self.pos.len() }
    }
}

impl<T: Real> Default for CombinationCoeffs<T> {
    /// `lambda = 2`: position coefficients (8, 12, 6, 1).
    fn default() -> Self {
        Self::from_lambda(real(2.0))
    }
}

/// A combined chain: composite value, the first neglected element, and the
/// composite coupling row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinedChain<T: Real> {
    /// `y_0 = sum_k c_k x_k`.
    pub y0: T,
    /// `y_1 = sum_k c_k x_{k+1}` (the term a zero-order truncation drops).
    pub y1: T,
    /// `g_0 = sum_k c_k B_k`, ordered `[T, tau_x, tau_y, tau_z]`.
    pub g0: Vector4<T>,
}

/// Combines one chain with a coefficient vector of matching length.
pub fn combine_chain<T: Real>(chain: &Chain<T>, coeffs: &[T]) -> CombinedChain<T> {
    let depth = chain.values.len();
    assert_eq!(coeffs.len(), depth, "coefficient/depth mismatch");
    let mut y0 = T::zero();
    let mut y1 = T::zero();
    let mut g0 = Vector4::zeros();
    for k in 0..depth {
        y0 += coeffs[k] * chain.values[k];
        let next = if k + 1 < depth { chain.values[k + 1] } else { chain.tail };
        y1 += coeffs[k] * next;
        g0 += chain.rows[k] * coeffs[k];
    }
    CombinedChain { y0, y1, g0 }
}

/// Square gain matrix with its condition number.
///
/// Rows follow the composite order (yaw rate, x, y, z); columns the input
/// order `[T, tau_x, tau_y, tau_z]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainMatrix<T: Real> {
    pub matrix: Matrix4<T>,
    pub cond: T,
}

impl<T: Real> GainMatrix<T> {
    fn from_rows(rows: [Vector4<T>; 4]) -> Self {
        let matrix = Matrix4::from_rows(&[
            rows[0].transpose(),
            rows[1].transpose(),
            rows[2].transpose(),
            rows[3].transpose(),
        ]);
        let sv = matrix.svd(false, false).singular_values;
        let smax = sv.iter().fold(T::zero(), |a, b| if *b > a { *b } else { a });
        let smin = sv.iter().fold(smax, |a, b| if *b < a { *b } else { a });
        let cond = smax / smin;
        GainMatrix { matrix, cond }
    }

    pub fn singular(&self) -> bool {
        !(self.cond < real(GAIN_COND_LIMIT))
    }

    pub fn require_invertible(&self) -> Result<&Matrix4<T>, SingularGain<T>> {
        if self.singular() {
            Err(SingularGain { cond: self.cond, limit: real(GAIN_COND_LIMIT) })
        } else {
            Ok(&self.matrix)
        }
    }
}

/// Reduced model evaluated at one state: composite vector, neglected terms,
/// and the gain matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedEval<T: Real> {
    /// Composite observables (yaw rate, x, y, z).
    pub upsilon: Vector4<T>,
    /// Per-composite neglected term `y_1`.
    pub neglected: Vector4<T>,
    pub gain: GainMatrix<T>,
}

/// Evaluates the four composites and the gain matrix in one lift pass.
pub fn reduced_eval<T: Real>(
    state: &BodyState<T>,
    params: &RigidBodyParams<T>,
    t_bar: T,
    coeffs: &CombinationCoeffs<T>,
) -> ReducedEval<T> {
    let set = lift_chain_set(state, params, t_bar, &coeffs.lift_config());
    reduced_eval_from_chains(&set, coeffs)
}

/// Same as [`reduced_eval`] but reusing an already-evaluated chain set.
pub fn reduced_eval_from_chains<T: Real>(
    set: &ChainSet<T>,
    coeffs: &CombinationCoeffs<T>,
) -> ReducedEval<T> {
    let yaw = combine_chain(&set.yaw, &coeffs.yaw);
    let px = combine_chain(&set.pos[0], &coeffs.pos);
    let py = combine_chain(&set.pos[1], &coeffs.pos);
    let pz = combine_chain(&set.pos[2], &coeffs.pos);
    ReducedEval {
        upsilon: Vector4::new(yaw.y0, px.y0, py.y0, pz.y0),
        neglected: Vector4::new(yaw.y1, px.y1, py.y1, pz.y1),
        gain: GainMatrix::from_rows([yaw.g0, px.g0, py.g0, pz.g0]),
    }
}

/// Composite observable vector at one state.
pub fn reduced_output<T: Real>(
    state: &BodyState<T>,
    params: &RigidBodyParams<T>,
    t_bar: T,
    coeffs: &CombinationCoeffs<T>,
) -> Vector4<T> {
    reduced_eval(state, params, t_bar, coeffs).upsilon
}

/// Gain matrix at one state.
pub fn assemble_gain<T: Real>(
    state: &BodyState<T>,
    params: &RigidBodyParams<T>,
    t_bar: T,
    coeffs: &CombinationCoeffs<T>,
) -> GainMatrix<T> {
    reduced_eval(state, params, t_bar, coeffs).gain
}

/// Flat trajectory sample: position derivatives up to snap plus the yaw-rate
/// reference and its derivatives. Unavailable derivatives are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatSetpoint<T: Real> {
    pub pos: Vector3<T>,
    pub vel: Vector3<T>,
    pub acc: Vector3<T>,
    pub jerk: Vector3<T>,
    pub snap: Vector3<T>,
    pub yaw_rate: T,
    pub yaw_accel: T,
    pub yaw_jerk: T,
}

impl<T: Real> FlatSetpoint<T> {
    /// Constant-position setpoint with all derivatives zero.
    pub fn hold(pos: Vector3<T>) -> Self {
        Self {
            pos,
            vel: Vector3::zeros(),
            acc: Vector3::zeros(),
            jerk: Vector3::zeros(),
            snap: Vector3::zeros(),
            yaw_rate: T::zero(),
            yaw_accel: T::zero(),
            yaw_jerk: T::zero(),
        }
    }

    fn pos_derivs(&self, axis: usize) -> [T; 5] {
        [self.pos[axis], self.vel[axis], self.acc[axis], self.jerk[axis], self.snap[axis]]
    }

    fn yaw_derivs(&self) -> [T; 5] {
        [self.yaw_rate, self.yaw_accel, self.yaw_jerk, T::zero(), T::zero()]
    }
}

/// Reference composite vector and its derivative (the feed-forward), built by
/// substituting trajectory derivatives for the chain values.
pub fn desired_output<T: Real>(
    sp: &FlatSetpoint<T>,
    coeffs: &CombinationCoeffs<T>,
) -> (Vector4<T>, Vector4<T>) {
    let mut upsilon_d = Vector4::zeros();
    let mut ustar_d = Vector4::zeros();

    let yaw = sp.yaw_derivs();
    for (k, c) in coeffs.yaw.iter().enumerate() {
        upsilon_d[0] += *c * yaw[k];
        ustar_d[0] += *c * yaw[k + 1];
    }
    for axis in 0..3 {
        let derivs = sp.pos_derivs(axis);
        for (k, c) in coeffs.pos.iter().enumerate() {
            upsilon_d[1 + axis] += *c * derivs[k];
            ustar_d[1 + axis] += *c * derivs[k + 1];
        }
    }
    (upsilon_d, ustar_d)
}
