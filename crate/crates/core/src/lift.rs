//! Analytic Koopman generalized-eigenfunction chains for the quadrotor.
//!
//! Each chain is a finite sequence of observables `x_{i,0}, x_{i,1}, ...`
//! built by repeatedly differentiating a base observable along the unforced
//! drift of the dynamics. Along the controlled flow every element obeys the
//! chain identity
//!
//! ```text
//! d/dt x_{i,k} = x_{i,k+1} + B_{i,k} . du
//! ```
//!
//! where `du = (T - T_bar, tau)` is the input *deviation* from the trim
//! `(T_bar, 0)`. Stacked, the chains form the quasi-linear model
//! `kappa' = A kappa + B(kappa) du` with `A` block-diagonal in nilpotent
//! Jordan blocks (one per chain).
//!
//! # Frozen thrust
//!
//! Thrust enters the position dynamics at relative degree two, so the
//! depth-2+ position observables are parameterized by a frozen thrust `T_bar`
//! (the most recently applied thrust in closed loop). This is what puts
//! torque coupling into the deeper rows of `B` and makes the reduced 4x4 gain
//! matrix invertible. The deviation-input convention above makes the chain
//! identity exact when `T_bar` tracks the applied thrust; the residual left
//! when it does not is measured by [`chain_oracle_residual`], not assumed
//! away.
//!
//! # Chain inventory
//!
//! Four chains are used: the body-z (yaw) rate chain and one position chain
//! per axis. Roll and pitch rates already appear inside the deeper position
//! observables, so they get no chain of their own; the yaw rate does not, so
//! it must be kept. The default depths (4 each) give a 16-dimensional lift.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector4};
use thiserror::Error;

use crate::rigid_body::{e3, rk4_raw, skew, BodyState, QuadInput, RigidBodyParams};
use crate::scalar::{real, Real};

/// Maximum chain depth with closed forms (plus nested numeric gradients).
pub const MAX_DEPTH: usize = 4;

/// Which base observable a chain differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainKind {
    /// Body-rate component chain (the kept one is body-z).
    Angular,
    /// Inertial-position component chain.
    Position,
}

/// Chain identifier: kind plus axis index (0 = x, 1 = y, 2 = z).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainId {
    pub kind: ChainKind,
    pub axis: usize,
}

impl ChainId {
    pub fn angular(axis: usize) -> Self {
        Self { kind: ChainKind::Angular, axis }
    }

    pub fn position(axis: usize) -> Self {
        Self { kind: ChainKind::Position, axis }
    }

    pub fn label(&self) -> String {
        let axis = ["x", "y", "z"][self.axis];
        match self.kind {
            ChainKind::Angular => format!("angular-{axis}"),
            ChainKind::Position => format!("position-{axis}"),
        }
    }
}

/// Depths of the stacked lift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LiftConfig {
    /// Depth of the yaw-rate chain.
    pub angular_depth: usize,
    /// Depth of each position chain.
    pub position_depth: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum LiftError {
    #[error("chain depth {depth} out of range 1..={MAX_DEPTH}")]
    DepthOutOfRange { depth: usize },
}

impl LiftConfig {
    pub fn new(angular_depth: usize, position_depth: usize) -> Result<Self, LiftError> {
        for depth in [angular_depth, position_depth] {
            if depth == 0 || depth > MAX_DEPTH {
                return Err(LiftError::DepthOutOfRange { depth });
            }
        }
        Ok(Self { angular_depth, position_depth })
    }

    /// Total lifted dimension (one angular chain plus three position chains).
    pub fn dim(&self) -> usize {
        self.angular_depth + 3 * self.position_depth
    }
}

impl Default for LiftConfig {
    /// 4 + 3*4 = 16 observables.
    fn default() -> Self {
        Self { angular_depth: MAX_DEPTH, position_depth: MAX_DEPTH }
    }
}

/// One evaluated chain: values `x_0..x_{d-1}`, the next element `x_d` (tail),
/// and the input-coupling rows `B_0..B_{d-1}` ordered `[T, tau_x, tau_y, tau_z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain<T: Real> {
    pub id: ChainId,
    pub values: Vec<T>,
    /// `x_depth`: the first element past the chain, used to evaluate the term
    /// a zero-order truncation neglects.
    pub tail: T,
    pub rows: Vec<Vector4<T>>,
}

/// The four chains of the quadrotor lift plus the frozen thrust they share.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSet<T: Real> {
    pub yaw: Chain<T>,
    pub pos: [Chain<T>; 3],
    pub t_bar: T,
}

/// Stacked lift: observable vector, Jordan state matrix, input matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FullLift<T: Real> {
    /// Stacked observables, chain order: angular-z, position-x, -y, -z.
    pub kappa: DVector<T>,
    /// Block-diagonal nilpotent Jordan matrix.
    pub a: DMatrix<T>,
    /// Stacked coupling rows, `dim x 4`.
    pub b: DMatrix<T>,
    pub config: LiftConfig,
}

// --- drift of the body-rate subsystem -------------------------------------

/// Unforced body-rate drift `f(nu) = -J^-1 (nu x J nu)`.
fn rates_drift<T: Real>(nu: &Vector3<T>, params: &RigidBodyParams<T>) -> Vector3<T> {
    let j_nu = params.inertia.component_mul(nu);
    -params.inertia_inv().component_mul(&nu.cross(&j_nu))
}

/// Closed-form Jacobian of the drift: `-J^-1 (S(nu) J - S(J nu))`.
fn rates_drift_jacobian<T: Real>(nu: &Vector3<T>, params: &RigidBodyParams<T>) -> Matrix3<T> {
    let j = Matrix3::from_diagonal(&params.inertia);
    let j_inv = Matrix3::from_diagonal(&params.inertia_inv());
    -(j_inv * (skew(nu) * j - skew(&params.inertia.component_mul(nu))))
}

/// Central-difference gradient with one Richardson extrapolation step.
fn grad_richardson<T: Real>(
    f: &dyn Fn(&Vector3<T>) -> T,
    x: &Vector3<T>,
    h: T,
) -> Vector3<T> {
    let mut g = Vector3::zeros();
    let half = h * real(0.5);
    for i in 0..3 {
        let probe = |step: T| {
            let mut xp = *x;
            xp[i] += step;
            f(&xp)
        };
        let d_h = (probe(h) - probe(-h)) / (h * real(2.0));
        let d_h2 = (probe(half) - probe(-half)) / h;
        g[i] = (d_h2 * real(4.0) - d_h) / real(3.0);
    }
    g
}

/// `k`-th iterated drift derivative of `nu[axis]`, as a function of `nu`.
fn angular_value<T: Real>(
    k: usize,
    nu: &Vector3<T>,
    params: &RigidBodyParams<T>,
    axis: usize,
) -> T {
    match k {
        0 => nu[axis],
        1 => rates_drift(nu, params)[axis],
        _ => angular_grad(k - 1, nu, params, axis).dot(&rates_drift(nu, params)),
    }
}

/// Gradient of the `k`-th chain value with respect to `nu`. Closed form for
/// `k <= 1`; nested Richardson central differences (step 1e-4) for deeper
/// elements, with accuracy certified by the chain-identity oracle.
fn angular_grad<T: Real>(
    k: usize,
    nu: &Vector3<T>,
    params: &RigidBodyParams<T>,
    axis: usize,
) -> Vector3<T> {
    match k {
        0 => {
            let mut g = Vector3::zeros();
            g[axis] = T::one();
            g
        }
        1 => rates_drift_jacobian(nu, params).row(axis).transpose(),
        _ => grad_richardson(
            &|n: &Vector3<T>| angular_value(k, n, params, axis),
            nu,
            real(1e-4),
        ),
    }
}

/// Body-rate chain for an arbitrary axis. Torque coupling is the chain-value
/// gradient pushed through `J^-1`; the thrust column is zero.
pub fn angular_chain<T: Real>(
    state: &BodyState<T>,
    params: &RigidBodyParams<T>,
    axis: usize,
    depth: usize,
) -> Chain<T> {
    assert!(depth >= 1 && depth <= MAX_DEPTH, "depth {depth} out of range");
    let nu = &state.rates;
    let j_inv = params.inertia_inv();
    let mut values = Vec::with_capacity(depth);
    let mut rows = Vec::with_capacity(depth);
    for k in 0..depth {
        values.push(angular_value(k, nu, params, axis));
        let torque = angular_grad(k, nu, params, axis).component_mul(&j_inv);
        rows.push(Vector4::new(T::zero(), torque.x, torque.y, torque.z));
    }
    let tail = angular_value(depth, nu, params, axis);
    Chain { id: ChainId::angular(axis), values, tail, rows }
}

/// The kept body-z (yaw) rate chain.
pub fn lift_angular_chain<T: Real>(
    state: &BodyState<T>,
    params: &RigidBodyParams<T>,
    depth: usize,
) -> Chain<T> {
    angular_chain(state, params, 2, depth)
}

/// Position chain values up to index 4 for one axis, at frozen thrust `t_bar`.
fn position_values<T: Real>(
    state: &BodyState<T>,
    params: &RigidBodyParams<T>,
    t_bar: T,
    axis: usize,
) -> [T; 5] {
    let tm = t_bar / params.mass;
    let r_e3 = state.rot * e3::<T>();
    let drift = rates_drift(&state.rates, params);
    let spin_e3 = state.rates.cross(&e3());
    let spin2_e3 = state.rates.cross(&spin_e3) + drift.cross(&e3());
    [
        state.pos[axis],
        (state.rot * state.vel)[axis],
        tm * r_e3[axis] - params.gravity * e3::<T>()[axis],
        tm * (state.rot * spin_e3)[axis],
        tm * (state.rot * spin2_e3)[axis],
    ]
}

/// Position chain for one axis at frozen thrust `t_bar`.
///
/// The base observable has input relative degree two, so `B_0 = 0`. The
/// depth-1 row carries the thrust-deviation coupling `(R e3)_j / m`, the
/// depth-3 row the torque coupling `-(T_bar/m) row_j(R S(e3) J^-1)`; for a
/// diagonal inertia its tau_z entry is exactly zero.
pub fn lift_position_chain<T: Real>(
    state: &BodyState<T>,
    params: &RigidBodyParams<T>,
    t_bar: T,
    axis: usize,
    depth: usize,
) -> Chain<T> {
    assert!(depth >= 1 && depth <= MAX_DEPTH, "depth {depth} out of range");
    let vals = position_values(state, params, t_bar, axis);
    let r_e3 = state.rot * e3::<T>();
    let j_inv = Matrix3::from_diagonal(&params.inertia_inv());
    let coupling = state.rot * skew(&e3()) * j_inv;
    let tm = t_bar / params.mass;

    let mut rows = vec![Vector4::zeros(); depth];
    if depth > 1 {
        rows[1][0] = r_e3[axis] / params.mass;
    }
    if depth > 3 {
        let torque = coupling.row(axis) * (-tm);
        rows[3] = Vector4::new(T::zero(), torque[0], torque[1], torque[2]);
    }

    Chain {
        id: ChainId::position(axis),
        values: vals[..depth].to_vec(),
        tail: vals[depth],
        rows,
    }
}

/// Evaluates all four chains at the given state and frozen thrust.
pub fn lift_chain_set<T: Real>(
    state: &BodyState<T>,
    params: &RigidBodyParams<T>,
    t_bar: T,
    config: &LiftConfig,
) -> ChainSet<T> {
    ChainSet {
        yaw: lift_angular_chain(state, params, config.angular_depth),
        pos: [
            lift_position_chain(state, params, t_bar, 0, config.position_depth),
            lift_position_chain(state, params, t_bar, 1, config.position_depth),
            lift_position_chain(state, params, t_bar, 2, config.position_depth),
        ],
        t_bar,
    }
}

impl<T: Real> ChainSet<T> {
    /// Chains in stacking order.
    pub fn chains(&self) -> [&Chain<T>; 4] {
        [&self.yaw, &self.pos[0], &self.pos[1], &self.pos[2]]
    }
}

/// Stacks the four chains into the quasi-linear lifted model.
pub fn full_lift<T: Real>(
    state: &BodyState<T>,
    params: &RigidBodyParams<T>,
    t_bar: T,
    config: &LiftConfig,
) -> FullLift<T> {
    let set = lift_chain_set(state, params, t_bar, config);
    let n = config.dim();
    let mut kappa = DVector::zeros(n);
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, 4);
    let mut offset = 0;
    for chain in set.chains() {
        let depth = chain.values.len();
        for k in 0..depth {
            kappa[offset + k] = chain.values[k];
            for c in 0..4 {
                b[(offset + k, c)] = chain.rows[k][c];
            }
            if k + 1 < depth {
                a[(offset + k, offset + k + 1)] = T::one();
            }
        }
        offset += depth;
    }
    FullLift { kappa, a, b, config: *config }
}

/// Lifted reference and feed-forward built from trajectory derivatives.
///
/// Position chains take `(p_d, p_d', p_d'', p_d''')`, the yaw chain the
/// desired yaw rate and its derivatives; entries past the supplied
/// derivatives are zero. The feed-forward is `kappa_d' - A kappa_d`, which is
/// zero except for the highest derivative entering each block's last row.
pub fn reference_lift<T: Real>(
    sp: &crate::reduce::FlatSetpoint<T>,
    config: &LiftConfig,
) -> (DVector<T>, DVector<T>) {
    let n = config.dim();
    let mut kappa_d = DVector::zeros(n);
    let mut ustar_d = DVector::zeros(n);

    let yaw_derivs = [sp.yaw_rate, sp.yaw_accel, sp.yaw_jerk, T::zero(), T::zero()];
    let d = config.angular_depth;
    for k in 0..d {
        kappa_d[k] = yaw_derivs[k];
    }
    ustar_d[d - 1] = yaw_derivs[d];

    let mut offset = d;
    let d = config.position_depth;
    for axis in 0..3 {
        let derivs = [sp.pos[axis], sp.vel[axis], sp.acc[axis], sp.jerk[axis], sp.snap[axis]];
        for k in 0..d {
            kappa_d[offset + k] = derivs[k];
        }
        ustar_d[offset + d - 1] = derivs[d];
        offset += d;
    }
    (kappa_d, ustar_d)
}

// --- finite-difference oracle ----------------------------------------------

/// One oracle sample: a state, the constant input applied across the
/// differentiation window, and the frozen thrust the model side uses.
#[derive(Debug, Clone, Copy)]
pub struct OracleSample<T: Real> {
    pub state: BodyState<T>,
    pub input: QuadInput<T>,
    pub t_bar: T,
    /// True when actuator clamping changed the input inside the window the
    /// sample was recorded from; such windows are reported, not scored.
    pub clamped: bool,
}

impl<T: Real> OracleSample<T> {
    /// Sample with the frozen thrust tracking the applied thrust.
    pub fn tracking(state: BodyState<T>, input: QuadInput<T>) -> Self {
        Self { state, input, t_bar: input.thrust, clamped: false }
    }
}

/// Max chain-identity residuals over a sample set, per (chain, element).
#[derive(Debug, Clone)]
pub struct OracleReport<T: Real> {
    /// `(chain, k, max |d/dt x_k - x_{k+1} - B_k . du|)` for every `k < depth-1`.
    pub residuals: Vec<(ChainId, usize, T)>,
    /// Samples skipped because clamping invalidated the constant-input window.
    pub clamped_windows: usize,
}

impl<T: Real> OracleReport<T> {
    pub fn max_residual(&self) -> T {
        self.residuals
            .iter()
            .map(|(_, _, r)| *r)
            .fold(T::zero(), |a, b| if b > a { b } else { a })
    }
}

/// Certifies the chain-defining identity by central differences along the
/// re-integrated flow.
///
/// The differentiated observables are evaluated with the frozen thrust equal
/// to the applied thrust (what the observables are in a loop where `T_bar`
/// tracks the input), while the right-hand side uses each sample's own
/// `t_bar`. With `t_bar == thrust` the residual is pure numerics; a mismatch
/// surfaces as a residual proportional to `|T - T_bar|/m` in the rows whose
/// values scale with the frozen thrust.
pub fn chain_oracle_residual<T: Real>(
    samples: &[OracleSample<T>],
    params: &RigidBodyParams<T>,
    config: &LiftConfig,
    h: T,
) -> OracleReport<T> {
    let probe = lift_chain_set(
        &BodyState::hover(Vector3::zeros()),
        params,
        params.hover_thrust(),
        config,
    );
    let mut residuals: Vec<(ChainId, usize, T)> = probe
        .chains()
        .iter()
        .flat_map(|c| {
            let depth = c.values.len();
            (0..depth.saturating_sub(1)).map(|k| (c.id, k, T::zero()))
        })
        .collect();
    let mut clamped_windows = 0;

    for sample in samples {
        if sample.clamped {
            clamped_windows += 1;
            continue;
        }
        let forward = rk4_raw(&sample.state, &sample.input, params, h);
        let backward = rk4_raw(&sample.state, &sample.input, params, -h);
        let flow_t_bar = sample.input.thrust;
        let plus = lift_chain_set(&forward, params, flow_t_bar, config);
        let minus = lift_chain_set(&backward, params, flow_t_bar, config);
        let center = lift_chain_set(&sample.state, params, sample.t_bar, config);
        let du = Vector4::new(
            sample.input.thrust - sample.t_bar,
            sample.input.torque.x,
            sample.input.torque.y,
            sample.input.torque.z,
        );

        let mut slot = 0;
        for ((cp, cm), cc) in plus
            .chains()
            .iter()
            .zip(minus.chains().iter())
            .zip(center.chains().iter())
        {
            let depth = cc.values.len();
            for k in 0..depth.saturating_sub(1) {
                let fd = (cp.values[k] - cm.values[k]) / (h * real(2.0));
                let model = cc.values[k + 1] + cc.rows[k].dot(&du);
                let r = (fd - model).abs();
                if r > residuals[slot].2 {
                    residuals[slot].2 = r;
                }
                slot += 1;
            }
        }
    }

    OracleReport { residuals, clamped_windows }
}

/// Convenience: residual report for states recorded along a trajectory, with
/// the frozen thrust tracking the applied input.
pub fn oracle_from_trajectory<T: Real>(
    states_and_inputs: &[(BodyState<T>, QuadInput<T>)],
    params: &RigidBodyParams<T>,
    config: &LiftConfig,
    h: T,
) -> OracleReport<T> {
    let samples: Vec<_> = states_and_inputs
        .iter()
        .map(|(s, u)| OracleSample::tracking(*s, *u))
        .collect();
    chain_oracle_residual(&samples, params, config, h)
}
