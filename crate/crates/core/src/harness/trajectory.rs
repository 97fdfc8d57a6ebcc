//! Reference trajectories for closed-loop runs.

use nalgebra::Vector3;

use crate::reduce::FlatSetpoint;

/// Square corner sequence at the given altitude, first corner at
/// `(-side/2, -side/2)`, counter-clockwise.
pub fn square_corners(side: f64, altitude: f64) -> [Vector3<f64>; 4] {
    let h = side / 2.0;
    [
        Vector3::new(-h, -h, altitude),
        Vector3::new(h, -h, altitude),
        Vector3::new(h, h, altitude),
        Vector3::new(-h, h, altitude),
    ]
}

/// Reference plan kinds.
#[derive(Debug, Clone, PartialEq)]
pub enum TrajectoryPlan {
    /// Constant setpoint.
    Hover { target: Vector3<f64> },
    /// Constant `base` until `step_time`, then constant `target`.
    Step { base: Vector3<f64>, target: Vector3<f64>, step_time: f64 },
    /// Corner waypoints of a square held `segment_period` each, cycled;
    /// piecewise-constant references with zero derivative feed-forward.
    Square { side: f64, altitude: f64, segment_period: f64 },
    /// Same corners, but connected by rest-to-rest minimum-jerk segments so
    /// the full derivative feed-forward is exercised.
    MinJerkSquare { side: f64, altitude: f64, segment_period: f64 },
    /// Explicit waypoint list held `segment_period` each, cycled.
    Waypoints { points: Vec<Vector3<f64>>, segment_period: f64 },
}

impl TrajectoryPlan {
    /// Flat setpoint at time `t >= 0`.
    pub fn setpoint(&self, t: f64) -> FlatSetpoint<f64> {
        match self {
            TrajectoryPlan::Hover { target } => FlatSetpoint::hold(*target),
            TrajectoryPlan::Step { base, target, step_time } => {
                if t < *step_time {
                    FlatSetpoint::hold(*base)
                } else {
                    FlatSetpoint::hold(*target)
                }
            }
            TrajectoryPlan::Square { side, altitude, segment_period } => {
                let corners = square_corners(*side, *altitude);
                let idx = ((t / segment_period).floor() as usize) % 4;
                FlatSetpoint::hold(corners[idx])
            }
            TrajectoryPlan::MinJerkSquare { side, altitude, segment_period } => {
                let corners = square_corners(*side, *altitude);
                let seg = (t / segment_period).floor() as usize;
                let from = corners[seg % 4];
                let to = corners[(seg + 1) % 4];
                let tau = (t - seg as f64 * segment_period) / segment_period;
                min_jerk_segment(from, to, tau, *segment_period)
            }
            TrajectoryPlan::Waypoints { points, segment_period } => {
                assert!(!points.is_empty(), "waypoint list must not be empty");
                let idx = ((t / segment_period).floor() as usize) % points.len();
                FlatSetpoint::hold(points[idx])
            }
        }
    }

    /// Setpoint at `t = 0`; closed-loop runs start here unless overridden.
    pub fn initial_setpoint(&self) -> FlatSetpoint<f64> {
        self.setpoint(0.0)
    }

    /// Corner points when the plan is square-shaped.
    pub fn corners(&self) -> Option<[Vector3<f64>; 4]> {
        match self {
            TrajectoryPlan::Square { side, altitude, .. }
            | TrajectoryPlan::MinJerkSquare { side, altitude, .. } => {
                Some(square_corners(*side, *altitude))
            }
            _ => None,
        }
    }

    /// Segment period for plans built from held segments.
    pub fn segment_period(&self) -> Option<f64> {
        match self {
            TrajectoryPlan::Square { segment_period, .. }
            | TrajectoryPlan::MinJerkSquare { segment_period, .. }
            | TrajectoryPlan::Waypoints { segment_period, .. } => Some(*segment_period),
            _ => None,
        }
    }
}

/// Rest-to-rest quintic between two points, with derivatives through snap.
fn min_jerk_segment(
    from: Vector3<f64>,
    to: Vector3<f64>,
    tau: f64,
    period: f64,
) -> FlatSetpoint<f64> {
    let d = to - from;
    let (t2, t3, t4, t5) = (tau * tau, tau.powi(3), tau.powi(4), tau.powi(5));
    let s = 10.0 * t3 - 15.0 * t4 + 6.0 * t5;
    let s1 = (30.0 * t2 - 60.0 * t3 + 30.0 * t4) / period;
    let s2 = (60.0 * tau - 180.0 * t2 + 120.0 * t3) / period.powi(2);
    let s3 = (60.0 - 360.0 * tau + 360.0 * t2) / period.powi(3);
    let s4 = (-360.0 + 720.0 * tau) / period.powi(4);
    let mut sp = FlatSetpoint::hold(from + d * s);
    sp.vel = d * s1;
    sp.acc = d * s2;
    sp.jerk = d * s3;
    sp.snap = d * s4;
    sp
}
