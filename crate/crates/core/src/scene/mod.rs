//! Intersection geometry, trajectory clusters and the trajectory data model.

mod geometry;
mod log;
mod polyline;

use std::fmt;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

pub use geometry::{
    load_geometry, Approach, IntersectionGeometry, Movement, SceneError, TrajectoryCluster,
    LATERAL_GATE_M, TABLE_CLUSTER_IDS,
};
pub(crate) use log::fmt6 as log_fmt6;
pub use log::{LogError, TrajectoryLog};
pub use polyline::{Polyline, Projection};

/// A position in the intersection frame: meters, x east, y north, origin at
/// the center of the crosswalk box.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z component of the 3-D cross product.
    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn lerp(self, other: Point2, f: f64) -> Point2 {
        self + (other - self) * f
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, f: f64) -> Point2 {
        Point2::new(self.x * f, self.y * f)
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(v: [f64; 2]) -> Self {
        Point2::new(v[0], v[1])
    }
}

/// Identifier of one simulated or logged vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VehicleId(pub u64);

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Kinematic state of one agent at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub t: f64,
    pub pos: Point2,
    pub vel: Point2,
    pub acc: Point2,
}

impl VehicleState {
    pub fn speed(&self) -> f64 {
        self.vel.norm()
    }
}

/// The three parts of a cluster's path, split at the stopbar and at the exit
/// from the crosswalk box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    Incoming,
    InBetween,
    Outgoing,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Incoming, Region::InBetween, Region::Outgoing];

    pub fn index(self) -> usize {
        match self {
            Region::Incoming => 0,
            Region::InBetween => 1,
            Region::Outgoing => 2,
        }
    }
}

/// A time-ordered track of one vehicle at a fixed spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub vehicle_id: VehicleId,
    pub cluster_id: Option<String>,
    pub states: Vec<VehicleState>,
}

impl Trajectory {
    /// Builds a trajectory, checking strictly increasing, uniformly spaced
    /// timestamps.
    pub fn new(
        vehicle_id: VehicleId,
        cluster_id: Option<String>,
        states: Vec<VehicleState>,
    ) -> Result<Self, SceneError> {
        if states.len() >= 2 {
            let dt = states[1].t - states[0].t;
            for w in states.windows(2) {
                let step = w[1].t - w[0].t;
                if step <= 0.0 || (step - dt).abs() > 1e-6 {
                    return Err(SceneError::IrregularTrajectory(vehicle_id));
                }
            }
        }
        Ok(Trajectory {
            vehicle_id,
            cluster_id,
            states,
        })
    }

    pub fn dt(&self) -> Option<f64> {
        (self.states.len() >= 2).then(|| self.states[1].t - self.states[0].t)
    }

    pub fn start_time(&self) -> f64 {
        self.states.first().map_or(0.0, |s| s.t)
    }

    pub fn end_time(&self) -> f64 {
        self.states.last().map_or(0.0, |s| s.t)
    }

    pub fn positions(&self) -> Vec<Point2> {
        self.states.iter().map(|s| s.pos).collect()
    }

    /// State at `t`, if a sample exists within half a step of it.
    pub fn state_at(&self, t: f64) -> Option<&VehicleState> {
        let first = self.states.first()?;
        let dt = self.dt().unwrap_or(1.0);
        let k = ((t - first.t) / dt).round();
        if k < 0.0 {
            return None;
        }
        let s = self.states.get(k as usize)?;
        ((s.t - t).abs() < 0.5 * dt).then_some(s)
    }
}

/// Snapshot of all agents and signals at one timestep.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Frame {
    pub t: f64,
    pub agents: std::collections::BTreeMap<VehicleId, (VehicleState, String)>,
    pub signals: std::collections::BTreeMap<String, crate::signal::SignalColor>,
}

/// Central finite-difference velocity and acceleration for a uniformly
/// sampled position track. End samples reuse their neighbor's values.
pub fn central_differences(positions: &[Point2], dt: f64) -> Vec<(Point2, Point2)> {
    let n = positions.len();
    if n < 2 {
        return vec![(Point2::ORIGIN, Point2::ORIGIN); n];
    }
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let vel = if k == 0 {
            (positions[1] - positions[0]) * (1.0 / dt)
        } else if k == n - 1 {
            (positions[n - 1] - positions[n - 2]) * (1.0 / dt)
        } else {
            (positions[k + 1] - positions[k - 1]) * (0.5 / dt)
        };
        let acc = if n < 3 {
            Point2::ORIGIN
        } else {
            let c = k.clamp(1, n - 2);
            (positions[c + 1] - positions[c] * 2.0 + positions[c - 1]) * (1.0 / (dt * dt))
        };
        out.push((vel, acc));
    }
    out
}

/// Backward finite differences: v_k = (p_k - p_{k-1}) / dt, a_k likewise on
/// the velocities. The first sample copies the second.
pub fn backward_differences(positions: &[Point2], dt: f64) -> Vec<(Point2, Point2)> {
    let n = positions.len();
    let mut vel = vec![Point2::ORIGIN; n];
    for k in 1..n {
        vel[k] = (positions[k] - positions[k - 1]) * (1.0 / dt);
    }
    if n >= 2 {
        vel[0] = vel[1];
    }
    let mut acc = vec![Point2::ORIGIN; n];
    for k in 1..n {
        acc[k] = (vel[k] - vel[k - 1]) * (1.0 / dt);
    }
    if n >= 3 {
        acc[0] = acc[1];
        acc[1] = acc[2];
    }
    vel.into_iter().zip(acc).collect()
}
