use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::scene::{IntersectionGeometry, Point2, Trajectory, TrajectoryCluster, TrajectoryLog, VehicleId, LATERAL_GATE_M};
use crate::signal::{SignalColor, SignalTimeline};

/// Detector thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// 5 mph.
    pub stop_speed: f64,
    pub stop_duration: f64,
    pub discharge_rate: f64,
    pub block_gap: f64,
    pub ttc_threshold: f64,
    pub ttc_gate: f64,
    pub ttc_extent: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            stop_speed: 2.235,
            stop_duration: 2.0,
            discharge_rate: 0.5,
            block_gap: 7.0,
            ttc_threshold: 4.0,
            ttc_gate: 50.0,
            ttc_extent: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViolationKind {
    RedLight,
    MidIntersectionStop,
    PreStopbarStop,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::RedLight => "red_light",
            ViolationKind::MidIntersectionStop => "mid_stop",
            ViolationKind::PreStopbarStop => "pre_stopbar",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ViolationDetail {
    /// Color in force when the stopbar was crossed.
    SignalAtCrossing(SignalColor),
    /// Length of the slow interval.
    StoppedFor(f64),
    /// Distance to the stopbar at the interval start and the time allowed.
    Allowance { distance: f64, allowed: f64 },
}

impl std::fmt::Display for ViolationDetail {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ViolationDetail::SignalAtCrossing(c) => write!(f, "color={}", c.as_str()),
            ViolationDetail::StoppedFor(d) => write!(f, "stopped_s={d:.3}"),
            ViolationDetail::Allowance { distance, allowed } => {
                write!(f, "distance_m={distance:.3};allowed_s={allowed:.3}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViolationRecord {
    pub vehicle_id: VehicleId,
    pub cluster_id: String,
    pub kind: ViolationKind,
    pub t_start: f64,
    pub t_end: f64,
    pub location: Point2,
    pub detail: ViolationDetail,
}

/// Arc-length of every state along the cluster's centerline.
fn arc_lengths(traj: &Trajectory, cluster: &TrajectoryCluster) -> Vec<f64> {
    traj.states
        .iter()
        .map(|s| cluster.centerline.project(s.pos).s)
        .collect()
}

/// First upward stopbar crossing, with its interpolated time and point.
pub fn stopbar_crossing(traj: &Trajectory, cluster: &TrajectoryCluster) -> Option<(f64, Point2)> {
    let bp = cluster.region_breakpoints[0];
    let s = arc_lengths(traj, cluster);
    for k in 1..s.len() {
        if s[k - 1] < bp && s[k] >= bp {
            let f = (bp - s[k - 1]) / (s[k] - s[k - 1]);
            let (a, b) = (&traj.states[k - 1], &traj.states[k]);
            return Some((a.t + f * (b.t - a.t), a.pos.lerp(b.pos, f)));
        }
    }
    None
}

/// A record iff the stopbar is crossed while the movement shows Red.
pub fn detect_red_light(
    traj: &Trajectory,
    cluster: &TrajectoryCluster,
    timeline: &SignalTimeline,
) -> Option<ViolationRecord> {
    let (t, p) = stopbar_crossing(traj, cluster)?;
    let color = timeline.color_at_time(&cluster.signal_group, t)?;
    (color == SignalColor::Red).then(|| ViolationRecord {
        vehicle_id: traj.vehicle_id,
        cluster_id: cluster.id.clone(),
        kind: ViolationKind::RedLight,
        t_start: t,
        t_end: t,
        location: p,
        detail: ViolationDetail::SignalAtCrossing(color),
    })
}

/// One record per maximal slow interval inside the box lasting at least
/// the configured duration.
pub fn detect_mid_intersection_stop(
    traj: &Trajectory,
    cluster_id: &str,
    geom: &IntersectionGeometry,
    cfg: &DetectorConfig,
) -> Vec<ViolationRecord> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let n = traj.states.len();
    for k in 0..=n {
        let slow = k < n && {
            let s = &traj.states[k];
            s.speed() <= cfg.stop_speed && geom.inside_box(s.pos)
        };
        match (slow, start) {
            (true, None) => start = Some(k),
            (false, Some(a)) => {
                let (s0, s1) = (&traj.states[a], &traj.states[k - 1]);
                let dur = s1.t - s0.t;
                if dur >= cfg.stop_duration - 1e-9 {
                    out.push(ViolationRecord {
                        vehicle_id: traj.vehicle_id,
                        cluster_id: cluster_id.to_string(),
                        kind: ViolationKind::MidIntersectionStop,
                        t_start: s0.t,
                        t_end: s1.t,
                        location: s0.pos,
                        detail: ViolationDetail::StoppedFor(dur),
                    });
                }
                start = None;
            }
            _ => {}
        }
    }
    out
}

/// Positions per frame and lane, for blocking checks.
#[derive(Debug, Default)]
pub struct LaneOccupancy {
    dt: f64,
    frames: BTreeMap<(i64, String), Vec<(VehicleId, Point2)>>,
}

impl LaneOccupancy {
    pub fn new(log: &TrajectoryLog, geom: &IntersectionGeometry) -> Self {
        let mut frames: BTreeMap<(i64, String), Vec<(VehicleId, Point2)>> = BTreeMap::new();
        for tr in &log.trajectories {
            let Some(c) = tr.cluster_id.as_deref().and_then(|id| geom.cluster(id)) else {
                continue;
            };
            for s in &tr.states {
                frames
                    .entry((log.frame_index(s.t), c.lane.clone()))
                    .or_default()
                    .push((tr.vehicle_id, s.pos));
            }
        }
        LaneOccupancy { dt: log.dt, frames }
    }

    /// Whether another vehicle on `cluster`'s lane is within `gap` ahead of
    /// arc-length `s` at time `t`.
    pub fn blocked(&self, me: VehicleId, cluster: &TrajectoryCluster, t: f64, s: f64, gap: f64) -> bool {
        let k = (t / self.dt).round() as i64;
        let Some(others) = self.frames.get(&(k, cluster.lane.clone())) else {
            return false;
        };
        others.iter().any(|&(id, p)| {
            if id == me {
                return false;
            }
            let pr = cluster.centerline.project(p);
            let ds = pr.s - s;
            pr.lateral <= LATERAL_GATE_M && ds > 0.0 && ds <= gap
        })
    }
}

/// Flags a vehicle that, during a Green window spent upstream of the
/// stopbar, stays unblocked for `d / discharge_rate` seconds without
/// crossing. At most one record per vehicle.
pub fn detect_pre_stopbar_stop(
    traj: &Trajectory,
    cluster: &TrajectoryCluster,
    occupancy: &LaneOccupancy,
    timeline: &SignalTimeline,
    cfg: &DetectorConfig,
) -> Option<ViolationRecord> {
    let n = traj.states.len();
    let s = arc_lengths(traj, cluster);
    let bar = cluster.stopbar_s();
    let eligible: Vec<bool> = (0..n)
        .map(|k| {
            let t = traj.states[k].t;
            bar - s[k] > 0.0 && timeline.color_at_time(&cluster.signal_group, t) == Some(SignalColor::Green)
        })
        .collect();
    let mut a = 0;
    while a < n {
        if !eligible[a] {
            a += 1;
            continue;
        }
        let mut b = a;
        while b + 1 < n && eligible[b + 1] {
            b += 1;
        }
        let blocked: Vec<bool> = (a..=b)
            .map(|k| occupancy.blocked(traj.vehicle_id, cluster, traj.states[k].t, s[k], cfg.block_gap))
            .collect();
        // next blocked state at or after each index, run-relative
        let mut next = vec![usize::MAX; blocked.len() + 1];
        for i in (0..blocked.len()).rev() {
            next[i] = if blocked[i] { i } else { next[i + 1] };
        }
        let t_end = traj.states[b].t;
        for i in 0..blocked.len() {
            let k = a + i;
            let d = bar - s[k];
            let allowed = d / cfg.discharge_rate;
            let tau = traj.states[k].t;
            if tau + allowed > t_end + 1e-9 {
                continue;
            }
            let clear = next[i] == usize::MAX || traj.states[a + next[i]].t > tau + allowed + 1e-9;
            if clear {
                return Some(ViolationRecord {
                    vehicle_id: traj.vehicle_id,
                    cluster_id: cluster.id.clone(),
                    kind: ViolationKind::PreStopbarStop,
                    t_start: tau,
                    t_end: tau + allowed,
                    location: traj.states[k].pos,
                    detail: ViolationDetail::Allowance { distance: d, allowed },
                });
            }
        }
        a = b + 1;
    }
    None
}
