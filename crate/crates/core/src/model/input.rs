use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::scene::{IntersectionGeometry, Point2, Region, VehicleId, VehicleState};
use crate::signal::{one_hot, SignalTimeline};

/// Where the agent is relative to its route.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionContext {
    pub pos: Point2,
    pub static_point: Point2,
    pub distance: f64,
    pub region: Region,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub vehicle_id: VehicleId,
    pub edge_type: usize,
    /// Aligned with the agent's history; `None` where the neighbor was absent.
    pub history: Vec<Option<VehicleState>>,
}

/// Everything the model sees for one agent at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentInput {
    pub vehicle_id: VehicleId,
    pub t: f64,
    pub cluster: usize,
    /// Oldest first; the last entry is the current state and always present.
    pub history: Vec<Option<VehicleState>>,
    pub signals: Vec<[f64; 3]>,
    pub neighbors: Vec<Neighbor>,
    pub position: PositionContext,
}

impl AgentInput {
    pub fn current(&self) -> &VehicleState {
        self.history
            .last()
            .and_then(|s| s.as_ref())
            .expect("current state present")
    }
}

/// Training sample: input plus the true future positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub input: AgentInput,
    pub future: Vec<Point2>,
}

/// One vehicle on the model grid. Velocity and acceleration are causal
/// backward differences of the positions; regions fall back to the last
/// on-route value.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub vehicle_id: VehicleId,
    pub cluster: usize,
    pub start: i64,
    pub positions: Vec<Point2>,
    pub kinematics: Vec<(Point2, Point2)>,
    pub regions: Vec<Region>,
}

impl Track {
    pub fn new(vehicle_id: VehicleId, cluster: usize, start: i64) -> Self {
        Track {
            vehicle_id,
            cluster,
            start,
            positions: Vec::new(),
            kinematics: Vec::new(),
            regions: Vec::new(),
        }
    }

    pub fn from_positions(
        vehicle_id: VehicleId,
        cluster: usize,
        start: i64,
        positions: &[Point2],
        geom: &IntersectionGeometry,
        dt: f64,
    ) -> Self {
        let mut t = Track::new(vehicle_id, cluster, start);
        for &p in positions {
            t.push(p, geom, dt);
        }
        t
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Grid index one past the last state.
    pub fn end(&self) -> i64 {
        self.start + self.positions.len() as i64
    }

    pub fn index_of(&self, k: i64) -> Option<usize> {
        (k >= self.start && k < self.end()).then(|| (k - self.start) as usize)
    }

    pub fn state(&self, k: i64, dt: f64) -> Option<VehicleState> {
        let i = self.index_of(k)?;
        let (vel, acc) = self.kinematics[i];
        Some(VehicleState {
            t: k as f64 * dt,
            pos: self.positions[i],
            vel,
            acc,
        })
    }

    pub fn push(&mut self, pos: Point2, geom: &IntersectionGeometry, dt: f64) {
        let n = self.positions.len();
        self.positions.push(pos);
        self.kinematics.push((Point2::ORIGIN, Point2::ORIGIN));
        if n >= 1 {
            let v = (pos - self.positions[n - 1]) * (1.0 / dt);
            self.kinematics[n].0 = v;
            if n == 1 {
                self.kinematics[0].0 = v;
            }
            let a = (v - self.kinematics[n - 1].0) * (1.0 / dt);
            self.kinematics[n].1 = a;
            if n == 2 {
                self.kinematics[0].1 = a;
                self.kinematics[1].1 = a;
            }
        }
        let cluster = &geom.clusters[self.cluster];
        let region = match cluster.locate_region(pos) {
            Ok((r, _)) => r,
            Err(_) => self.regions.last().copied().unwrap_or(Region::Incoming),
        };
        self.regions.push(region);
    }
}

/// Inputs for the given tracks at grid index `k`. `timeline` must be on the
/// model grid. Neighbors are all other tracks present at `k` within the
/// attention radius.
pub fn build_agent_inputs(
    geom: &IntersectionGeometry,
    timeline: &SignalTimeline,
    config: &ModelConfig,
    tracks: &[Track],
    agents: &[usize],
    k: i64,
) -> Vec<AgentInput> {
    let dt = config.dt;
    let h = config.history as i64;
    let present: Vec<usize> = (0..tracks.len())
        .filter(|&i| tracks[i].index_of(k).is_some())
        .collect();
    let radius2 = config.attention_radius * config.attention_radius;
    agents
        .iter()
        .map(|&ai| {
            let tr = &tracks[ai];
            let i = tr.index_of(k).expect("agent present at k");
            let cluster = &geom.clusters[tr.cluster];
            let pos = tr.positions[i];
            let steps = (k - h + 1)..=k;
            let history: Vec<Option<VehicleState>> = steps.clone().map(|j| tr.state(j, dt)).collect();
            let signals = steps
                .clone()
                .map(|j| {
                    let c = timeline.color_at_index(&cluster.signal_group, j.max(0) as usize);
                    c.map_or([0.0; 3], one_hot)
                })
                .collect();
            let mut neighbors: Vec<Neighbor> = present
                .iter()
                .filter(|&&o| o != ai)
                .filter_map(|&o| {
                    let other = &tracks[o];
                    let op = other.positions[other.index_of(k)?];
                    let d = op - pos;
                    if d.dot(d) > radius2 {
                        return None;
                    }
                    let same = geom.clusters[other.cluster].approach == cluster.approach;
                    Some(Neighbor {
                        vehicle_id: other.vehicle_id,
                        edge_type: if same { 0 } else { 1 },
                        history: steps.clone().map(|j| other.state(j, dt)).collect(),
                    })
                })
                .collect();
            neighbors.sort_by_key(|n| n.vehicle_id);
            let region = tr.regions[i];
            let static_point = cluster.static_point_for(region);
            AgentInput {
                vehicle_id: tr.vehicle_id,
                t: k as f64 * dt,
                cluster: tr.cluster,
                history,
                signals,
                neighbors,
                position: PositionContext {
                    pos,
                    static_point,
                    distance: pos.distance(static_point),
                    region,
                },
            }
        })
        .collect()
}

/// Per-feature standardization fitted on training windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    /// Mean and scale of (x, y, vx, vy, ax, ay).
    pub state_mean: [f64; 6],
    pub state_std: [f64; 6],
    pub distance_std: f64,
    /// Scale of future offsets from the current position.
    pub offset_std: [f64; 2],
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer {
            state_mean: [0.0; 6],
            state_std: [1.0; 6],
            distance_std: 1.0,
            offset_std: [1.0; 2],
        }
    }
}

fn usable_std(v: f64) -> f64 {
    if v.is_finite() && v > 1e-6 {
        v
    } else {
        1.0
    }
}

pub(crate) fn state_vec(s: &VehicleState) -> [f64; 6] {
    [s.pos.x, s.pos.y, s.vel.x, s.vel.y, s.acc.x, s.acc.y]
}

impl Normalizer {
    pub fn fit(windows: &[Window]) -> Self {
        let mut n = 0.0;
        let mut sum = [0.0; 6];
        let mut sq = [0.0; 6];
        let mut dist = 0.0;
        let mut off = [0.0; 2];
        let mut n_off = 0.0;
        for w in windows {
            for s in w.input.history.iter().flatten() {
                let v = state_vec(s);
                for j in 0..6 {
                    sum[j] += v[j];
                    sq[j] += v[j] * v[j];
                }
                n += 1.0;
            }
            dist += w.input.position.distance.powi(2);
            let p = w.input.position.pos;
            for f in &w.future {
                off[0] += (f.x - p.x).powi(2);
                off[1] += (f.y - p.y).powi(2);
                n_off += 1.0;
            }
        }
        if n == 0.0 {
            return Self::default();
        }
        let mut out = Self::default();
        for j in 0..6 {
            let m = sum[j] / n;
            out.state_mean[j] = m;
            out.state_std[j] = usable_std((sq[j] / n - m * m).max(0.0).sqrt());
        }
        out.distance_std = usable_std((dist / windows.len() as f64).sqrt());
        if n_off > 0.0 {
            out.offset_std = [usable_std((off[0] / n_off).sqrt()), usable_std((off[1] / n_off).sqrt())];
        }
        out
    }

    pub fn state(&self, s: &VehicleState) -> [f64; 6] {
        let v = state_vec(s);
        std::array::from_fn(|j| (v[j] - self.state_mean[j]) / self.state_std[j])
    }

    pub fn point(&self, p: Point2) -> [f64; 2] {
        [
            (p.x - self.state_mean[0]) / self.state_std[0],
            (p.y - self.state_mean[1]) / self.state_std[1],
        ]
    }

    pub fn offset(&self, from: Point2, to: Point2) -> [f64; 2] {
        [(to.x - from.x) / self.offset_std[0], (to.y - from.y) / self.offset_std[1]]
    }

    pub fn unoffset(&self, from: Point2, o: [f64; 2]) -> Point2 {
        Point2::new(from.x + o[0] * self.offset_std[0], from.y + o[1] * self.offset_std[1])
    }
}

/// Sum of neighbor feature rows per edge type, in vehicle-id order.
pub(crate) fn neighbor_sums(input: &AgentInput, norm: &Normalizer, edge_types: usize) -> Vec<Vec<[f64; 6]>> {
    let h = input.history.len();
    let mut sums = vec![vec![[0.0; 6]; h]; edge_types];
    let mut sorted: Vec<&super::Neighbor> = input.neighbors.iter().collect();
    sorted.sort_by_key(|n| n.vehicle_id);
    for nb in sorted {
        for (t, s) in nb.history.iter().enumerate() {
            if let Some(s) = s {
                let f = norm.state(s);
                for j in 0..6 {
                    sums[nb.edge_type][t][j] += f[j];
                }
            }
        }
    }
    sums
}

pub(crate) fn edge_presence(input: &AgentInput, edge_types: usize) -> Vec<bool> {
    let mut p = vec![false; edge_types];
    for nb in &input.neighbors {
        p[nb.edge_type] = true;
    }
    p
}
