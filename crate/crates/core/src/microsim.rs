//! Kinematic microsimulator producing rule-compliant ground truth.
//!
//! Vehicles arrive per cluster as Poisson processes, drive along their
//! cluster centerline and follow a discrete-time safe-speed rule: every step
//! a vehicle picks the largest speed from which it could still stop, braking
//! at `b_max`, behind the stopping point of its leader (and, on Red or a
//! stoppable Yellow, before the stopbar). Positions advance as
//! `s += v * dt` with the new speed.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Uniform};
use serde::Deserialize;
use thiserror::Error;

use crate::scene::{
    central_differences, IntersectionGeometry, Movement, Trajectory, TrajectoryLog, VehicleId,
    VehicleState,
};
use crate::signal::{PhasePlan, SignalColor, SignalTimeline};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    pub through_speed: f64,
    pub left_speed: f64,
    pub right_speed: f64,
    /// Each vehicle's desired speed is scaled by a uniform factor in
    /// `1 ± speed_jitter`.
    pub speed_jitter: f64,
    pub a_max: f64,
    pub b_max: f64,
    pub length: f64,
    pub min_gap: f64,
    /// Distance short of the stopbar at which stopped vehicles come to rest.
    pub stop_standoff: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            through_speed: 13.9,
            left_speed: 10.0,
            right_speed: 8.0,
            speed_jitter: 0.1,
            a_max: 2.6,
            b_max: 4.5,
            length: 5.0,
            min_gap: 2.0,
            stop_standoff: 0.5,
        }
    }
}

impl VehicleParams {
    pub fn effective_length(&self) -> f64 {
        self.length + self.min_gap
    }

    fn desired_speed(&self, m: Movement) -> f64 {
        match m {
            Movement::Through => self.through_speed,
            Movement::Left => self.left_speed,
            Movement::Right => self.right_speed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    pub duration: f64,
    /// Arrival rate per cluster id, vehicles per hour.
    pub arrival_rates: BTreeMap<String, f64>,
    pub seed: u64,
    pub vehicle: VehicleParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.05,
            duration: 600.0,
            arrival_rates: BTreeMap::new(),
            seed: 0,
            vehicle: VehicleParams::default(),
        }
    }
}

impl SimConfig {
    /// `total_vph` split evenly across all clusters of `geom`.
    pub fn uniform(geom: &IntersectionGeometry, total_vph: f64, duration: f64, seed: u64) -> Self {
        let per = total_vph / geom.clusters.len() as f64;
        SimConfig {
            duration,
            seed,
            arrival_rates: geom.clusters.iter().map(|c| (c.id.clone(), per)).collect(),
            ..Default::default()
        }
    }

    pub fn total_rate(&self) -> f64 {
        self.arrival_rates.values().sum()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("vehicle {follower} overlaps leader {leader} at t={t:.2} s (gap {gap:.3} m)")]
    Overlap {
        follower: VehicleId,
        leader: VehicleId,
        t: f64,
        gap: f64,
    },
    #[error("invalid simulation config: {0}")]
    Config(String),
}

/// One simulated vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleAgent {
    pub id: VehicleId,
    pub cluster: usize,
    pub s: f64,
    pub v: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub b_max: f64,
    pub length: f64,
    pub min_gap: f64,
    spawn_step: u64,
    track: Vec<f64>,
}

/// Discrete stopping distance from speed `v` when braking at `b` with the
/// position update `s += v_new * dt`.
fn stopping_distance(v: f64, b: f64, dt: f64) -> f64 {
    if v <= 0.0 {
        return 0.0;
    }
    let n = (v / (b * dt)).floor();
    dt * (n * v - b * dt * n * (n + 1.0) / 2.0)
}

/// Largest `v` with `v * dt + stopping_distance(v) <= room`.
fn max_speed_within(room: f64, b: f64, dt: f64) -> f64 {
    if room <= 0.0 {
        return 0.0;
    }
    let unit = b * dt * dt;
    let mut n = ((-1.0 + (1.0 + 8.0 * room / unit).sqrt()) / 2.0).floor().max(0.0);
    while n > 0.0 && unit * n * (n + 1.0) / 2.0 > room {
        n -= 1.0;
    }
    while unit * (n + 1.0) * (n + 2.0) / 2.0 <= room {
        n += 1.0;
    }
    (room / dt + b * dt * n * (n + 1.0) / 2.0) / (n + 1.0)
}

/// Speed bound behind a leader whose rear is `rear_gap` meters ahead of the
/// follower's front, moving at `v_leader`.
fn follow_bound(rear_gap: f64, min_gap: f64, v_leader: f64, b: f64, dt: f64) -> f64 {
    let room = rear_gap - min_gap + stopping_distance(v_leader, b, dt);
    let stop_bound = max_speed_within(room, b, dt);
    let direct = (rear_gap - min_gap) / dt + (v_leader - b * dt).max(0.0);
    stop_bound.min(direct).max(0.0)
}

/// A running simulation.
pub struct World<'a> {
    geom: &'a IntersectionGeometry,
    plan: &'a PhasePlan,
    config: SimConfig,
    rng: ChaCha8Rng,
    step: u64,
    next_id: u64,
    next_arrival: Vec<f64>,
    pending: Vec<u32>,
    arrivals: usize,
    movement: Vec<String>,
    lane: Vec<usize>,
    desired: Vec<f64>,
    pub agents: Vec<VehicleAgent>,
    pub completed: Vec<Trajectory>,
}

impl<'a> World<'a> {
    pub fn new(
        geom: &'a IntersectionGeometry,
        plan: &'a PhasePlan,
        config: SimConfig,
    ) -> Result<Self, SimError> {
        if !(config.dt > 0.0) {
            return Err(SimError::Config("dt must be positive".into()));
        }
        for (id, r) in &config.arrival_rates {
            if geom.cluster(id).is_none() {
                return Err(SimError::Config(format!("unknown cluster \"{id}\"")));
            }
            if !(*r >= 0.0) {
                return Err(SimError::Config(format!("negative rate for \"{id}\"")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let next_arrival = geom
            .clusters
            .iter()
            .map(|c| sample_gap(&mut rng, config.arrival_rates.get(&c.id).copied().unwrap_or(0.0)))
            .collect();
        let mut lanes: Vec<&str> = geom.clusters.iter().map(|c| c.lane.as_str()).collect();
        lanes.sort();
        lanes.dedup();
        let lane = geom
            .clusters
            .iter()
            .map(|c| lanes.binary_search(&c.lane.as_str()).unwrap())
            .collect();
        Ok(World {
            geom,
            plan,
            movement: geom.clusters.iter().map(|c| c.signal_group.clone()).collect(),
            desired: geom
                .clusters
                .iter()
                .map(|c| config.vehicle.desired_speed(c.movement))
                .collect(),
            lane,
            pending: vec![0; geom.clusters.len()],
            next_arrival,
            config,
            rng,
            step: 0,
            next_id: 1,
            arrivals: 0,
            agents: Vec::new(),
            completed: Vec::new(),
        })
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.config.dt
    }

    /// Arrivals drawn so far, spawned or still waiting at a blocked entry.
    pub fn arrivals(&self) -> usize {
        self.arrivals
    }

    /// Vehicles placed on the network so far.
    pub fn spawned(&self) -> usize {
        (self.next_id - 1) as usize
    }

    /// Whether `j` constrains `i` as a leader.
    fn leads(&self, i: &VehicleAgent, j: &VehicleAgent) -> bool {
        if i.id == j.id || j.s <= i.s {
            return false;
        }
        if i.cluster == j.cluster {
            return true;
        }
        if self.lane[i.cluster] != self.lane[j.cluster] {
            return false;
        }
        let shared = self.geom.shared_length(i.cluster, j.cluster);
        i.s < shared && j.s - j.length < shared
    }

    fn leader_of(&self, i: &VehicleAgent) -> Option<&VehicleAgent> {
        self.agents
            .iter()
            .filter(|j| self.leads(i, j))
            .min_by(|a, b| a.s.total_cmp(&b.s).then(a.id.cmp(&b.id)))
    }

    /// Draws this step's arrivals and places waiting vehicles whose entry is
    /// clear. Returns the number of arrivals drawn.
    pub fn spawn_arrivals(&mut self) -> usize {
        let dt = self.config.dt;
        let horizon = self.time() + dt;
        let mut drawn = 0;
        for c in 0..self.geom.clusters.len() {
            let rate = self
                .config
                .arrival_rates
                .get(&self.geom.clusters[c].id)
                .copied()
                .unwrap_or(0.0);
            while self.next_arrival[c] < horizon {
                self.pending[c] += 1;
                drawn += 1;
                self.next_arrival[c] += sample_gap(&mut self.rng, rate);
            }
        }
        self.arrivals += drawn;

        let p = self.config.vehicle.clone();
        for c in 0..self.geom.clusters.len() {
            if self.pending[c] == 0 {
                continue;
            }
            let blocked = self.agents.iter().any(|a| {
                (a.cluster == c
                    || (self.lane[a.cluster] == self.lane[c]
                        && a.s - a.length < self.geom.shared_length(c, a.cluster)))
                    && a.s < p.effective_length()
            });
            if blocked {
                continue;
            }
            let jitter = Uniform::new_inclusive(1.0 - p.speed_jitter, 1.0 + p.speed_jitter)
                .expect("jitter range");
            let v_max = self.desired[c] * jitter.sample(&mut self.rng);
            let mut agent = VehicleAgent {
                id: VehicleId(self.next_id),
                cluster: c,
                s: 0.0,
                v: v_max,
                v_max,
                a_max: p.a_max,
                b_max: p.b_max,
                length: p.length,
                min_gap: p.min_gap,
                spawn_step: self.step,
                track: vec![0.0],
            };
            if let Some(l) = self.leader_of(&agent) {
                let bound = follow_bound(l.s - l.length, agent.min_gap, l.v, agent.b_max, dt);
                agent.v = agent.v.min(bound);
            }
            self.next_id += 1;
            self.pending[c] -= 1;
            self.agents.push(agent);
        }
        drawn
    }

    fn target_speed(&self, a: &VehicleAgent, color: SignalColor) -> f64 {
        let dt = self.config.dt;
        let mut v = (a.v + a.a_max * dt).min(a.v_max);
        if let Some(l) = self.leader_of(a) {
            v = v.min(follow_bound(l.s - l.length - a.s, a.min_gap, l.v, a.b_max, dt));
        }
        let cluster = &self.geom.clusters[a.cluster];
        let stop_s = cluster.stopbar_s();
        if a.s < stop_s && color != SignalColor::Green {
            let room = stop_s - self.config.vehicle.stop_standoff - a.s;
            let bound = max_speed_within(room, a.b_max, dt);
            let stoppable = bound >= a.v - a.b_max * dt - 1e-9;
            if color == SignalColor::Red || stoppable {
                v = v.min(bound);
            }
        }
        v.max(0.0)
    }

    /// Advances every vehicle by one step and retires those past the end of
    /// their route.
    pub fn step(&mut self) -> Result<(), SimError> {
        let dt = self.config.dt;
        let t = self.time();
        let speeds: Vec<f64> = self
            .agents
            .iter()
            .map(|a| {
                let color = self
                    .plan
                    .signal_at(&self.movement[a.cluster], t)
                    .expect("plan covers every cluster movement");
                self.target_speed(a, color)
            })
            .collect();
        for (a, v) in self.agents.iter_mut().zip(speeds) {
            a.v = v;
            a.s += v * dt;
            a.track.push(a.s);
        }
        self.step += 1;

        for a in &self.agents {
            if let Some(l) = self.leader_of(a) {
                let gap = l.s - l.length - a.s;
                if gap < a.min_gap - 1e-9 {
                    return Err(SimError::Overlap {
                        follower: a.id,
                        leader: l.id,
                        t: self.time(),
                        gap,
                    });
                }
            }
        }

        let mut i = 0;
        while i < self.agents.len() {
            let len = self.geom.clusters[self.agents[i].cluster].centerline.length();
            if self.agents[i].s >= len {
                let a = self.agents.remove(i);
                let tr = self.trajectory_of(&a);
                self.completed.push(tr);
            } else {
                i += 1;
            }
        }
        Ok(())
    }

    fn trajectory_of(&self, a: &VehicleAgent) -> Trajectory {
        let dt = self.config.dt;
        let cl = &self.geom.clusters[a.cluster];
        let positions: Vec<_> = a.track.iter().map(|&s| cl.centerline.point_at(s)).collect();
        let kin = central_differences(&positions, dt);
        let states = positions
            .iter()
            .zip(kin)
            .enumerate()
            .map(|(k, (&pos, (vel, acc)))| VehicleState {
                t: (a.spawn_step + k as u64) as f64 * dt,
                pos,
                vel,
                acc,
            })
            .collect();
        Trajectory {
            vehicle_id: a.id,
            cluster_id: Some(cl.id.clone()),
            states,
        }
    }

    /// Trajectories of vehicles still on the network, truncated at the
    /// current time.
    pub fn active_trajectories(&self) -> Vec<Trajectory> {
        self.agents.iter().map(|a| self.trajectory_of(a)).collect()
    }
}

fn sample_gap(rng: &mut ChaCha8Rng, rate_vph: f64) -> f64 {
    if rate_vph <= 0.0 {
        return f64::INFINITY;
    }
    Exp::new(rate_vph / 3600.0).expect("positive rate").sample(rng)
}

/// Output of a complete run.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub log: TrajectoryLog,
    pub timeline: SignalTimeline,
    pub arrivals: usize,
    pub spawned: usize,
    /// Vehicles that reached the end of their route.
    pub completed: Vec<VehicleId>,
}

/// Runs a scenario for `config.duration` seconds. Frames are `k * dt` for
/// `k < ceil(duration / dt)`; vehicles still driving at the end are logged
/// up to the last frame.
pub fn run(
    config: &SimConfig,
    geom: &IntersectionGeometry,
    plan: &PhasePlan,
) -> Result<SimOutput, SimError> {
    let timeline = plan.materialize(config.duration, config.dt);
    let n = timeline.len();
    let mut world = World::new(geom, plan, config.clone())?;
    for k in 0..n {
        world.spawn_arrivals();
        if k + 1 < n {
            world.step()?;
        }
    }
    let mut completed: Vec<VehicleId> = world.completed.iter().map(|t| t.vehicle_id).collect();
    completed.sort();
    let mut trajectories = std::mem::take(&mut world.completed);
    trajectories.extend(world.active_trajectories());
    Ok(SimOutput {
        log: TrajectoryLog::new(config.dt, trajectories),
        timeline,
        arrivals: world.arrivals(),
        spawned: world.spawned(),
        completed,
    })
}
