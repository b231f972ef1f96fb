//! Dataset windowing, open-loop scoring, and the closed-loop evaluation in
//! which every vehicle is rolled forward by a predictor after a ground-truth
//! warm start.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::{
    ade, build_report, fde, kde_nll, min_ade, min_fde, Audit, DetectorConfig, DisplacementStats, MetricsError,
};
use crate::microsim::{self, SimConfig, SimError};
use crate::model::{
    build_agent_inputs, constant_velocity_predict, AgentInput, ConstantVelocity, CvaeModel, ModelConfig, ModelError,
    Predictor, Track, Window,
};
use crate::scene::{IntersectionGeometry, LogError, Point2, SceneError, Trajectory, TrajectoryLog, VehicleId, VehicleState};
use crate::signal::SignalTimeline;
use crate::Scenario;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("empty log")]
    EmptyLog,
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Integer ratio between the model step and a log step.
pub fn grid_factor(log_dt: f64, model_dt: f64) -> Result<usize, HarnessError> {
    let r = model_dt / log_dt;
    let f = r.round();
    if f < 1.0 || (r - f).abs() > 1e-6 {
        return Err(HarnessError::Config(format!(
            "model step {model_dt} is not a multiple of log step {log_dt}"
        )));
    }
    Ok(f as usize)
}

/// Resamples every trajectory onto the model grid. Trajectories without a
/// cluster label are assigned one.
pub fn grid_tracks(log: &TrajectoryLog, geom: &IntersectionGeometry, model_dt: f64) -> Result<Vec<Track>, HarnessError> {
    let factor = grid_factor(log.dt, model_dt)? as i64;
    let mut out = Vec::with_capacity(log.trajectories.len());
    for tr in &log.trajectories {
        let cid = match &tr.cluster_id {
            Some(c) => c.clone(),
            None => geom.assign_cluster(tr)?,
        };
        let ci = geom
            .cluster_index(&cid)
            .ok_or(SceneError::UnknownCluster(cid.clone()))?;
        let kept: Vec<(i64, Point2)> = tr
            .states
            .iter()
            .filter_map(|s| {
                let f = log.frame_index(s.t);
                (f.rem_euclid(factor) == 0).then_some((f / factor, s.pos))
            })
            .collect();
        let Some(&(start, _)) = kept.first() else { continue };
        let pos: Vec<Point2> = kept.iter().map(|p| p.1).collect();
        out.push(Track::from_positions(tr.vehicle_id, ci, start, &pos, geom, model_dt));
    }
    Ok(out)
}

/// One window per (vehicle, eligible step), every `stride` steps, ordered
/// by vehicle id then time. `timeline` may be on the log grid.
pub fn build_windows(
    log: &TrajectoryLog,
    timeline: &SignalTimeline,
    geom: &IntersectionGeometry,
    config: &ModelConfig,
    stride: usize,
) -> Result<Vec<Window>, HarnessError> {
    if log.is_empty() {
        return Err(HarnessError::EmptyLog);
    }
    let tracks = grid_tracks(log, geom, config.dt)?;
    let grid = timeline.decimate(grid_factor(timeline.dt, config.dt)?);
    Ok(windows_from_tracks(&tracks, &grid, geom, config, stride))
}

pub fn windows_from_tracks(
    tracks: &[Track],
    grid: &SignalTimeline,
    geom: &IntersectionGeometry,
    config: &ModelConfig,
    stride: usize,
) -> Vec<Window> {
    let (h, t) = (config.history, config.future);
    let stride = stride.max(1);
    let mut by_step: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, tr) in tracks.iter().enumerate() {
        let n = tr.len();
        if n < h + t {
            continue;
        }
        for j in (h - 1..=n - 1 - t).step_by(stride) {
            by_step.entry(tr.start + j as i64).or_default().push(i);
        }
    }
    let per_step: Vec<Vec<(usize, Window)>> = by_step
        .par_iter()
        .map(|(&k, agents)| {
            let inputs = build_agent_inputs(geom, grid, config, tracks, agents, k);
            agents
                .iter()
                .zip(inputs)
                .map(|(&i, input)| {
                    let tr = &tracks[i];
                    let j = tr.index_of(k).unwrap();
                    let future = tr.positions[j + 1..=j + t].to_vec();
                    (i, Window { input, future })
                })
                .collect()
        })
        .collect();
    let mut all: Vec<(VehicleId, i64, Window)> = per_step
        .into_iter()
        .flatten()
        .map(|(i, w)| (tracks[i].vehicle_id, (w.input.t / config.dt).round() as i64, w))
        .collect();
    all.sort_by_key(|(id, k, _)| (*id, *k));
    all.into_iter().map(|(_, _, w)| w).collect()
}

/// Replays logged positions; past the end of a trajectory it repeats the
/// last logged position.
#[derive(Debug, Clone)]
pub struct ReplayPredictor {
    dt: f64,
    truth: BTreeMap<VehicleId, Trajectory>,
}

impl ReplayPredictor {
    pub fn new(log: &TrajectoryLog, model_dt: f64) -> Self {
        ReplayPredictor {
            dt: model_dt,
            truth: log.trajectories.iter().map(|t| (t.vehicle_id, t.clone())).collect(),
        }
    }
}

impl Predictor for ReplayPredictor {
    fn predict_positions(&self, inputs: &[AgentInput], steps: usize) -> Vec<Vec<Point2>> {
        inputs
            .iter()
            .map(|inp| {
                let Some(tr) = self.truth.get(&inp.vehicle_id) else {
                    return vec![Point2::new(f64::NAN, f64::NAN); steps];
                };
                (1..=steps)
                    .map(|j| {
                        let t = inp.t + j as f64 * self.dt;
                        tr.state_at(t)
                            .or(tr.states.last())
                            .map_or(Point2::new(f64::NAN, f64::NAN), |s| s.pos)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Closed-loop run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Seconds of simulated time.
    pub duration: f64,
    /// Total arrivals per hour split evenly over the clusters.
    pub total_vph: f64,
    pub sim_dt: f64,
    pub warm_start: f64,
    pub feedback_depth: usize,
    pub timeout: f64,
    /// Agents per inference batch.
    pub batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            duration: 600.0,
            total_vph: 1000.0,
            sim_dt: 0.05,
            warm_start: 2.0,
            feedback_depth: 1,
            timeout: 300.0,
            batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    pub spawned: usize,
    /// Vehicle and time at which a non-finite position was produced.
    pub frozen: Vec<(VehicleId, f64)>,
    pub timed_out: Vec<VehicleId>,
    /// Committed trajectories that no longer match their spawned cluster.
    pub unassignable: Vec<(VehicleId, String)>,
}

impl Diagnostics {
    pub fn is_clean(&self) -> bool {
        self.frozen.is_empty() && self.timed_out.is_empty() && self.unassignable.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "spawned {}", self.spawned).unwrap();
        writeln!(s, "frozen {}", self.frozen.len()).unwrap();
        for (id, t) in &self.frozen {
            writeln!(s, "  vehicle {id} at t={t:.2}").unwrap();
        }
        writeln!(s, "timed_out {}", self.timed_out.len()).unwrap();
        for id in &self.timed_out {
            writeln!(s, "  vehicle {id}").unwrap();
        }
        writeln!(s, "unassignable {}", self.unassignable.len()).unwrap();
        for (id, why) in &self.unassignable {
            writeln!(s, "  vehicle {id}: {why}").unwrap();
        }
        s
    }
}

/// Everything one closed-loop run produces.
#[derive(Debug, Clone)]
pub struct EvaluationBundle {
    pub committed: TrajectoryLog,
    pub ground_truth: TrajectoryLog,
    pub timeline: SignalTimeline,
    pub audit: Audit,
    pub displacement: DisplacementStats,
    pub diagnostics: Diagnostics,
}

pub const BUNDLE_FILES: [&str; 8] = [
    "committed.csv",
    "ground_truth.csv",
    "signals.csv",
    "report.csv",
    "report.txt",
    "events.csv",
    "diagnostics.txt",
    "scenario.toml",
];

impl EvaluationBundle {
    pub fn write_dir(&self, dir: &Path, scenario_text: &str) -> Result<(), HarnessError> {
        use std::fs::File;
        use std::io::BufWriter;
        std::fs::create_dir_all(dir)?;
        self.committed
            .write_csv(BufWriter::new(File::create(dir.join("committed.csv"))?))?;
        self.ground_truth
            .write_csv(BufWriter::new(File::create(dir.join("ground_truth.csv"))?))?;
        self.timeline
            .write_csv(BufWriter::new(File::create(dir.join("signals.csv"))?))?;
        self.audit
            .report
            .write_csv(BufWriter::new(File::create(dir.join("report.csv"))?))?;
        std::fs::write(dir.join("report.txt"), self.audit.report.to_table())?;
        self.audit
            .write_events_csv(BufWriter::new(File::create(dir.join("events.csv"))?))?;
        std::fs::write(dir.join("diagnostics.txt"), self.diagnostics.to_text())?;
        std::fs::write(dir.join("scenario.toml"), scenario_text)?;
        Ok(())
    }
}

struct Agent {
    /// Ground-truth grid positions; only the first `warm` are used.
    truth: Vec<Point2>,
    truth_states: Vec<VehicleState>,
    pending: Vec<Point2>,
    done: bool,
    frozen: bool,
}

/// Simulator settings for a run: uniform demand, run length adjusted so
/// the last simulator frame lies on the model grid.
pub fn sim_config_for(run: &RunConfig, geom: &IntersectionGeometry, model_dt: f64) -> Result<SimConfig, HarnessError> {
    let factor = grid_factor(run.sim_dt, model_dt)?;
    let grid_frames = (run.duration / model_dt).round() as usize;
    let sim_frames = if grid_frames == 0 {
        0
    } else {
        (grid_frames - 1) * factor + 1
    };
    let mut cfg = SimConfig::uniform(geom, run.total_vph, sim_frames as f64 * run.sim_dt, run.seed);
    cfg.dt = run.sim_dt;
    Ok(cfg)
}

/// Runs the simulator for arrivals and warm starts, then rolls every
/// vehicle forward with `predictor`, feeding back committed positions.
pub fn closed_loop_unroll(
    scenario: &Scenario,
    sim: &SimConfig,
    predictor: &dyn Predictor,
    model: &ModelConfig,
    run: &RunConfig,
    detectors: &DetectorConfig,
) -> Result<EvaluationBundle, HarnessError> {
    let geom = &scenario.geometry;
    let dt = model.dt;
    let warm = (run.warm_start / dt).round() as usize;
    if warm < model.history || run.feedback_depth == 0 {
        return Err(HarnessError::Config(format!(
            "warm start {} s is shorter than {} history steps, or feedback depth is 0",
            run.warm_start, model.history
        )));
    }
    let out = microsim::run(sim, geom, &scenario.plan)?;
    let factor = grid_factor(out.log.dt, dt)?;
    let grid = out.timeline.decimate(factor);
    let truth_tracks = grid_tracks(&out.log, geom, dt)?;
    let truth_log = decimate_log(&out.log, factor);
    let truth_by_id: BTreeMap<VehicleId, &Trajectory> =
        truth_log.trajectories.iter().map(|t| (t.vehicle_id, t)).collect();

    let mut agents: Vec<Agent> = truth_tracks
        .iter()
        .map(|tt| Agent {
            truth: tt.positions.clone(),
            truth_states: truth_by_id[&tt.vehicle_id].states.clone(),
            pending: Vec::new(),
            done: false,
            frozen: false,
        })
        .collect();
    let mut tracks: Vec<Track> = truth_tracks
        .iter()
        .map(|tt| Track::new(tt.vehicle_id, tt.cluster, tt.start))
        .collect();
    let mut by_start: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, t) in tracks.iter().enumerate() {
        by_start.entry(t.start).or_default().push(i);
    }
    let mut diag = Diagnostics {
        spawned: out.spawned,
        ..Default::default()
    };
    let n_grid = grid.len() as i64;
    let timeout_steps = (run.timeout / dt).round() as usize;
    let mut live: BTreeSet<usize> = BTreeSet::new();

    for k in 0..n_grid {
        if let Some(new) = by_start.get(&k) {
            for &i in new {
                tracks[i].push(agents[i].truth[0], geom, dt);
                live.insert(i);
            }
        }
        if k + 1 >= n_grid {
            break;
        }
        // next positions depend only on the committed frame at k
        let mut need: Vec<usize> = Vec::new();
        let mut next: BTreeMap<usize, Point2> = BTreeMap::new();
        for &i in &live {
            let a = &agents[i];
            let n = tracks[i].len();
            if n < warm {
                if n < a.truth.len() {
                    next.insert(i, a.truth[n]);
                }
            } else if a.frozen {
                next.insert(i, *tracks[i].positions.last().unwrap());
            } else if let Some(&p) = a.pending.first() {
                next.insert(i, p);
            } else {
                need.push(i);
            }
        }
        if !need.is_empty() {
            let batches: Vec<&[usize]> = need.chunks(run.batch.max(1)).collect();
            let preds: Vec<Vec<Vec<Point2>>> = batches
                .par_iter()
                .map(|b| {
                    let inputs = build_agent_inputs(geom, &grid, model, &tracks, b, k);
                    predictor.predict_positions(&inputs, run.feedback_depth)
                })
                .collect();
            for (b, p) in batches.iter().zip(preds) {
                for (&i, traj) in b.iter().zip(p) {
                    let a = &mut agents[i];
                    if traj.len() != run.feedback_depth || traj.iter().any(|q| !q.is_finite()) {
                        a.frozen = true;
                        diag.frozen.push((tracks[i].vehicle_id, k as f64 * dt));
                        next.insert(i, *tracks[i].positions.last().unwrap());
                    } else {
                        a.pending = traj;
                        next.insert(i, a.pending[0]);
                    }
                }
            }
        }
        for (i, p) in next {
            let a = &mut agents[i];
            let tr = &mut tracks[i];
            if !a.pending.is_empty() && tr.len() >= warm && !a.frozen {
                a.pending.remove(0);
            }
            tr.push(p, geom, dt);
            let cl = &geom.clusters[tr.cluster];
            let s = cl.centerline.project(p).s;
            if s >= cl.centerline.length() - 1e-9 {
                a.done = true;
            } else if tr.len() > timeout_steps {
                a.done = true;
                diag.timed_out.push(tr.vehicle_id);
            }
        }
        // vehicles whose warm start ran out of ground truth leave with it
        for &i in &live {
            if tracks[i].len() < warm && tracks[i].len() >= agents[i].truth.len() {
                agents[i].done = true;
            }
        }
        live.retain(|&i| !agents[i].done);
    }

    let committed = TrajectoryLog::new(
        dt,
        agents
            .iter()
            .zip(&tracks)
            .filter(|(_, t)| !t.is_empty())
            .map(|(a, t)| committed_trajectory(a, t, geom, warm, dt))
            .collect(),
    );
    let committed_by_id: BTreeMap<VehicleId, &Trajectory> =
        committed.trajectories.iter().map(|t| (t.vehicle_id, t)).collect();
    for track in &tracks {
        let Some(tr) = committed_by_id.get(&track.vehicle_id) else { continue };
        let spawned = &geom.clusters[track.cluster].id;
        let unlabelled = Trajectory {
            cluster_id: None,
            ..(*tr).clone()
        };
        match geom.assign_cluster(&unlabelled) {
            Ok(c) if &c == spawned => {}
            // routes sharing a prefix explain a partial trajectory equally well
            Ok(c) if mean_sq_lateral(geom, spawned, tr) <= mean_sq_lateral(geom, &c, tr) + 1e-9 => {}
            Ok(c) => diag.unassignable.push((track.vehicle_id, format!("assigned {c}, spawned {spawned}"))),
            Err(e) if tr.states.len() >= 2 => diag.unassignable.push((track.vehicle_id, e.to_string())),
            Err(_) => {}
        }
    }
    let audit = build_report(&committed, &grid, geom, detectors)?;
    let displacement = warm_aligned_displacement(&agents, &tracks, warm, model.future);
    let mut audit = audit;
    audit.report.displacement = Some(displacement);
    Ok(EvaluationBundle {
        committed,
        ground_truth: truth_log,
        timeline: grid,
        audit,
        displacement,
        diagnostics: diag,
    })
}

fn mean_sq_lateral(geom: &IntersectionGeometry, cluster: &str, tr: &Trajectory) -> f64 {
    let cl = &geom.clusters[geom.cluster_index(cluster).expect("known cluster")];
    let sq: f64 = tr
        .states
        .iter()
        .map(|s| cl.centerline.project(s.pos).lateral.powi(2))
        .sum();
    sq / tr.states.len() as f64
}

fn committed_trajectory(a: &Agent, track: &Track, geom: &IntersectionGeometry, warm: usize, dt: f64) -> Trajectory {
    let states = (0..track.len())
        .map(|j| {
            if j < warm && j < a.truth_states.len() {
                a.truth_states[j]
            } else {
                track.state(track.start + j as i64, dt).unwrap()
            }
        })
        .collect();
    Trajectory {
        vehicle_id: track.vehicle_id,
        cluster_id: Some(geom.clusters[track.cluster].id.clone()),
        states,
    }
}

/// The first `future` committed steps after the warm start against ground
/// truth at the same times.
fn warm_aligned_displacement(agents: &[Agent], tracks: &[Track], warm: usize, future: usize) -> DisplacementStats {
    let rows: Vec<[f64; 5]> = agents
        .iter()
        .zip(tracks)
        .filter(|(a, tr)| tr.len() >= warm + future && a.truth.len() >= warm + future)
        .map(|(a, tr)| {
            let pred = &tr.positions[warm..warm + future];
            let truth = &a.truth[warm..warm + future];
            let e = ade(pred, truth).unwrap();
            let f = fde(pred, truth).unwrap();
            let nll = kde_nll(&[pred.to_vec()], truth, None).unwrap();
            [e, f, e, f, nll]
        })
        .collect();
    DisplacementStats::from_rows(&rows)
}

/// Keeps states on every `factor`-th frame.
pub fn decimate_log(log: &TrajectoryLog, factor: usize) -> TrajectoryLog {
    let f = factor as i64;
    let trajectories = log
        .trajectories
        .iter()
        .filter_map(|tr| {
            let states: Vec<VehicleState> = tr
                .states
                .iter()
                .filter(|s| log.frame_index(s.t).rem_euclid(f) == 0)
                .copied()
                .collect();
            (!states.is_empty()).then(|| Trajectory {
                vehicle_id: tr.vehicle_id,
                cluster_id: tr.cluster_id.clone(),
                states,
            })
        })
        .collect();
    TrajectoryLog::new(log.dt * factor as f64, trajectories)
}

/// Point predictions plus candidate sets for open-loop scoring.
pub trait OpenLoopPredictor: Sync {
    /// `(most likely, candidates)` for each input over `steps` steps.
    fn predict_sets(&self, inputs: &[&AgentInput], steps: usize) -> Vec<(Vec<Point2>, Vec<Vec<Point2>>)>;
}

impl OpenLoopPredictor for CvaeModel {
    fn predict_sets(&self, inputs: &[&AgentInput], steps: usize) -> Vec<(Vec<Point2>, Vec<Vec<Point2>>)> {
        self.predict_distribution(inputs)
            .into_iter()
            .map(|p| {
                let best = crate::model::LatentDistribution { probs: p.weights.clone() }.argmax();
                let modes: Vec<Vec<Point2>> = (0..p.modes.len())
                    .map(|m| p.mode_means(m)[..steps].to_vec())
                    .collect();
                (modes[best].clone(), modes)
            })
            .collect()
    }
}

impl OpenLoopPredictor for ConstantVelocity {
    fn predict_sets(&self, inputs: &[&AgentInput], steps: usize) -> Vec<(Vec<Point2>, Vec<Vec<Point2>>)> {
        inputs
            .iter()
            .map(|i| {
                let p = constant_velocity_predict(i, self.dt, steps);
                (p.clone(), vec![p])
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OpenLoopStats {
    pub overall: DisplacementStats,
    pub per_cluster: BTreeMap<String, DisplacementStats>,
}

/// ADE/FDE of the most likely prediction, minADE/minFDE over candidates,
/// and KDE-NLL with the candidates as samples.
pub fn evaluate_open_loop(
    predictor: &dyn OpenLoopPredictor,
    windows: &[Window],
    cluster_ids: &[String],
    batch: usize,
) -> Result<OpenLoopStats, HarnessError> {
    let chunks: Vec<&[Window]> = windows.chunks(batch.max(1)).collect();
    let rows: Vec<Vec<(usize, [f64; 5])>> = chunks
        .par_iter()
        .map(|ws| {
            let inputs: Vec<&AgentInput> = ws.iter().map(|w| &w.input).collect();
            let steps = ws.first().map_or(0, |w| w.future.len());
            let sets = predictor.predict_sets(&inputs, steps);
            ws.iter()
                .zip(sets)
                .map(|(w, (best, cands))| {
                    let t = &w.future;
                    Ok((
                        w.input.cluster,
                        [
                            ade(&best, t)?,
                            fde(&best, t)?,
                            min_ade(&cands, t)?,
                            min_fde(&cands, t)?,
                            kde_nll(&cands, t, None)?,
                        ],
                    ))
                })
                .collect::<Result<Vec<_>, MetricsError>>()
        })
        .collect::<Result<_, _>>()?;
    let rows: Vec<(usize, [f64; 5])> = rows.into_iter().flatten().collect();
    let all: Vec<[f64; 5]> = rows.iter().map(|r| r.1).collect();
    let mut per: BTreeMap<String, Vec<[f64; 5]>> = BTreeMap::new();
    for (c, r) in &rows {
        let name = cluster_ids.get(*c).cloned().unwrap_or_else(|| c.to_string());
        per.entry(name).or_default().push(*r);
    }
    Ok(OpenLoopStats {
        overall: DisplacementStats::from_rows(&all),
        per_cluster: per
            .into_iter()
            .map(|(k, v)| (k, DisplacementStats::from_rows(&v)))
            .collect(),
    })
}
