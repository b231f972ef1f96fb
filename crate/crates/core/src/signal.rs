//! Fixed-time movement signal plan and its materialized timeline.
//!
//! Movement groups are keyed by approach and turn (`EBL`, `NBT`, ...) and
//! carry their NEMA phase number. Each group's colors are given as an ordered
//! list of `(color, duration)` intervals covering one cycle, starting at
//! cycle time zero. An interval boundary belongs to the interval it starts.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::Deserialize;
use thiserror::Error;

use crate::scene::{IntersectionGeometry, LogError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize)]
pub enum SignalColor {
    Green,
    Yellow,
    Red,
}

impl SignalColor {
    pub fn as_str(self) -> &'static str {
        match self {
            SignalColor::Green => "Green",
            SignalColor::Yellow => "Yellow",
            SignalColor::Red => "Red",
        }
    }

    pub fn parse(s: &str) -> Option<SignalColor> {
        match s {
            "Green" => Some(SignalColor::Green),
            "Yellow" => Some(SignalColor::Yellow),
            "Red" => Some(SignalColor::Red),
            _ => None,
        }
    }
}

/// One-hot encoding in the fixed order (Green, Yellow, Red).
pub fn one_hot(color: SignalColor) -> [f64; 3] {
    match color {
        SignalColor::Green => [1.0, 0.0, 0.0],
        SignalColor::Yellow => [0.0, 1.0, 0.0],
        SignalColor::Red => [0.0, 0.0, 1.0],
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("signal plan: {0}")]
    Parse(String),
    #[error("unknown movement \"{0}\"")]
    UnknownMovement(String),
    #[error("movement \"{0}\": interval durations must be positive")]
    NonPositiveDuration(String),
    #[error("movement \"{movement}\": intervals sum to {sum} s, cycle is {cycle} s")]
    CycleMismatch {
        movement: String,
        sum: f64,
        cycle: f64,
    },
    #[error("conflicting movements \"{a}\" and \"{b}\" are both released at cycle time {t} s")]
    ConflictReleased { a: String, b: String, t: f64 },
    #[error("cluster \"{cluster}\" uses movement \"{movement}\" absent from the plan")]
    UnplannedMovement { cluster: String, movement: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MovementPlan {
    pub nema_phase: u8,
    /// Cumulative interval starts within the cycle, with their colors.
    starts: Vec<(f64, SignalColor)>,
}

impl MovementPlan {
    pub fn intervals(&self, cycle: f64) -> Vec<(SignalColor, f64)> {
        self.starts
            .iter()
            .enumerate()
            .map(|(i, &(s, c))| {
                let end = self.starts.get(i + 1).map_or(cycle, |n| n.0);
                (c, end - s)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhasePlan {
    pub cycle_length: f64,
    pub movements: BTreeMap<String, MovementPlan>,
    pub conflicts: Vec<(String, String)>,
}

#[derive(Deserialize)]
struct PlanDoc {
    signal: SignalDoc,
}

#[derive(Deserialize)]
struct SignalDoc {
    #[serde(default = "default_cycle")]
    cycle_length: f64,
    #[serde(default)]
    conflicts: Vec<(String, String)>,
    movement: Vec<MovementDoc>,
}

fn default_cycle() -> f64 {
    90.0
}

#[derive(Deserialize)]
struct MovementDoc {
    id: String,
    nema_phase: u8,
    intervals: Vec<(SignalColor, f64)>,
}

fn released(c: SignalColor) -> bool {
    matches!(c, SignalColor::Green | SignalColor::Yellow)
}

impl PhasePlan {
    /// Parses the `[signal]` section of a scenario document and validates it.
    pub fn from_config(config_text: &str) -> Result<Self, SignalError> {
        let doc: PlanDoc =
            toml::from_str(config_text).map_err(|e| SignalError::Parse(e.to_string()))?;
        let sig = doc.signal;
        let mut movements = BTreeMap::new();
        for m in sig.movement {
            movements.insert(m.id.clone(), Self::movement_from(&m.id, m.nema_phase, &m.intervals, sig.cycle_length)?);
        }
        let plan = PhasePlan {
            cycle_length: sig.cycle_length,
            movements,
            conflicts: sig.conflicts,
        };
        plan.validate()?;
        Ok(plan)
    }

    fn movement_from(
        id: &str,
        nema_phase: u8,
        intervals: &[(SignalColor, f64)],
        cycle: f64,
    ) -> Result<MovementPlan, SignalError> {
        let mut starts = Vec::with_capacity(intervals.len());
        let mut t = 0.0;
        for &(c, d) in intervals {
            if !(d > 0.0) {
                return Err(SignalError::NonPositiveDuration(id.to_string()));
            }
            starts.push((t, c));
            t += d;
        }
        if (t - cycle).abs() > 1e-9 {
            return Err(SignalError::CycleMismatch {
                movement: id.to_string(),
                sum: t,
                cycle,
            });
        }
        Ok(MovementPlan { nema_phase, starts })
    }

    /// Builds a plan programmatically, validating it like a parsed one.
    pub fn new(
        cycle_length: f64,
        movements: Vec<(&str, u8, Vec<(SignalColor, f64)>)>,
        conflicts: Vec<(&str, &str)>,
    ) -> Result<Self, SignalError> {
        let mut map = BTreeMap::new();
        for (id, nema, iv) in movements {
            map.insert(id.to_string(), Self::movement_from(id, nema, &iv, cycle_length)?);
        }
        let plan = PhasePlan {
            cycle_length,
            movements: map,
            conflicts: conflicts
                .into_iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
        };
        plan.validate()?;
        Ok(plan)
    }

    fn validate(&self) -> Result<(), SignalError> {
        for (a, b) in &self.conflicts {
            let ma = self
                .movements
                .get(a)
                .ok_or_else(|| SignalError::UnknownMovement(a.clone()))?;
            let mb = self
                .movements
                .get(b)
                .ok_or_else(|| SignalError::UnknownMovement(b.clone()))?;
            // colors are piecewise constant between the union of boundaries
            let mut cuts: Vec<f64> = ma.starts.iter().chain(&mb.starts).map(|s| s.0).collect();
            cuts.push(self.cycle_length);
            cuts.sort_by(f64::total_cmp);
            cuts.dedup();
            for w in cuts.windows(2) {
                let mid = 0.5 * (w[0] + w[1]);
                if released(self.color_in(ma, mid)) && released(self.color_in(mb, mid)) {
                    return Err(SignalError::ConflictReleased {
                        a: a.clone(),
                        b: b.clone(),
                        t: w[0],
                    });
                }
            }
        }
        Ok(())
    }

    /// Checks that every cluster's movement group exists in this plan.
    pub fn check_geometry(&self, geom: &IntersectionGeometry) -> Result<(), SignalError> {
        for c in &geom.clusters {
            if !self.movements.contains_key(&c.signal_group) {
                return Err(SignalError::UnplannedMovement {
                    cluster: c.id.clone(),
                    movement: c.signal_group.clone(),
                });
            }
        }
        Ok(())
    }

    fn color_in(&self, m: &MovementPlan, t: f64) -> SignalColor {
        let tc = t.rem_euclid(self.cycle_length);
        let i = m.starts.partition_point(|s| s.0 <= tc);
        m.starts[i.saturating_sub(1)].1
    }

    /// Color of `movement` at time `t >= 0`, periodic in the cycle length.
    pub fn signal_at(&self, movement: &str, t: f64) -> Result<SignalColor, SignalError> {
        let m = self
            .movements
            .get(movement)
            .ok_or_else(|| SignalError::UnknownMovement(movement.to_string()))?;
        Ok(self.color_in(m, t))
    }

    /// Samples every movement at `k * dt` for `k < ceil(duration / dt)`.
    pub fn materialize(&self, duration: f64, dt: f64) -> SignalTimeline {
        assert!(dt > 0.0, "timeline step must be positive");
        let n = if duration > 0.0 {
            (duration / dt - 1e-9).ceil() as usize
        } else {
            0
        };
        let colors = self
            .movements
            .iter()
            .map(|(id, m)| {
                let seq = (0..n).map(|k| self.color_in(m, k as f64 * dt)).collect();
                (id.clone(), seq)
            })
            .collect();
        SignalTimeline { dt, colors }
    }
}

/// Per-movement colors on a fixed time grid.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SignalTimeline {
    pub dt: f64,
    pub colors: BTreeMap<String, Vec<SignalColor>>,
}

impl SignalTimeline {
    pub fn len(&self) -> usize {
        self.colors.values().next().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn color_at_index(&self, movement: &str, k: usize) -> Option<SignalColor> {
        self.colors.get(movement)?.get(k).copied()
    }

    /// Color in force at time `t`; an instant on a grid point belongs to the
    /// step starting there.
    pub fn color_at_time(&self, movement: &str, t: f64) -> Option<SignalColor> {
        if t < -1e-9 {
            return None;
        }
        let k = (t / self.dt + 1e-9).floor().max(0.0) as usize;
        self.color_at_index(movement, k)
    }

    /// Resamples onto a coarser grid whose step is an integer multiple of
    /// this one.
    pub fn decimate(&self, factor: usize) -> SignalTimeline {
        SignalTimeline {
            dt: self.dt * factor as f64,
            colors: self
                .colors
                .iter()
                .map(|(m, c)| (m.clone(), c.iter().step_by(factor).copied().collect()))
                .collect(),
        }
    }

    /// Delimited log: `t_s,movement,color`, one row per movement per step.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), LogError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_s", "movement", "color"])?;
        for k in 0..self.len() {
            let t = crate::scene::log_fmt6(k as f64 * self.dt);
            for (m, c) in &self.colors {
                w.write_record([t.as_str(), m.as_str(), c[k].as_str()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, LogError> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let headers = rd.headers()?.clone();
        for h in headers.iter() {
            if !["t_s", "movement", "color"].contains(&h) {
                return Err(LogError::UnknownColumn(h.to_string()));
            }
        }
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| LogError::MissingColumn(name.to_string()))
        };
        let (ti, mi, ci) = (col("t_s")?, col("movement")?, col("color")?);
        let mut rows: BTreeMap<String, Vec<(f64, SignalColor)>> = BTreeMap::new();
        for rec in rd.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |what: &str| LogError::Malformed {
                line,
                message: format!("bad {what}"),
            };
            let t: f64 = rec.get(ti).and_then(|v| v.parse().ok()).ok_or_else(|| bad("t_s"))?;
            let c = rec.get(ci).and_then(SignalColor::parse).ok_or_else(|| bad("color"))?;
            rows.entry(rec.get(mi).unwrap_or("").to_string()).or_default().push((t, c));
        }
        let mut dt = 1.0;
        for seq in rows.values_mut() {
            seq.sort_by(|a, b| a.0.total_cmp(&b.0));
            if seq.len() >= 2 {
                dt = seq[1].0 - seq[0].0;
            }
        }
        Ok(SignalTimeline {
            dt,
            colors: rows
                .into_iter()
                .map(|(m, seq)| (m, seq.into_iter().map(|x| x.1).collect()))
                .collect(),
        })
    }
}
