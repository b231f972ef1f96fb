use std::collections::BTreeMap;
use std::io::{Read, Write};

use thiserror::Error;

use super::{Point2, SceneError, Trajectory, VehicleId, VehicleState};

const COLUMNS: [&str; 9] = [
    "t_s",
    "vehicle_id",
    "cluster_id",
    "x_m",
    "y_m",
    "vx_mps",
    "vy_mps",
    "ax_mps2",
    "ay_mps2",
];

#[derive(Debug, Error)]
pub enum LogError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("unknown column \"{0}\"")]
    UnknownColumn(String),
    #[error("missing column \"{0}\"")]
    MissingColumn(String),
    #[error(transparent)]
    Trajectory(#[from] SceneError),
}

impl From<csv::Error> for LogError {
    fn from(e: csv::Error) -> Self {
        match e.position() {
            Some(p) => LogError::Malformed {
                line: p.line(),
                message: e.to_string(),
            },
            None => match e.into_kind() {
                csv::ErrorKind::Io(io) => LogError::Io(io),
                other => LogError::Malformed {
                    line: 0,
                    message: format!("{other:?}"),
                },
            },
        }
    }
}

/// A set of trajectories sharing one sampling step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryLog {
    pub dt: f64,
    /// Sorted by vehicle id.
    pub trajectories: Vec<Trajectory>,
}

pub(crate) fn fmt6(v: f64) -> String {
    // adding 0.0 turns -0.0 into 0.0
    format!("{:.6}", v + 0.0)
}

impl TrajectoryLog {
    pub fn new(dt: f64, mut trajectories: Vec<Trajectory>) -> Self {
        trajectories.sort_by_key(|t| t.vehicle_id);
        TrajectoryLog { dt, trajectories }
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn get(&self, id: VehicleId) -> Option<&Trajectory> {
        self.trajectories
            .binary_search_by_key(&id, |t| t.vehicle_id)
            .ok()
            .map(|i| &self.trajectories[i])
    }

    /// Integer frame index of time `t` on this log's grid.
    pub fn frame_index(&self, t: f64) -> i64 {
        (t / self.dt).round() as i64
    }

    /// Frame index → indices of (trajectory, state) present at that frame,
    /// ordered by vehicle id.
    pub fn frame_map(&self) -> BTreeMap<i64, Vec<(usize, usize)>> {
        let mut frames: BTreeMap<i64, Vec<(usize, usize)>> = BTreeMap::new();
        for (ti, tr) in self.trajectories.iter().enumerate() {
            for (si, st) in tr.states.iter().enumerate() {
                frames.entry(self.frame_index(st.t)).or_default().push((ti, si));
            }
        }
        frames
    }

    /// Writes the delimited log, rows sorted by (time, vehicle id).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), LogError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(COLUMNS)?;
        for (_, entries) in self.frame_map() {
            for (ti, si) in entries {
                let tr = &self.trajectories[ti];
                let s = &tr.states[si];
                w.write_record([
                    fmt6(s.t),
                    tr.vehicle_id.to_string(),
                    tr.cluster_id.clone().unwrap_or_default(),
                    fmt6(s.pos.x),
                    fmt6(s.pos.y),
                    fmt6(s.vel.x),
                    fmt6(s.vel.y),
                    fmt6(s.acc.x),
                    fmt6(s.acc.y),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    /// Reads a delimited log. The `cluster_id` column may be absent; any
    /// column outside the known set is an error. `default_dt` is used when no
    /// trajectory has two samples.
    pub fn read_csv<R: Read>(input: R, default_dt: f64) -> Result<Self, LogError> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let headers = rd.headers()?.clone();
        let mut idx = [usize::MAX; 9];
        for (i, h) in headers.iter().enumerate() {
            match COLUMNS.iter().position(|c| *c == h) {
                Some(k) => idx[k] = i,
                None => return Err(LogError::UnknownColumn(h.to_string())),
            }
        }
        for (k, col) in COLUMNS.iter().enumerate() {
            if idx[k] == usize::MAX && *col != "cluster_id" {
                return Err(LogError::MissingColumn(col.to_string()));
            }
        }
        let has_cluster = idx[2] != usize::MAX;

        let mut rows: BTreeMap<VehicleId, (Option<String>, Vec<VehicleState>)> = BTreeMap::new();
        for rec in rd.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let num = |k: usize| -> Result<f64, LogError> {
                let raw = rec.get(idx[k]).unwrap_or("");
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| LogError::Malformed {
                        line,
                        message: format!("bad {} value \"{raw}\"", COLUMNS[k]),
                    })
            };
            let raw_id = rec.get(idx[1]).unwrap_or("");
            let id = raw_id.parse::<u64>().map_err(|_| LogError::Malformed {
                line,
                message: format!("bad vehicle_id \"{raw_id}\""),
            })?;
            let state = VehicleState {
                t: num(0)?,
                pos: Point2::new(num(3)?, num(4)?),
                vel: Point2::new(num(5)?, num(6)?),
                acc: Point2::new(num(7)?, num(8)?),
            };
            let cluster = has_cluster
                .then(|| rec.get(idx[2]).unwrap_or("").to_string())
                .filter(|c| !c.is_empty());
            let entry = rows.entry(VehicleId(id)).or_insert_with(|| (cluster.clone(), Vec::new()));
            if entry.0 != cluster {
                return Err(LogError::Malformed {
                    line,
                    message: format!("vehicle {id} changes cluster"),
                });
            }
            entry.1.push(state);
        }

        let mut trajectories = Vec::with_capacity(rows.len());
        let mut dt: Option<f64> = None;
        for (id, (cluster, mut states)) in rows {
            states.sort_by(|a, b| a.t.total_cmp(&b.t));
            let tr = Trajectory::new(id, cluster, states)?;
            if let Some(step) = tr.dt() {
                dt = Some(dt.map_or(step, |d: f64| d.min(step)));
            }
            trajectories.push(tr);
        }
        Ok(TrajectoryLog::new(dt.unwrap_or(default_dt), trajectories))
    }
}
