use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{DetectorConfig, MetricsError};
use crate::scene::{TrajectoryLog, VehicleId};

/// `d / v_rel` for a closing pair; `None` when `v_rel` (closing speed,
/// positive when approaching) is zero or negative.
pub fn ttc(d: f64, v_rel: f64) -> Result<Option<f64>, MetricsError> {
    if !(d >= 0.0) {
        return Err(MetricsError::NegativeDistance(d));
    }
    if v_rel > 0.0 {
        Ok(Some(d / v_rel))
    } else {
        Ok(None)
    }
}

/// A maximal run of consecutive frames with TTC below the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ConflictEvent {
    /// Smaller id first.
    pub vehicles: (VehicleId, VehicleId),
    pub t_start: f64,
    pub t_end: f64,
    pub min_ttc: f64,
    /// Smallest center distance during the encounter.
    pub min_distance: f64,
}

struct Flag {
    pair: (VehicleId, VehicleId),
    ttc: f64,
    dist: f64,
}

/// Pairwise TTC over frame-aligned trajectories.
pub fn extract_ttc_encounters(log: &TrajectoryLog, cfg: &DetectorConfig) -> Vec<ConflictEvent> {
    let frames = log.frame_map();
    let keys: Vec<i64> = frames.keys().copied().collect();
    let dt = log.dt;
    let flagged: Vec<(i64, Vec<Flag>)> = keys
        .par_iter()
        .filter_map(|&k| {
            let prev = frames.get(&(k - 1))?;
            let cur = &frames[&k];
            let pos_prev: BTreeMap<VehicleId, _> = prev
                .iter()
                .map(|&(ti, si)| {
                    let tr = &log.trajectories[ti];
                    (tr.vehicle_id, tr.states[si].pos)
                })
                .collect();
            let now: Vec<(VehicleId, _, _)> = cur
                .iter()
                .filter_map(|&(ti, si)| {
                    let tr = &log.trajectories[ti];
                    let p0 = *pos_prev.get(&tr.vehicle_id)?;
                    Some((tr.vehicle_id, tr.states[si].pos, p0))
                })
                .collect();
            let mut out = Vec::new();
            for i in 0..now.len() {
                for j in i + 1..now.len() {
                    let (a, pa, qa) = now[i];
                    let (b, pb, qb) = now[j];
                    let c = pa.distance(pb);
                    if c >= cfg.ttc_gate {
                        continue;
                    }
                    let closing = (qa.distance(qb) - c) / dt;
                    let d = (c - cfg.ttc_extent).max(0.0);
                    if let Ok(Some(t)) = ttc(d, closing) {
                        if t < cfg.ttc_threshold {
                            let pair = if a < b { (a, b) } else { (b, a) };
                            out.push(Flag { pair, ttc: t, dist: c });
                        }
                    }
                }
            }
            (!out.is_empty()).then_some((k, out))
        })
        .collect();

    let mut open: BTreeMap<(VehicleId, VehicleId), (i64, ConflictEvent)> = BTreeMap::new();
    let mut done = Vec::new();
    for (k, flags) in flagged {
        let t = k as f64 * dt;
        for f in flags {
            match open.get_mut(&f.pair) {
                Some((last, ev)) if *last == k - 1 => {
                    *last = k;
                    ev.t_end = t;
                    ev.min_ttc = ev.min_ttc.min(f.ttc);
                    ev.min_distance = ev.min_distance.min(f.dist);
                }
                _ => {
                    let ev = ConflictEvent {
                        vehicles: f.pair,
                        t_start: t,
                        t_end: t,
                        min_ttc: f.ttc,
                        min_distance: f.dist,
                    };
                    if let Some((_, old)) = open.insert(f.pair, (k, ev)) {
                        done.push(old);
                    }
                }
            }
        }
    }
    done.extend(open.into_values().map(|(_, e)| e));
    done.sort_by(|a, b| {
        a.t_start
            .total_cmp(&b.t_start)
            .then(a.vehicles.cmp(&b.vehicles))
    });
    done
}
