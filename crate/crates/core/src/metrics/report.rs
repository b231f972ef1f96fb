use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;

use super::{
    detect_mid_intersection_stop, detect_pre_stopbar_stop, detect_red_light, extract_ttc_encounters, ConflictEvent,
    DetectorConfig, DisplacementStats, LaneOccupancy, MetricsError, ViolationKind, ViolationRecord,
};
use crate::scene::{log_fmt6 as fmt6, IntersectionGeometry, TrajectoryLog, VehicleId};
use crate::signal::SignalTimeline;

pub const CSV_COLUMNS: [&str; 9] = [
    "cluster",
    "total",
    "red_light",
    "red_light_pct",
    "mid_stop",
    "mid_stop_pct",
    "pre_stopbar",
    "pre_stopbar_pct",
    "ttc_encounters",
];

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClusterRow {
    pub cluster: String,
    pub total: usize,
    pub red_light: usize,
    pub mid_stop: usize,
    pub pre_stopbar: usize,
    pub ttc_encounters: usize,
}

/// Percentage with one decimal, as rendered in reports.
pub fn pct(count: usize, total: usize) -> String {
    if total == 0 {
        return "0.0".to_string();
    }
    format!("{:.1}", count as f64 * 100.0 / total as f64)
}

/// `count (pct%)`.
pub fn count_cell(count: usize, total: usize) -> String {
    format!("{count} ({}%)", pct(count, total))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ClusterRow>,
    pub totals: ClusterRow,
    pub displacement: Option<DisplacementStats>,
}

impl MetricsReport {
    fn from_rows(rows: Vec<ClusterRow>) -> Self {
        let mut totals = ClusterRow {
            cluster: "Total".to_string(),
            ..Default::default()
        };
        for r in &rows {
            totals.total += r.total;
            totals.red_light += r.red_light;
            totals.mid_stop += r.mid_stop;
            totals.pre_stopbar += r.pre_stopbar;
            totals.ttc_encounters += r.ttc_encounters;
        }
        MetricsReport {
            rows,
            totals,
            displacement: None,
        }
    }

    pub fn write_csv(&self, out: impl Write) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_COLUMNS)?;
        for r in self.rows.iter().chain(std::iter::once(&self.totals)) {
            w.write_record([
                r.cluster.clone(),
                r.total.to_string(),
                r.red_light.to_string(),
                pct(r.red_light, r.total),
                r.mid_stop.to_string(),
                pct(r.mid_stop, r.total),
                r.pre_stopbar.to_string(),
                pct(r.pre_stopbar, r.total),
                r.ttc_encounters.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("utf-8")
    }

    /// Aligned text table with `count (pct%)` cells.
    pub fn to_table(&self) -> String {
        let header = [
            "Cluster",
            "Total Count",
            "Red Light Violation",
            "Mid-Intersection Stoppage",
            "Pre-Stopbar Stoppage",
            "TTC Encounters",
        ];
        let cells = |r: &ClusterRow| {
            vec![
                r.cluster.clone(),
                r.total.to_string(),
                count_cell(r.red_light, r.total),
                count_cell(r.mid_stop, r.total),
                count_cell(r.pre_stopbar, r.total),
                r.ttc_encounters.to_string(),
            ]
        };
        let mut lines: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        lines.extend(self.rows.iter().map(cells));
        let total_line = cells(&self.totals);
        let all: Vec<&Vec<String>> = lines.iter().chain(std::iter::once(&total_line)).collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| all.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let fmt_line = |l: &Vec<String>| {
            let mut s = format!("{:<w$}", l[0], w = widths[0]);
            for c in 1..l.len() {
                write!(s, "  {:>w$}", l[c], w = widths[c]).unwrap();
            }
            s.trim_end().to_string()
        };
        let rule = "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1));
        let mut out = String::new();
        writeln!(out, "{}", fmt_line(&lines[0])).unwrap();
        writeln!(out, "{rule}").unwrap();
        for l in &lines[1..] {
            writeln!(out, "{}", fmt_line(l)).unwrap();
        }
        writeln!(out, "{rule}").unwrap();
        writeln!(out, "{}", fmt_line(&total_line)).unwrap();
        if let Some(d) = &self.displacement {
            writeln!(out).unwrap();
            writeln!(
                out,
                "windows {}  ADE {:.3}  FDE {:.3}  minADE {:.3}  minFDE {:.3}  KDE-NLL {:.3}",
                d.count, d.ade, d.fde, d.min_ade, d.min_fde, d.kde_nll
            )
            .unwrap();
        }
        out
    }
}

/// Report plus every raw event behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Audit {
    pub report: MetricsReport,
    pub violations: Vec<ViolationRecord>,
    pub conflicts: Vec<ConflictEvent>,
}

impl Audit {
    /// One row per violation or conflict.
    pub fn write_events_csv(&self, out: impl Write) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["kind", "vehicle_id", "other_id", "cluster_id", "t_start", "t_end", "x", "y", "detail"])?;
        for v in &self.violations {
            w.write_record([
                v.kind.as_str().to_string(),
                v.vehicle_id.to_string(),
                String::new(),
                v.cluster_id.clone(),
                fmt6(v.t_start),
                fmt6(v.t_end),
                fmt6(v.location.x),
                fmt6(v.location.y),
                v.detail.to_string(),
            ])?;
        }
        for c in &self.conflicts {
            w.write_record([
                "ttc".to_string(),
                c.vehicles.0.to_string(),
                c.vehicles.1.to_string(),
                String::new(),
                fmt6(c.t_start),
                fmt6(c.t_end),
                String::new(),
                String::new(),
                format!("min_ttc_s={:.3};min_distance_m={:.3}", c.min_ttc, c.min_distance),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs all detectors over a cluster-labelled log. Rows follow the
/// geometry's cluster order; each vehicle counts at most once per
/// violation column; a TTC encounter counts once for each participant.
pub fn build_report(
    log: &TrajectoryLog,
    timeline: &SignalTimeline,
    geom: &IntersectionGeometry,
    cfg: &DetectorConfig,
) -> Result<Audit, MetricsError> {
    let mut rows: Vec<ClusterRow> = geom
        .clusters
        .iter()
        .map(|c| ClusterRow {
            cluster: c.id.clone(),
            ..Default::default()
        })
        .collect();
    let mut cluster_of: BTreeMap<VehicleId, usize> = BTreeMap::new();
    for tr in &log.trajectories {
        let id = tr
            .cluster_id
            .as_deref()
            .ok_or(MetricsError::Unassigned(tr.vehicle_id))?;
        let ci = geom
            .cluster_index(id)
            .ok_or_else(|| MetricsError::UnknownCluster(id.to_string()))?;
        cluster_of.insert(tr.vehicle_id, ci);
        rows[ci].total += 1;
    }
    let occupancy = LaneOccupancy::new(log, geom);
    let per_vehicle: Vec<Vec<ViolationRecord>> = {
        use rayon::prelude::*;
        log.trajectories
            .par_iter()
            .map(|tr| {
                let c = &geom.clusters[cluster_of[&tr.vehicle_id]];
                let mut v = Vec::new();
                v.extend(detect_red_light(tr, c, timeline));
                v.extend(detect_mid_intersection_stop(tr, &c.id, geom, cfg));
                v.extend(detect_pre_stopbar_stop(tr, c, &occupancy, timeline, cfg));
                v
            })
            .collect()
    };
    let mut counted: BTreeSet<(VehicleId, ViolationKind)> = BTreeSet::new();
    let mut violations = Vec::new();
    for v in per_vehicle.into_iter().flatten() {
        if counted.insert((v.vehicle_id, v.kind)) {
            let row = &mut rows[cluster_of[&v.vehicle_id]];
            match v.kind {
                ViolationKind::RedLight => row.red_light += 1,
                ViolationKind::MidIntersectionStop => row.mid_stop += 1,
                ViolationKind::PreStopbarStop => row.pre_stopbar += 1,
            }
        }
        violations.push(v);
    }
    let conflicts = extract_ttc_encounters(log, cfg);
    for c in &conflicts {
        for id in [c.vehicles.0, c.vehicles.1] {
            rows[cluster_of[&id]].ttc_encounters += 1;
        }
    }
    Ok(Audit {
        report: MetricsReport::from_rows(rows),
        violations,
        conflicts,
    })
}
