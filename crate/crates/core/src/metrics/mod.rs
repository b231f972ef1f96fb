//! Displacement metrics and intersection-aware detectors: red-light
//! crossings, stops inside the box, slow starts before the stopbar, and
//! time-to-collision encounters.

mod detectors;
mod displacement;
mod report;
mod ttc;


pub use detectors::{
    detect_mid_intersection_stop, detect_pre_stopbar_stop, detect_red_light, stopbar_crossing, DetectorConfig,
    LaneOccupancy, ViolationDetail, ViolationKind, ViolationRecord,
};
pub use displacement::{
    ade, fde, kde_log_density, kde_nll, min_ade, min_fde, scott_bandwidth, DisplacementStats, KDE_MIN_BANDWIDTH,
};
pub use report::{build_report, count_cell, pct, Audit, ClusterRow, MetricsReport, CSV_COLUMNS};
pub use ttc::{extract_ttc_encounters, ttc, ConflictEvent};

use crate::scene::VehicleId;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction has {pred} steps, truth has {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("no candidates")]
    Empty,
    #[error("negative distance {0}")]
    NegativeDistance(f64),
    #[error("vehicle {0} has no cluster assignment")]
    Unassigned(VehicleId),
    #[error("unknown cluster {0}")]
    UnknownCluster(String),
}
