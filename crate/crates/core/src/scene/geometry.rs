use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;
use thiserror::Error;

use super::{Point2, Polyline, Region, Trajectory, VehicleId};

/// Lateral distance beyond which a position is considered off its route.
pub const LATERAL_GATE_M: f64 = 5.0;

/// The eleven route clusters of the testbed, in report row order.
pub const TABLE_CLUSTER_IDS: [&str; 11] = [
    "L on EBL",
    "L on NBL",
    "L on WBL",
    "R on EBTR",
    "R on NBTR",
    "R on WBTR",
    "T on EBT",
    "T on EBTR",
    "T on NBTR",
    "T on WBT",
    "T on WBTR",
];

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("geometry document: {0}")]
    Parse(String),
    #[error("missing cluster \"{0}\"")]
    MissingCluster(String),
    #[error("duplicate cluster \"{0}\"")]
    DuplicateCluster(String),
    #[error("unknown cluster \"{0}\"")]
    UnknownCluster(String),
    #[error("box polygon: {0}")]
    InvalidBox(&'static str),
    #[error("cluster \"{cluster}\": no stopbar for lane \"{lane}\"")]
    MissingStopbar { cluster: String, lane: String },
    #[error("cluster \"{0}\": centerline does not cross its stopbar")]
    StopbarMiss(String),
    #[error("cluster \"{cluster}\": centerline crosses the box {crossings} times, expected 2")]
    BoxCrossings { cluster: String, crossings: usize },
    #[error("cluster \"{0}\": region breakpoints are not strictly increasing inside the centerline")]
    Breakpoints(String),
    #[error("cluster \"{0}\": degenerate centerline")]
    DegenerateCenterline(String),
    #[error("position is {distance:.2} m from the \"{cluster}\" centerline")]
    OffRoute { cluster: String, distance: f64 },
    #[error("vehicle {vehicle}: best route is {distance:.2} m away on average")]
    Unassignable { vehicle: VehicleId, distance: f64 },
    #[error("vehicle {0}: need at least two states")]
    TooShort(VehicleId),
    #[error("vehicle {0}: timestamps are not strictly increasing at a fixed step")]
    IrregularTrajectory(VehicleId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize)]
pub enum Approach {
    NB,
    EB,
    WB,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize)]
pub enum Movement {
    Left,
    Through,
    Right,
}

/// One approach/lane/turn route through the intersection.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryCluster {
    pub id: String,
    pub approach: Approach,
    /// Physical approach lane; clusters on the same lane share its entry.
    pub lane: String,
    pub movement: Movement,
    /// Signal movement group controlling this route.
    pub signal_group: String,
    pub centerline: Polyline,
    /// Arc-lengths of the stopbar crossing and of the exit from the box.
    pub region_breakpoints: [f64; 2],
    /// End point of each region: stopbar point, box-exit point, route end.
    pub static_points: [Point2; 3],
}

impl TrajectoryCluster {
    pub fn region_at(&self, s: f64) -> Region {
        if s < self.region_breakpoints[0] {
            Region::Incoming
        } else if s < self.region_breakpoints[1] {
            Region::InBetween
        } else {
            Region::Outgoing
        }
    }

    /// Locates `pos` on this route. Fails beyond the lateral gate.
    pub fn locate_region(&self, pos: Point2) -> Result<(Region, f64), SceneError> {
        let pr = self.centerline.project(pos);
        if pr.lateral > LATERAL_GATE_M {
            return Err(SceneError::OffRoute {
                cluster: self.id.clone(),
                distance: pr.lateral,
            });
        }
        Ok((self.region_at(pr.s), pr.s))
    }

    pub fn static_point_for(&self, region: Region) -> Point2 {
        self.static_points[region.index()]
    }

    pub fn stopbar_s(&self) -> f64 {
        self.region_breakpoints[0]
    }
}

/// The testbed: eleven clusters, the crosswalk box and the stopbars.
#[derive(Debug, Clone, PartialEq)]
pub struct IntersectionGeometry {
    /// Sorted by id, which is also the report row order.
    pub clusters: Vec<TrajectoryCluster>,
    /// Counter-clockwise convex polygon enclosed by the crosswalks.
    pub box_polygon: Vec<Point2>,
    pub stopbars: BTreeMap<String, (Point2, Point2)>,
    shared: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct GeometryDoc {
    #[serde(rename = "box")]
    box_: BoxDoc,
    #[serde(default)]
    stopbar: Vec<StopbarDoc>,
    #[serde(default)]
    cluster: Vec<ClusterDoc>,
}

#[derive(Deserialize)]
struct BoxDoc {
    polygon: Vec<[f64; 2]>,
}

#[derive(Deserialize)]
struct StopbarDoc {
    lane: String,
    a: [f64; 2],
    b: [f64; 2],
}

#[derive(Deserialize)]
struct ClusterDoc {
    id: String,
    approach: Approach,
    lane: String,
    movement: Movement,
    signal: String,
    centerline: Vec<[f64; 2]>,
}

/// Parses and validates a geometry document. Sections other than `box`,
/// `stopbar` and `cluster` are ignored.
pub fn load_geometry(config_text: &str) -> Result<IntersectionGeometry, SceneError> {
    let doc: GeometryDoc =
        toml::from_str(config_text).map_err(|e| SceneError::Parse(e.to_string()))?;

    let mut seen = BTreeSet::new();
    for c in &doc.cluster {
        if !seen.insert(c.id.as_str()) {
            return Err(SceneError::DuplicateCluster(c.id.clone()));
        }
        if !TABLE_CLUSTER_IDS.contains(&c.id.as_str()) {
            return Err(SceneError::UnknownCluster(c.id.clone()));
        }
    }
    if let Some(missing) = TABLE_CLUSTER_IDS.iter().find(|id| !seen.contains(**id)) {
        return Err(SceneError::MissingCluster(missing.to_string()));
    }

    let box_polygon = convex_ccw(doc.box_.polygon.iter().map(|&p| p.into()).collect())?;
    let stopbars: BTreeMap<String, (Point2, Point2)> = doc
        .stopbar
        .iter()
        .map(|s| (s.lane.clone(), (s.a.into(), s.b.into())))
        .collect();

    let mut clusters = Vec::with_capacity(doc.cluster.len());
    for c in doc.cluster {
        let centerline = Polyline::new(c.centerline.iter().map(|&p| p.into()).collect())
            .ok_or_else(|| SceneError::DegenerateCenterline(c.id.clone()))?;
        let &(sa, sb) = stopbars
            .get(&c.lane)
            .ok_or_else(|| SceneError::MissingStopbar {
                cluster: c.id.clone(),
                lane: c.lane.clone(),
            })?;
        let (stop_s, stop_pt) = *centerline
            .intersect_segment(sa, sb)
            .first()
            .ok_or_else(|| SceneError::StopbarMiss(c.id.clone()))?;

        let mut crossings: Vec<(f64, Point2)> = Vec::new();
        for i in 0..box_polygon.len() {
            let a = box_polygon[i];
            let b = box_polygon[(i + 1) % box_polygon.len()];
            crossings.extend(centerline.intersect_segment(a, b));
        }
        crossings.sort_by(|x, y| x.0.total_cmp(&y.0));
        crossings.dedup_by(|x, y| (x.0 - y.0).abs() < 1e-9);
        if crossings.len() != 2 {
            return Err(SceneError::BoxCrossings {
                cluster: c.id.clone(),
                crossings: crossings.len(),
            });
        }
        let (exit_s, exit_pt) = crossings[1];
        if !(0.0 < stop_s && stop_s < exit_s && exit_s < centerline.length()) {
            return Err(SceneError::Breakpoints(c.id.clone()));
        }
        let end = centerline.end();
        clusters.push(TrajectoryCluster {
            id: c.id,
            approach: c.approach,
            lane: c.lane,
            movement: c.movement,
            signal_group: c.signal,
            centerline,
            region_breakpoints: [stop_s, exit_s],
            static_points: [stop_pt, exit_pt, end],
        });
    }
    clusters.sort_by(|a, b| a.id.cmp(&b.id));

    let n = clusters.len();
    let mut shared = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            shared[i][j] = if i == j {
                clusters[i].centerline.length()
            } else if clusters[i].lane == clusters[j].lane {
                clusters[i]
                    .centerline
                    .shared_prefix_length(&clusters[j].centerline)
            } else {
                0.0
            };
        }
    }

    Ok(IntersectionGeometry {
        clusters,
        box_polygon,
        stopbars,
        shared,
    })
}

fn convex_ccw(mut poly: Vec<Point2>) -> Result<Vec<Point2>, SceneError> {
    if poly.len() < 3 {
        return Err(SceneError::InvalidBox("fewer than 3 vertices"));
    }
    let n = poly.len();
    let mut sign = 0.0f64;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let c = poly[(i + 2) % n];
        let cr = (b - a).cross(c - b);
        if cr.abs() < 1e-12 {
            return Err(SceneError::InvalidBox("collinear or repeated vertices"));
        }
        if sign == 0.0 {
            sign = cr.signum();
        } else if cr.signum() != sign {
            return Err(SceneError::InvalidBox("not convex"));
        }
    }
    if sign < 0.0 {
        poly.reverse();
    }
    if !point_in_convex(&poly, Point2::ORIGIN) {
        return Err(SceneError::InvalidBox("does not contain the origin"));
    }
    Ok(poly)
}

fn point_in_convex(ccw: &[Point2], p: Point2) -> bool {
    let n = ccw.len();
    (0..n).all(|i| {
        let a = ccw[i];
        let b = ccw[(i + 1) % n];
        (b - a).cross(p - a) >= -1e-9
    })
}

impl IntersectionGeometry {
    pub fn cluster(&self, id: &str) -> Option<&TrajectoryCluster> {
        self.cluster_index(id).map(|i| &self.clusters[i])
    }

    pub fn cluster_index(&self, id: &str) -> Option<usize> {
        self.clusters
            .binary_search_by(|c| c.id.as_str().cmp(id))
            .ok()
    }

    pub fn cluster_ids(&self) -> Vec<String> {
        self.clusters.iter().map(|c| c.id.clone()).collect()
    }

    /// Signal movement group of a cluster.
    pub fn movement_of(&self, cluster_id: &str) -> Option<&str> {
        self.cluster(cluster_id).map(|c| c.signal_group.as_str())
    }

    /// Length of the entry stretch clusters `i` and `j` drive on together;
    /// zero for clusters on different lanes.
    pub fn shared_length(&self, i: usize, j: usize) -> f64 {
        self.shared[i][j]
    }

    /// Point-in-convex-polygon test; the boundary counts as inside.
    pub fn inside_box(&self, pos: Point2) -> bool {
        point_in_convex(&self.box_polygon, pos)
    }

    /// Route whose centerline best explains `traj`: smallest mean squared
    /// lateral distance among routes traversed forward, ties broken by id.
    pub fn assign_cluster(&self, traj: &Trajectory) -> Result<String, SceneError> {
        if traj.states.len() < 2 {
            return Err(SceneError::TooShort(traj.vehicle_id));
        }
        let mut best: Option<(f64, &str)> = None;
        for c in &self.clusters {
            let mut sq = 0.0;
            let mut first_s = 0.0;
            let mut last_s = 0.0;
            for (k, st) in traj.states.iter().enumerate() {
                let pr = c.centerline.project(st.pos);
                sq += pr.lateral * pr.lateral;
                if k == 0 {
                    first_s = pr.s;
                }
                last_s = pr.s;
            }
            if last_s - first_s <= 0.0 {
                continue;
            }
            let msq = sq / traj.states.len() as f64;
            // clusters are sorted, so strict < keeps the lexicographic winner
            if best.is_none_or(|(b, _)| msq < b) {
                best = Some((msq, c.id.as_str()));
            }
        }
        match best {
            Some((msq, id)) if msq.sqrt() <= LATERAL_GATE_M => Ok(id.to_string()),
            Some((msq, _)) => Err(SceneError::Unassignable {
                vehicle: traj.vehicle_id,
                distance: msq.sqrt(),
            }),
            None => Err(SceneError::Unassignable {
                vehicle: traj.vehicle_id,
                distance: f64::INFINITY,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::VehicleState;
    use crate::DEFAULT_TESTBED;

    fn geom() -> IntersectionGeometry {
        load_geometry(DEFAULT_TESTBED).unwrap()
    }

    fn along(c: &TrajectoryCluster, from: f64, to: f64, n: usize) -> Trajectory {
        let states = (0..n)
            .map(|k| {
                let s = from + (to - from) * k as f64 / (n - 1) as f64;
                VehicleState {
                    t: k as f64 * 0.1,
                    pos: c.centerline.point_at(s),
                    ..Default::default()
                }
            })
            .collect();
        Trajectory::new(VehicleId(7), None, states).unwrap()
    }

    #[test]
    fn default_testbed_has_table_clusters() {
        let g = geom();
        let ids: Vec<_> = g.clusters.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, TABLE_CLUSTER_IDS);
        assert!(g.inside_box(Point2::ORIGIN));
    }

    #[test]
    fn cluster_count_and_duplicates() {
        let doc: toml::Value = toml::from_str(DEFAULT_TESTBED).unwrap();
        let mut ten = doc.clone();
        let arr = ten["cluster"].as_array_mut().unwrap();
        arr.retain(|c| c["id"].as_str() != Some("T on WBT"));
        let err = load_geometry(&toml::to_string(&ten).unwrap()).unwrap_err();
        assert_eq!(err, SceneError::MissingCluster("T on WBT".into()));
        assert!(err.to_string().contains("missing cluster"));

        let mut dup = doc.clone();
        let arr = dup["cluster"].as_array_mut().unwrap();
        let first = arr[0].clone();
        arr.push(first);
        let err = load_geometry(&toml::to_string(&dup).unwrap()).unwrap_err();
        assert_eq!(err, SceneError::DuplicateCluster("L on EBL".into()));
    }

    #[test]
    fn bad_box_is_rejected() {
        let mut doc: toml::Value = toml::from_str(DEFAULT_TESTBED).unwrap();
        doc["box"]["polygon"] = toml::Value::try_from(vec![
            [-14.0, -14.0],
            [14.0, -14.0],
            [0.0, -5.0],
            [14.0, 14.0],
            [-14.0, 14.0],
        ])
        .unwrap();
        let err = load_geometry(&toml::to_string(&doc).unwrap()).unwrap_err();
        assert_eq!(err, SceneError::InvalidBox("not convex"));
    }

    #[test]
    fn centerline_missing_box_is_rejected() {
        let mut doc: toml::Value = toml::from_str(DEFAULT_TESTBED).unwrap();
        let c = &mut doc["cluster"].as_array_mut().unwrap()[0];
        c["centerline"] = toml::Value::try_from(vec![[-137.0, -1.75], [-15.0, -1.75]]).unwrap();
        let err = load_geometry(&toml::to_string(&doc).unwrap()).unwrap_err();
        assert!(matches!(err, SceneError::BoxCrossings { crossings: 0, .. }));
        assert!(err.to_string().contains("L on EBL"));
    }

    #[test]
    fn regions_along_a_route() {
        let g = geom();
        let c = g.cluster("T on NBTR").unwrap();
        let up = c.centerline.point_at(c.stopbar_s() - 20.0);
        let (r, s) = c.locate_region(up).unwrap();
        assert_eq!(r, Region::Incoming);
        assert!(s < c.region_breakpoints[0]);
        let (r, s) = c.locate_region(Point2::new(5.25, 0.0)).unwrap();
        assert_eq!(r, Region::InBetween);
        assert!(s > c.region_breakpoints[0] && s < c.region_breakpoints[1]);
        let (r, s) = c.locate_region(c.centerline.end()).unwrap();
        assert_eq!(r, Region::Outgoing);
        assert!((s - c.centerline.length()).abs() < 1e-12);
        let off = c.locate_region(Point2::new(30.0, -50.0));
        assert!(matches!(off, Err(SceneError::OffRoute { .. })));
    }

    #[test]
    fn static_points_follow_regions() {
        let g = geom();
        for c in &g.clusters {
            let sp = c.static_point_for(Region::Incoming);
            let (a, b) = g.stopbars[&c.lane];
            // on the stopbar segment
            assert!((b - a).cross(sp - a).abs() < 1e-9);
            let bx = c.static_point_for(Region::InBetween);
            assert!(g.inside_box(bx));
            assert!(!g.inside_box(bx + c.centerline.tangent_at(c.region_breakpoints[1] + 0.01) * 0.01));
            assert_eq!(c.static_point_for(Region::Outgoing), c.centerline.end());
        }
    }

    #[test]
    fn inside_box_cases() {
        let g = geom();
        assert!(g.inside_box(Point2::ORIGIN));
        assert!(!g.inside_box(Point2::new(500.0, 0.0)));
        for v in &g.box_polygon {
            assert!(g.inside_box(*v));
        }
    }

    #[test]
    fn assignment_on_exact_centerlines() {
        let g = geom();
        for c in &g.clusters {
            let tr = along(c, 0.0, c.centerline.length(), 200);
            assert_eq!(g.assign_cluster(&tr).unwrap(), c.id);
        }
        let c = g.cluster("L on WBL").unwrap();
        let mut tr = along(c, 0.0, c.centerline.length(), 50);
        assert_eq!(g.assign_cluster(&tr).unwrap(), "L on WBL");
        for st in &mut tr.states {
            st.pos = st.pos + Point2::new(100.0, 100.0);
        }
        assert!(matches!(
            g.assign_cluster(&tr),
            Err(SceneError::Unassignable { .. })
        ));
    }

    #[test]
    fn reversed_travel_is_not_assigned_to_the_route() {
        let g = geom();
        let c = g.cluster("T on EBT").unwrap();
        let tr = along(c, c.centerline.length(), 0.0, 100);
        assert!(g.assign_cluster(&tr).is_err());
    }

    #[test]
    fn shared_entry_lanes() {
        let g = geom();
        let t = g.cluster_index("T on EBTR").unwrap();
        let r = g.cluster_index("R on EBTR").unwrap();
        let l = g.cluster_index("L on EBL").unwrap();
        let shared = g.shared_length(t, r);
        assert!(shared > g.clusters[t].stopbar_s());
        assert_eq!(g.shared_length(t, l), 0.0);
    }
}
