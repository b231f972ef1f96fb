//! Static SVG figures for an evaluation bundle.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

use sigtraj::{IntersectionGeometry, Point2, Scenario, TrajectoryLog};

use crate::settings::{self, ConfigError};

/// Violation kinds, in the order they appear in events.csv.
pub const KINDS: [&str; 4] = ["red_light", "mid_stop", "pre_stopbar", "ttc"];

const PALETTE: [&str; 11] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22",
    "#17becf", "#393b79",
];

/// Writes `overview.svg` and, when the bundle has events, one file per
/// violation kind.
pub fn plot_bundle(config: Option<&Path>, bundle: &Path, out: &Path) -> Result<()> {
    if !bundle.is_dir() {
        return Err(ConfigError(format!("{}: not a bundle directory", bundle.display())).into());
    }
    let scen = bundle.join("scenario.toml");
    let text = if scen.is_file() {
        settings::read_config(&scen)?
    } else {
        match settings::resolve(config, "testbed.toml")? {
            Some(p) => settings::read_config(&p)?,
            None => sigtraj::DEFAULT_TESTBED.to_string(),
        }
    };
    let sc = Scenario::from_config(&text).map_err(|e| ConfigError(format!("scenario: {e}")))?;
    let committed = bundle.join("committed.csv");
    let log = if committed.is_file() {
        let f = fs::File::open(&committed)?;
        Some(
            TrajectoryLog::read_csv(std::io::BufReader::new(f), 0.25)
                .map_err(|e| ConfigError(format!("{}: {e}", committed.display())))?,
        )
    } else {
        None
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let canvas = Canvas::new(&sc.geometry);

    let mut svg = canvas.begin("Committed trajectories");
    canvas.geometry(&mut svg, &sc.geometry);
    if let Some(log) = &log {
        for tr in &log.trajectories {
            let ci = tr
                .cluster_id
                .as_deref()
                .and_then(|c| sc.geometry.cluster_index(c))
                .unwrap_or(0);
            let pts: Vec<Point2> = tr.states.iter().map(|s| s.pos).collect();
            canvas.path(&mut svg, &pts, PALETTE[ci % PALETTE.len()], 0.4, 0.5);
        }
    }
    canvas.legend(&mut svg, &sc.geometry);
    svg.push_str("</svg>\n");
    fs::write(out.join("overview.svg"), svg)?;

    let events = bundle.join("events.csv");
    if !events.is_file() {
        return Ok(());
    }
    let located = read_events(&events, log.as_ref())?;
    for kind in KINDS {
        let mut svg = canvas.begin(&format!("{kind} locations"));
        canvas.geometry(&mut svg, &sc.geometry);
        let mut n = 0;
        for (k, p) in &located {
            if k == kind {
                canvas.marker(&mut svg, *p);
                n += 1;
            }
        }
        let _ = writeln!(svg, r#"<text x="8" y="36" font-size="11">{n} events</text>"#);
        svg.push_str("</svg>\n");
        fs::write(out.join(format!("{kind}.svg")), svg)?;
    }
    Ok(())
}

/// `(kind, location)` per event. TTC rows carry no location; they are
/// placed midway between the pair at the encounter start.
fn read_events(path: &Path, log: Option<&TrajectoryLog>) -> Result<Vec<(String, Point2)>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let kind = field(0).to_string();
        let xy = field(6).parse::<f64>().ok().zip(field(7).parse::<f64>().ok());
        let p = match xy {
            Some((x, y)) => Some(Point2::new(x, y)),
            None => {
                let t: f64 = field(4).parse().unwrap_or(f64::NAN);
                let at = |id: &str| -> Option<Point2> {
                    let id = sigtraj::VehicleId(id.parse().ok()?);
                    let tr = log?.get(id)?;
                    tr.states
                        .iter()
                        .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
                        .map(|s| s.pos)
                };
                at(field(1)).zip(at(field(2))).map(|(a, b)| a.lerp(b, 0.5))
            }
        };
        if let Some(p) = p {
            out.push((kind, p));
        }
    }
    Ok(out)
}

/// World-to-pixel mapping with y up.
struct Canvas {
    min: Point2,
    max: Point2,
    scale: f64,
    width: f64,
    height: f64,
}

const MARGIN: f64 = 48.0;

impl Canvas {
    fn new(geom: &IntersectionGeometry) -> Self {
        let mut min = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut max = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        let all = geom
            .clusters
            .iter()
            .flat_map(|c| c.centerline.vertices().iter())
            .chain(geom.box_polygon.iter());
        for p in all {
            min = Point2::new(min.x.min(p.x), min.y.min(p.y));
            max = Point2::new(max.x.max(p.x), max.y.max(p.y));
        }
        let scale = 800.0 / (max.x - min.x).max(max.y - min.y).max(1.0);
        Canvas {
            min,
            max,
            scale,
            width: (max.x - min.x) * scale + 2.0 * MARGIN,
            height: (max.y - min.y) * scale + 2.0 * MARGIN,
        }
    }

    fn px(&self, p: Point2) -> (f64, f64) {
        (
            MARGIN + (p.x - self.min.x) * self.scale,
            MARGIN + (self.max.y - p.y) * self.scale,
        )
    }

    fn begin(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="0 0 {:.0} {:.0}" font-family="sans-serif">"#,
            self.width, self.height, self.width, self.height
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="8" y="20" font-size="14">{title}</text>"#);
        s
    }

    fn path(&self, s: &mut String, pts: &[Point2], color: &str, width: f64, opacity: f64) {
        if pts.is_empty() {
            return;
        }
        let d: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (x, y) = self.px(*p);
                format!("{}{x:.2},{y:.2}", if i == 0 { "M" } else { "L" })
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<path d="{}" fill="none" stroke="{color}" stroke-width="{width}" stroke-opacity="{opacity}"/>"#,
            d.join(" ")
        );
    }

    fn geometry(&self, s: &mut String, geom: &IntersectionGeometry) {
        let poly: Vec<String> = geom
            .box_polygon
            .iter()
            .map(|p| {
                let (x, y) = self.px(*p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r##"<polygon points="{}" fill="#f2f2f2" stroke="#555" stroke-width="1"/>"##,
            poly.join(" ")
        );
        for (a, b) in geom.stopbars.values() {
            let (x1, y1) = self.px(*a);
            let (x2, y2) = self.px(*b);
            let _ = writeln!(
                s,
                r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="black" stroke-width="2"/>"#
            );
        }
        for c in &geom.clusters {
            self.path(s, c.centerline.vertices(), "#bbbbbb", 1.0, 1.0);
        }
    }

    fn legend(&self, s: &mut String, geom: &IntersectionGeometry) {
        for (i, c) in geom.clusters.iter().enumerate() {
            let y = 40.0 + 14.0 * i as f64;
            let color = PALETTE[i % PALETTE.len()];
            let _ = writeln!(s, r#"<rect x="8" y="{:.0}" width="10" height="10" fill="{color}"/>"#, y - 9.0);
            let _ = writeln!(s, r#"<text x="22" y="{y:.0}" font-size="11">{}</text>"#, c.id);
        }
    }

    fn marker(&self, s: &mut String, p: Point2) {
        let (x, y) = self.px(p);
        let _ = writeln!(
            s,
            r##"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="#d62728" fill-opacity="0.7"/>"##
        );
    }
}
