use super::Point2;

/// Piecewise-linear curve with an arc-length parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    vertices: Vec<Point2>,
    cumulative: Vec<f64>,
}

/// Nearest point on a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arc-length of the foot point.
    pub s: f64,
    /// Unsigned distance from the query point to the foot point.
    pub lateral: f64,
    pub point: Point2,
}

impl Polyline {
    /// Returns `None` for fewer than two vertices or a zero-length segment.
    pub fn new(vertices: Vec<Point2>) -> Option<Self> {
        if vertices.len() < 2 {
            return None;
        }
        let mut cumulative = Vec::with_capacity(vertices.len());
        cumulative.push(0.0);
        for w in vertices.windows(2) {
            let len = w[0].distance(w[1]);
            if !(len > 0.0) {
                return None;
            }
            cumulative.push(cumulative.last().unwrap() + len);
        }
        Some(Polyline {
            vertices,
            cumulative,
        })
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn start(&self) -> Point2 {
        self.vertices[0]
    }

    pub fn end(&self) -> Point2 {
        *self.vertices.last().unwrap()
    }

    fn segment_index(&self, s: f64) -> usize {
        let n = self.vertices.len() - 1;
        match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&s).unwrap_or(std::cmp::Ordering::Less))
        {
            Ok(i) => i.min(n - 1),
            Err(i) => i.saturating_sub(1).min(n - 1),
        }
    }

    /// Point at arc-length `s`; values outside `[0, length]` extrapolate along
    /// the first or last segment.
    pub fn point_at(&self, s: f64) -> Point2 {
        let i = self.segment_index(s);
        let a = self.vertices[i];
        let b = self.vertices[i + 1];
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        a.lerp(b, (s - self.cumulative[i]) / seg)
    }

    /// Unit tangent at arc-length `s`.
    pub fn tangent_at(&self, s: f64) -> Point2 {
        let i = self.segment_index(s);
        let d = self.vertices[i + 1] - self.vertices[i];
        d * (1.0 / d.norm())
    }

    /// Nearest point, clamped to the curve. Ties go to the earliest segment.
    pub fn project(&self, p: Point2) -> Projection {
        let mut best = Projection {
            s: 0.0,
            lateral: f64::INFINITY,
            point: self.vertices[0],
        };
        for (i, w) in self.vertices.windows(2).enumerate() {
            let d = w[1] - w[0];
            let len2 = d.dot(d);
            let f = ((p - w[0]).dot(d) / len2).clamp(0.0, 1.0);
            let foot = w[0] + d * f;
            let dist = p.distance(foot);
            if dist < best.lateral {
                best = Projection {
                    s: self.cumulative[i] + f * len2.sqrt(),
                    lateral: dist,
                    point: foot,
                };
            }
        }
        best
    }

    /// Arc-lengths at which the curve crosses segment `a`-`b`, sorted and
    /// de-duplicated (a crossing through a shared vertex counts once).
    pub fn intersect_segment(&self, a: Point2, b: Point2) -> Vec<(f64, Point2)> {
        let mut hits: Vec<(f64, Point2)> = Vec::new();
        let e = b - a;
        for (i, w) in self.vertices.windows(2).enumerate() {
            let d = w[1] - w[0];
            let denom = d.cross(e);
            if denom.abs() < 1e-15 {
                continue;
            }
            let diff = a - w[0];
            let u = diff.cross(e) / denom;
            let v = diff.cross(d) / denom;
            let tol = 1e-12;
            if (-tol..=1.0 + tol).contains(&u) && (-tol..=1.0 + tol).contains(&v) {
                let u = u.clamp(0.0, 1.0);
                let s = self.cumulative[i] + u * d.norm();
                hits.push((s, w[0] + d * u));
            }
        }
        hits.sort_by(|x, y| x.0.total_cmp(&y.0));
        hits.dedup_by(|x, y| (x.0 - y.0).abs() < 1e-9);
        hits
    }

    /// Length of the leading stretch this curve shares vertex-for-vertex with
    /// `other`.
    pub fn shared_prefix_length(&self, other: &Polyline) -> f64 {
        let mut common = 0;
        for (a, b) in self.vertices.iter().zip(&other.vertices) {
            if a.distance(*b) > 1e-9 {
                break;
            }
            common += 1;
        }
        if common == 0 {
            0.0
        } else {
            self.cumulative[common - 1]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ell() -> Polyline {
        Polyline::new(vec![
            Point2::new(0.0, 0.0),
            Point2::new(10.0, 0.0),
            Point2::new(10.0, 10.0),
        ])
        .unwrap()
    }

    #[test]
    fn arc_length_and_projection() {
        let p = ell();
        assert_eq!(p.length(), 20.0);
        assert_eq!(p.point_at(15.0), Point2::new(10.0, 5.0));
        assert_eq!(p.point_at(-2.0), Point2::new(-2.0, 0.0));
        assert_eq!(p.point_at(22.0), Point2::new(10.0, 12.0));
        let pr = p.project(Point2::new(4.0, 3.0));
        assert_eq!(pr.s, 4.0);
        assert_eq!(pr.lateral, 3.0);
        let end = p.project(Point2::new(10.0, 30.0));
        assert_eq!(end.s, 20.0);
    }

    #[test]
    fn segment_crossings() {
        let p = ell();
        let hits = p.intersect_segment(Point2::new(5.0, -1.0), Point2::new(5.0, 1.0));
        assert_eq!(hits.len(), 1);
        assert!((hits[0].0 - 5.0).abs() < 1e-12);
        // through the shared vertex
        let corner = p.intersect_segment(Point2::new(9.0, -1.0), Point2::new(11.0, 1.0));
        assert_eq!(corner.len(), 1);
        assert!(p
            .intersect_segment(Point2::new(20.0, 0.0), Point2::new(30.0, 0.0))
            .is_empty());
    }

    #[test]
    fn degenerate_input_rejected() {
        assert!(Polyline::new(vec![Point2::ORIGIN]).is_none());
        assert!(Polyline::new(vec![Point2::ORIGIN, Point2::ORIGIN]).is_none());
    }
}
