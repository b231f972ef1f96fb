use super::MetricsError;
use crate::scene::Point2;

/// Bandwidth floor for degenerate sample sets, meters.
pub const KDE_MIN_BANDWIDTH: f64 = 1e-3;

fn check(pred: &[Point2], truth: &[Point2]) -> Result<(), MetricsError> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    Ok(())
}

pub fn ade(pred: &[Point2], truth: &[Point2]) -> Result<f64, MetricsError> {
    check(pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| p.distance(*t)).sum();
    Ok(s / pred.len() as f64)
}

pub fn fde(pred: &[Point2], truth: &[Point2]) -> Result<f64, MetricsError> {
    check(pred, truth)?;
    Ok(pred.last().unwrap().distance(*truth.last().unwrap()))
}

fn min_over(
    cands: &[Vec<Point2>],
    truth: &[Point2],
    f: fn(&[Point2], &[Point2]) -> Result<f64, MetricsError>,
) -> Result<f64, MetricsError> {
    if cands.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut best = f64::INFINITY;
    for c in cands {
        best = best.min(f(c, truth)?);
    }
    Ok(best)
}

pub fn min_ade(cands: &[Vec<Point2>], truth: &[Point2]) -> Result<f64, MetricsError> {
    min_over(cands, truth, ade)
}

pub fn min_fde(cands: &[Vec<Point2>], truth: &[Point2]) -> Result<f64, MetricsError> {
    min_over(cands, truth, fde)
}

/// Scott's rule for an isotropic 2-D kernel: `σ̂ · K^(-1/6)`, where σ̂² is
/// the mean of the per-axis unbiased variances. Floored.
pub fn scott_bandwidth(points: &[Point2]) -> f64 {
    let k = points.len();
    if k < 2 {
        return KDE_MIN_BANDWIDTH;
    }
    let n = k as f64;
    let mx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let my = points.iter().map(|p| p.y).sum::<f64>() / n;
    let vx = points.iter().map(|p| (p.x - mx).powi(2)).sum::<f64>() / (n - 1.0);
    let vy = points.iter().map(|p| (p.y - my).powi(2)).sum::<f64>() / (n - 1.0);
    let h = (0.5 * (vx + vy)).sqrt() * n.powf(-1.0 / 6.0);
    if h.is_finite() {
        h.max(KDE_MIN_BANDWIDTH)
    } else {
        KDE_MIN_BANDWIDTH
    }
}

/// Log-density at `x` of an isotropic Gaussian KDE with bandwidth `h`.
pub fn kde_log_density(points: &[Point2], h: f64, x: Point2) -> f64 {
    let terms: Vec<f64> = points
        .iter()
        .map(|p| -(x - *p).dot(x - *p) / (2.0 * h * h))
        .collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
    lse - (points.len() as f64).ln() - (2.0 * std::f64::consts::PI * h * h).ln()
}

/// Mean over steps of the KDE negative log-likelihood of the truth.
/// `bandwidth` overrides Scott's rule when given.
pub fn kde_nll(samples: &[Vec<Point2>], truth: &[Point2], bandwidth: Option<f64>) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    for s in samples {
        check(s, truth)?;
    }
    let mut total = 0.0;
    for (k, t) in truth.iter().enumerate() {
        let pts: Vec<Point2> = samples.iter().map(|s| s[k]).collect();
        let h = bandwidth.unwrap_or_else(|| scott_bandwidth(&pts));
        total -= kde_log_density(&pts, h, *t);
    }
    Ok(total / truth.len() as f64)
}

/// Aggregate displacement statistics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DisplacementStats {
    pub count: usize,
    pub ade: f64,
    pub fde: f64,
    pub min_ade: f64,
    pub min_fde: f64,
    pub kde_nll: f64,
}

impl DisplacementStats {
    /// Means of per-window `[ade, fde, min_ade, min_fde, kde_nll]` rows.
    pub fn from_rows(rows: &[[f64; 5]]) -> Self {
        let mut sums = [0.0; 5];
        for r in rows {
            for j in 0..5 {
                sums[j] += r[j];
            }
        }
        let n = rows.len().max(1) as f64;
        DisplacementStats {
            count: rows.len(),
            ade: sums[0] / n,
            fde: sums[1] / n,
            min_ade: sums[2] / n,
            min_fde: sums[3] / n,
            kde_nll: sums[4] / n,
        }
    }
}
