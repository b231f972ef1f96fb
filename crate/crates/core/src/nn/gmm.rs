use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::log_softmax;
use super::NnError;

const SIMPLEX_TOL: f64 = 1e-9;

/// Max-subtracted softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    log_softmax(scores).into_iter().map(f64::exp).collect()
}

/// `log Σ exp(x_i)`, `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Bivariate normal with log standard deviations and correlation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2 {
    pub mean: [f64; 2],
    pub log_sigma: [f64; 2],
    pub rho: f64,
}

impl Gaussian2 {
    /// From raw network output `(mu_x, mu_y, log_sx, log_sy, r)`, `rho = tanh(r)`.
    pub fn from_raw(p: &[f64]) -> Self {
        Gaussian2 {
            mean: [p[0], p[1]],
            log_sigma: [p[2], p[3]],
            rho: p[4].tanh(),
        }
    }

    pub fn from_covariance(mean: [f64; 2], cov: [[f64; 2]; 2]) -> Result<Self, NnError> {
        let (a, b, c, d) = (cov[0][0], cov[0][1], cov[1][0], cov[1][1]);
        if !(a > 0.0 && d > 0.0) || (b - c).abs() > 1e-12 * (a.abs() + d.abs()) || a * d - b * c <= 0.0 {
            return Err(NnError::Domain(format!("covariance {cov:?} is not SPD")));
        }
        let g = Gaussian2 {
            mean,
            log_sigma: [0.5 * a.ln(), 0.5 * d.ln()],
            rho: b / (a * d).sqrt(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn sigma(&self) -> [f64; 2] {
        [self.log_sigma[0].exp(), self.log_sigma[1].exp()]
    }

    pub fn covariance(&self) -> [[f64; 2]; 2] {
        let [sx, sy] = self.sigma();
        let off = self.rho * sx * sy;
        [[sx * sx, off], [off, sy * sy]]
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let [sx, sy] = self.sigma();
        let ok = self.mean.iter().all(|v| v.is_finite())
            && sx.is_finite()
            && sy.is_finite()
            && sx > 0.0
            && sy > 0.0
            && self.rho.abs() < 1.0;
        if ok {
            Ok(())
        } else {
            Err(NnError::Domain(format!("component {self:?} is not SPD")))
        }
    }

    pub fn log_pdf(&self, p: [f64; 2]) -> f64 {
        let [sx, sy] = self.sigma();
        let a = (p[0] - self.mean[0]) / sx;
        let b = (p[1] - self.mean[1]) / sy;
        let one_m = 1.0 - self.rho * self.rho;
        let q = (a * a - 2.0 * self.rho * a * b + b * b) / one_m;
        -(2.0 * std::f64::consts::PI).ln() - self.log_sigma[0] - self.log_sigma[1] - 0.5 * one_m.ln() - 0.5 * q
    }

    pub fn sample(&self, rng: &mut impl Rng) -> [f64; 2] {
        let [sx, sy] = self.sigma();
        let u: f64 = StandardNormal.sample(rng);
        let v: f64 = StandardNormal.sample(rng);
        let x = u;
        let y = self.rho * u + (1.0 - self.rho * self.rho).sqrt() * v;
        [self.mean[0] + sx * x, self.mean[1] + sy * y]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture2D {
    weights: Vec<f64>,
    components: Vec<Gaussian2>,
}

impl GaussianMixture2D {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian2>) -> Result<Self, NnError> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(NnError::Shape(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(NnError::Domain(format!("weights {weights:?} are not a simplex")));
        }
        for c in &components {
            c.validate()?;
        }
        Ok(GaussianMixture2D { weights, components })
    }

    pub fn single(c: Gaussian2) -> Result<Self, NnError> {
        Self::new(vec![1.0], vec![c])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian2] {
        &self.components
    }

    /// Weighted mean of the component means.
    pub fn mean(&self) -> [f64; 2] {
        let mut m = [0.0; 2];
        for (w, c) in self.weights.iter().zip(&self.components) {
            m[0] += w * c.mean[0];
            m[1] += w * c.mean[1];
        }
        m
    }

    pub fn log_prob(&self, p: [f64; 2]) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w.ln() + c.log_pdf(p))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> [f64; 2] {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (w, c) in self.weights.iter().zip(&self.components) {
            acc += w;
            if u < acc {
                return c.sample(rng);
            }
        }
        self.components.last().unwrap().sample(rng)
    }
}

/// Checked mixture log-density.
pub fn gmm_log_prob(mix: &GaussianMixture2D, point: [f64; 2]) -> Result<f64, NnError> {
    for c in mix.components() {
        c.validate()?;
    }
    Ok(mix.log_prob(point))
}
