//! Discrete-latent CVAE trajectory model with history, neighbor-edge and
//! position encoders, plus simple reference predictors.

mod input;
mod network;
mod train;

pub use input::{build_agent_inputs, AgentInput, Neighbor, Normalizer, PositionContext, Track, Window};
pub use network::{CvaeModel, GmmPrediction, LatentDistribution};
pub use train::{beta_at, train, TrainConfig, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::nn::{AdamConfig, NnError};
use crate::scene::Point2;

/// Edge types used by the neighbor encoder: same approach, other approach.
pub const EDGE_TYPES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    /// History, neighbors, and the position embedding.
    #[default]
    Improved,
    /// Same network without the position embedding.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub history: usize,
    pub future: usize,
    pub dt: f64,
    pub latent: usize,
    pub attention_radius: f64,
    pub history_hidden: usize,
    pub edge_hidden: usize,
    pub future_hidden: usize,
    pub decoder_hidden: usize,
    pub position_hidden: usize,
    pub position_dim: usize,
    pub encoding_dim: usize,
    pub attention_dim: usize,
    pub num_clusters: usize,
    pub beta: f64,
    pub warmup_fraction: f64,
    pub adam: AdamConfig,
    pub variant: ModelVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            history: 8,
            future: 12,
            dt: 0.25,
            latent: 25,
            attention_radius: 30.0,
            history_hidden: 32,
            edge_hidden: 32,
            future_hidden: 32,
            decoder_hidden: 128,
            position_hidden: 32,
            position_dim: 16,
            encoding_dim: 64,
            attention_dim: 32,
            num_clusters: 11,
            beta: 1.0,
            warmup_fraction: 0.1,
            adam: AdamConfig::default(),
            variant: ModelVariant::Improved,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.history == 0 || self.future == 0 {
            return bad("history and future must be at least 1");
        }
        if self.latent == 0 || self.num_clusters == 0 {
            return bad("latent and cluster counts must be positive");
        }
        if !(self.dt > 0.0) || !(self.attention_radius >= 0.0) {
            return bad("dt must be positive and the attention radius non-negative");
        }
        if [
            self.history_hidden,
            self.edge_hidden,
            self.future_hidden,
            self.decoder_hidden,
            self.position_hidden,
            self.position_dim,
            self.encoding_dim,
            self.attention_dim,
        ]
        .contains(&0)
        {
            return bad("hidden sizes must be positive");
        }
        if !(self.beta >= 0.0) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("beta must be non-negative and warmup_fraction in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("checkpoint has {found} clusters, geometry has {expected}")]
    ClusterMismatch { expected: usize, found: usize },
    #[error("checkpoint metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Anything that can roll agents forward for the closed-loop harness.
pub trait Predictor: Sync {
    /// Most-likely positions for the next `steps` model steps, per input.
    fn predict_positions(&self, inputs: &[AgentInput], steps: usize) -> Vec<Vec<Point2>>;
}

/// Extrapolates the last velocity linearly.
#[derive(Debug, Clone, Copy)]
pub struct ConstantVelocity {
    pub dt: f64,
}

pub fn constant_velocity_predict(input: &AgentInput, dt: f64, steps: usize) -> Vec<Point2> {
    let hist: Vec<Point2> = input.history.iter().flatten().map(|s| s.pos).collect();
    let last = *hist.last().expect("history has a current state");
    let vel = if hist.len() >= 2 {
        (last - hist[hist.len() - 2]) * (1.0 / dt)
    } else {
        input.history.last().and_then(|s| s.as_ref()).map_or(Point2::ORIGIN, |s| s.vel)
    };
    (1..=steps).map(|k| last + vel * (k as f64 * dt)).collect()
}

impl Predictor for ConstantVelocity {
    fn predict_positions(&self, inputs: &[AgentInput], steps: usize) -> Vec<Vec<Point2>> {
        inputs
            .iter()
            .map(|i| constant_velocity_predict(i, self.dt, steps))
            .collect()
    }
}
