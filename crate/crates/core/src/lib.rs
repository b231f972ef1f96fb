//! Training and closed-loop evaluation of generative multi-vehicle trajectory
//! models at a signalized intersection.
//!
//! The crate is organized bottom-up:
//!
//! * [`scene`] holds the intersection geometry, the eleven trajectory
//!   clusters, region lookup and the trajectory log format.
//! * [`signal`] is the fixed-time movement signal plan.
//! * [`microsim`] produces rule-compliant ground-truth traffic.
//! * [`nn`] is a small reverse-mode differentiation core with the recurrent
//!   layers, mixture density head and Adam optimizer the model needs.
//! * [`model`] is the discrete-latent CVAE trajectory model.
//! * [`metrics`] scores trajectories: displacement errors plus red-light,
//!   stoppage and time-to-collision detectors.
//! * [`harness`] builds training windows and runs models in the loop.

pub mod harness;
pub mod metrics;
pub mod microsim;
pub mod model;
pub mod nn;
pub mod scene;
pub mod signal;

pub use scene::{
    IntersectionGeometry, Point2, Region, Trajectory, TrajectoryCluster, TrajectoryLog,
    VehicleId, VehicleState,
};
pub use signal::{PhasePlan, SignalColor, SignalTimeline};

/// The bundled default testbed document (geometry plus signal plan).
pub const DEFAULT_TESTBED: &str = include_str!("../configs/testbed.toml");

/// A parsed scenario document: geometry plus the signal plan controlling it.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub geometry: IntersectionGeometry,
    pub plan: PhasePlan,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Geometry(#[from] scene::SceneError),
    #[error(transparent)]
    Signal(#[from] signal::SignalError),
}

impl Scenario {
    pub fn from_config(text: &str) -> Result<Self, ScenarioError> {
        let geometry = scene::load_geometry(text)?;
        let plan = PhasePlan::from_config(text)?;
        plan.check_geometry(&geometry)?;
        Ok(Scenario { geometry, plan })
    }

    /// The bundled testbed.
    pub fn testbed() -> Self {
        Self::from_config(DEFAULT_TESTBED).expect("bundled testbed is valid")
    }
}
