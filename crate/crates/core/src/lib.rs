//! Joint rigid motion tracking of a patient anatomy and a surgical drill from
//! consecutive RGB-D frames, with classical baselines, a ground-truth scene
//! simulator and an evaluation harness.

pub mod baselines;
pub mod camera;
pub mod config;
pub mod correspondence;
pub mod error;
pub mod eval;
pub mod liegroup;
pub mod scene;
pub mod simulator;
pub mod solver;

pub use camera::Intrinsics;
pub use config::{RunConfig, TrackerConfig};
pub use error::{Error, Result};
pub use eval::{BenchmarkReport, FrameResult, Method};
pub use liegroup::{geodesic_error, GeodesicError, RigidMotion, Twist};
pub use scene::{Frame, FramePair, ObjectLabel, Sequence};
pub use simulator::{NoiseSpec, Scenario};
pub use solver::{track, MotionEstimate};
