//! Semi-dense inverse-depth reconstruction from a calibrated stereo event-camera rig.
//!
//! Events are turned into time surfaces, each reference-view pixel gets an
//! inverse depth by minimizing a temporal-consistency residual across stereo
//! observations, and neighbouring reference views are fused under a
//! chi-square gate.

pub mod depth;
pub mod error;
pub mod export;
pub mod fusion;
pub mod geometry;
pub mod ingest;
pub mod metrics;
pub mod pipeline;
pub mod synthetic;
pub mod time_surface;

pub use depth::{DepthRangeConfig, InverseDepthEstimate};
pub use error::{Error, Result};
pub use fusion::{FusionGrid, GaussianInverseDepth, ScenePoint};
pub use geometry::{Pixel, RationalWarpCoefficients, RectifiedCamera, SE3Transform, StereoRig};
pub use ingest::{Calibration, Event, Timestamp, Trajectory};
pub use metrics::{ErrorReport, GroundTruthMap};
pub use time_surface::{ReferenceView, StereoObservation, TimeSurface};
pub use pipeline::{run_pipeline, PipelineConfig, RunSummary};
pub use synthetic::{EventModel, PlaneScene, ThreePlaneConfig};
