//! Slice-to-volume reconstruction with a dual-branch implicit neural field.
//!
//! The pipeline: simulate or load motion-corrupted slice stacks, fit a
//! [`cinr::CinrModel`] through the Gaussian-PSF acquisition model
//! ([`trainer::train`]), render the field on a voxel grid, and optionally
//! refine it with a deterministic diffusion chain ([`vdsg`]).

pub mod error;
pub mod encoding;
pub mod geometry;
pub mod acquisition;
pub mod cinr;
pub mod losses;
pub mod metrics;
pub mod numgrad;
pub mod pipeline;
pub mod rng;
pub mod sdi;
pub mod simulator;
pub mod trainer;
pub mod vdsg;
pub mod volio;
pub mod volume;

pub use error::{Error, Result};
pub use acquisition::Dataset;
pub use cinr::{CinrConfig, CinrModel};
pub use geometry::{RigidTransform, Vec3};
pub use metrics::MetricReport;
pub use simulator::{BenchmarkSpec, Simulation};
pub use trainer::{TrainConfig, TrainReport};
pub use vdsg::{NoiseConfig, Refinement};
pub use volio::RunConfig;
pub use volume::{Grid, Orientation, Stack, Volume};
