//! JSON run configuration.
//!
//! Keys mirror the training hyperparameters: `iterations`, `batch_size`,
//! `psf_samples`, `lr`, `lambda`, `lambda_v`, `lambda_b`, `alpha0`, `t`.
//! Unknown keys are rejected; missing keys take the defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cinr::CinrConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::trainer::TrainConfig;
pub use crate::vdsg::NoiseConfig;

/// Everything a run needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: CinrConfig,
    pub alpha0: f64,
    pub steps: usize,
    pub noise: NoiseConfig,
    /// Output voxel spacing (mm).
    pub resolution: f64,
    pub paths: Paths,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub stacks: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub volume: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    iterations: Option<usize>,
    batch_size: Option<usize>,
    psf_samples: Option<usize>,
    lr: Option<f64>,
    lambda: Option<f64>,
    lambda_v: Option<f64>,
    lambda_b: Option<f64>,
    alpha0: Option<f64>,
    t: Option<usize>,
    huber_delta: Option<f64>,
    seed: Option<u64>,
    refine_transforms: Option<bool>,
    transform_lr: Option<f64>,
    log_stride: Option<usize>,
    grad_clip: Option<f64>,
    noise_iterations: Option<usize>,
    noise_batch: Option<usize>,
    noise_lr: Option<f64>,
    resolution: Option<f64>,
    model: Option<CinrConfig>,
    paths: Option<Paths>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            model: CinrConfig::default(),
            alpha0: 1e-3,
            steps: 10,
            noise: NoiseConfig::default(),
            resolution: 0.8,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.steps < 1 || !(self.alpha0 > 0.0 && self.alpha0 * (self.steps as f64) < 1.0) {
            return Err(Error::Config(format!(
                "alpha0 = {} and t = {} need 0 < alpha0 < 1/t",
                self.alpha0, self.steps
            )));
        }
        if !(self.resolution > 0.0) {
            return Err(Error::Config(format!("resolution {} must be positive", self.resolution)));
        }
        if self.noise.batch == 0 || !(self.noise.lr > 0.0) {
            return Err(Error::Config("noise batch and lr must be positive".into()));
        }
        Ok(())
    }
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let text = if text.trim().is_empty() { "{}" } else { text };
    let f: FileConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let d = RunConfig::default();
    let dw = LossWeights::default();
    let dt = TrainConfig::default();
    let dn = NoiseConfig::default();
    let cfg = RunConfig {
        train: TrainConfig {
            iterations: f.iterations.unwrap_or(dt.iterations),
            batch_size: f.batch_size.unwrap_or(dt.batch_size),
            psf_samples: f.psf_samples.unwrap_or(dt.psf_samples),
            lr: f.lr.unwrap_or(dt.lr),
            weights: LossWeights {
                lambda: f.lambda.unwrap_or(dw.lambda),
                lambda_v: f.lambda_v.unwrap_or(dw.lambda_v),
                lambda_b: f.lambda_b.unwrap_or(dw.lambda_b),
                huber_delta: f.huber_delta.unwrap_or(dw.huber_delta),
            },
            seed: f.seed.unwrap_or(dt.seed),
            refine_transforms: f.refine_transforms.unwrap_or(dt.refine_transforms),
            transform_lr: f.transform_lr.unwrap_or(dt.transform_lr),
            log_stride: f.log_stride.unwrap_or(dt.log_stride),
            grad_clip: f.grad_clip.unwrap_or(dt.grad_clip),
        },
        model: f.model.unwrap_or(d.model),
        alpha0: f.alpha0.unwrap_or(d.alpha0),
        steps: f.t.unwrap_or(d.steps),
        noise: NoiseConfig {
            iterations: f.noise_iterations.unwrap_or(dn.iterations),
            batch: f.noise_batch.unwrap_or(dn.batch),
            lr: f.noise_lr.unwrap_or(dn.lr),
        },
        resolution: f.resolution.unwrap_or(d.resolution),
        paths: f.paths.unwrap_or_default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let bytes = super::read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}
