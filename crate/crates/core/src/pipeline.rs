//! End-to-end helpers shared by the command line and the test suites.

use crate::acquisition::{render_volume, Dataset, DEFAULT_VOXEL_BUDGET};
use crate::cinr::{CinrConfig, CinrModel};
use crate::encoding::HashGridSpec;
use crate::error::Result;
use crate::trainer::{train, TrainConfig, TrainReport};
use crate::vdsg::{make_schedule, refine, train_noise_head, LearnedNoise, NoiseConfig, NoiseHead, Refinement};
use crate::volume::{Grid, Volume};

/// Smaller hash grid for CPU runs on ~100³ volumes.
///
/// 8 levels from 8 to ~136 cells per axis with `2^16`-row tables; about
/// 0.5M parameters against 12M for the default grid.
pub fn compact_model_config() -> CinrConfig {
    CinrConfig {
        grid: HashGridSpec {
            levels: 8,
            table_log2: 16,
            base_resolution: 8,
            growth: 1.5,
            ..HashGridSpec::default()
        },
        ..CinrConfig::default()
    }
}

/// Training settings matching [`compact_model_config`]: 2000 iterations of
/// 64 pixels with 128 PSF samples each.
pub fn compact_train_config() -> TrainConfig {
    TrainConfig {
        iterations: 2000,
        batch_size: 64,
        psf_samples: 128,
        ..TrainConfig::default()
    }
}

#[derive(Debug)]
pub struct Reconstruction {
    pub model: CinrModel,
    pub report: TrainReport,
    pub volume: Volume,
}

/// Fits a fresh model to `data` and renders it on `grid`.
pub fn reconstruct(
    data: &mut Dataset,
    model_config: &CinrConfig,
    train_config: &TrainConfig,
    grid: &Grid,
) -> Result<Reconstruction> {
    let mut model = CinrModel::new(model_config.clone(), data.domain()?, data.n_slices(), train_config.seed)?;
    let report = train(&mut model, data, train_config, None)?;
    let volume = render_volume(&model, grid, DEFAULT_VOXEL_BUDGET)?;
    Ok(Reconstruction { model, report, volume })
}

/// Trains a noise head on `v0` (a render of `model`) and runs the refinement chain.
pub fn refine_with_model(
    model: &CinrModel,
    v0: &Volume,
    alpha0: f64,
    steps: usize,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<(Refinement, Vec<f64>)> {
    let schedule = make_schedule(alpha0, steps)?;
    let points: Vec<_> = (0..v0.len()).map(|i| v0.grid.voxel_center(i)).collect();
    let (_, z) = model.eval_features(&points, 16_384);
    let mut head = NoiseHead::<f32>::new(model.z_width(), seed)?;
    let trace = train_noise_head(&mut head, &z, v0, &schedule, noise, seed)?;
    let out = refine(&LearnedNoise { head: &head, z: &z }, v0, &schedule, seed)?;
    Ok((out, trace))
}
