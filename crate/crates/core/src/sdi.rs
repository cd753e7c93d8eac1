//! Scattered-data interpolation baseline: every observed pixel is splatted
//! onto the output grid with an isotropic Gaussian kernel and the weighted
//! intensities are normalized by the accumulated weight.

use crate::acquisition::Dataset;
use crate::error::{Error, Result};
use crate::volume::{Grid, Volume};

/// Kernel support in standard deviations.
const SUPPORT: f64 = 3.0;

/// Weight below which a voxel is treated as unobserved (set to zero).
const MIN_WEIGHT: f64 = 1e-6;

pub fn gaussian_splat(data: &Dataset, grid: &Grid, sigma: f64) -> Result<Volume> {
    grid.validate()?;
    if !(sigma > 0.0) {
        return Err(Error::InvalidParam(format!("kernel sigma must be positive, got {sigma}")));
    }
    let n = grid.len();
    let mut num = vec![0.0f64; n];
    let mut den = vec![0.0f64; n];
    let d = grid.dims;
    let reach: Vec<f64> = (0..3).map(|a| SUPPORT * sigma / grid.spacing[a]).collect();
    let inv = 1.0 / (2.0 * sigma * sigma);
    for p in &data.pixels {
        let y = data.world_position(p);
        let c = grid.continuous_index(y);
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut empty = false;
        for a in 0..3 {
            let l = (c[a] - reach[a]).ceil().max(0.0);
            let h = (c[a] + reach[a]).floor().min(d[a] as f64 - 1.0);
            if l > h {
                empty = true;
                break;
            }
            lo[a] = l as usize;
            hi[a] = h as usize;
        }
        if empty {
            continue;
        }
        let v = p.intensity as f64;
        for k in lo[2]..=hi[2] {
            for j in lo[1]..=hi[1] {
                for i in lo[0]..=hi[0] {
                    let idx = grid.index(i, j, k);
                    let x = grid.voxel_center(idx);
                    let r2: f64 = (0..3).map(|a| (x[a] - y[a]).powi(2)).sum();
                    let w = (-r2 * inv).exp();
                    num[idx] += w * v;
                    den[idx] += w;
                }
            }
        }
    }
    let out = num
        .iter()
        .zip(&den)
        .map(|(&a, &w)| if w > MIN_WEIGHT { (a / w) as f32 } else { 0.0 })
        .collect();
    Volume::from_data(*grid, out)
}
