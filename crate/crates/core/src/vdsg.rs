//! Diffusion-style refinement of a rendered volume.
//!
//! A linear schedule `α_i = 1 - α0·i` with `γ_i = Π α_j` noises the render
//! `v0` to `v_t`; a noise head predicts `ε` and the chain is walked back to
//! an estimate `v̂0`. The refined output is `V + v̂0`, optionally mapped back
//! onto the intensity range of `V`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cinr::Mlp;
use crate::error::{Error, Result};
use crate::numgrad::{adam_step, AdamHyper, Mat, NodeId, ParamStore, Real, Tape};
use crate::rng::{domain, stream};
use crate::volume::Volume;

/// Hidden width of the noise head.
pub const HEAD_HIDDEN: usize = 64;
/// Width of the sinusoidal `γ` embedding.
pub const GAMMA_EMBED: usize = 8;

/// `α_i` and `γ_i` for `i = 1..=t` (stored zero-based).
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub alpha0: f64,
    pub alphas: Vec<f64>,
    pub gammas: Vec<f64>,
}

pub fn make_schedule(alpha0: f64, t: usize) -> Result<DiffusionSchedule> {
    if t == 0 {
        return Err(Error::InvalidParam("diffusion needs at least one step".into()));
    }
    if !(alpha0 > 0.0 && alpha0 * (t as f64) < 1.0) {
        return Err(Error::InvalidParam(format!(
            "alpha0 = {alpha0} with t = {t} needs 0 < alpha0 < 1/t"
        )));
    }
    let alphas: Vec<f64> = (1..=t).map(|i| 1.0 - alpha0 * i as f64).collect();
    let gammas = alphas
        .iter()
        .scan(1.0, |g, &a| {
            *g *= a;
            Some(*g)
        })
        .collect();
    Ok(DiffusionSchedule { alpha0, alphas, gammas })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    fn check(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.steps() {
            return Err(Error::OutOfRange {
                what: "diffusion step",
                index: i,
                len: self.steps() + 1,
            });
        }
        Ok(())
    }

    pub fn alpha(&self, i: usize) -> Result<f64> {
        self.check(i)?;
        Ok(self.alphas[i - 1])
    }

    pub fn gamma(&self, i: usize) -> Result<f64> {
        self.check(i)?;
        Ok(self.gammas[i - 1])
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what} has {got} entries, expected {want}")));
    }
    Ok(())
}

/// `v_i = √γ_i v0 + √(1-γ_i) ε` with `ε` from the stream `(seed, DIFFUSE, i)`.
/// Returns `v_i` and the noise used.
pub fn forward_diffuse(v0: &Volume, schedule: &DiffusionSchedule, i: usize, seed: u64) -> Result<(Volume, Vec<f32>)> {
    let g = schedule.gamma(i)?;
    let mut rng = stream(seed, &[domain::DIFFUSE, i as u64]);
    let eps: Vec<f32> = (0..v0.len())
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    let (a, b) = (g.sqrt(), (1.0 - g).sqrt());
    let data = v0
        .data
        .iter()
        .zip(&eps)
        .map(|(&v, &e)| (a * v as f64 + b * e as f64) as f32)
        .collect();
    Ok((Volume::from_data(v0.grid, data)?, eps))
}

/// One reverse step `v_i -> v_{i-1}` given predicted noise.
pub fn reverse_step(vi: &Volume, i: usize, schedule: &DiffusionSchedule, eps_hat: &[f32]) -> Result<Volume> {
    check_len("noise estimate", eps_hat.len(), vi.len())?;
    let (a, g) = (schedule.alpha(i)?, schedule.gamma(i)?);
    let c = (1.0 - a) / (1.0 - g).sqrt();
    let inv = 1.0 / a.sqrt();
    let data = vi
        .data
        .iter()
        .zip(eps_hat)
        .map(|(&v, &e)| (inv * (v as f64 - c * e as f64)) as f32)
        .collect();
    Volume::from_data(vi.grid, data)
}

/// Direct estimate `v̂0 = (v_i - √(1-γ_i) ε̂) / √γ_i`.
pub fn estimate_v0(vi: &Volume, i: usize, schedule: &DiffusionSchedule, eps_hat: &[f32]) -> Result<Volume> {
    check_len("noise estimate", eps_hat.len(), vi.len())?;
    let g = schedule.gamma(i)?;
    let (b, inv) = ((1.0 - g).sqrt(), 1.0 / g.sqrt());
    let data = vi
        .data
        .iter()
        .zip(eps_hat)
        .map(|(&v, &e)| (inv * (v as f64 - b * e as f64)) as f32)
        .collect();
    Volume::from_data(vi.grid, data)
}

/// Predicts the noise in `v_i` given the clean render `v0` and `γ_i`.
pub trait NoisePredictor {
    fn predict(&self, v0: &Volume, vi: &Volume, gamma: f64) -> Result<Vec<f32>>;
}

/// The noise implied exactly by `v0` and `v_i`; with it the chain returns `v0`.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleNoise;

impl NoisePredictor for OracleNoise {
    fn predict(&self, v0: &Volume, vi: &Volume, gamma: f64) -> Result<Vec<f32>> {
        check_len("v_i", vi.len(), v0.len())?;
        let (a, inv) = (gamma.sqrt(), 1.0 / (1.0 - gamma).sqrt());
        Ok(vi
            .data
            .iter()
            .zip(&v0.data)
            .map(|(&x, &c)| (inv * (x as f64 - a * c as f64)) as f32)
            .collect())
    }
}

/// Sinusoids of `-ln(1-γ)` at four octaves.
pub fn gamma_embedding(gamma: f64) -> [f64; GAMMA_EMBED] {
    let u = -(1.0 - gamma).max(1e-12).ln();
    let mut out = [0.0; GAMMA_EMBED];
    for k in 0..GAMMA_EMBED / 2 {
        let f = 0.25 * (1 << k) as f64;
        out[2 * k] = (u * f).sin();
        out[2 * k + 1] = (u * f).cos();
    }
    out
}

/// Small perceptron predicting `ε` from `[Z(y), v_i(y), v0(y), emb(γ)]`.
///
/// The two intensities enter as `v_i/√(1-γ)` and `√γ·v0/√(1-γ)`, which keeps
/// the target a unit-scale function of the inputs at every step.
#[derive(Clone, Debug)]
pub struct NoiseHead<T: Real = f32> {
    pub store: ParamStore<T>,
    pub mlp: Mlp,
    pub z_width: usize,
}

impl<T: Real> NoiseHead<T> {
    pub fn new(z_width: usize, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, &[domain::INIT, 1]);
        let mut store = ParamStore::new();
        let inputs = z_width + 2 + GAMMA_EMBED;
        let mlp = Mlp::register(&mut store, "noise_head", (inputs, HEAD_HIDDEN, 1), 1.0, &mut rng)?;
        Ok(NoiseHead { store, mlp, z_width })
    }

    pub fn input_width(&self) -> usize {
        self.z_width + 2 + GAMMA_EMBED
    }

    /// Appends one input row.
    pub fn push_row(&self, out: &mut Vec<T>, z: &[f32], vi: f64, v0: f64, gamma: f64) {
        let s = 1.0 / (1.0 - gamma).sqrt();
        out.extend(z.iter().map(|&x| T::of(x as f64)));
        out.push(T::of(vi * s));
        out.push(T::of(gamma.sqrt() * v0 * s));
        out.extend(gamma_embedding(gamma).iter().map(|&e| T::of(e)));
    }

    pub fn forward(&self, tape: &mut Tape<'_, T>, x: NodeId) -> NodeId {
        self.mlp.forward(tape, x)
    }

    /// Mean squared error of the prediction against `target`.
    pub fn loss_node(&self, tape: &mut Tape<'_, T>, x: NodeId, target: &[T]) -> Result<NodeId> {
        let rows = tape.value(x).rows;
        check_len("target", target.len(), rows)?;
        let pred = self.forward(tape, x);
        let t = tape.constant(Mat::column(target.to_vec()));
        let d = tape.sub(pred, t);
        let d2 = tape.square(d);
        Ok(tape.mean(d2))
    }

    pub fn predict_rows(&self, x: Mat<T>) -> Vec<T> {
        let mut tape = Tape::new(&self.store);
        let xn = tape.constant(x);
        let out = self.forward(&mut tape, xn);
        tape.value(out).data.clone()
    }
}

/// Noise-head optimisation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub iterations: usize,
    /// Voxels per batch.
    pub batch: usize,
    pub lr: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            iterations: 1000,
            batch: 4096,
            lr: 1e-3,
        }
    }
}

/// Trains the head on random voxels at random steps; returns the loss trace.
///
/// `z` holds `Z(y)` for every voxel of `v0`, row-major in voxel order.
pub fn train_noise_head<T: Real>(
    head: &mut NoiseHead<T>,
    z: &Mat<f32>,
    v0: &Volume,
    schedule: &DiffusionSchedule,
    config: &NoiseConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    check_len("feature rows", z.rows, v0.len())?;
    check_len("feature width", z.cols, head.z_width)?;
    if config.batch == 0 || v0.is_empty() {
        return Err(Error::Empty("noise head needs voxels and a positive batch".into()));
    }
    let hyper = AdamHyper::with_lr(config.lr);
    let width = head.input_width();
    let mut trace = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let mut rng = stream(seed, &[domain::HEAD_BATCH, it as u64]);
        let mut x = Vec::with_capacity(config.batch * width);
        let mut target = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            let idx = rng.random_range(0..v0.len());
            let g = schedule.gammas[rng.random_range(0..schedule.steps())];
            let e: f64 = rng.sample(StandardNormal);
            let c = v0.data[idx] as f64;
            let vi = g.sqrt() * c + (1.0 - g).sqrt() * e;
            head.push_row(&mut x, z.row(idx), vi, c, g);
            target.push(T::of(e));
        }
        let mut tape = Tape::new(&head.store);
        let xn = tape.constant(Mat::from_vec(config.batch, width, x));
        let loss = head.loss_node(&mut tape, xn, &target)?;
        let value = tape.value(loss).item().f64();
        let grads = tape.backward(loss)?;
        if !value.is_finite() || !grads.params.all_finite() {
            return Err(Error::Diverged {
                iteration: it,
                reason: format!("noise head loss {value}"),
            });
        }
        adam_step(&mut head.store, &grads.params, &hyper)?;
        trace.push(value);
    }
    Ok(trace)
}

/// A trained head together with the per-voxel features it reads.
pub struct LearnedNoise<'a, T: Real = f32> {
    pub head: &'a NoiseHead<T>,
    pub z: &'a Mat<f32>,
}

const PREDICT_CHUNK: usize = 8192;

impl<T: Real> NoisePredictor for LearnedNoise<'_, T> {
    fn predict(&self, v0: &Volume, vi: &Volume, gamma: f64) -> Result<Vec<f32>> {
        check_len("v_i", vi.len(), v0.len())?;
        check_len("feature rows", self.z.rows, v0.len())?;
        let width = self.head.input_width();
        let parts: Vec<Vec<f32>> = (0..v0.len())
            .collect::<Vec<_>>()
            .par_chunks(PREDICT_CHUNK)
            .map(|idx| {
                let mut x = Vec::with_capacity(idx.len() * width);
                for &i in idx {
                    self.head
                        .push_row(&mut x, self.z.row(i), vi.data[i] as f64, v0.data[i] as f64, gamma);
                }
                self.head
                    .predict_rows(Mat::from_vec(idx.len(), width, x))
                    .into_iter()
                    .map(|v| v.f64() as f32)
                    .collect()
            })
            .collect();
        Ok(parts.concat())
    }
}

/// Outputs of a refinement pass.
#[derive(Clone, Debug)]
pub struct Refinement {
    pub v0_hat: Volume,
    /// `V + v̂0`.
    pub combined: Volume,
    /// `combined` mapped affinely onto `[min V, max V]`.
    pub rescaled: Volume,
}

/// Diffuses `v0` to step `t`, walks back with `predictor` and combines.
pub fn refine(
    predictor: &dyn NoisePredictor,
    v0: &Volume,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<Refinement> {
    let t = schedule.steps();
    let (mut v, _) = forward_diffuse(v0, schedule, t, seed)?;
    for i in (2..=t).rev() {
        let eps = predictor.predict(v0, &v, schedule.gammas[i - 1])?;
        v = reverse_step(&v, i, schedule, &eps)?;
    }
    let eps = predictor.predict(v0, &v, schedule.gammas[0])?;
    let v0_hat = estimate_v0(&v, 1, schedule, &eps)?;
    if v0_hat.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Diverged {
            iteration: 0,
            reason: "refined volume is non-finite".into(),
        });
    }
    let combined = Volume::from_data(
        v0.grid,
        v0.data.iter().zip(&v0_hat.data).map(|(a, b)| a + b).collect(),
    )?;
    let rescaled = rescale_to(&combined, v0.min_max())?;
    Ok(Refinement {
        v0_hat,
        combined,
        rescaled,
    })
}

/// Affine map of `v` onto `[lo, hi]`; a constant volume maps to `lo`.
pub fn rescale_to(v: &Volume, (lo, hi): (f32, f32)) -> Result<Volume> {
    let (a, b) = v.min_max();
    let span = (b - a) as f64;
    let data = v
        .data
        .iter()
        .map(|&x| {
            if span > 0.0 {
                (lo as f64 + (x - a) as f64 / span * (hi - lo) as f64) as f32
            } else {
                lo
            }
        })
        .collect();
    Volume::from_data(v.grid, data)
}
