//! Synthetic phantoms and corrupted stacks with known poses.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{add, check_sample_count, draw_offset, psf_covariance, sub, PsfSpec, Quat, RigidTransform, Vec3};
use crate::rng::{domain, stream};
use crate::volume::{Grid, Orientation, Stack, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    pub center: Vec3,
    pub semi_axes: Vec3,
    /// Rotation vector in degrees.
    #[serde(default)]
    pub rotation: Vec3,
    pub intensity: f64,
}

impl Ellipsoid {
    pub fn contains(&self, p: Vec3) -> bool {
        let q = Quat::from_rotvec(self.rotation.map(f64::to_radians)).conj();
        let l = q.rotate(sub(p, self.center));
        (0..3).map(|a| (l[a] / self.semi_axes[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// Ellipsoids painted in order; later entries win where they overlap.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub ellipsoids: Vec<Ellipsoid>,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.ellipsoids.iter().enumerate() {
            if !e.semi_axes.iter().all(|&s| s > 0.0) {
                return Err(Error::InvalidParam(format!("ellipsoid {i}: semi-axes must be positive")));
            }
            if !(0.0..=1.0).contains(&e.intensity) {
                return Err(Error::InvalidParam(format!(
                    "ellipsoid {i}: intensity {} outside [0, 1]",
                    e.intensity
                )));
            }
            if !e.center.iter().chain(&e.rotation).all(|v| v.is_finite()) {
                return Err(Error::InvalidParam(format!("ellipsoid {i}: non-finite geometry")));
            }
        }
        Ok(())
    }

    /// Brain-like arrangement fitting a 76.8 mm field of view.
    pub fn brain() -> Self {
        let e = |c: Vec3, s: Vec3, r: Vec3, i: f64| Ellipsoid {
            center: c,
            semi_axes: s,
            rotation: r,
            intensity: i,
        };
        PhantomSpec {
            ellipsoids: vec![
                e([0.0, 0.0, 0.0], [28.0, 34.0, 27.0], [0.0; 3], 0.35),
                e([0.0, 0.5, 0.5], [25.0, 31.0, 24.0], [0.0; 3], 0.7),
                e([0.0, 2.0, 3.0], [18.0, 23.0, 16.0], [0.0; 3], 0.55),
                e([-5.5, 3.0, 5.0], [3.0, 11.0, 5.0], [0.0, 0.0, 10.0], 0.15),
                e([5.5, 3.0, 5.0], [3.0, 11.0, 5.0], [0.0, 0.0, -10.0], 0.15),
                e([-10.0, -3.0, -3.0], [5.0, 6.5, 5.0], [0.0, 15.0, 0.0], 0.85),
                e([10.0, -3.0, -3.0], [5.0, 6.5, 5.0], [0.0, -15.0, 0.0], 0.85),
                e([0.0, -23.0, -15.0], [14.0, 8.0, 7.0], [-20.0, 0.0, 0.0], 0.8),
                e([0.0, -11.0, -18.0], [4.5, 5.0, 8.0], [0.0; 3], 0.6),
                e([12.0, 15.0, 10.0], [3.0, 3.0, 3.0], [0.0; 3], 1.0),
            ],
        }
    }
}

/// Rasterizes the phantom on a grid centred at the origin.
pub fn make_phantom(spec: &PhantomSpec, dims: [usize; 3], spacing: f64) -> Result<Volume> {
    spec.validate()?;
    let grid = Grid::centered(dims, [spacing; 3], [0.0; 3])?;
    let data = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let p = grid.voxel_center(i);
            spec.ellipsoids
                .iter()
                .rev()
                .find(|e| e.contains(p))
                .map_or(0.0, |e| e.intensity as f32)
        })
        .collect();
    Volume::from_data(grid, data)
}

/// Rate-bounded random rigid motion between consecutive slices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSpec {
    /// mm/s
    pub translation_rate: f64,
    /// degree/s
    pub rotation_rate: f64,
    /// Seconds between slice acquisitions.
    pub interval: f64,
    pub seed: u64,
}

impl MotionSpec {
    pub fn none() -> Self {
        MotionSpec {
            translation_rate: 0.0,
            rotation_rate: 0.0,
            interval: 1.0,
            seed: 0,
        }
    }

    pub fn mild(seed: u64) -> Self {
        MotionSpec {
            translation_rate: 2.0,
            rotation_rate: 5.0,
            interval: 1.0,
            seed,
        }
    }

    pub fn severe(seed: u64) -> Self {
        MotionSpec {
            translation_rate: 21.4,
            rotation_rate: 59.7,
            interval: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.translation_rate >= 0.0 && self.rotation_rate >= 0.0 && self.interval >= 0.0) {
            return Err(Error::InvalidParam("motion rates and interval must be >= 0".into()));
        }
        Ok(())
    }

    /// Subject motion at each of `n` slices: a random walk with uniformly
    /// distributed step lengths up to rate × interval.
    pub fn trajectory(&self, stream_key: u64, n: usize) -> Vec<RigidTransform> {
        let mut rng = stream(self.seed, &[domain::MOTION, stream_key]);
        let mut cur = RigidTransform::IDENTITY;
        let mut out = Vec::with_capacity(n);
        for s in 0..n {
            if s > 0 {
                let dt = random_direction(&mut rng);
                let dr = random_direction(&mut rng);
                let lt = rng.random::<f64>() * self.translation_rate * self.interval;
                let lr = (rng.random::<f64>() * self.rotation_rate * self.interval).to_radians();
                let step = RigidTransform::from_rotvec(dr.map(|v| v * lr), dt.map(|v| v * lt));
                cur = step.compose(&cur);
            }
            out.push(cur);
        }
        out
    }
}

fn random_direction<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v: Vec3 = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = crate::geometry::norm(v);
        if n > 1e-12 {
            return v.map(|x| x / n);
        }
    }
}

/// Number of quadratic-polynomial terms in a bias field.
pub const BIAS_TERMS: usize = 9;

/// `log b(y) = Σ c_j P_j(y / half_extent)` over centred terms of degree 1 and 2
/// (`x, y, z, x²−1/3, y²−1/3, z²−1/3, xy, xz, yz`), so the field averages to
/// zero in log space over the cube.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasField {
    pub coeffs: [f64; BIAS_TERMS],
    pub half_extent: f64,
}

impl BiasField {
    pub fn flat(half_extent: f64) -> Self {
        BiasField {
            coeffs: [0.0; BIAS_TERMS],
            half_extent,
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, scale: f64, half_extent: f64) -> Self {
        let mut coeffs = [0.0; BIAS_TERMS];
        for c in coeffs.iter_mut() {
            *c = scale * (2.0 * rng.random::<f64>() - 1.0);
        }
        BiasField { coeffs, half_extent }
    }

    pub fn log_value(&self, p: Vec3) -> f64 {
        let [x, y, z] = p.map(|v| v / self.half_extent);
        let t = 1.0 / 3.0;
        let basis = [x, y, z, x * x - t, y * y - t, z * z - t, x * y, x * z, y * z];
        basis.iter().zip(&self.coeffs).map(|(b, c)| b * c).sum()
    }

    pub fn value(&self, p: Vec3) -> f64 {
        self.log_value(p).exp()
    }
}

/// Bias, noise and scale corruption of simulated slices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    /// Half-width of the uniform distribution of bias coefficients.
    pub bias_scale: f64,
    /// Additive Gaussian noise standard deviation.
    pub noise_sigma: f64,
    /// Standard deviation of per-slice log scale (centred per stack).
    pub scale_jitter: f64,
    /// Constant factor on top of the polynomial bias.
    #[serde(default = "one")]
    pub bias_gain: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec {
            bias_scale: 0.0,
            noise_sigma: 0.0,
            scale_jitter: 0.0,
            bias_gain: 1.0,
        }
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.bias_scale >= 0.0 && self.noise_sigma >= 0.0 && self.scale_jitter >= 0.0 && self.bias_gain > 0.0) {
            return Err(Error::InvalidParam("corruption parameters must be non-negative".into()));
        }
        Ok(())
    }
}

/// Acquisition geometry of one simulated stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackSpec {
    pub orientation: Orientation,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    #[serde(default)]
    pub gap: f64,
    /// `(nx, ny, slices)`; derived from the volume extent when absent.
    #[serde(default)]
    pub fov: Option<[usize; 3]>,
    /// PSF samples per simulated pixel.
    pub k_sim: usize,
    /// Replaces the acquisition PSF (degenerate-limit checks).
    #[serde(default)]
    pub psf: Option<PsfSpec>,
}

impl StackSpec {
    pub fn new(orientation: Orientation, r1: f64, r3: f64, k_sim: usize) -> Self {
        StackSpec {
            orientation,
            r1,
            r2: r1,
            r3,
            gap: 0.0,
            fov: None,
            k_sim,
            psf: None,
        }
    }
}

/// A simulated stack with its ground truth.
#[derive(Clone, Debug)]
pub struct SimulatedStack {
    pub stack: Stack,
    pub truth: Vec<RigidTransform>,
    pub bias: BiasField,
    pub scales: Vec<f64>,
}

fn extent_along(vol: &Volume, axis: Vec3, occupied: bool) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let g = &vol.grid;
    for (i, &v) in vol.data.iter().enumerate() {
        if occupied && v == 0.0 {
            continue;
        }
        let d = crate::geometry::dot(g.voxel_center(i), axis);
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if lo > hi {
        return 0.0;
    }
    let half = 0.5 * (0..3).map(|a| (axis[a] * g.spacing[a]).abs()).sum::<f64>();
    2.0 * lo.abs().max(hi.abs()) + 2.0 * half
}

/// Simulates one stack of `vol` with slices centred on the world origin.
///
/// `key` separates the random streams of stacks simulated with the same seed.
pub fn simulate_stack(
    vol: &Volume,
    spec: &StackSpec,
    motion: &MotionSpec,
    corr: &CorruptionSpec,
    name: &str,
    key: u64,
    seed: u64,
) -> Result<SimulatedStack> {
    check_sample_count(spec.k_sim)?;
    motion.validate()?;
    corr.validate()?;
    let psf = match spec.psf {
        Some(p) => p,
        None => psf_covariance(spec.r1, spec.r2, spec.r3)?,
    };
    let frame = spec.orientation.frame();
    let axes = [
        frame.apply_vector([1.0, 0.0, 0.0]),
        frame.apply_vector([0.0, 1.0, 0.0]),
        frame.apply_vector([0.0, 0.0, 1.0]),
    ];
    let pitch = [spec.r1, spec.r2, spec.r3 + spec.gap];
    let fov = match spec.fov {
        Some(f) => {
            for a in 0..3 {
                let need = extent_along(vol, axes[a], true);
                let have = f[a] as f64 * pitch[a];
                if f[a] == 0 || have + 1e-9 < need {
                    return Err(Error::InvalidParam(format!(
                        "stack {name}: field of view {have:.1} mm along axis {a} does not cover the {need:.1} mm object"
                    )));
                }
            }
            f
        }
        None => {
            let mut f = [0; 3];
            for a in 0..3 {
                f[a] = ((extent_along(vol, axes[a], false) / pitch[a]) - 1e-9).ceil().max(1.0) as usize;
            }
            f
        }
    };
    let [nx, ny, ns] = fov;
    let (lo, hi) = vol.grid.bounds();
    let half_extent = (0..3).map(|a| (hi[a] - lo[a]) * 0.5).fold(0.0, f64::max);
    let bias = if corr.bias_scale > 0.0 {
        BiasField::random(&mut stream(seed, &[domain::BIAS, key]), corr.bias_scale, half_extent)
    } else {
        BiasField::flat(half_extent)
    };
    let mut scales: Vec<f64> = {
        let mut rng = stream(seed, &[domain::SCALE, key]);
        (0..ns)
            .map(|_| corr.scale_jitter * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let mean = scales.iter().sum::<f64>() / ns as f64;
    scales.iter_mut().for_each(|s| *s = (*s - mean).exp());
    let moves = motion.trajectory(key, ns);
    let mut stack = Stack {
        name: name.to_string(),
        nx,
        ny,
        r1: spec.r1,
        r2: spec.r2,
        r3: spec.r3,
        gap: spec.gap,
        transforms: Vec::with_capacity(ns),
        data: Vec::new(),
        mask: Vec::new(),
        scales: Some(scales.clone()),
    };
    let center = [0.0; 3];
    for s in 0..ns {
        let nominal = Stack::nominal_transform(spec.orientation, center, stack.slice_offset(s));
        stack.transforms.push(moves[s].compose(&nominal));
    }
    let per = nx * ny;
    let slices: Vec<(Vec<f32>, Vec<bool>)> = (0..ns)
        .into_par_iter()
        .map(|s| {
            let t = stack.transforms[s];
            let mut prng = stream(seed, &[domain::SIM_PSF, key, s as u64]);
            let mut nrng = stream(seed, &[domain::NOISE, key, s as u64]);
            let mut data = Vec::with_capacity(per);
            let mut mask = Vec::with_capacity(per);
            for b in 0..ny {
                for a in 0..nx {
                    let p = stack.pixel_position(a, b);
                    let mut acc = 0.0;
                    for _ in 0..spec.k_sim {
                        let u = draw_offset(&mut prng, &psf);
                        acc += vol.sample(t.apply(add(p, u)));
                    }
                    let y = t.apply(p);
                    let clean = scales[s] * corr.bias_gain * bias.value(y) * acc / spec.k_sim as f64;
                    let noise = if corr.noise_sigma > 0.0 {
                        corr.noise_sigma * nrng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    };
                    data.push((clean + noise) as f32);
                    mask.push((0..3).all(|a| y[a] >= lo[a] && y[a] <= hi[a]));
                }
            }
            (data, mask)
        })
        .collect();
    for (d, m) in slices {
        stack.data.extend(d);
        stack.mask.extend(m);
    }
    stack.validate()?;
    Ok(SimulatedStack {
        truth: stack.transforms.clone(),
        stack,
        bias,
        scales,
    })
}

/// Independent Gaussian pose perturbations: translation in mm per axis,
/// rotation vector in degrees per axis, applied about each slice centre.
pub fn perturb_transforms(
    truth: &[RigidTransform],
    translation_sigma: f64,
    rotation_sigma_deg: f64,
    seed: u64,
) -> Result<Vec<RigidTransform>> {
    if !(translation_sigma >= 0.0 && rotation_sigma_deg >= 0.0) {
        return Err(Error::InvalidParam("perturbation sigmas must be >= 0".into()));
    }
    let mut rng = stream(seed, &[domain::PERTURB]);
    Ok(truth
        .iter()
        .map(|t| {
            let mut d = [0.0; 3];
            let mut w = [0.0; 3];
            for a in 0..3 {
                w[a] = rotation_sigma_deg.to_radians() * rng.sample::<f64, _>(StandardNormal);
            }
            for a in 0..3 {
                d[a] = translation_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            if translation_sigma == 0.0 && rotation_sigma_deg == 0.0 {
                return *t;
            }
            let r = RigidTransform::from_rotvec(w, [0.0; 3]);
            let c = t.translation;
            let delta = RigidTransform::new(r.rotation, sub(add(c, d), r.apply(c)));
            delta.compose(t)
        })
        .collect())
}

/// The standard synthetic benchmark configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub phantom: PhantomSpec,
    pub dims: usize,
    pub spacing: f64,
    pub stacks: usize,
    pub r1: f64,
    pub r3: f64,
    pub k_sim: usize,
    pub motion: MotionSpec,
    pub corruption: CorruptionSpec,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            phantom: PhantomSpec::brain(),
            dims: 96,
            spacing: 0.8,
            stacks: 3,
            r1: 0.8,
            r3: 2.4,
            k_sim: 128,
            motion: MotionSpec::mild(0),
            corruption: CorruptionSpec {
                bias_scale: 0.3,
                noise_sigma: 0.02,
                scale_jitter: 0.05,
                bias_gain: 1.0,
            },
            seed: 0,
        }
    }
}

/// Phantom plus simulated stacks.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub phantom: Volume,
    pub stacks: Vec<SimulatedStack>,
}

impl Simulation {
    pub fn stacks(&self) -> Vec<Stack> {
        self.stacks.iter().map(|s| s.stack.clone()).collect()
    }
}

/// Simulates `spec.stacks` stacks cycling through axial, coronal and sagittal.
pub fn simulate(spec: &BenchmarkSpec) -> Result<Simulation> {
    let orientations: Vec<_> = (0..spec.stacks).map(Orientation::nth).collect();
    simulate_oriented(spec, &orientations)
}

/// Like [`simulate`] with explicit stack planes; `spec.stacks` is ignored.
pub fn simulate_oriented(spec: &BenchmarkSpec, orientations: &[Orientation]) -> Result<Simulation> {
    if orientations.is_empty() {
        return Err(Error::InvalidParam("at least one stack is required".into()));
    }
    let phantom = make_phantom(&spec.phantom, [spec.dims; 3], spec.spacing)?;
    let motion = MotionSpec {
        seed: spec.motion.seed ^ spec.seed,
        ..spec.motion
    };
    let stacks = orientations
        .iter()
        .enumerate()
        .map(|(i, &o)| {
            let ss = StackSpec::new(o, spec.r1, spec.r3, spec.k_sim);
            simulate_stack(&phantom, &ss, &motion, &spec.corruption, &format!("stack{i}"), i as u64, spec.seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Simulation { phantom, stacks })
}
