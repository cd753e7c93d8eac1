//! Slice acquisition model: Monte-Carlo pixel mean and variance through the
//! Gaussian PSF, batch sampling, and volume rendering.
//!
//! With `u_k ~ N(0, Σ)` and `y_k = T_i(p + u_k)`:
//!
//! ```text
//! Ī  = C_i · mean_k B_i(y_k) V(y_k)
//! σ² = C_i² · mean_k g(u_k; Σ) B_i(y_k)² σ_i²(y_k)
//! ```

use rand::Rng;
use rayon::prelude::*;

use crate::cinr::CinrModel;
use crate::encoding::DomainMap;
use crate::error::{Error, Result};
use crate::geometry::{add, check_sample_count, draw_offset, gaussian_weight, psf_covariance, PsfSpec, RigidTransform, Vec3};
use crate::numgrad::{Mat, NodeId, Real, Tape};
use crate::rng::{domain, stream};
use crate::volume::{Grid, Stack, Volume};

/// Redraws allowed for a PSF sample that leaves the field domain.
pub const MAX_REDRAWS: usize = 8;

/// Default cap on rendered voxels.
pub const DEFAULT_VOXEL_BUDGET: usize = 1 << 27;

/// One observed, masked-in pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelRef {
    pub stack: u32,
    /// Global slice index across all stacks.
    pub slice: u32,
    /// Pixel index within its slice (x fastest).
    pub pixel: u32,
    /// Slice-frame position (mm).
    pub position: Vec3,
    pub intensity: f32,
}

impl PixelRef {
    /// Stable key for RNG streams.
    pub fn key(&self) -> u64 {
        ((self.slice as u64) << 32) | self.pixel as u64
    }
}

/// Stacks flattened into a pixel list with global slice numbering.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub stacks: Vec<Stack>,
    pub pixels: Vec<PixelRef>,
    /// Pose of every global slice.
    pub transforms: Vec<RigidTransform>,
    pub slice_stack: Vec<usize>,
    pub psf: Vec<PsfSpec>,
}

impl Dataset {
    pub fn new(stacks: Vec<Stack>) -> Result<Self> {
        if stacks.is_empty() {
            return Err(Error::Empty("no stacks".into()));
        }
        let mut pixels = Vec::new();
        let mut transforms = Vec::new();
        let mut slice_stack = Vec::new();
        let mut psf = Vec::new();
        for (si, st) in stacks.iter().enumerate() {
            st.validate()?;
            psf.push(psf_covariance(st.r1, st.r2, st.r3)?);
            let per = st.pixels_per_slice();
            for s in 0..st.n_slices() {
                let g = transforms.len() as u32;
                for b in 0..st.ny {
                    for a in 0..st.nx {
                        let local = a + st.nx * b;
                        let idx = s * per + local;
                        if st.mask[idx] {
                            pixels.push(PixelRef {
                                stack: si as u32,
                                slice: g,
                                pixel: local as u32,
                                position: st.pixel_position(a, b),
                                intensity: st.data[idx],
                            });
                        }
                    }
                }
                transforms.push(st.transforms[s]);
                slice_stack.push(si);
            }
        }
        if pixels.is_empty() {
            return Err(Error::Empty("every pixel is masked out".into()));
        }
        Ok(Dataset {
            stacks,
            pixels,
            transforms,
            slice_stack,
            psf,
        })
    }

    pub fn n_slices(&self) -> usize {
        self.transforms.len()
    }

    pub fn world_position(&self, p: &PixelRef) -> Vec3 {
        self.transforms[p.slice as usize].apply(p.position)
    }

    /// Unit-cube map bounding every masked pixel centre.
    pub fn domain(&self) -> Result<DomainMap> {
        DomainMap::from_points(self.pixels.iter().map(|p| self.world_position(p)))
    }

    /// Copies the current poses back into the stacks.
    pub fn sync_stacks(&mut self) {
        let mut g = 0;
        for st in &mut self.stacks {
            for t in st.transforms.iter_mut() {
                *t = self.transforms[g];
                g += 1;
            }
        }
    }

    /// First global slice index of each stack.
    pub fn stack_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.stacks.len());
        let mut g = 0;
        for st in &self.stacks {
            out.push(g);
            g += st.n_slices();
        }
        out
    }
}

/// `batch` distinct pixels drawn uniformly, in draw order.
pub fn sample_batch<R: Rng + ?Sized>(data: &Dataset, batch: usize, rng: &mut R) -> Result<Vec<PixelRef>> {
    let n = data.pixels.len();
    if n == 0 {
        return Err(Error::Empty("no masked-in pixels".into()));
    }
    if batch == 0 || batch > n {
        return Err(Error::InvalidParam(format!(
            "batch size {batch} must be in 1..={n} (masked-in pixel count)"
        )));
    }
    Ok(rand::seq::index::sample(rng, n, batch)
        .into_iter()
        .map(|i| data.pixels[i])
        .collect())
}

/// PSF samples for a batch: `K` rows per pixel, pixel-major.
#[derive(Clone, Debug, Default)]
pub struct SampleSet {
    pub k: usize,
    pub world: Vec<Vec3>,
    pub offsets: Vec<Vec3>,
    /// `g(u_k; Σ)` per row.
    pub weights: Vec<f64>,
    /// Global slice index per row.
    pub slices: Vec<u32>,
    /// Global slice index per pixel.
    pub pixel_slices: Vec<u32>,
    /// Samples redrawn because they left the domain.
    pub redraws: usize,
    /// Samples still outside after all redraws (kept).
    pub kept_outside: usize,
}

impl SampleSet {
    pub fn pixels(&self) -> usize {
        self.pixel_slices.len()
    }

    pub fn rows(&self) -> usize {
        self.world.len()
    }
}

fn draw_pixel_samples<R: Rng>(
    rng: &mut R,
    p: &PixelRef,
    t: &RigidTransform,
    psf: &PsfSpec,
    domain: &DomainMap,
    k: usize,
) -> (Vec<(Vec3, Vec3)>, usize, usize) {
    let mut out = Vec::with_capacity(k);
    let (mut redraws, mut outside) = (0, 0);
    for _ in 0..k {
        let mut u = draw_offset(rng, psf);
        let mut y = t.apply(add(p.position, u));
        let mut tries = 0;
        while !domain.contains(y) && tries < MAX_REDRAWS {
            u = draw_offset(rng, psf);
            y = t.apply(add(p.position, u));
            tries += 1;
        }
        redraws += tries;
        if !domain.contains(y) {
            outside += 1;
        }
        out.push((y, u));
    }
    (out, redraws, outside)
}

/// Draws `K` PSF samples per pixel from streams keyed by
/// `(seed, iteration, slice, pixel)`.
pub fn draw_samples(
    data: &Dataset,
    domain: &DomainMap,
    pixels: &[PixelRef],
    k: usize,
    seed: u64,
    iteration: u64,
) -> Result<SampleSet> {
    check_sample_count(k)?;
    let per: Vec<_> = pixels
        .par_iter()
        .map(|p| {
            let mut rng = stream(seed, &[domain::PSF, iteration, p.key()]);
            let t = &data.transforms[p.slice as usize];
            let psf = &data.psf[p.stack as usize];
            draw_pixel_samples(&mut rng, p, t, psf, domain, k)
        })
        .collect();
    let mut set = SampleSet {
        k,
        ..Default::default()
    };
    set.world.reserve(pixels.len() * k);
    for (p, (samples, redraws, outside)) in pixels.iter().zip(per) {
        let psf = &data.psf[p.stack as usize];
        for (y, u) in samples {
            set.world.push(y);
            set.offsets.push(u);
            set.weights.push(gaussian_weight(u, psf));
            set.slices.push(p.slice);
        }
        set.pixel_slices.push(p.slice);
        set.redraws += redraws;
        set.kept_outside += outside;
    }
    Ok(set)
}

/// Tape nodes of a rendered batch.
#[derive(Clone, Copy, Debug)]
pub struct RenderNodes {
    /// B×1 pixel means.
    pub mean: NodeId,
    /// B×1 pixel variances.
    pub var: NodeId,
    /// BK×1 field intensities at the samples.
    pub v: NodeId,
    /// BK×1 log bias at the samples.
    pub log_b: NodeId,
}

/// Builds the pixel mean and variance from a node of normalized sample
/// coordinates (`rows × 3`, pixel-major with `K` rows per pixel).
pub fn render_nodes<T: Real>(
    model: &CinrModel,
    tape: &mut Tape<'_, T>,
    y: NodeId,
    samples: &SampleSet,
) -> Result<RenderNodes> {
    let k = samples.k;
    let f = model.field(tape, y);
    let log_b = model.log_bias_from_encoding(tape, f.enc, &samples.slices)?;
    let b = tape.exp(log_b);
    let bv = tape.mul(b, f.v);
    let mean_bv = tape.group_mean(bv, k);
    let s = model.log_scale_rows(tape, &samples.pixel_slices)?;
    let c = tape.exp(s);
    let mean = tape.mul(c, mean_bv);

    let sig2 = model.variance(tape, f.z, &samples.slices)?;
    let w = tape.constant(Mat::column(samples.weights.iter().map(|&g| T::of(g)).collect()));
    let b2 = tape.square(b);
    let t = tape.mul(b2, sig2);
    let t = tape.mul(w, t);
    let mean_t = tape.group_mean(t, k);
    let c2 = tape.square(c);
    let var = tape.mul(c2, mean_t);
    Ok(RenderNodes {
        mean,
        var,
        v: f.v,
        log_b,
    })
}

/// Normalizes sample points into a constant node; returns it and the clamp count.
pub fn sample_coords<T: Real>(model: &CinrModel, tape: &mut Tape<'_, T>, samples: &SampleSet) -> (NodeId, usize) {
    let (m, clamped) = model.normalize_points(&samples.world);
    (tape.constant(m.cast()), clamped)
}

/// A rendered pixel with its samples.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPixel {
    pub mean: f64,
    pub variance: f64,
    pub points: Vec<Vec3>,
    pub offsets: Vec<Vec3>,
    pub slice: u32,
}

/// Mean and variance of one pixel with samples drawn from `rng`.
pub fn render_pixel<R: Rng>(
    model: &CinrModel,
    pix: &PixelRef,
    transform: &RigidTransform,
    psf: &PsfSpec,
    k: usize,
    rng: &mut R,
) -> Result<RenderedPixel> {
    check_sample_count(k)?;
    let (samples, _, _) = draw_pixel_samples(rng, pix, transform, psf, &model.domain, k);
    let set = SampleSet {
        k,
        world: samples.iter().map(|s| s.0).collect(),
        offsets: samples.iter().map(|s| s.1).collect(),
        weights: samples.iter().map(|s| gaussian_weight(s.1, psf)).collect(),
        slices: vec![pix.slice; k],
        pixel_slices: vec![pix.slice],
        redraws: 0,
        kept_outside: 0,
    };
    let mut tape = Tape::new(&model.store);
    let (y, _) = sample_coords(model, &mut tape, &set);
    let r = render_nodes(model, &mut tape, y, &set)?;
    let mean = tape.value(r.mean).data[0] as f64;
    let variance = tape.value(r.var).data[0] as f64;
    if !mean.is_finite() || !variance.is_finite() {
        return Err(Error::NonFinite(format!(
            "pixel {} of slice {} rendered mean {mean}, variance {variance}",
            pix.pixel, pix.slice
        )));
    }
    Ok(RenderedPixel {
        mean,
        variance,
        points: set.world,
        offsets: set.offsets,
        slice: pix.slice,
    })
}

/// `V` at every voxel centre of `grid`: no PSF, bias or scale.
pub fn render_volume(model: &CinrModel, grid: &Grid, budget: usize) -> Result<Volume> {
    grid.validate()?;
    let n = grid.len();
    if n > budget {
        return Err(Error::VoxelBudget {
            requested: n,
            budget,
        });
    }
    const CHUNK: usize = 8192;
    let mut data = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK * 16) {
        let end = (start + CHUNK * 16).min(n);
        let pts: Vec<Vec3> = (start..end).map(|i| grid.voxel_center(i)).collect();
        let (v, _) = model.eval_intensity(&pts, CHUNK);
        data.extend(v);
    }
    Volume::from_data(*grid, data)
}

/// Render grid over the model's observed bounding box at isotropic `spacing`.
pub fn default_render_grid(model: &CinrModel, spacing: f64) -> Result<Grid> {
    Grid::covering(model.domain.bbox_min, model.domain.bbox_max, spacing)
}
