//! Per-subject optimization loop.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::acquisition::{draw_samples, render_nodes, sample_batch, sample_coords, Dataset, PixelRef, SampleSet};
use crate::cinr::CinrModel;
use crate::encoding::DomainMap;
use crate::error::{Error, Result};
use crate::geometry::{add, cross, sub, Quat, RigidTransform, Vec3};
use crate::losses::{bias_node, pair_inverse_distances, regularization_node, slice_node, total_node, LossWeights};
use crate::numgrad::{adam_step, AdamHyper, BackwardCtx, CustomOp, GroupGrads, GroupId, Mat, NodeId, ParamStore, Real, Tape};
use crate::rng::{domain, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub psf_samples: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub refine_transforms: bool,
    pub transform_lr: f64,
    /// Record a trace row every `log_stride` iterations.
    pub log_stride: usize,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            batch_size: 4096,
            psf_samples: 256,
            lr: 1e-3,
            weights: LossWeights::default(),
            seed: 0,
            refine_transforms: false,
            transform_lr: 1e-4,
            log_stride: 1,
            grad_clip: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_stride == 0 {
            return Err(Error::InvalidParam("batch size and log stride must be positive".into()));
        }
        if self.psf_samples < 2 || self.psf_samples % 2 != 0 {
            return Err(Error::InvalidParam(format!(
                "psf_samples must be even and >= 2, got {}",
                self.psf_samples
            )));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::InvalidParam("grad_clip must be positive".into()));
        }
        self.weights.validate()?;
        AdamHyper::with_lr(self.lr).validate()?;
        AdamHyper::with_lr(self.transform_lr).validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub slice: f64,
    pub reg: f64,
    pub bias: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    /// Seconds per 100 iterations, one entry per completed block.
    pub seconds_per_100: Vec<f64>,
    pub clamped_points: usize,
    pub psf_redraws: usize,
    pub psf_kept_outside: usize,
    pub skipped_pairs: usize,
    pub clipped_steps: usize,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = String::from("iteration,slice,reg,bias,total\n");
        for r in &self.trace {
            buf.push_str(&format!("{},{},{},{},{}\n", r.iteration, r.slice, r.reg, r.bias, r.total));
        }
        crate::volio::write_atomic(path, buf.as_bytes())
    }
}

/// Per-slice pose offsets `(ω, t)` applied as `y' = c + R(ω)(y − c) + t`,
/// with `c` the slice centre. Offsets are folded into the poses after every
/// step, so the backward rule is taken at `ω = 0`.
struct PoseOp {
    rows: Vec<(usize, Vec3, Vec3)>,
    side: f64,
    clamped: Vec<[bool; 3]>,
    n_slices: usize,
}

impl CustomOp<f32> for PoseOp {
    fn name(&self) -> &'static str {
        "pose_offset"
    }

    fn backward(&self, ctx: BackwardCtx<'_, f32>) -> Result<Vec<Option<Mat<f32>>>> {
        let mut g = vec![0.0f64; self.n_slices * 6];
        for (r, &(slice, y, c)) in self.rows.iter().enumerate() {
            let mut gw = [0.0; 3];
            for a in 0..3 {
                if !self.clamped[r][a] {
                    gw[a] = ctx.dout.at(r, a) as f64 / self.side;
                }
            }
            let dw = cross(sub(y, c), gw);
            for a in 0..3 {
                g[slice * 6 + a] += dw[a];
                g[slice * 6 + 3 + a] += gw[a];
            }
        }
        Ok(vec![Some(Mat::from_vec(self.n_slices, 6, g.into_iter().map(|v| v as f32).collect()))])
    }
}

fn pose_coords(
    tape: &mut Tape<'_, f32>,
    pose: &Mat<f32>,
    samples: &SampleSet,
    transforms: &[RigidTransform],
    domain: &DomainMap,
) -> (NodeId, usize, NodeId) {
    let var = tape.variable(pose.clone());
    let n = samples.rows();
    let mut data = Vec::with_capacity(n * 3);
    let mut rows = Vec::with_capacity(n);
    let mut clamped = Vec::with_capacity(n);
    let mut count = 0;
    for r in 0..n {
        let s = samples.slices[r] as usize;
        let y = samples.world[r];
        let c = transforms[s].translation;
        let p = pose.row(s);
        let w = [p[0] as f64, p[1] as f64, p[2] as f64];
        let t = [p[3] as f64, p[4] as f64, p[5] as f64];
        let moved = if w == [0.0; 3] && t == [0.0; 3] {
            y
        } else {
            let q = Quat::from_rotvec(w);
            let d = q.rotate(sub(y, c));
            [c[0] + d[0] + t[0], c[1] + d[1] + t[1], c[2] + d[2] + t[2]]
        };
        let raw = domain.normalize_raw(moved);
        let mut flags = [false; 3];
        for a in 0..3 {
            flags[a] = !(0.0..=1.0).contains(&raw[a]);
            data.push(raw[a].clamp(0.0, 1.0) as f32);
        }
        count += flags.iter().any(|&f| f) as usize;
        rows.push((s, y, c));
        clamped.push(flags);
    }
    let op = PoseOp {
        rows,
        side: domain.side,
        clamped,
        n_slices: transforms.len(),
    };
    let node = tape.custom(vec![var], Mat::from_vec(n, 3, data), Box::new(op), false);
    (node, count, var)
}

/// Outcome of one optimization step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub row: TraceRow,
    pub clamped: usize,
    pub redraws: usize,
    pub kept_outside: usize,
    pub skipped_pairs: usize,
    pub clipped: bool,
    /// Gradient w.r.t. the pose offsets when refinement is on.
    pub pose_grad: Option<Mat<f32>>,
}

/// Pixel batch and PSF samples for `iteration`.
pub fn draw_step(
    model: &CinrModel,
    data: &Dataset,
    config: &TrainConfig,
    iteration: usize,
) -> Result<(Vec<PixelRef>, SampleSet)> {
    let mut rng = stream(config.seed, &[domain::BATCH, iteration as u64]);
    let batch = sample_batch(data, config.batch_size, &mut rng)?;
    let samples = draw_samples(
        data,
        &model.domain,
        &batch,
        config.psf_samples,
        config.seed,
        iteration as u64,
    )?;
    Ok((batch, samples))
}

/// Loss terms of a rendered batch.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub slice: NodeId,
    pub reg: NodeId,
    pub bias: NodeId,
    pub total: NodeId,
    /// Regularizer pairs dropped for coincident points.
    pub skipped_pairs: usize,
}

/// Builds the three losses and their weighted sum from sample coordinates `y`.
pub fn loss_nodes<T: Real>(
    model: &CinrModel,
    tape: &mut Tape<'_, T>,
    y: NodeId,
    samples: &SampleSet,
    target: &[f32],
    weights: &LossWeights,
) -> Result<LossNodes> {
    let r = render_nodes(model, tape, y, samples)?;
    let slice = slice_node(tape, r.mean, r.var, target, weights.lambda)?;
    let (inv, skipped_pairs) = pair_inverse_distances(&samples.world, samples.k)?;
    let reg = regularization_node(tape, r.v, &inv, samples.k, weights.huber_delta);
    let bias = bias_node(tape, r.log_b);
    let total = total_node(tape, slice, reg, bias, weights)?;
    Ok(LossNodes {
        slice,
        reg,
        bias,
        total,
        skipped_pairs,
    })
}

/// Losses and gradients at `iteration` without updating anything.
pub fn evaluate_step(
    model: &CinrModel,
    data: &Dataset,
    config: &TrainConfig,
    iteration: usize,
    pose: Option<&Mat<f32>>,
) -> Result<(StepOutcome, GroupGrads<f32>)> {
    let (batch, samples) = draw_step(model, data, config, iteration)?;
    let mut tape = Tape::new(&model.store);
    let (y, clamped, pose_var) = match pose {
        Some(p) => {
            let (y, c, v) = pose_coords(&mut tape, p, &samples, &data.transforms, &model.domain);
            (y, c, Some(v))
        }
        None => {
            let (y, c) = sample_coords(model, &mut tape, &samples);
            (y, c, None)
        }
    };
    let target: Vec<f32> = batch.iter().map(|p| p.intensity).collect();
    let l = loss_nodes(model, &mut tape, y, &samples, &target, &config.weights).map_err(|e| match e {
        Error::Diverged { .. } => e,
        Error::NonFinite(m) => Error::Diverged { iteration, reason: m },
        other => other,
    })?;
    let row = TraceRow {
        iteration,
        slice: tape.value(l.slice).item() as f64,
        reg: tape.value(l.reg).item() as f64,
        bias: tape.value(l.bias).item() as f64,
        total: tape.value(l.total).item() as f64,
    };
    let grads = tape.backward(l.total)?;
    let pose_grad = pose_var.and_then(|id| grads.var(id).cloned());
    Ok((
        StepOutcome {
            row,
            clamped,
            redraws: samples.redraws,
            kept_outside: samples.kept_outside,
            skipped_pairs: l.skipped_pairs,
            clipped: false,
            pose_grad,
        },
        grads.params,
    ))
}

/// Adam state for the pose offsets.
struct PoseState {
    store: ParamStore<f32>,
    hyper: AdamHyper,
}

impl PoseState {
    fn new(n_slices: usize, lr: f64) -> Result<Self> {
        let mut store = ParamStore::new();
        store.add("pose", n_slices, 6, vec![0.0; n_slices * 6])?;
        Ok(PoseState {
            store,
            hyper: AdamHyper::with_lr(lr),
        })
    }

    fn offsets(&self) -> Mat<f32> {
        self.store.groups()[0].as_mat()
    }

    /// Adam on the offsets, then fold them into the poses and reset to zero.
    fn apply(&mut self, grad: &Mat<f32>, transforms: &mut [RigidTransform]) -> Result<()> {
        let mut g = GroupGrads::zeros_like(&self.store);
        g.set(GroupId(0), grad.data.clone())?;
        adam_step(&mut self.store, &g, &self.hyper)?;
        let p = &mut self.store.groups_mut()[0].data;
        for (s, t) in transforms.iter_mut().enumerate() {
            let o = &mut p[s * 6..s * 6 + 6];
            let w = [o[0] as f64, o[1] as f64, o[2] as f64];
            let d = [o[3] as f64, o[4] as f64, o[5] as f64];
            if w != [0.0; 3] || d != [0.0; 3] {
                // y' = c + R(y − c) + d composed after the current pose
                let c = t.translation;
                let r = RigidTransform::from_rotvec(w, [0.0; 3]);
                let shift = sub(add(c, d), r.apply(c));
                let delta = RigidTransform::new(r.rotation, shift);
                *t = delta.compose(t);
            }
            o.iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(())
    }
}

/// Runs `config.iterations` steps starting at the model's step counter.
///
/// `on_log` is called after every recorded trace row (for checkpoints).
/// Pose refinement, when enabled, updates `data.transforms` in place.
pub fn train(
    model: &mut CinrModel,
    data: &mut Dataset,
    config: &TrainConfig,
    mut on_log: Option<&mut dyn FnMut(&TraceRow, &CinrModel) -> Result<()>>,
) -> Result<TrainReport> {
    config.validate()?;
    if model.n_slices != data.n_slices() {
        return Err(Error::Shape(format!(
            "model has {} slice embeddings, data has {} slices",
            model.n_slices,
            data.n_slices()
        )));
    }
    let hyper = AdamHyper::with_lr(config.lr);
    let mut pose = if config.refine_transforms {
        Some(PoseState::new(data.n_slices(), config.transform_lr)?)
    } else {
        None
    };
    let mut report = TrainReport::default();
    let start = model.store.step() as usize;
    let mut block = Instant::now();
    for done in 0..config.iterations {
        let it = start + done;
        let offsets = pose.as_ref().map(|p| p.offsets());
        let (mut out, mut grads) = evaluate_step(model, data, config, it, offsets.as_ref())?;
        if !out.row.total.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged {
                iteration: it,
                reason: format!("total loss {} or a gradient is non-finite", out.row.total),
            });
        }
        let norm = grads.global_norm();
        if norm > config.grad_clip {
            grads.scale((config.grad_clip / norm) as f32);
            out.clipped = true;
            report.clipped_steps += 1;
            log::debug!("iteration {it}: gradient norm {norm:.3} clipped");
        }
        adam_step(&mut model.store, &grads, &hyper)?;
        if let (Some(p), Some(g)) = (pose.as_mut(), out.pose_grad.as_ref()) {
            p.apply(g, &mut data.transforms)?;
        }
        report.clamped_points += out.clamped;
        report.psf_redraws += out.redraws;
        report.psf_kept_outside += out.kept_outside;
        report.skipped_pairs += out.skipped_pairs;
        if done % config.log_stride == 0 {
            report.trace.push(out.row);
            if let Some(f) = on_log.as_mut() {
                f(&out.row, model)?;
            }
        }
        if (done + 1) % 100 == 0 {
            let dt = block.elapsed().as_secs_f64();
            report.seconds_per_100.push(dt);
            block = Instant::now();
            log::info!(
                "iteration {}: total {:.5} (slice {:.5}, reg {:.5}, bias {:.6}), {dt:.1}s/100",
                it + 1,
                out.row.total,
                out.row.slice,
                out.row.reg,
                out.row.bias
            );
        }
    }
    if pose.is_some() {
        data.sync_stacks();
    }
    Ok(report)
}

/// Median of a slice of finite values.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
