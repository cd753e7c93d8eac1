//! Training losses: Gaussian negative log-likelihood on pixels, pairwise
//! slope regularizer on the field, and the bias gauge penalty.
//!
//! Each loss has a plain `f64` form and a tape form used in training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{norm, sub, Vec3};
use crate::numgrad::{huber, Mat, NodeId, Real, Tape};

/// Pairs closer than this (mm) are skipped by the regularizer.
pub const MIN_PAIR_DISTANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Residual weight inside the likelihood.
    pub lambda: f64,
    /// Weight of the slope regularizer.
    pub lambda_v: f64,
    /// Weight of the bias penalty.
    pub lambda_b: f64,
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 20.0,
            lambda_v: 2.0,
            lambda_b: 100.0,
            huber_delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda, self.lambda_v, self.lambda_b]
            .iter()
            .all(|w| *w >= 0.0 && w.is_finite())
            && self.huber_delta > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!("loss weights {self:?}")))
        }
    }
}

/// Mean of `λ(I − Ī)²/(2σ²) + ½ log σ²`.
pub fn loss_slice(mean: &[f64], var: &[f64], target: &[f64], lambda: f64) -> Result<f64> {
    if mean.len() != var.len() || mean.len() != target.len() || mean.is_empty() {
        return Err(Error::Shape("loss_slice inputs must be equal-length and non-empty".into()));
    }
    let mut acc = 0.0;
    for i in 0..mean.len() {
        if !(var[i] > 0.0) {
            return Err(Error::InvalidParam(format!("variance {} at pixel {i} is not positive", var[i])));
        }
        let r = target[i] - mean[i];
        acc += lambda * r * r / (2.0 * var[i]) + 0.5 * var[i].ln();
    }
    Ok(acc / mean.len() as f64)
}

/// Inverse pair distances for pixel-major samples (`K` per pixel), with
/// zero for skipped pairs. Returns the weights and the skip count.
pub fn pair_inverse_distances(points: &[Vec3], k: usize) -> Result<(Vec<f64>, usize)> {
    if k < 2 || k % 2 != 0 || points.len() % k != 0 {
        return Err(Error::InvalidParam(format!(
            "{} points do not split into groups of even K = {k}",
            points.len()
        )));
    }
    let h = k / 2;
    let mut out = Vec::with_capacity(points.len() / 2);
    let mut skipped = 0;
    for g in points.chunks(k) {
        for p in 0..h {
            let d = norm(sub(g[p], g[p + h]));
            if d < MIN_PAIR_DISTANCE {
                skipped += 1;
                out.push(0.0);
            } else {
                out.push(1.0 / d);
            }
        }
    }
    Ok((out, skipped))
}

fn slope_penalty(s: f64, delta: f64) -> f64 {
    s + s * s + huber(s, delta)
}

/// `(2/(K·|B|)) Σ [s + s² + Huber_δ(s)]` over pixels and pairs `(k, k+K/2)`,
/// with `s = |V(x_k) − V(x_l)| / ‖x_k − x_l‖`. Returns the value and the skip count.
pub fn loss_regularization(values: &[f64], points: &[Vec3], k: usize, delta: f64) -> Result<(f64, usize)> {
    if values.len() != points.len() {
        return Err(Error::Shape("one field value per sample point is required".into()));
    }
    let (inv, skipped) = pair_inverse_distances(points, k)?;
    let h = k / 2;
    let mut acc = 0.0;
    for (gi, g) in values.chunks(k).enumerate() {
        for p in 0..h {
            let s = (g[p] - g[p + h]).abs() * inv[gi * h + p];
            acc += slope_penalty(s, delta);
        }
    }
    Ok((acc / inv.len() as f64, skipped))
}

/// Square of the grand mean of log B.
pub fn loss_bias(log_b: &[f64]) -> f64 {
    if log_b.is_empty() {
        return 0.0;
    }
    let m = log_b.iter().sum::<f64>() / log_b.len() as f64;
    m * m
}

/// Loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub slice: f64,
    pub reg: f64,
    pub bias: f64,
}

/// `L_I + λ_V R_V + λ_B R_B`.
pub fn loss_total(parts: LossParts, weights: &LossWeights) -> Result<f64> {
    for (name, v) in [("slice", parts.slice), ("regularization", parts.reg), ("bias", parts.bias)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss is {v}")));
        }
    }
    Ok(parts.slice + weights.lambda_v * parts.reg + weights.lambda_b * parts.bias)
}

/// Tape form of [`loss_slice`]; `mean`, `var` are B×1.
pub fn slice_node<T: Real>(
    tape: &mut Tape<'_, T>,
    mean: NodeId,
    var: NodeId,
    target: &[f32],
    lambda: f64,
) -> Result<NodeId> {
    if let Some((i, v)) = tape.value(var).data.iter().enumerate().find(|(_, v)| !(**v > T::zero())) {
        return Err(Error::NonFinite(format!("pixel variance {v:?} at batch row {i}")));
    }
    let t = tape.constant(Mat::column(target.iter().map(|&x| T::of(x as f64)).collect()));
    let r = tape.sub(t, mean);
    let r2 = tape.square(r);
    let q = tape.div(r2, var);
    let q = tape.scale(q, T::of(0.5 * lambda));
    let lv = tape.log(var);
    let lv = tape.scale(lv, T::of(0.5));
    let per = tape.add(q, lv);
    Ok(tape.mean(per))
}

/// Tape form of [`loss_regularization`]; `v` is (B·K)×1.
pub fn regularization_node<T: Real>(
    tape: &mut Tape<'_, T>,
    v: NodeId,
    inv_dist: &[f64],
    k: usize,
    delta: f64,
) -> NodeId {
    let d = tape.pair_diff(v, k);
    let w = tape.constant(Mat::column(inv_dist.iter().map(|&x| T::of(x)).collect()));
    let s = tape.mul(d, w);
    let s = tape.abs(s);
    let s2 = tape.square(s);
    let hb = tape.huber(s, T::of(delta));
    let a = tape.add(s, s2);
    let per = tape.add(a, hb);
    tape.mean(per)
}

/// Tape form of [`loss_bias`].
pub fn bias_node<T: Real>(tape: &mut Tape<'_, T>, log_b: NodeId) -> NodeId {
    let m = tape.mean(log_b);
    tape.square(m)
}

/// Tape form of [`loss_total`]; checks each part for finiteness.
pub fn total_node<T: Real>(
    tape: &mut Tape<'_, T>,
    slice: NodeId,
    reg: NodeId,
    bias: NodeId,
    weights: &LossWeights,
) -> Result<NodeId> {
    for (name, id) in [("slice", slice), ("regularization", reg), ("bias", bias)] {
        let v = tape.value(id).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss is {v:?}")));
        }
    }
    let r = tape.scale(reg, T::of(weights.lambda_v));
    let b = tape.scale(bias, T::of(weights.lambda_b));
    let a = tape.add(slice, r);
    Ok(tape.add(a, b))
}
