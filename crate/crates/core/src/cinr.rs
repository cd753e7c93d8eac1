//! The dual-branch implicit intensity field with its bias, variance and
//! per-slice scale heads.
//!
//! `V(y) = softplus(V1 + V2)` and `Z(y) = Z1 + Z2`, where branch 1 reads the
//! normalized coordinate and branch 2 reads the hash-grid encoding. The bias
//! head sees the coarse encoding levels and a slice embedding; the variance
//! head sees `Z` and the same embedding.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoding::{DomainMap, HashGrid, HashGridSpec};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::numgrad::{GroupId, Mat, NodeId, ParamStore, Real, Tape};
use crate::rng::{domain, stream};

/// Floor added to the variance head output.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CinrConfig {
    #[serde(default)]
    pub grid: HashGridSpec,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Width of the feature vector `Z`.
    #[serde(default = "default_z_width")]
    pub z_width: usize,
    /// Width of the per-slice embedding.
    #[serde(default = "default_embed_width")]
    pub embed_width: usize,
    /// Encoding levels fed to the bias head.
    #[serde(default = "default_bias_levels")]
    pub bias_levels: usize,
}

fn default_hidden() -> usize {
    64
}
fn default_z_width() -> usize {
    15
}
fn default_embed_width() -> usize {
    16
}
fn default_bias_levels() -> usize {
    4
}

impl Default for CinrConfig {
    fn default() -> Self {
        CinrConfig {
            grid: HashGridSpec::default(),
            hidden: default_hidden(),
            z_width: default_z_width(),
            embed_width: default_embed_width(),
            bias_levels: default_bias_levels(),
        }
    }
}

impl CinrConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.hidden == 0 || self.z_width == 0 || self.embed_width == 0 {
            return Err(Error::InvalidParam("network widths must be positive".into()));
        }
        if self.bias_levels < 1 || self.bias_levels > self.grid.levels {
            return Err(Error::InvalidParam(format!(
                "bias levels {} outside 1..={}",
                self.bias_levels, self.grid.levels
            )));
        }
        Ok(())
    }
}

/// One-hidden-layer ReLU perceptron stored as four parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: GroupId,
    pub b1: GroupId,
    pub w2: GroupId,
    pub b2: GroupId,
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` init; the output layer is scaled by `out_gain`.
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dims: (usize, usize, usize),
        out_gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (inputs, hidden, outputs) = dims;
        let mut uniform = |n: usize, fan_in: usize, gain: f64| -> Vec<T> {
            let b = gain / (fan_in as f64).sqrt();
            (0..n)
                .map(|_| T::of(if b > 0.0 { rng.random_range(-b..b) as f32 as f64 } else { 0.0 }))
                .collect()
        };
        let w1 = uniform(hidden * inputs, inputs, 1.0);
        let b1 = uniform(hidden, inputs, 1.0);
        let w2 = uniform(outputs * hidden, hidden, out_gain);
        let b2 = uniform(outputs, hidden, out_gain);
        Ok(Mlp {
            w1: store.add(&format!("{prefix}.w1"), hidden, inputs, w1)?,
            b1: store.add(&format!("{prefix}.b1"), 1, hidden, b1)?,
            w2: store.add(&format!("{prefix}.w2"), outputs, hidden, w2)?,
            b2: store.add(&format!("{prefix}.b2"), 1, outputs, b2)?,
            inputs,
            hidden,
            outputs,
        })
    }

    pub fn attach<T: Real>(store: &ParamStore<T>, prefix: &str, dims: (usize, usize, usize)) -> Result<Self> {
        let (inputs, hidden, outputs) = dims;
        let find = |suffix: &str, rows: usize, cols: usize| -> Result<GroupId> {
            let name = format!("{prefix}.{suffix}");
            let id = store
                .find(&name)
                .ok_or_else(|| Error::Shape(format!("missing group {name}")))?;
            let g = store.group(id);
            if g.rows != rows || g.cols != cols {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    g.rows, g.cols
                )));
            }
            Ok(id)
        };
        Ok(Mlp {
            w1: find("w1", hidden, inputs)?,
            b1: find("b1", 1, hidden)?,
            w2: find("w2", outputs, hidden)?,
            b2: find("b2", 1, outputs)?,
            inputs,
            hidden,
            outputs,
        })
    }

    pub fn groups(&self) -> [GroupId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> NodeId {
        let (w1, b1) = (tape.param(self.w1), tape.param(self.b1));
        let h = tape.linear(x, w1, b1);
        let h = tape.relu(h);
        let (w2, b2) = (tape.param(self.w2), tape.param(self.b2));
        tape.linear(h, w2, b2)
    }

    /// Same as `forward` on `[x, embed[slices]]`, with the embedding half of
    /// the first layer evaluated once per slice instead of once per row.
    pub fn forward_embedded<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        x: NodeId,
        embed: GroupId,
        slices: &[u32],
    ) -> Result<NodeId> {
        let width = tape.value(x).cols;
        let (w1, b1) = (tape.param(self.w1), tape.param(self.b1));
        let wx = tape.slice_cols(w1, 0, width);
        let we = tape.slice_cols(w1, width, self.inputs - width);
        let e = tape.param(embed);
        let per_slice = tape.linear(e, we, b1);
        let zero = tape.constant(Mat::zeros(1, self.hidden));
        let hx = tape.linear(x, wx, zero);
        let he = tape.gather_rows(per_slice, slices.to_vec())?;
        let h = tape.add(hx, he);
        let h = tape.relu(h);
        let (w2, b2) = (tape.param(self.w2), tape.param(self.b2));
        Ok(tape.linear(h, w2, b2))
    }
}

/// Tape nodes of the field at a batch of points.
#[derive(Clone, Copy, Debug)]
pub struct FieldNodes {
    /// n×1 intensity `V`.
    pub v: NodeId,
    /// n×F_z feature `Z`.
    pub z: NodeId,
    /// n×(L·F) hash encoding.
    pub enc: NodeId,
}

/// All trainable state of the field.
#[derive(Clone, Debug)]
pub struct CinrModel {
    pub config: CinrConfig,
    pub domain: DomainMap,
    pub n_slices: usize,
    pub store: ParamStore<f32>,
    pub grid: HashGrid,
    pub mlp_v1: Mlp,
    pub mlp_v2: Mlp,
    pub mlp_b: Mlp,
    pub mlp_sigma: Mlp,
    pub embed: GroupId,
    pub log_scale: GroupId,
}

impl CinrModel {
    pub fn new(config: CinrConfig, domain: DomainMap, n_slices: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_slices == 0 {
            return Err(Error::Empty("model needs at least one slice".into()));
        }
        let mut rng = stream(seed, &[domain::INIT]);
        let mut store = ParamStore::new();
        let grid = HashGrid::register(config.grid.clone(), &mut store, &mut rng)?;
        let (h, fz, e) = (config.hidden, config.z_width, config.embed_width);
        let enc = config.grid.output_width();
        let low = config.bias_levels * config.grid.features;
        let mlp_v1 = Mlp::register(&mut store, "mlp_v1", (3, h, 1 + fz), 1.0, &mut rng)?;
        let mlp_v2 = Mlp::register(&mut store, "mlp_v2", (enc, h, 1 + fz), 1.0, &mut rng)?;
        // zero output layer: B = 1 at start
        let mlp_b = Mlp::register(&mut store, "mlp_b", (low + e, h, 1), 0.0, &mut rng)?;
        let mlp_sigma = Mlp::register(&mut store, "mlp_sigma", (fz + e, h, 1), 1.0, &mut rng)?;
        let emb: Vec<f32> = (0..n_slices * e)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect();
        let embed = store.add("embed", n_slices, e, emb)?;
        let log_scale = store.add("log_scale", n_slices, 1, vec![0.0; n_slices])?;
        Ok(CinrModel {
            config,
            domain,
            n_slices,
            store,
            grid,
            mlp_v1,
            mlp_v2,
            mlp_b,
            mlp_sigma,
            embed,
            log_scale,
        })
    }

    /// Rebuilds the model around an existing store (checkpoint load).
    pub fn from_store(
        config: CinrConfig,
        domain: DomainMap,
        n_slices: usize,
        store: ParamStore<f32>,
    ) -> Result<Self> {
        config.validate()?;
        let grid = HashGrid::attach(config.grid.clone(), &store)?;
        let (h, fz, e) = (config.hidden, config.z_width, config.embed_width);
        let enc = config.grid.output_width();
        let low = config.bias_levels * config.grid.features;
        let mlp_v1 = Mlp::attach(&store, "mlp_v1", (3, h, 1 + fz))?;
        let mlp_v2 = Mlp::attach(&store, "mlp_v2", (enc, h, 1 + fz))?;
        let mlp_b = Mlp::attach(&store, "mlp_b", (low + e, h, 1))?;
        let mlp_sigma = Mlp::attach(&store, "mlp_sigma", (fz + e, h, 1))?;
        let find = |name: &str, rows: usize, cols: usize| -> Result<GroupId> {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Shape(format!("missing group {name}")))?;
            let g = store.group(id);
            if g.rows != rows || g.cols != cols {
                return Err(Error::Shape(format!("{name} is {}x{}, expected {rows}x{cols}", g.rows, g.cols)));
            }
            Ok(id)
        };
        let embed = find("embed", n_slices, e)?;
        let log_scale = find("log_scale", n_slices, 1)?;
        Ok(CinrModel {
            config,
            domain,
            n_slices,
            store,
            grid,
            mlp_v1,
            mlp_v2,
            mlp_b,
            mlp_sigma,
            embed,
            log_scale,
        })
    }

    pub fn z_width(&self) -> usize {
        self.config.z_width
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Zeroes and freezes the raw-coordinate branch (ablation).
    pub fn disable_coordinate_branch(&mut self) {
        for g in self.mlp_v1.groups() {
            let group = self.store.group_mut(g);
            group.data.iter_mut().for_each(|v| *v = 0.0);
            group.frozen = true;
        }
    }

    fn check_slices(&self, slices: &[u32]) -> Result<()> {
        if let Some(&bad) = slices.iter().find(|&&s| s as usize >= self.n_slices) {
            return Err(Error::OutOfRange {
                what: "slice index",
                index: bad as usize,
                len: self.n_slices,
            });
        }
        Ok(())
    }

    /// Maps world points to the unit cube, clamping; returns the point
    /// matrix and the number of clamped points.
    pub fn normalize_points(&self, points: &[Vec3]) -> (Mat<f32>, usize) {
        let mut clamped = 0;
        let mut data = Vec::with_capacity(points.len() * 3);
        for &p in points {
            let (y, c) = self.domain.normalize(p);
            clamped += c as usize;
            data.extend(y.iter().map(|&v| v as f32));
        }
        (Mat::from_vec(points.len(), 3, data), clamped)
    }

    /// Field at an n×3 node of normalized coordinates in `[0,1]`.
    pub fn field<T: Real>(&self, tape: &mut Tape<'_, T>, y: NodeId) -> FieldNodes {
        let fz = self.config.z_width;
        let centred = tape.affine_cols(y, vec![T::of(2.0); 3], vec![T::of(-1.0); 3]);
        let o1 = self.mlp_v1.forward(tape, centred);
        let enc = self.grid.encode_node(tape, y, self.config.grid.levels);
        let o2 = self.mlp_v2.forward(tape, enc);
        let o = tape.add(o1, o2);
        let pre = tape.slice_cols(o, 0, 1);
        let v = tape.softplus(pre);
        let z = tape.slice_cols(o, 1, fz);
        FieldNodes { v, z, enc }
    }

    /// n×1 `log B_i(y)`.
    pub fn log_bias<T: Real>(&self, tape: &mut Tape<'_, T>, y: NodeId, slices: &[u32]) -> Result<NodeId> {
        let low = self.grid.encode_node(tape, y, self.config.bias_levels);
        self.log_bias_from_low(tape, low, slices)
    }

    /// `log B_i` reusing the full encoding from [`field`](Self::field); the
    /// bias network reads its first `bias_levels` levels.
    pub fn log_bias_from_encoding<T: Real>(&self, tape: &mut Tape<'_, T>, enc: NodeId, slices: &[u32]) -> Result<NodeId> {
        let low = tape.slice_cols(enc, 0, self.config.bias_levels * self.config.grid.features);
        self.log_bias_from_low(tape, low, slices)
    }

    fn log_bias_from_low<T: Real>(&self, tape: &mut Tape<'_, T>, low: NodeId, slices: &[u32]) -> Result<NodeId> {
        self.check_slices(slices)?;
        self.mlp_b.forward_embedded(tape, low, self.embed, slices)
    }

    /// n×1 `σ_i²(y)` from `Z(y)`.
    pub fn variance<T: Real>(&self, tape: &mut Tape<'_, T>, z: NodeId, slices: &[u32]) -> Result<NodeId> {
        self.check_slices(slices)?;
        let raw = self.mlp_sigma.forward_embedded(tape, z, self.embed, slices)?;
        let sp = tape.softplus(raw);
        Ok(tape.shift(sp, T::of(VARIANCE_FLOOR)))
    }

    /// n×1 per-row log scale `s_i` (so `C_i = exp(s_i)`).
    pub fn log_scale_rows<T: Real>(&self, tape: &mut Tape<'_, T>, slices: &[u32]) -> Result<NodeId> {
        self.check_slices(slices)?;
        tape.gather(self.log_scale, slices.to_vec())
    }

    pub fn scale_factor(&self, slice: usize) -> f64 {
        (self.store.group(self.log_scale).data[slice] as f64).exp()
    }

    /// `(V, Z, clamped)` at one world point.
    pub fn eval_field(&self, p: Vec3) -> (f64, Vec<f64>, bool) {
        let (m, clamped) = self.normalize_points(&[p]);
        let mut tape = Tape::new(&self.store);
        let y = tape.constant(m);
        let f = self.field(&mut tape, y);
        let v = tape.value(f.v).data[0] as f64;
        let z = tape.value(f.z).data.iter().map(|&x| x as f64).collect();
        (v, z, clamped > 0)
    }

    /// `(log B_i(y), B_i(y))` at one world point.
    pub fn eval_bias(&self, p: Vec3, slice: usize) -> Result<(f64, f64)> {
        let (m, _) = self.normalize_points(&[p]);
        let mut tape = Tape::new(&self.store);
        let y = tape.constant(m);
        let lb = self.log_bias(&mut tape, y, &[slice as u32])?;
        let v = tape.value(lb).data[0] as f64;
        Ok((v, v.exp()))
    }

    /// `σ_i²` for a given feature vector `Z`.
    pub fn eval_variance(&self, z: &[f64], slice: usize) -> Result<f64> {
        if z.len() != self.config.z_width {
            return Err(Error::Shape(format!("Z has {} entries, expected {}", z.len(), self.config.z_width)));
        }
        let mut tape = Tape::new(&self.store);
        let zn = tape.constant(Mat::from_vec(1, z.len(), z.iter().map(|&v| v as f32).collect()));
        let s = self.variance(&mut tape, zn, &[slice as u32])?;
        Ok(tape.value(s).data[0] as f64)
    }

    /// `log B` at many world points, each with its own slice.
    pub fn eval_log_bias(&self, points: &[Vec3], slices: &[u32], chunk: usize) -> Result<Vec<f32>> {
        use rayon::prelude::*;
        if points.len() != slices.len() {
            return Err(Error::Shape(format!("{} points but {} slice indices", points.len(), slices.len())));
        }
        self.check_slices(slices)?;
        let chunk = chunk.max(1);
        let parts = points
            .par_chunks(chunk)
            .zip(slices.par_chunks(chunk))
            .map(|(pts, sl)| {
                let (m, _) = self.normalize_points(pts);
                let mut tape = Tape::new(&self.store);
                let y = tape.constant(m);
                let lb = self.log_bias(&mut tape, y, sl)?;
                Ok(tape.value(lb).data.clone())
            })
            .collect::<Result<Vec<Vec<f32>>>>()?;
        Ok(parts.concat())
    }

    /// `V` and the n×F_z feature matrix `Z` at many world points.
    pub fn eval_features(&self, points: &[Vec3], chunk: usize) -> (Vec<f32>, Mat<f32>) {
        use rayon::prelude::*;
        let fz = self.config.z_width;
        let parts: Vec<(Vec<f32>, Vec<f32>)> = points
            .par_chunks(chunk.max(1))
            .map(|pts| {
                let (m, _) = self.normalize_points(pts);
                let mut tape = Tape::new(&self.store);
                let y = tape.constant(m);
                let f = self.field(&mut tape, y);
                (tape.value(f.v).data.clone(), tape.value(f.z).data.clone())
            })
            .collect();
        let mut v = Vec::with_capacity(points.len());
        let mut z = Vec::with_capacity(points.len() * fz);
        for (a, b) in parts {
            v.extend(a);
            z.extend(b);
        }
        (v, Mat::from_vec(points.len(), fz, z))
    }

    /// `V` at many world points, in chunks. Returns values and the clamp count.
    pub fn eval_intensity(&self, points: &[Vec3], chunk: usize) -> (Vec<f32>, usize) {
        use rayon::prelude::*;
        let parts: Vec<(Vec<f32>, usize)> = points
            .par_chunks(chunk.max(1))
            .map(|pts| {
                let (m, clamped) = self.normalize_points(pts);
                let mut tape = Tape::new(&self.store);
                let y = tape.constant(m);
                let f = self.field(&mut tape, y);
                (tape.value(f.v).data.clone(), clamped)
            })
            .collect();
        let mut out = Vec::with_capacity(points.len());
        let mut clamped = 0;
        for (v, c) in parts {
            out.extend(v);
            clamped += c;
        }
        (out, clamped)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::{finite_diff_grad, fraction_within};

    pub(crate) fn tiny_config() -> CinrConfig {
        CinrConfig {
            grid: HashGridSpec {
                levels: 3,
                features: 2,
                base_resolution: 2,
                growth: 2.0,
                table_log2: 6,
                init_scale: 0.5,
            },
            hidden: 4,
            z_width: 3,
            embed_width: 2,
            bias_levels: 2,
        }
    }

    fn unit_domain() -> DomainMap {
        DomainMap::from_bbox([-10.0; 3], [10.0; 3])
    }

    fn zero_all(m: &mut CinrModel) {
        for g in m.store.groups_mut() {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_model_gives_ln2() {
        let mut m = CinrModel::new(CinrConfig::default(), unit_domain(), 3, 1).unwrap();
        zero_all(&mut m);
        let (v, z, _) = m.eval_field([1.0, 2.0, -3.0]);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-6);
        assert!(z.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zeroed_hash_branch_leaves_coordinate_branch() {
        let mut m = CinrModel::new(tiny_config(), unit_domain(), 2, 3).unwrap();
        for &g in m.grid.groups.iter().chain(m.mlp_v2.groups().iter()) {
            m.store.group_mut(g).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let p = [1.5, -2.0, 4.0];
        let (v, _, _) = m.eval_field(p);
        // branch 1 alone
        let y = m.domain.normalize(p).0;
        let mut tape = Tape::new(&m.store);
        let x = tape.constant(Mat::from_vec(1, 3, y.iter().map(|&c| (2.0 * c - 1.0) as f32).collect()));
        let o = m.mlp_v1.forward(&mut tape, x);
        let raw = tape.value(o).data[0] as f64;
        assert!((v - crate::numgrad::softplus(raw)).abs() < 1e-6);
    }

    #[test]
    fn branches_add_before_softplus() {
        let m = CinrModel::new(tiny_config(), unit_domain(), 2, 5).unwrap();
        let p = [0.5, 3.0, -7.0];
        let y = m.domain.normalize(p).0;
        let mut tape = Tape::new(&m.store);
        let x = tape.constant(Mat::from_vec(1, 3, y.iter().map(|&c| c as f32).collect()));
        let xc = tape.affine_cols(x, vec![2.0; 3], vec![-1.0; 3]);
        let o1 = m.mlp_v1.forward(&mut tape, xc);
        let e = m.grid.encode_node(&mut tape, x, 3);
        let o2 = m.mlp_v2.forward(&mut tape, e);
        let (a, b) = (tape.value(o1).data.clone(), tape.value(o2).data.clone());
        let (v, z, _) = m.eval_field(p);
        assert!((v - crate::numgrad::softplus((a[0] + b[0]) as f64)).abs() < 1e-6);
        for k in 0..3 {
            assert!((z[k] - (a[k + 1] + b[k + 1]) as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn bias_examples() {
        let mut m = CinrModel::new(tiny_config(), unit_domain(), 2, 7).unwrap();
        // fresh model has a zero output layer
        assert!((m.eval_bias([0.0; 3], 0).unwrap().1 - 1.0).abs() < 1e-12);
        let b2 = m.mlp_b.b2;
        m.store.group_mut(b2).data[0] = std::f32::consts::LN_2;
        let (lb, b) = m.eval_bias([1.0, 1.0, 1.0], 1).unwrap();
        assert!((lb - std::f64::consts::LN_2).abs() < 1e-6);
        assert!((b - 2.0).abs() < 1e-6);
        assert!(m.eval_bias([0.0; 3], 2).is_err());
    }

    #[test]
    fn embeddings_make_bias_slice_dependent() {
        let mut m = CinrModel::new(tiny_config(), unit_domain(), 2, 8).unwrap();
        let w2 = m.mlp_b.w2;
        m.store.group_mut(w2).data.iter_mut().for_each(|v| *v = 0.7);
        let p = [2.0, -1.0, 0.5];
        let a = m.eval_bias(p, 0).unwrap().0;
        let b = m.eval_bias(p, 1).unwrap().0;
        assert!((a - b).abs() > 1e-6);
    }

    #[test]
    fn variance_floor_and_positivity() {
        let mut m = CinrModel::new(tiny_config(), unit_domain(), 2, 9).unwrap();
        assert!(m.eval_variance(&[0.1, 0.2, 0.3], 0).unwrap() > 0.0);
        let b2 = m.mlp_sigma.b2;
        let w2 = m.mlp_sigma.w2;
        m.store.group_mut(w2).data.iter_mut().for_each(|v| *v = 0.0);
        m.store.group_mut(b2).data[0] = -80.0;
        let s = m.eval_variance(&[0.1, 0.2, 0.3], 1).unwrap();
        assert!((s - 1e-6).abs() < 1e-9, "{s}");
        assert!(m.eval_variance(&[0.0; 3], 5).is_err());
        assert!(m.eval_variance(&[0.0; 2], 0).is_err());
    }

    #[test]
    fn positivity_on_random_models() {
        use rand::Rng;
        let mut rng = stream(11, &[]);
        for seed in 0..4 {
            let m = CinrModel::new(tiny_config(), unit_domain(), 3, seed).unwrap();
            for _ in 0..250 {
                let p = [
                    rng.random_range(-12.0..12.0),
                    rng.random_range(-12.0..12.0),
                    rng.random_range(-12.0..12.0),
                ];
                let s = rng.random_range(0..3usize);
                let (v, z, _) = m.eval_field(p);
                assert!(v >= 0.0);
                assert!(m.eval_bias(p, s).unwrap().1 > 0.0);
                assert!(m.eval_variance(&z, s).unwrap() >= 1e-6);
            }
        }
    }

    #[test]
    fn out_of_domain_is_clamped_and_flagged() {
        let m = CinrModel::new(tiny_config(), unit_domain(), 1, 2).unwrap();
        let (v_out, _, c) = m.eval_field([100.0, 0.0, 0.0]);
        assert!(c);
        let edge = m.domain.origin[0] + m.domain.side;
        let (v_edge, _, c2) = m.eval_field([edge, 0.0, 0.0]);
        assert!(!c2);
        assert!((v_out - v_edge).abs() < 1e-6);
    }

    #[test]
    fn deterministic_eval() {
        let m = CinrModel::new(tiny_config(), unit_domain(), 1, 4).unwrap();
        let a = m.eval_field([1.0, 2.0, 3.0]);
        let b = m.eval_field([1.0, 2.0, 3.0]);
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        let n = CinrModel::new(tiny_config(), unit_domain(), 1, 4).unwrap();
        assert_eq!(m.store.flatten(), n.store.flatten());
    }

    /// Sum of V, log B and σ² over a few points, in f64, for gradient checks.
    fn objective(m: &CinrModel, tape: &mut Tape<'_, f64>) -> Result<NodeId> {
        let pts = [[1.1, -2.3, 0.7], [-4.2, 3.3, 5.1], [0.2, 0.9, -6.6]];
        let slices = [0u32, 1, 1];
        let (y, _) = m.normalize_points(&pts);
        let yn = tape.constant(y.cast());
        let f = m.field(tape, yn);
        let lb = m.log_bias(tape, yn, &slices)?;
        let s = m.variance(tape, f.z, &slices)?;
        let a = tape.add(f.v, lb);
        let b = tape.add(a, s);
        Ok(tape.sum(b))
    }

    fn scalar_objective(m: &CinrModel, store: &ParamStore<f64>) -> Result<f64> {
        let mut tape = Tape::new(store);
        let r = objective(m, &mut tape)?;
        Ok(tape.value(r).data[0])
    }

    #[test]
    fn embedded_forward_matches_concatenated_input() {
        let m = CinrModel::new(tiny_config(), unit_domain(), 3, 8).unwrap();
        let s64 = m.store.cast::<f64>();
        let mut tape = Tape::new(&s64);
        let z = tape.constant(Mat::from_vec(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()));
        let slices = vec![2u32, 0, 2, 1];
        let fast = m.mlp_sigma.forward_embedded(&mut tape, z, m.embed, &slices).unwrap();
        let e = tape.gather(m.embed, slices).unwrap();
        let x = tape.concat(z, e);
        let slow = m.mlp_sigma.forward(&mut tape, x);
        for (a, b) in tape.value(fast).data.iter().zip(&tape.value(slow).data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn every_group_gradient_matches_finite_differences() {
        let mut m = CinrModel::new(tiny_config(), unit_domain(), 2, 13).unwrap();
        let w2 = m.mlp_b.w2;
        m.store.group_mut(w2).data.iter_mut().for_each(|v| *v = 0.3);
        let s64 = m.store.cast::<f64>();
        let mut tape = Tape::new(&s64);
        let r = objective(&m, &mut tape).unwrap();
        let grads = tape.backward(r).unwrap();
        let analytic = grads.params.flatten(&s64);
        let x0 = s64.flatten();
        let mut probe = s64.clone();
        let numeric = finite_diff_grad(
            |x| {
                probe.unflatten(x)?;
                scalar_objective(&m, &probe)
            },
            &x0,
            1e-6,
        )
        .unwrap();
        let frac = fraction_within(&analytic, &numeric, 1e-6, 1e-3);
        assert!(frac >= 0.95, "only {frac} of coordinates agree");
        // every group received some gradient signal
        for (gi, g) in s64.groups().iter().enumerate() {
            if g.name == "log_scale" {
                continue;
            }
            assert!(grads.params.get(GroupId(gi)).is_some(), "no gradient for {}", g.name);
        }
    }

    #[test]
    fn frozen_coordinate_branch() {
        let mut m = CinrModel::new(tiny_config(), unit_domain(), 1, 6).unwrap();
        m.disable_coordinate_branch();
        for g in m.mlp_v1.groups() {
            assert!(m.store.group(g).frozen);
            assert!(m.store.group(g).data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn from_store_roundtrip() {
        let m = CinrModel::new(tiny_config(), unit_domain(), 3, 21).unwrap();
        let n = CinrModel::from_store(m.config.clone(), m.domain, 3, m.store.clone()).unwrap();
        let p = [0.3, -0.4, 2.2];
        assert_eq!(m.eval_field(p).0.to_bits(), n.eval_field(p).0.to_bits());
        assert!(CinrModel::from_store(m.config.clone(), m.domain, 4, m.store.clone()).is_err());
    }
}
