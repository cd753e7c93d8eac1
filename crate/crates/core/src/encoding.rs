//! Multiresolution hash-grid positional encoding.
//!
//! Each level holds a table of `F`-wide feature rows addressed by lattice
//! vertex. A point is encoded per level by trilinear interpolation of its
//! eight enclosing vertex rows; the levels are concatenated coarse to fine.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::{BackwardCtx, CustomOp, GroupId, Mat, NodeId, ParamStore, Real, Tape};

/// Multipliers for the spatial hash of non-dense levels.
pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

/// Tolerance for coordinates slightly outside the unit cube.
pub const DOMAIN_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashGridSpec {
    pub levels: usize,
    pub features: usize,
    pub base_resolution: usize,
    pub growth: f64,
    pub table_log2: u32,
    pub init_scale: f64,
}

impl Default for HashGridSpec {
    fn default() -> Self {
        HashGridSpec {
            levels: 16,
            features: 2,
            base_resolution: 16,
            growth: 1.382,
            table_log2: 19,
            init_scale: 1e-4,
        }
    }
}

impl HashGridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1
            || self.features < 1
            || self.base_resolution < 2
            || !(self.growth > 1.0)
            || self.table_log2 < 1
            || self.table_log2 > 30
            || !(self.init_scale >= 0.0)
        {
            return Err(Error::InvalidParam(format!("hash grid spec {self:?}")));
        }
        Ok(())
    }

    /// Cells per axis at `level`: `floor(N_min * growth^level)`.
    pub fn resolution(&self, level: usize) -> usize {
        (self.base_resolution as f64 * self.growth.powi(level as i32)).floor() as usize
    }

    fn vertices(&self, level: usize) -> u64 {
        let v = self.resolution(level) as u64 + 1;
        v * v * v
    }

    /// True when every lattice vertex gets its own table row.
    pub fn is_dense(&self, level: usize) -> bool {
        self.vertices(level) <= 1u64 << self.table_log2
    }

    /// Rows stored for `level`: the vertex count when dense, `2^T` otherwise.
    pub fn level_rows(&self, level: usize) -> usize {
        self.vertices(level).min(1u64 << self.table_log2) as usize
    }

    pub fn output_width(&self) -> usize {
        self.levels * self.features
    }

    pub fn num_params(&self) -> usize {
        (0..self.levels).map(|l| self.level_rows(l) * self.features).sum()
    }

    /// Table row of a lattice vertex.
    pub fn hash_index(&self, v: [u32; 3], level: usize) -> usize {
        self.geom(level).index(v)
    }

    fn geom(&self, level: usize) -> LevelGeom {
        let res = self.resolution(level);
        LevelGeom {
            res,
            dense: self.is_dense(level),
            side: res as u64 + 1,
            mask: ((1u64 << self.table_log2) - 1) as u32,
        }
    }

    /// Corner rows and trilinear weights of `y` at `level`, plus the
    /// fractional cell position used for coordinate derivatives.
    #[inline]
    fn corners(&self, y: [f64; 3], level: usize) -> ([usize; 8], [f64; 8], [f64; 3]) {
        self.geom(level).corners(y)
    }
}

/// Per-level lattice constants, hoisted out of the per-point loops.
#[derive(Clone, Copy, Debug)]
struct LevelGeom {
    res: usize,
    dense: bool,
    side: u64,
    mask: u32,
}

impl LevelGeom {
    #[inline]
    fn index(&self, v: [u32; 3]) -> usize {
        if self.dense {
            (v[0] as u64 + self.side * (v[1] as u64 + self.side * v[2] as u64)) as usize
        } else {
            let h = v[0].wrapping_mul(HASH_PRIMES[0])
                ^ v[1].wrapping_mul(HASH_PRIMES[1])
                ^ v[2].wrapping_mul(HASH_PRIMES[2]);
            (h & self.mask) as usize
        }
    }

    #[inline]
    fn corners(&self, y: [f64; 3]) -> ([usize; 8], [f64; 8], [f64; 3]) {
        let res = self.res;
        let mut base = [0u32; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let p = y[a].clamp(0.0, 1.0) * res as f64;
            let b = (p.floor() as usize).min(res - 1);
            base[a] = b as u32;
            frac[a] = p - b as f64;
        }
        let mut idx = [0usize; 8];
        let mut w = [0.0f64; 8];
        for c in 0..8 {
            let mut v = base;
            let mut wc = 1.0;
            for a in 0..3 {
                if c >> a & 1 == 1 {
                    v[a] += 1;
                    wc *= frac[a];
                } else {
                    wc *= 1.0 - frac[a];
                }
            }
            idx[c] = self.index(v);
            w[c] = wc;
        }
        (idx, w, frac)
    }
}

/// Trilinear weights of a point at one level; exposed for property tests.
pub fn trilinear_weights(spec: &HashGridSpec, y: [f64; 3], level: usize) -> [f64; 8] {
    spec.corners(y, level).1
}

/// The hash-grid tables registered in a [`ParamStore`], one group per level.
#[derive(Clone, Debug, PartialEq)]
pub struct HashGrid {
    pub spec: HashGridSpec,
    pub groups: Vec<GroupId>,
}

impl HashGrid {
    /// Registers `hash_level_{l}` groups initialised uniformly in ±init_scale.
    pub fn register<T: Real, R: Rng>(
        spec: HashGridSpec,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let mut groups = Vec::with_capacity(spec.levels);
        for l in 0..spec.levels {
            let rows = spec.level_rows(l);
            let s = spec.init_scale;
            let data = (0..rows * spec.features)
                .map(|_| {
                    if s > 0.0 {
                        T::of(rng.random_range(-s..=s))
                    } else {
                        T::zero()
                    }
                })
                .collect();
            groups.push(store.add(&format!("hash_level_{l}"), rows, spec.features, data)?);
        }
        Ok(HashGrid { spec, groups })
    }

    /// Re-attaches to tables already present in a store (checkpoint load).
    pub fn attach<T: Real>(spec: HashGridSpec, store: &ParamStore<T>) -> Result<Self> {
        spec.validate()?;
        let mut groups = Vec::with_capacity(spec.levels);
        for l in 0..spec.levels {
            let name = format!("hash_level_{l}");
            let id = store
                .find(&name)
                .ok_or_else(|| Error::Shape(format!("missing group {name}")))?;
            let g = store.group(id);
            if g.rows != spec.level_rows(l) || g.cols != spec.features {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, spec needs {}x{}",
                    g.rows,
                    g.cols,
                    spec.level_rows(l),
                    spec.features
                )));
            }
            groups.push(id);
        }
        Ok(HashGrid { spec, groups })
    }

    fn check_point(y: [f64; 3]) -> Result<()> {
        if y.iter().all(|&v| v >= -DOMAIN_TOL && v <= 1.0 + DOMAIN_TOL) {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "encode coordinate {y:?} outside [0,1]^3"
            )))
        }
    }

    /// Full encoding of one normalized point: `L * F` features.
    pub fn encode<T: Real>(&self, store: &ParamStore<T>, y: [f64; 3]) -> Result<Vec<T>> {
        self.low_level_encode(store, y, self.spec.levels)
    }

    /// The first `b` levels of [`encode`](Self::encode): `b * F` features.
    pub fn low_level_encode<T: Real>(
        &self,
        store: &ParamStore<T>,
        y: [f64; 3],
        b: usize,
    ) -> Result<Vec<T>> {
        if b < 1 || b > self.spec.levels {
            return Err(Error::InvalidParam(format!(
                "low-level prefix {b} outside 1..={}",
                self.spec.levels
            )));
        }
        Self::check_point(y)?;
        let f = self.spec.features;
        let mut out = vec![T::zero(); b * f];
        self.encode_row(store, y, b, &mut out);
        Ok(out)
    }

    fn encode_row<T: Real>(&self, store: &ParamStore<T>, y: [f64; 3], levels: usize, out: &mut [T]) {
        let geoms: Vec<LevelGeom> = (0..levels).map(|l| self.spec.geom(l)).collect();
        let tables: Vec<&[T]> = (0..levels).map(|l| &store.group(self.groups[l]).data[..]).collect();
        encode_row_with(&geoms, &tables, self.spec.features, y, out, None);
    }

    /// Batched encoding of an n×3 node of normalized coordinates over the
    /// first `levels` levels. Differentiable w.r.t. tables and coordinates.
    pub fn encode_node<T: Real>(&self, tape: &mut Tape<'_, T>, x: NodeId, levels: usize) -> NodeId {
        assert!(levels >= 1 && levels <= self.spec.levels);
        let store = tape.store();
        let xv = tape.value(x);
        assert_eq!(xv.cols, 3, "encode_node expects n x 3 coordinates");
        let f = self.spec.features;
        let width = levels * f;
        let geoms: Vec<LevelGeom> = (0..levels).map(|l| self.spec.geom(l)).collect();
        let tables: Vec<&[T]> = (0..levels).map(|l| &store.group(self.groups[l]).data[..]).collect();
        let mut out = Mat::zeros(xv.rows, width);
        let mut cache = CornerCache {
            idx: Vec::with_capacity(xv.rows * levels * 8),
            w: Vec::with_capacity(xv.rows * levels * 8),
        };
        for r in 0..xv.rows {
            let y = [xv.at(r, 0).f64(), xv.at(r, 1).f64(), xv.at(r, 2).f64()];
            encode_row_with(&geoms, &tables, f, y, &mut out.data[r * width..(r + 1) * width], Some(&mut cache));
        }
        let touches = self.groups[..levels]
            .iter()
            .any(|&g| !store.group(g).frozen);
        let op = EncodeOp {
            spec: self.spec.clone(),
            groups: self.groups[..levels].to_vec(),
            cache,
        };
        tape.custom(vec![x], out, Box::new(op), touches)
    }
}

/// Corner rows and weights recorded in the forward pass, row-major then
/// level-major, 8 per (row, level).
struct CornerCache {
    idx: Vec<u32>,
    w: Vec<f32>,
}

#[inline]
fn encode_row_with<T: Real>(
    geoms: &[LevelGeom],
    tables: &[&[T]],
    f: usize,
    y: [f64; 3],
    out: &mut [T],
    mut cache: Option<&mut CornerCache>,
) {
    for (l, g) in geoms.iter().enumerate() {
        let table = tables[l];
        let (idx, w, _) = g.corners(y);
        let dst = &mut out[l * f..(l + 1) * f];
        for j in 0..f {
            let mut acc = 0.0f64;
            for c in 0..8 {
                acc += w[c] * table[idx[c] * f + j].f64();
            }
            dst[j] = T::of(acc);
        }
        if let Some(cache) = cache.as_deref_mut() {
            cache.idx.extend(idx.iter().map(|&i| i as u32));
            cache.w.extend(w.iter().map(|&v| v as f32));
        }
    }
}

struct EncodeOp {
    spec: HashGridSpec,
    groups: Vec<GroupId>,
    cache: CornerCache,
}

impl<T: Real> CustomOp<T> for EncodeOp {
    fn name(&self) -> &'static str {
        "hash_encode"
    }

    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Mat<T>>>> {
        let x = ctx.inputs[0];
        let d = ctx.dout;
        let f = self.spec.features;
        let width = self.groups.len() * f;
        let want_x = ctx.wants[0];
        let mut dx = want_x.then(|| Mat::zeros(x.rows, 3));
        let levels = self.groups.len();
        for (l, &gid) in self.groups.iter().enumerate() {
            let group = ctx.store.group(gid);
            if !group.frozen {
                let slot = ctx.grads.slot(gid, group.len());
                for r in 0..x.rows {
                    let base = (r * levels + l) * 8;
                    let idx = &self.cache.idx[base..base + 8];
                    let w = &self.cache.w[base..base + 8];
                    let drow = &d.data[r * width + l * f..r * width + (l + 1) * f];
                    for c in 0..8 {
                        let wc = T::of(w[c] as f64);
                        let row = idx[c] as usize * f;
                        for j in 0..f {
                            slot[row + j] += wc * drow[j];
                        }
                    }
                }
            }
            let Some(dx) = dx.as_mut() else { continue };
            let geom = self.spec.geom(l);
            let res = geom.res as f64;
            let table = &group.data;
            for r in 0..x.rows {
                let y = [x.at(r, 0).f64(), x.at(r, 1).f64(), x.at(r, 2).f64()];
                let (idx, _, frac) = geom.corners(y);
                let drow = &d.data[r * width + l * f..r * width + (l + 1) * f];
                for a in 0..3 {
                    // outside the open unit interval the clamp makes the encoding flat
                    if y[a] <= 0.0 || y[a] >= 1.0 {
                        continue;
                    }
                    let mut acc = 0.0f64;
                    for c in 0..8 {
                        let mut dw = 1.0;
                        for b in 0..3 {
                            let hi = c >> b & 1 == 1;
                            dw *= if b == a {
                                if hi {
                                    1.0
                                } else {
                                    -1.0
                                }
                            } else if hi {
                                frac[b]
                            } else {
                                1.0 - frac[b]
                            };
                        }
                        let mut dot = 0.0f64;
                        for j in 0..f {
                            dot += table[idx[c] * f + j].f64() * drow[j].f64();
                        }
                        acc += dw * dot;
                    }
                    dx.data[r * 3 + a] += T::of(acc * res);
                }
            }
        }
        Ok(vec![dx])
    }
}

/// Affine map from world millimetres onto the unit cube.
///
/// Built from the bounding box of the observed pixel positions, grown by 5%
/// and made cubic so every axis shares one scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMap {
    /// World position of normalized (0,0,0).
    pub origin: [f64; 3],
    /// Edge length of the cube in mm.
    pub side: f64,
    /// Unexpanded bounding box, kept for default render extents.
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
}

/// Growth applied to the bounding box before it is mapped to the unit cube.
pub const DOMAIN_MARGIN: f64 = 0.05;

impl DomainMap {
    pub fn from_points<I: IntoIterator<Item = [f64; 3]>>(points: I) -> Result<Self> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut any = false;
        for p in points {
            any = true;
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        if !any {
            return Err(Error::Empty("no points to bound the field domain".into()));
        }
        Ok(Self::from_bbox(lo, hi))
    }

    pub fn from_bbox(lo: [f64; 3], hi: [f64; 3]) -> Self {
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
        let side = (extent * (1.0 + DOMAIN_MARGIN)).max(1e-6);
        let mut origin = [0.0; 3];
        for a in 0..3 {
            origin[a] = 0.5 * (lo[a] + hi[a]) - 0.5 * side;
        }
        DomainMap {
            origin,
            side,
            bbox_min: lo,
            bbox_max: hi,
        }
    }

    /// Normalized coordinate without clamping.
    pub fn normalize_raw(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.side,
            (p[1] - self.origin[1]) / self.side,
            (p[2] - self.origin[2]) / self.side,
        ]
    }

    /// Normalized coordinate clamped into the unit cube, and whether a clamp happened.
    pub fn normalize(&self, p: [f64; 3]) -> ([f64; 3], bool) {
        let mut y = self.normalize_raw(p);
        let mut clamped = false;
        for v in &mut y {
            if *v < 0.0 || *v > 1.0 {
                clamped = true;
                *v = v.clamp(0.0, 1.0);
            }
        }
        (y, clamped)
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.normalize_raw(p).iter().all(|&v| (0.0..=1.0).contains(&v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::{finite_diff_grad, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> HashGridSpec {
        HashGridSpec {
            levels: 4,
            features: 2,
            base_resolution: 4,
            growth: 2.0,
            table_log2: 8,
            init_scale: 0.5,
        }
    }

    fn grid(spec: HashGridSpec, seed: u64) -> (HashGrid, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = HashGrid::register(spec, &mut store, &mut rng).unwrap();
        (g, store)
    }

    #[test]
    fn default_spec_resolutions() {
        let s = HashGridSpec::default();
        assert_eq!(s.resolution(0), 16);
        assert_eq!(s.resolution(1), 22);
        let mut prev = 0;
        for l in 0..s.levels {
            assert!(s.resolution(l) >= prev);
            prev = s.resolution(l);
        }
        assert!(s.is_dense(0));
        assert!(!s.is_dense(15));
        assert_eq!(s.level_rows(15), 1 << 19);
    }

    #[test]
    fn origin_hashes_to_zero() {
        let s = small_spec();
        for l in 0..s.levels {
            assert_eq!(s.hash_index([0, 0, 0], l), 0);
        }
        let d = HashGridSpec::default();
        for l in 0..d.levels {
            assert_eq!(d.hash_index([0, 0, 0], l), 0);
        }
    }

    #[test]
    fn spatial_hash_formula() {
        let s = small_spec(); // level 3: 33^3 vertices > 256 rows -> hashed
        assert!(!s.is_dense(3));
        let expect = (3u32 ^ 5u32.wrapping_mul(2_654_435_761) ^ 7u32.wrapping_mul(805_459_861)) & 255;
        assert_eq!(s.hash_index([3, 5, 7], 3), expect as usize);
        assert_eq!(s.hash_index([3, 5, 7], 3), s.hash_index([3, 5, 7], 3));
    }

    #[test]
    fn dense_level_injective_full_enumeration() {
        let s = HashGridSpec {
            table_log2: 12,
            ..small_spec()
        };
        for l in 0..s.levels {
            if !s.is_dense(l) {
                continue;
            }
            let n = s.resolution(l) as u32 + 1;
            let mut seen = vec![false; s.level_rows(l)];
            for z in 0..n {
                for y in 0..n {
                    for x in 0..n {
                        let i = s.hash_index([x, y, z], l);
                        assert!(!seen[i]);
                        seen[i] = true;
                    }
                }
            }
        }
    }

    #[test]
    fn vertex_point_returns_vertex_row() {
        let (g, store) = grid(small_spec(), 1);
        // (0.25, 0.5, 0.75) is a vertex of level 0 (res 4)
        let y = [0.25, 0.5, 0.75];
        let out = g.encode(&store, y).unwrap();
        let row = g.spec.hash_index([1, 2, 3], 0);
        let table = &store.group(g.groups[0]).data;
        assert!((out[0] - table[row * 2]).abs() < 1e-12);
        assert!((out[1] - table[row * 2 + 1]).abs() < 1e-12);
    }

    #[test]
    fn edge_midpoint_averages_two_rows() {
        let (g, store) = grid(small_spec(), 2);
        let y = [0.125, 0.5, 0.75]; // halfway between x-vertices 0 and 1 at level 0
        let w = trilinear_weights(&g.spec, y, 0);
        let mut sorted = w;
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_eq!(&sorted[..2], &[0.5, 0.5]);
        assert!(sorted[2..].iter().all(|&v| v == 0.0));
        let out = g.encode(&store, y).unwrap();
        let t = &store.group(g.groups[0]).data;
        let a = g.spec.hash_index([0, 2, 3], 0);
        let b = g.spec.hash_index([1, 2, 3], 0);
        assert!((out[0] - 0.5 * (t[a * 2] + t[b * 2])).abs() < 1e-12);
    }

    #[test]
    fn repeat_evaluation_is_bit_identical() {
        let (g, store) = grid(small_spec(), 3);
        let y = [0.31, 0.77, 0.05];
        assert_eq!(g.encode(&store, y).unwrap(), g.encode(&store, y).unwrap());
    }

    #[test]
    fn low_level_prefix() {
        let (g, store) = grid(small_spec(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let y = [rng.random(), rng.random(), rng.random()];
            let full = g.encode(&store, y).unwrap();
            for b in 1..=4 {
                let pre = g.low_level_encode(&store, y, b).unwrap();
                assert_eq!(&full[..b * 2], &pre[..]);
            }
        }
        assert!(g.low_level_encode(&store, [0.5; 3], 0).is_err());
        assert!(g.low_level_encode(&store, [0.5; 3], 5).is_err());
    }

    #[test]
    fn out_of_domain_rejected() {
        let (g, store) = grid(small_spec(), 5);
        assert!(g.encode(&store, [1.0 + 1e-7, 0.5, 0.5]).is_ok());
        assert!(g.encode(&store, [1.01, 0.5, 0.5]).is_err());
        assert!(g.encode(&store, [0.5, -0.1, 0.5]).is_err());
    }

    #[test]
    fn batched_matches_pointwise_and_gradients_check() {
        let (g, store) = grid(small_spec(), 6);
        let pts = [[0.11, 0.2, 0.3], [0.77, 0.41, 0.93], [0.53, 0.61, 0.05]];
        let mut tape = Tape::new(&store);
        let x = tape.variable(Mat::from_vec(3, 3, pts.iter().flatten().copied().collect()));
        let e = g.encode_node(&mut tape, x, 4);
        for (r, p) in pts.iter().enumerate() {
            assert_eq!(tape.value(e).row(r), &g.encode(&store, *p).unwrap()[..]);
        }
        let w = tape.constant(Mat::from_vec(
            3,
            8,
            (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect(),
        ));
        let sq = tape.mul(e, w);
        let out = tape.sum(sq);
        let grads = tape.backward(out).unwrap();

        // table gradients against finite differences
        let analytic = grads.params.flatten(&store);
        let x0 = store.flatten();
        let f = |flat: &[f64]| -> Result<f64> {
            let mut s = store.clone();
            s.unflatten(flat)?;
            let mut acc = 0.0;
            for (r, p) in pts.iter().enumerate() {
                let enc = g.encode(&s, *p)?;
                for (j, v) in enc.iter().enumerate() {
                    acc += v * (((r * 8 + j) * 7 % 11) as f64 - 5.0) / 3.0;
                }
            }
            Ok(acc)
        };
        let numeric = finite_diff_grad(f, &x0, 1e-4).unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(relative_error(*a, *n, 1e-6) < 1e-6, "{a} vs {n}");
        }

        // coordinate gradients
        let dx = grads.var(x).unwrap();
        let flat_pts: Vec<f64> = pts.iter().flatten().copied().collect();
        let fx = |c: &[f64]| -> Result<f64> {
            let mut acc = 0.0;
            for r in 0..3 {
                let enc = g.encode(&store, [c[r * 3], c[r * 3 + 1], c[r * 3 + 2]])?;
                for (j, v) in enc.iter().enumerate() {
                    acc += v * (((r * 8 + j) * 7 % 11) as f64 - 5.0) / 3.0;
                }
            }
            Ok(acc)
        };
        let num_dx = finite_diff_grad(fx, &flat_pts, 1e-7).unwrap();
        for (a, n) in dx.data.iter().zip(&num_dx) {
            assert!((a - n).abs() < 1e-5 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    #[test]
    fn domain_map_is_cubic_with_margin() {
        let d = DomainMap::from_points([[0.0, 0.0, 0.0], [10.0, 20.0, 5.0]]).unwrap();
        assert!((d.side - 21.0).abs() < 1e-12);
        let (c, clamped) = d.normalize([5.0, 10.0, 2.5]);
        assert!(!clamped);
        for v in c {
            assert!((v - 0.5).abs() < 1e-12);
        }
        let (_, clamped) = d.normalize([100.0, 0.0, 0.0]);
        assert!(clamped);
        assert!(DomainMap::from_points(std::iter::empty()).is_err());
    }

    proptest::proptest! {
        #[test]
        fn weights_sum_to_one(x in 0.0f64..=1.0, y in 0.0f64..=1.0, z in 0.0f64..=1.0, l in 0usize..4) {
            let w = trilinear_weights(&small_spec(), [x, y, z], l);
            let s: f64 = w.iter().sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-6);
            proptest::prop_assert!(w.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn encode_is_lipschitz(x in 0.0f64..0.999, y in 0.0f64..0.999, z in 0.0f64..0.999,
                               dx in -1e-4f64..1e-4, dy in -1e-4f64..1e-4, dz in -1e-4f64..1e-4) {
            let (g, store) = grid(small_spec(), 11);
            let a = g.encode(&store, [x, y, z]).unwrap();
            let b = g.encode(&store, [(x + dx).clamp(0.0, 1.0), (y + dy).clamp(0.0, 1.0), (z + dz).clamp(0.0, 1.0)]).unwrap();
            let delta = (dx * dx + dy * dy + dz * dz).sqrt();
            let max_entry = store.flatten().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let max_res = g.spec.resolution(g.spec.levels - 1) as f64;
            for (u, v) in a.iter().zip(&b) {
                // each feature moves at most 2 * res * max|entry| * sqrt(3) per unit step
                proptest::prop_assert!((u - v).abs() <= 2.0 * 3f64.sqrt() * max_res * max_entry * delta + 1e-12);
            }
        }
    }
}
