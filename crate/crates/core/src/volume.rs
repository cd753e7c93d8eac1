//! Dense scalar volumes and slice stacks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{add, dot, scale, sub, RigidTransform, Vec3};

/// Voxel grid geometry: voxel `(i, j, k)` sits at
/// `origin + Σ_a index_a · spacing_a · direction[a]` (world mm).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: Vec3,
    pub origin: Vec3,
    /// Unit axis vectors in world coordinates; `direction[a]` is voxel axis `a`.
    pub direction: [Vec3; 3],
}

pub const AXES: [Vec3; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl Grid {
    pub fn new(dims: [usize; 3], spacing: Vec3, origin: Vec3) -> Result<Self> {
        let g = Grid {
            dims,
            spacing,
            origin,
            direction: AXES,
        };
        g.validate()?;
        Ok(g)
    }

    /// Axis-aligned grid of `dims` voxels centred on `center`.
    pub fn centered(dims: [usize; 3], spacing: Vec3, center: Vec3) -> Result<Self> {
        let mut origin = [0.0; 3];
        for a in 0..3 {
            origin[a] = center[a] - 0.5 * (dims[a] as f64 - 1.0) * spacing[a];
        }
        Self::new(dims, spacing, origin)
    }

    /// Isotropic grid covering the box `[lo, hi]` at `spacing`.
    pub fn covering(lo: Vec3, hi: Vec3, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(Error::InvalidParam(format!("spacing must be positive, got {spacing}")));
        }
        let mut dims = [0usize; 3];
        let mut center = [0.0; 3];
        for a in 0..3 {
            let extent = (hi[a] - lo[a]).max(0.0);
            dims[a] = ((extent / spacing).round() as usize).max(1);
            center[a] = 0.5 * (lo[a] + hi[a]);
        }
        Self::centered(dims, [spacing; 3], center)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidParam(format!("grid dims {:?} must be positive", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "grid spacing {:?} must be positive",
                self.spacing
            )));
        }
        for a in 0..3 {
            for b in 0..3 {
                let d = dot(self.direction[a], self.direction[b]);
                let e = if a == b { 1.0 } else { 0.0 };
                if (d - e).abs() > 1e-4 {
                    return Err(Error::InvalidParam("grid direction is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index, x fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn unindex(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let r = idx / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }

    /// World position of a (possibly fractional) voxel coordinate.
    pub fn world(&self, v: Vec3) -> Vec3 {
        let mut p = self.origin;
        for a in 0..3 {
            p = add(p, scale(self.direction[a], v[a] * self.spacing[a]));
        }
        p
    }

    pub fn voxel_center(&self, idx: usize) -> Vec3 {
        let [i, j, k] = self.unindex(idx);
        self.world([i as f64, j as f64, k as f64])
    }

    /// Fractional voxel coordinate of a world point.
    pub fn continuous_index(&self, p: Vec3) -> Vec3 {
        let d = sub(p, self.origin);
        [
            dot(d, self.direction[0]) / self.spacing[0],
            dot(d, self.direction[1]) / self.spacing[1],
            dot(d, self.direction[2]) / self.spacing[2],
        ]
    }

    /// 4×4 voxel-to-world matrix, row-major.
    pub fn affine(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            for a in 0..3 {
                m[r][a] = self.direction[a][r] * self.spacing[a];
            }
            m[r][3] = self.origin[r];
        }
        m[3][3] = 1.0;
        m
    }

    /// Inverse of [`affine`](Self::affine); columns must have positive norm
    /// and be mutually orthogonal within `1e-4`.
    pub fn from_affine(dims: [usize; 3], m: [[f64; 4]; 4]) -> Result<Self> {
        let mut spacing = [0.0; 3];
        let mut direction = [[0.0; 3]; 3];
        for a in 0..3 {
            let col = [m[0][a], m[1][a], m[2][a]];
            let n = dot(col, col).sqrt();
            if !(n > 0.0) {
                return Err(Error::InvalidParam(format!("affine column {a} has zero norm")));
            }
            spacing[a] = n;
            direction[a] = scale(col, 1.0 / n);
        }
        let g = Grid {
            dims,
            spacing,
            origin: [m[0][3], m[1][3], m[2][3]],
            direction,
        };
        g.validate()?;
        Ok(g)
    }

    /// World-space bounding box of the voxel centres.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for c in 0..8 {
            let v = [
                if c & 1 == 0 { 0.0 } else { self.dims[0] as f64 - 1.0 },
                if c & 2 == 0 { 0.0 } else { self.dims[1] as f64 - 1.0 },
                if c & 4 == 0 { 0.0 } else { self.dims[2] as f64 - 1.0 },
            ];
            let p = self.world(v);
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(grid: Grid) -> Self {
        Volume {
            data: vec![0.0; grid.len()],
            grid,
        }
    }

    pub fn from_data(grid: Grid, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Shape(format!(
                "volume payload has {} values for dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        Ok(Volume { grid, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Trilinear interpolation at a fractional voxel coordinate; zero outside.
    pub fn sample_index(&self, v: Vec3) -> f64 {
        let d = self.grid.dims;
        let mut base = [0isize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            if !(v[a] > -1.0 && v[a] < d[a] as f64) {
                return 0.0;
            }
            let f = v[a].floor();
            base[a] = f as isize;
            frac[a] = v[a] - f;
        }
        let mut acc = 0.0;
        for c in 0..8 {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            let mut inside = true;
            for a in 0..3 {
                let hi = (c >> a) & 1 == 1;
                w *= if hi { frac[a] } else { 1.0 - frac[a] };
                let p = base[a] + hi as isize;
                if p < 0 || p >= d[a] as isize {
                    inside = false;
                    break;
                }
                idx[a] = p as usize;
            }
            if inside && w != 0.0 {
                acc += w * self.at(idx[0], idx[1], idx[2]) as f64;
            }
        }
        acc
    }

    /// Trilinear interpolation at a world point; zero outside the grid.
    pub fn sample(&self, p: Vec3) -> f64 {
        self.sample_index(self.grid.continuous_index(p))
    }

    pub fn same_geometry(&self, other: &Volume) -> bool {
        self.grid.dims == other.grid.dims
            && (0..3).all(|a| (self.grid.spacing[a] - other.grid.spacing[a]).abs() <= 1e-6)
    }
}

/// Anatomical plane of a stack; the slice normal is the listed world axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Axial,
    Coronal,
    Sagittal,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Axial, Orientation::Coronal, Orientation::Sagittal];

    /// Rotation taking slice axes (in-plane u, v and normal w) to world axes.
    pub fn frame(self) -> RigidTransform {
        use crate::geometry::Quat;
        let m = match self {
            // u = x, v = y, w = z
            Orientation::Axial => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            // u = x, v = z, w = -y
            Orientation::Coronal => [[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
            // u = y, v = z, w = x
            Orientation::Sagittal => [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        };
        RigidTransform::new(Quat::from_matrix(m), [0.0; 3])
    }

    /// Cycles through the three planes for stack counts above three.
    pub fn nth(i: usize) -> Orientation {
        Self::ALL[i % 3]
    }
}

/// Parallel 2D slices with per-slice rigid poses.
///
/// Pixel `(a, b)` of slice `s` sits at slice-frame position
/// `((a − (nx−1)/2)·r1, (b − (ny−1)/2)·r2, 0)`; `transforms[s]` maps it to world.
#[derive(Clone, Debug, PartialEq)]
pub struct Stack {
    pub name: String,
    pub nx: usize,
    pub ny: usize,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub gap: f64,
    pub transforms: Vec<RigidTransform>,
    /// `nx * ny * n_slices` intensities, x fastest then y then slice.
    pub data: Vec<f32>,
    pub mask: Vec<bool>,
    /// Per-slice intensity scale when known (simulator output).
    pub scales: Option<Vec<f64>>,
}

impl Stack {
    pub fn n_slices(&self) -> usize {
        self.transforms.len()
    }

    pub fn pixels_per_slice(&self) -> usize {
        self.nx * self.ny
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.nx * self.ny * self.n_slices();
        if self.nx == 0 || self.ny == 0 || self.transforms.is_empty() {
            return Err(Error::Shape(format!("stack {} is empty", self.name)));
        }
        if self.data.len() != n || self.mask.len() != n {
            return Err(Error::Shape(format!(
                "stack {}: {} slices of {}x{} need {} values, got data {} mask {}",
                self.name,
                self.n_slices(),
                self.nx,
                self.ny,
                n,
                self.data.len(),
                self.mask.len()
            )));
        }
        if !(self.r1 > 0.0 && self.r2 > 0.0 && self.r3 > 0.0 && self.gap >= 0.0) {
            return Err(Error::InvalidParam(format!("stack {}: bad spacing", self.name)));
        }
        if let Some(s) = &self.scales {
            if s.len() != self.n_slices() {
                return Err(Error::Shape(format!(
                    "stack {}: {} scales for {} slices",
                    self.name,
                    s.len(),
                    self.n_slices()
                )));
            }
        }
        Ok(())
    }

    /// Slice-frame position of in-plane pixel `(a, b)`.
    #[inline]
    pub fn pixel_position(&self, a: usize, b: usize) -> Vec3 {
        [
            (a as f64 - 0.5 * (self.nx as f64 - 1.0)) * self.r1,
            (b as f64 - 0.5 * (self.ny as f64 - 1.0)) * self.r2,
            0.0,
        ]
    }

    /// Offset of slice `s` along the normal from the stack centre.
    pub fn slice_offset(&self, s: usize) -> f64 {
        (s as f64 - 0.5 * (self.n_slices() as f64 - 1.0)) * (self.r3 + self.gap)
    }

    /// Motion-free pose of slice `s` for a stack centred at `center`.
    pub fn nominal_transform(orientation: Orientation, center: Vec3, offset: f64) -> RigidTransform {
        let f = orientation.frame();
        let t = add(center, f.apply_vector([0.0, 0.0, offset]));
        RigidTransform::new(f.rotation, t)
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}
