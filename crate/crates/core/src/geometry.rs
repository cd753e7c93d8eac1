//! Rigid transforms and the Gaussian slice point-spread function.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Unit quaternion `w + xi + yj + zk`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Normalized, with `w >= 0` as the canonical sign.
    pub fn normalized(self) -> Quat {
        let n = self.norm();
        let s = if self.w < 0.0 { -1.0 / n } else { 1.0 / n };
        Quat {
            w: self.w * s,
            x: self.x * s,
            y: self.y * s,
            z: self.z * s,
        }
    }

    pub fn mul(self, o: Quat) -> Quat {
        Quat {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }

    pub fn conj(self) -> Quat {
        Quat {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Rotation by `|v|` radians about `v / |v|`.
    pub fn from_rotvec(v: Vec3) -> Quat {
        let angle = norm(v);
        if angle < 1e-12 {
            return Quat {
                w: 1.0,
                x: 0.5 * v[0],
                y: 0.5 * v[1],
                z: 0.5 * v[2],
            }
            .normalized();
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let k = s / angle;
        Quat {
            w: c,
            x: v[0] * k,
            y: v[1] * k,
            z: v[2] * k,
        }
        .normalized()
    }

    pub fn to_rotvec(self) -> Vec3 {
        let q = self.normalized();
        let s = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
        if s < 1e-12 {
            return [2.0 * q.x, 2.0 * q.y, 2.0 * q.z];
        }
        let angle = 2.0 * s.atan2(q.w);
        [q.x / s * angle, q.y / s * angle, q.z / s * angle]
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        // v' = v + 2w (u x v) + 2 u x (u x v)
        let u = [self.x, self.y, self.z];
        let t = scale(cross(u, v), 2.0);
        add(add(v, scale(t, self.w)), cross(u, t))
    }

    pub fn to_matrix(self) -> [[f64; 3]; 3] {
        let Quat { w, x, y, z } = self;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Nearest rotation to a (possibly drifted) 3×3 matrix.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Quat {
        let tr = m[0][0] + m[1][1] + m[2][2];
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Quat {
                w: 0.25 * s,
                x: (m[2][1] - m[1][2]) / s,
                y: (m[0][2] - m[2][0]) / s,
                z: (m[1][0] - m[0][1]) / s,
            }
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            Quat {
                w: (m[2][1] - m[1][2]) / s,
                x: 0.25 * s,
                y: (m[0][1] + m[1][0]) / s,
                z: (m[0][2] + m[2][0]) / s,
            }
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            Quat {
                w: (m[0][2] - m[2][0]) / s,
                x: (m[0][1] + m[1][0]) / s,
                y: 0.25 * s,
                z: (m[1][2] + m[2][1]) / s,
            }
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            Quat {
                w: (m[1][0] - m[0][1]) / s,
                x: (m[0][2] + m[2][0]) / s,
                y: (m[1][2] + m[2][1]) / s,
                z: 0.25 * s,
            }
        };
        q.normalized()
    }
}

/// Rigid map from slice coordinates to world coordinates (mm): rotate, then translate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: Quat::IDENTITY,
        translation: [0.0; 3],
    };

    pub fn new(rotation: Quat, translation: Vec3) -> Self {
        RigidTransform {
            rotation: rotation.normalized(),
            translation,
        }
    }

    pub fn translation(t: Vec3) -> Self {
        Self::new(Quat::IDENTITY, t)
    }

    pub fn from_rotvec(rotvec: Vec3, translation: Vec3) -> Self {
        Self::new(Quat::from_rotvec(rotvec), translation)
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        add(self.rotation.rotate(p), self.translation)
    }

    pub fn apply_vector(&self, v: Vec3) -> Vec3 {
        self.rotation.rotate(v)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation.mul(other.rotation),
            add(self.rotation.rotate(other.translation), self.translation),
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let qi = self.rotation.conj();
        RigidTransform::new(qi, scale(qi.rotate(self.translation), -1.0))
    }

    /// 4×4 homogeneous matrix, row-major.
    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        let r = self.rotation.to_matrix();
        let t = self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    /// Parses a homogeneous matrix; returns the transform and the
    /// orthonormality drift of its rotation block (max |RᵀR − I| entry).
    pub fn from_matrix(m: [[f64; 4]; 4]) -> Result<(RigidTransform, f64)> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("non-finite transform matrix".into()));
        }
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidParam(format!(
                "transform last row {:?} is not [0, 0, 0, 1]",
                m[3]
            )));
        }
        let r = [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ];
        let mut drift = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                drift = drift.max((d - e).abs());
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if det <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "transform rotation block has determinant {det}"
            )));
        }
        let t = RigidTransform::new(Quat::from_matrix(r), [m[0][3], m[1][3], m[2][3]]);
        Ok((t, drift))
    }
}

/// Diagonal covariance of the Gaussian slice PSF (mm²), in slice coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsfSpec {
    pub sigma2: Vec3,
}

/// FWHM-to-sigma factor `2 sqrt(2 ln 2)`.
pub const FWHM_TO_SIGMA: f64 = 2.355;

/// In-plane FWHM is 1.2× the pixel spacing; through-plane FWHM is the slice thickness.
pub fn psf_covariance(r1: f64, r2: f64, r3: f64) -> Result<PsfSpec> {
    if !(r1 > 0.0 && r2 > 0.0 && r3 > 0.0) {
        return Err(Error::InvalidParam(format!(
            "PSF spacings must be positive, got ({r1}, {r2}, {r3})"
        )));
    }
    let s = |fwhm: f64| (fwhm / FWHM_TO_SIGMA).powi(2);
    Ok(PsfSpec {
        sigma2: [s(1.2 * r1), s(1.2 * r2), s(r3)],
    })
}

impl PsfSpec {
    pub fn isotropic(sigma2: f64) -> Self {
        PsfSpec {
            sigma2: [sigma2; 3],
        }
    }

    pub fn det(&self) -> f64 {
        self.sigma2[0] * self.sigma2[1] * self.sigma2[2]
    }
}

/// Trivariate normal density `g(u; Σ)` for diagonal Σ.
pub fn gaussian_weight(u: Vec3, psf: &PsfSpec) -> f64 {
    let q: f64 = (0..3).map(|a| u[a] * u[a] / psf.sigma2[a]).sum();
    let norm = ((2.0 * std::f64::consts::PI).powi(3) * psf.det()).sqrt();
    (-0.5 * q).exp() / norm
}

/// One PSF sample: the world point and its slice-frame offset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsfSample {
    pub world: Vec3,
    pub offset: Vec3,
}

/// Draws a slice-frame offset `u ~ N(0, Σ)`.
pub fn draw_offset<R: Rng + ?Sized>(rng: &mut R, psf: &PsfSpec) -> Vec3 {
    let mut u = [0.0; 3];
    for a in 0..3 {
        let z: f64 = rng.sample(StandardNormal);
        u[a] = z * psf.sigma2[a].sqrt();
    }
    u
}

/// `K` samples `y_k = T (p + u_k)` with `u_k ~ N(0, Σ)`.
///
/// `K` must be even so the samples split into `K/2` pairs.
pub fn sample_psf<R: Rng + ?Sized>(
    rng: &mut R,
    pixel: Vec3,
    transform: &RigidTransform,
    psf: &PsfSpec,
    k: usize,
) -> Result<Vec<PsfSample>> {
    check_sample_count(k)?;
    Ok((0..k)
        .map(|_| {
            let offset = draw_offset(rng, psf);
            PsfSample {
                world: transform.apply(add(pixel, offset)),
                offset,
            }
        })
        .collect())
}

pub(crate) fn check_sample_count(k: usize) -> Result<()> {
    if k < 2 || k % 2 != 0 {
        return Err(Error::InvalidParam(format!(
            "PSF sample count must be even and >= 2, got {k}"
        )));
    }
    Ok(())
}
