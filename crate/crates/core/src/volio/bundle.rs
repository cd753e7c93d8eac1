//! Stack bundles: a `stacks.json` index plus one NIfTI image and one mask
//! image per stack (slices along the third axis).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::volume::{Grid, Stack, Volume};

use super::nifti::{read_volume, write_volume};

pub const BUNDLE_FILE: &str = "stacks.json";
pub const TRUTH_FILE: &str = "truth_transforms.json";
const FORMAT: &str = "svrecon-stacks";
const VERSION: u32 = 1;

/// Drift in a transform's rotation block above which it is re-orthonormalized.
const DRIFT_TOL: f64 = 1e-4;

/// Per-stack entry of `stacks.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackMeta {
    pub name: String,
    pub volume: String,
    pub mask: String,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    #[serde(default)]
    pub gap: f64,
    /// One row-major 4×4 matrix per slice, flattened to 16 numbers.
    pub transforms: Vec<[f64; 16]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scales: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleIndex {
    format: String,
    version: u32,
    stacks: Vec<StackMeta>,
}

/// Named per-stack transform lists (`truth_transforms.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSet {
    pub stacks: Vec<(String, Vec<[f64; 16]>)>,
}

fn flatten(t: &RigidTransform) -> [f64; 16] {
    let m = t.to_matrix();
    let mut out = [0.0; 16];
    for r in 0..4 {
        out[r * 4..r * 4 + 4].copy_from_slice(&m[r]);
    }
    out
}

fn unflatten(v: &[f64; 16], what: &str) -> Result<RigidTransform> {
    let mut m = [[0.0; 4]; 4];
    for r in 0..4 {
        m[r].copy_from_slice(&v[r * 4..r * 4 + 4]);
    }
    let (t, drift) = RigidTransform::from_matrix(m).map_err(|e| Error::Config(format!("{what}: {e}")))?;
    if drift > DRIFT_TOL {
        log::warn!("{what}: rotation drift {drift:.2e}, re-orthonormalized");
    }
    Ok(t)
}

impl TransformSet {
    pub fn from_stacks(stacks: &[Stack]) -> Self {
        TransformSet {
            stacks: stacks
                .iter()
                .map(|s| (s.name.clone(), s.transforms.iter().map(flatten).collect()))
                .collect(),
        }
    }

    pub fn transforms(&self) -> Result<Vec<Vec<RigidTransform>>> {
        self.stacks
            .iter()
            .map(|(name, ts)| {
                ts.iter()
                    .enumerate()
                    .map(|(i, m)| unflatten(m, &format!("stack {name} slice {i}")))
                    .collect()
            })
            .collect()
    }
}

pub fn write_transforms(set: &TransformSet, path: &Path) -> Result<()> {
    super::write_atomic(path, serde_json::to_string_pretty(set)?.as_bytes())
}

pub fn read_transforms(path: &Path) -> Result<TransformSet> {
    let bytes = super::read_file(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Image geometry of a stack: in-plane axes of the middle slice, spacing
/// `(r1, r2, r3 + gap)`. Informational; the per-slice transforms are authoritative.
fn stack_grid(s: &Stack) -> Result<Grid> {
    let mid = s.n_slices() / 2;
    let t = s.transforms[mid];
    let dirs = [
        t.apply_vector([1.0, 0.0, 0.0]),
        t.apply_vector([0.0, 1.0, 0.0]),
        t.apply_vector([0.0, 0.0, 1.0]),
    ];
    let spacing = [s.r1, s.r2, s.r3 + s.gap];
    let mut g = Grid {
        dims: [s.nx, s.ny, s.n_slices()],
        spacing,
        origin: [0.0; 3],
        direction: dirs,
    };
    let p0 = s.pixel_position(0, 0);
    let shift = s.slice_offset(0) - s.slice_offset(mid);
    let local = [p0[0], p0[1], shift];
    let w = t.apply(local);
    g.origin = w;
    g.validate()?;
    Ok(g)
}

/// Writes each stack as `stack_XXX.nii` + `mask_XXX.nii` and an index.
pub fn write_stack_bundle(stacks: &[Stack], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut metas = Vec::with_capacity(stacks.len());
    for (i, s) in stacks.iter().enumerate() {
        s.validate()?;
        let grid = stack_grid(s)?;
        let vol_name = format!("stack_{i:03}.nii");
        let mask_name = format!("mask_{i:03}.nii");
        write_volume(&Volume::from_data(grid, s.data.clone())?, &dir.join(&vol_name))?;
        let mask = s.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        write_volume(&Volume::from_data(grid, mask)?, &dir.join(&mask_name))?;
        metas.push(StackMeta {
            name: s.name.clone(),
            volume: vol_name,
            mask: mask_name,
            r1: s.r1,
            r2: s.r2,
            r3: s.r3,
            gap: s.gap,
            transforms: s.transforms.iter().map(flatten).collect(),
            scales: s.scales.clone(),
        });
    }
    let index = BundleIndex {
        format: FORMAT.into(),
        version: VERSION,
        stacks: metas,
    };
    super::write_atomic(&dir.join(BUNDLE_FILE), serde_json::to_string_pretty(&index)?.as_bytes())
}

/// Reads a bundle written by [`write_stack_bundle`].
pub fn read_stack_bundle(dir: &Path) -> Result<Vec<Stack>> {
    let index_path = dir.join(BUNDLE_FILE);
    let bytes = super::read_file(&index_path)?;
    let index: BundleIndex = serde_json::from_slice(&bytes)?;
    if index.format != FORMAT || index.version != VERSION {
        return Err(Error::UnsupportedFormat {
            path: index_path,
            reason: format!("format {} version {}", index.format, index.version),
        });
    }
    let mut out = Vec::with_capacity(index.stacks.len());
    for m in index.stacks {
        let vol = read_volume(&dir.join(&m.volume))?;
        let mask = read_volume(&dir.join(&m.mask))?;
        let [nx, ny, ns] = vol.grid.dims;
        if mask.grid.dims != vol.grid.dims {
            return Err(Error::Shape(format!(
                "stack {}: mask dims {:?} differ from image dims {:?}",
                m.name, mask.grid.dims, vol.grid.dims
            )));
        }
        if m.transforms.len() < ns {
            return Err(Error::Shape(format!(
                "stack {} slice {}: missing transform ({} transforms for {ns} slices)",
                m.name,
                m.transforms.len(),
                m.transforms.len()
            )));
        }
        if m.transforms.len() > ns {
            return Err(Error::Shape(format!(
                "stack {}: {} transforms for {ns} slices",
                m.name,
                m.transforms.len()
            )));
        }
        let transforms = m
            .transforms
            .iter()
            .enumerate()
            .map(|(i, t)| unflatten(t, &format!("stack {} slice {i}", m.name)))
            .collect::<Result<Vec<_>>>()?;
        let s = Stack {
            name: m.name,
            nx,
            ny,
            r1: m.r1,
            r2: m.r2,
            r3: m.r3,
            gap: m.gap,
            transforms,
            data: vol.data,
            mask: mask.data.iter().map(|&v| v > 0.5).collect(),
            scales: m.scales,
        };
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}
