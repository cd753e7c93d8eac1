//! Volume quality metrics. PSNR and SSIM are anchored on the reference
//! volume (its range is the default data range).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// SSIM window edge length.
pub const SSIM_WINDOW: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `+inf` when the volumes are identical.
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub ncc: f64,
    pub range: f64,
}

fn check_shapes(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("volume dims {:?} and {:?} differ", a.dims(), b.dims())));
    }
    if !a.same_geometry(b) {
        return Err(Error::Shape(format!(
            "voxel spacings {:?} and {:?} differ",
            a.grid.spacing, b.grid.spacing
        )));
    }
    Ok(())
}

/// `max − min` of the reference.
pub fn default_range(reference: &Volume) -> f64 {
    let (lo, hi) = reference.min_max();
    (hi - lo) as f64
}

fn mse(a: &Volume, b: &Volume) -> Result<f64> {
    check_shapes(a, b)?;
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

pub fn rmse(reference: &Volume, test: &Volume) -> Result<f64> {
    Ok(mse(reference, test)?.sqrt())
}

pub fn psnr(reference: &Volume, test: &Volume, range: f64) -> Result<f64> {
    if !(range > 0.0) {
        return Err(Error::InvalidParam(format!("data range must be positive, got {range}")));
    }
    let m = mse(reference, test)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / m).log10())
}

/// Pearson correlation of the voxel intensities.
pub fn ncc(reference: &Volume, test: &Volume) -> Result<f64> {
    check_shapes(reference, test)?;
    let n = reference.len() as f64;
    let ma = reference.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = test.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in reference.data.iter().zip(&test.data) {
        let (a, b) = (x as f64 - ma, y as f64 - mb);
        sab += a * b;
        saa += a * a;
        sbb += b * b;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::InvalidParam("ncc is undefined for a constant volume".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Summed-volume table with a zero border: `t[i,j,k] = Σ_{<i,<j,<k} f`.
struct Integral {
    d: [usize; 3],
    t: Vec<f64>,
}

impl Integral {
    fn new<F: Fn(usize) -> f64>(dims: [usize; 3], f: F) -> Self {
        let d = [dims[0] + 1, dims[1] + 1, dims[2] + 1];
        let mut t = vec![0.0; d[0] * d[1] * d[2]];
        let at = |i: usize, j: usize, k: usize| i + d[0] * (j + d[1] * k);
        for k in 1..d[2] {
            for j in 1..d[1] {
                let mut row = 0.0;
                for i in 1..d[0] {
                    row += f((i - 1) + dims[0] * ((j - 1) + dims[1] * (k - 1)));
                    t[at(i, j, k)] = row + t[at(i, j - 1, k)] + t[at(i, j, k - 1)] - t[at(i, j - 1, k - 1)];
                }
            }
        }
        Integral { d, t }
    }

    /// Sum over the box starting at `lo` with edge `w`.
    fn box_sum(&self, lo: [usize; 3], w: usize) -> f64 {
        let d = self.d;
        let at = |i: usize, j: usize, k: usize| self.t[i + d[0] * (j + d[1] * k)];
        let [a, b, c] = lo;
        let [x, y, z] = [a + w, b + w, c + w];
        at(x, y, z) - at(a, y, z) - at(x, b, z) - at(x, y, c) + at(a, b, z) + at(a, y, c) + at(x, b, c) - at(a, b, c)
    }
}

/// Mean local SSIM over every full 7³ window, with sample (N−1) covariances
/// and `C1 = (0.01 L)²`, `C2 = (0.03 L)²`.
pub fn ssim(reference: &Volume, test: &Volume, range: f64) -> Result<f64> {
    check_shapes(reference, test)?;
    if !(range > 0.0) {
        return Err(Error::InvalidParam(format!("data range must be positive, got {range}")));
    }
    let dims = reference.dims();
    let w = SSIM_WINDOW;
    if dims.iter().any(|&n| n < w) {
        return Err(Error::Shape(format!("volume {dims:?} is smaller than the {w}³ SSIM window")));
    }
    let a = |i: usize| reference.data[i] as f64;
    let b = |i: usize| test.data[i] as f64;
    let sa = Integral::new(dims, a);
    let sb = Integral::new(dims, b);
    let saa = Integral::new(dims, |i| a(i) * a(i));
    let sbb = Integral::new(dims, |i| b(i) * b(i));
    let sab = Integral::new(dims, |i| a(i) * b(i));
    let np = (w * w * w) as f64;
    let cov_norm = np / (np - 1.0);
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let mut acc = 0.0;
    let mut count = 0usize;
    for k in 0..=dims[2] - w {
        for j in 0..=dims[1] - w {
            for i in 0..=dims[0] - w {
                let lo = [i, j, k];
                let ua = sa.box_sum(lo, w) / np;
                let ub = sb.box_sum(lo, w) / np;
                let va = cov_norm * (saa.box_sum(lo, w) / np - ua * ua);
                let vb = cov_norm * (sbb.box_sum(lo, w) / np - ub * ub);
                let vab = cov_norm * (sab.box_sum(lo, w) / np - ua * ub);
                acc += ((2.0 * ua * ub + c1) * (2.0 * vab + c2)) / ((ua * ua + ub * ub + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

/// All four metrics; `range` defaults to the reference range.
pub fn evaluate(reference: &Volume, test: &Volume, range: Option<f64>) -> Result<MetricReport> {
    let range = range.unwrap_or_else(|| default_range(reference));
    Ok(MetricReport {
        psnr: psnr(reference, test, range)?,
        ssim: ssim(reference, test, range)?,
        rmse: rmse(reference, test)?,
        ncc: ncc(reference, test)?,
        range,
    })
}

pub const CSV_HEADER: &str = "ref,test,psnr,ssim,rmse,ncc,range";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One CSV row (no trailing newline). Identical volumes print `psnr` as `inf`.
pub fn csv_row(reference: &str, test: &str, r: &MetricReport) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        csv_field(reference),
        csv_field(test),
        r.psnr,
        r.ssim,
        r.rmse,
        r.ncc,
        r.range
    )
}

pub fn write_csv(rows: &[(String, String, MetricReport)], path: &Path) -> Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (a, b, r) in rows {
        out.push_str(&csv_row(a, b, r));
        out.push('\n');
    }
    crate::volio::write_atomic(path, out.as_bytes())
}
