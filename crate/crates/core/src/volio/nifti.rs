//! Single-file NIfTI-1, float32, little-endian.

use std::io::Cursor;
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::volume::{Grid, Volume};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const VOX_OFFSET: usize = 352;

const DT_FLOAT32: i16 = 16;
const UNITS_MM: u8 = 2;
const XFORM_SCANNER: i16 = 1;

fn put_f32s(buf: &mut Vec<u8>, vals: &[f32]) {
    for &v in vals {
        buf.write_f32::<LE>(v).unwrap();
    }
}

/// Quaternion parameters `(b, c, d, qfac)` of a direction matrix.
fn qform_params(dir: [[f64; 3]; 3]) -> (f64, f64, f64, f64) {
    // columns are axis directions
    let mut r = [[0.0; 3]; 3];
    for row in 0..3 {
        for col in 0..3 {
            r[row][col] = dir[col][row];
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    let qfac = if det < 0.0 { -1.0 } else { 1.0 };
    if qfac < 0.0 {
        for row in r.iter_mut() {
            row[2] = -row[2];
        }
    }
    let q = crate::geometry::Quat::from_matrix(r);
    (q.x, q.y, q.z, qfac)
}

fn encode(vol: &Volume) -> Vec<u8> {
    let g = &vol.grid;
    let mut h = Vec::with_capacity(VOX_OFFSET + vol.len() * 4);
    h.write_i32::<LE>(HEADER_SIZE as i32).unwrap();
    h.extend_from_slice(&[0u8; 10]); // data_type
    h.extend_from_slice(&[0u8; 18]); // db_name
    h.write_i32::<LE>(0).unwrap(); // extents
    h.write_i16::<LE>(0).unwrap(); // session_error
    h.push(b'r'); // regular
    h.push(0); // dim_info
    let dims = [3, g.dims[0] as i16, g.dims[1] as i16, g.dims[2] as i16, 1, 1, 1, 1];
    for d in dims {
        h.write_i16::<LE>(d).unwrap();
    }
    put_f32s(&mut h, &[0.0; 3]); // intent_p1..3
    h.write_i16::<LE>(0).unwrap(); // intent_code
    h.write_i16::<LE>(DT_FLOAT32).unwrap();
    h.write_i16::<LE>(32).unwrap(); // bitpix
    h.write_i16::<LE>(0).unwrap(); // slice_start
    let (qb, qc, qd, qfac) = qform_params(g.direction);
    put_f32s(
        &mut h,
        &[
            qfac as f32,
            g.spacing[0] as f32,
            g.spacing[1] as f32,
            g.spacing[2] as f32,
            0.0,
            0.0,
            0.0,
            0.0,
        ],
    );
    put_f32s(&mut h, &[VOX_OFFSET as f32, 1.0, 0.0]); // vox_offset, scl_slope, scl_inter
    h.write_i16::<LE>(0).unwrap(); // slice_end
    h.push(0); // slice_code
    h.push(UNITS_MM);
    let (lo, hi) = vol.min_max();
    let (lo, hi) = if vol.is_empty() { (0.0, 0.0) } else { (lo, hi) };
    put_f32s(&mut h, &[hi, lo, 0.0, 0.0]); // cal_max, cal_min, slice_duration, toffset
    h.write_i32::<LE>(0).unwrap(); // glmax
    h.write_i32::<LE>(0).unwrap(); // glmin
    let mut descrip = [0u8; 80];
    let text = b"svrecon";
    descrip[..text.len()].copy_from_slice(text);
    h.extend_from_slice(&descrip);
    h.extend_from_slice(&[0u8; 24]); // aux_file
    h.write_i16::<LE>(XFORM_SCANNER).unwrap(); // qform_code
    h.write_i16::<LE>(XFORM_SCANNER).unwrap(); // sform_code
    put_f32s(
        &mut h,
        &[
            qb as f32,
            qc as f32,
            qd as f32,
            g.origin[0] as f32,
            g.origin[1] as f32,
            g.origin[2] as f32,
        ],
    );
    let a = g.affine();
    for row in a.iter().take(3) {
        put_f32s(&mut h, &[row[0] as f32, row[1] as f32, row[2] as f32, row[3] as f32]);
    }
    h.extend_from_slice(&[0u8; 16]); // intent_name
    h.extend_from_slice(b"n+1\0");
    debug_assert_eq!(h.len(), HEADER_SIZE);
    h.extend_from_slice(&[0u8; 4]); // no extensions
    for &v in &vol.data {
        h.write_f32::<LE>(v).unwrap();
    }
    h
}

/// Writes `vol` as a single-file NIfTI-1 image (atomic).
pub fn write_volume(vol: &Volume, path: &Path) -> Result<()> {
    if vol.grid.dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::InvalidParam(format!("dims {:?} exceed the NIfTI-1 limit", vol.grid.dims)));
    }
    super::write_atomic(path, &encode(vol))
}

fn at<T>(bytes: &[u8], off: usize, f: impl FnOnce(&mut Cursor<&[u8]>) -> std::io::Result<T>) -> T {
    let mut c = Cursor::new(&bytes[off..]);
    f(&mut c).expect("header slice is long enough")
}

fn f32s(bytes: &[u8], off: usize, n: usize) -> Vec<f64> {
    (0..n).map(|i| at(bytes, off + 4 * i, |c| c.read_f32::<LE>()) as f64).collect()
}

fn quatern_affine(bytes: &[u8], pixdim: &[f64]) -> [[f64; 4]; 4] {
    let q = f32s(bytes, 256, 6);
    let (b, c, d) = (q[0], q[1], q[2]);
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let r = crate::geometry::Quat { w: a, x: b, y: c, z: d }.to_matrix();
    let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let s = [pixdim[1], pixdim[2], pixdim[3] * qfac];
    let mut m = [[0.0; 4]; 4];
    for row in 0..3 {
        for col in 0..3 {
            m[row][col] = r[row][col] * s[col];
        }
    }
    m[0][3] = q[3];
    m[1][3] = q[4];
    m[2][3] = q[5];
    m[3][3] = 1.0;
    m
}

/// Reads a single-file NIfTI-1 float32 volume.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = super::read_file(path)?;
    let p = path.to_path_buf();
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Truncated {
            path: p,
            expected: HEADER_SIZE as u64,
            found: bytes.len() as u64,
        });
    }
    let sizeof_hdr = at(&bytes, 0, |c| c.read_i32::<LE>());
    if sizeof_hdr != HEADER_SIZE as i32 {
        let reason = if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            "big-endian files are not supported".to_string()
        } else {
            format!("header size {sizeof_hdr}, expected 348")
        };
        return Err(Error::UnsupportedFormat { path: p, reason });
    }
    match &bytes[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => {
            return Err(Error::UnsupportedFormat {
                path: p,
                reason: "detached header/image pair (ni1); only single-file n+1 is supported".into(),
            })
        }
        _ => return Err(Error::BadMagic { path: p }),
    }
    let dim: Vec<i16> = (0..8).map(|i| at(&bytes, 40 + 2 * i, |c| c.read_i16::<LE>())).collect();
    let datatype = at(&bytes, 70, |c| c.read_i16::<LE>());
    let bitpix = at(&bytes, 72, |c| c.read_i16::<LE>());
    if datatype != DT_FLOAT32 || bitpix != 32 {
        return Err(Error::UnsupportedDatatype { path: p, code: datatype });
    }
    let nd = dim[0];
    if !(1..=7).contains(&nd) {
        return Err(Error::UnsupportedFormat {
            path: p,
            reason: format!("dim[0] = {nd}"),
        });
    }
    let mut dims = [1usize; 3];
    for a in 0..3 {
        if (a as i16) < nd {
            if dim[a + 1] < 1 {
                return Err(Error::UnsupportedFormat {
                    path: p,
                    reason: format!("dim[{}] = {}", a + 1, dim[a + 1]),
                });
            }
            dims[a] = dim[a + 1] as usize;
        }
    }
    if (4..=nd as usize).any(|a| dim[a] > 1) {
        return Err(Error::UnsupportedFormat {
            path: p,
            reason: "only single-frame 3D volumes are supported".into(),
        });
    }
    let pixdim = f32s(&bytes, 76, 8);
    let vox_offset = at(&bytes, 108, |c| c.read_f32::<LE>());
    if !(vox_offset >= VOX_OFFSET as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::UnsupportedFormat {
            path: p,
            reason: format!("vox_offset {vox_offset}"),
        });
    }
    let slope = at(&bytes, 112, |c| c.read_f32::<LE>());
    let inter = at(&bytes, 116, |c| c.read_f32::<LE>());
    let qform_code = at(&bytes, 252, |c| c.read_i16::<LE>());
    let sform_code = at(&bytes, 254, |c| c.read_i16::<LE>());
    let affine = if sform_code > 0 {
        let s = f32s(&bytes, 280, 12);
        [
            [s[0], s[1], s[2], s[3]],
            [s[4], s[5], s[6], s[7]],
            [s[8], s[9], s[10], s[11]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    } else if qform_code > 0 {
        quatern_affine(&bytes, &pixdim)
    } else {
        [
            [pixdim[1], 0.0, 0.0, 0.0],
            [0.0, pixdim[2], 0.0, 0.0],
            [0.0, 0.0, pixdim[3], 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    };
    let grid = Grid::from_affine(dims, affine)?;
    let n = grid.len();
    let start = vox_offset as usize;
    let need = start as u64 + 4 * n as u64;
    if (bytes.len() as u64) < need {
        return Err(Error::Truncated {
            path: p,
            expected: need,
            found: bytes.len() as u64,
        });
    }
    let mut c = Cursor::new(&bytes[start..]);
    let mut data = vec![0f32; n];
    c.read_f32_into::<LE>(&mut data).map_err(|e| Error::io(path, e))?;
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    Volume::from_data(grid, data)
}
