//! Read-only NIfTI-1 ingestion (plain or gzip-compressed single-file
//! containers). Only what volume loading needs is parsed: dim, datatype,
//! pixdim, vox_offset, scaling, and the magic. Data is converted to f32 and
//! axes are ordered so the file's fastest-varying axis remains the
//! fastest-varying axis of `Volume` (shape = (dim3, dim2, dim1)).

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Volume;

const HDR_SIZE: usize = 348;
const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_MAGIC: usize = 344;

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

pub fn read_nifti(path: &Path) -> Result<Volume> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip decode failed: {e}")))?;
        out
    } else {
        raw
    };
    if bytes.len() < HDR_SIZE {
        return Err(Error::format(path, "file shorter than the 348-byte header"));
    }
    let magic = &bytes[OFF_MAGIC..OFF_MAGIC + 4];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(Error::format(path, "missing NIfTI-1 magic"));
    }
    let ndim = i16_at(&bytes, OFF_DIM) as usize;
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(path, format!("invalid dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 7];
    for (i, d) in dims.iter_mut().enumerate().take(ndim) {
        let v = i16_at(&bytes, OFF_DIM + 2 * (i + 1));
        if v < 1 {
            return Err(Error::format(path, format!("non-positive dim[{}] = {v}", i + 1)));
        }
        *d = v as usize;
    }
    if dims[3..].iter().any(|&d| d != 1) {
        return Err(Error::format(path, "volumes with >3 non-singleton dimensions are unsupported"));
    }
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let n = nx * ny * nz;

    let datatype = i16_at(&bytes, OFF_DATATYPE);
    let pix = |i: usize| f32_at(&bytes, OFF_PIXDIM + 4 * i) as f64;
    let spacing_file = (pix(1).abs(), pix(2).abs(), pix(3).abs());
    let fix = |s: f64| if s > 0.0 && s.is_finite() { s } else { 1.0 };
    let spacing = (fix(spacing_file.2), fix(spacing_file.1), fix(spacing_file.0));

    let vox_offset = f32_at(&bytes, OFF_VOX_OFFSET).max(HDR_SIZE as f32) as usize;
    let slope = {
        let s = f32_at(&bytes, OFF_SCL_SLOPE);
        if s == 0.0 || !s.is_finite() {
            1.0
        } else {
            s as f64
        }
    };
    let inter = {
        let i = f32_at(&bytes, OFF_SCL_INTER);
        if i.is_finite() {
            i as f64
        } else {
            0.0
        }
    };

    let elem = match datatype {
        2 => 1,      // uint8
        4 => 2,      // int16
        8 => 4,      // int32
        16 => 4,     // float32
        64 => 8,     // float64
        512 => 2,    // uint16
        other => {
            return Err(Error::format(path, format!("unsupported NIfTI datatype {other}")));
        }
    };
    let need = vox_offset + n * elem;
    if bytes.len() < need {
        return Err(Error::format(
            path,
            format!("payload needs {need} bytes, file holds {}", bytes.len()),
        ));
    }
    let body = &bytes[vox_offset..vox_offset + n * elem];
    let mut data = vec![0f32; n];
    for i in 0..n {
        let v = match datatype {
            2 => body[i] as f64,
            4 => i16::from_le_bytes([body[2 * i], body[2 * i + 1]]) as f64,
            8 => i32::from_le_bytes([
                body[4 * i],
                body[4 * i + 1],
                body[4 * i + 2],
                body[4 * i + 3],
            ]) as f64,
            16 => f32::from_le_bytes([
                body[4 * i],
                body[4 * i + 1],
                body[4 * i + 2],
                body[4 * i + 3],
            ]) as f64,
            64 => f64::from_le_bytes([
                body[8 * i],
                body[8 * i + 1],
                body[8 * i + 2],
                body[8 * i + 3],
                body[8 * i + 4],
                body[8 * i + 5],
                body[8 * i + 6],
                body[8 * i + 7],
            ]),
            512 => u16::from_le_bytes([body[2 * i], body[2 * i + 1]]) as f64,
            _ => unreachable!("datatype validated above"),
        };
        let scaled = slope * v + inter;
        data[i] = if scaled.is_finite() { scaled as f32 } else { 0.0 };
    }
    // NIfTI stores x fastest; Volume stores the last shape axis fastest, so
    // the memory layout is preserved under shape (nz, ny, nx).
    let case_id = path
        .file_name()
        .map(|s| {
            let s = s.to_string_lossy();
            s.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
        })
        .unwrap_or_else(|| "nifti".into());
    Volume::new((nz, ny, nx), spacing, data, case_id)
}
