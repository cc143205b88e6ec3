//! Volume containers and file I/O. On-disk format: raw little-endian payload
//! (`.vol` = f32 image, `.lbl` = u8 labels), row-major with the last axis
//! varying fastest, plus a `.json` sidecar {shape, spacing, dtype,
//! num_classes}. Gzip-compressed NIfTI-1 files are also readable (see
//! `nifti`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub shape: (usize, usize, usize),
    /// Millimeters per voxel along each axis, same axis order as `shape`.
    pub spacing: (f64, f64, f64),
    pub data: Vec<f32>,
    pub case_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub shape: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
    pub labels: Vec<u8>,
    /// Total class count including background (class 0).
    pub num_classes: usize,
}

fn check_shape_spacing(shape: (usize, usize, usize), spacing: (f64, f64, f64)) -> Result<()> {
    if shape.0 == 0 || shape.1 == 0 || shape.2 == 0 {
        return Err(Error::Shape(format!("all dimensions must be >= 1, got {shape:?}")));
    }
    if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0)
        || !spacing.0.is_finite()
        || !spacing.1.is_finite()
        || !spacing.2.is_finite()
    {
        return Err(Error::Shape(format!("spacing components must be positive, got {spacing:?}")));
    }
    Ok(())
}

pub fn numel(shape: (usize, usize, usize)) -> usize {
    shape.0 * shape.1 * shape.2
}

impl Volume {
    pub fn new(
        shape: (usize, usize, usize),
        spacing: (f64, f64, f64),
        data: Vec<f32>,
        case_id: impl Into<String>,
    ) -> Result<Self> {
        check_shape_spacing(shape, spacing)?;
        if data.len() != numel(shape) {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("volume contains non-finite values".into()));
        }
        Ok(Volume { shape, spacing, data, case_id: case_id.into() })
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[(z * self.shape.1 + y) * self.shape.2 + x]
    }
}

impl LabelVolume {
    pub fn new(
        shape: (usize, usize, usize),
        spacing: (f64, f64, f64),
        labels: Vec<u8>,
        num_classes: usize,
    ) -> Result<Self> {
        check_shape_spacing(shape, spacing)?;
        if num_classes < 1 {
            return Err(Error::Shape("num_classes must be >= 1".into()));
        }
        if labels.len() != numel(shape) {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} labels, got {}",
                shape,
                numel(shape),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Shape(format!(
                "label value {bad} out of range for num_classes {num_classes}"
            )));
        }
        Ok(LabelVolume { shape, spacing, labels, num_classes })
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> u8 {
        self.labels[(z * self.shape.1 + y) * self.shape.2 + x]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    #[serde(default)]
    num_classes: Option<usize>,
}

fn sidecar_path(vol_path: &Path) -> PathBuf {
    vol_path.with_extension("json")
}

fn label_path(vol_path: &Path) -> PathBuf {
    vol_path.with_extension("lbl")
}

/// Writes `v` (and labels, when given) to `path`, which must end in `.vol`.
/// Produces `stem.vol`, `stem.json`, and optionally `stem.lbl`.
pub fn write_volume(v: &Volume, l: Option<&LabelVolume>, path: &Path) -> Result<()> {
    if path.extension().and_then(|e| e.to_str()) != Some("vol") {
        return Err(Error::Config(format!("volume path must end in .vol: {}", path.display())));
    }
    if let Some(lv) = l {
        if lv.shape != v.shape {
            return Err(Error::Shape(format!(
                "label shape {:?} != volume shape {:?}",
                lv.shape, v.shape
            )));
        }
    }
    let mut payload = Vec::with_capacity(v.data.len() * 4);
    for x in &v.data {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, payload).map_err(|e| Error::io(path, e))?;
    let sc = Sidecar {
        shape: [v.shape.0, v.shape.1, v.shape.2],
        spacing: [v.spacing.0, v.spacing.1, v.spacing.2],
        dtype: "f32le".into(),
        num_classes: l.map(|lv| lv.num_classes),
    };
    let scp = sidecar_path(path);
    fs::write(&scp, serde_json::to_vec_pretty(&sc).expect("sidecar serializes"))
        .map_err(|e| Error::io(&scp, e))?;
    if let Some(lv) = l {
        let lp = label_path(path);
        fs::write(&lp, &lv.labels).map_err(|e| Error::io(&lp, e))?;
    }
    Ok(())
}

/// Reads a `.vol` + sidecar pair (label channel attached when `stem.lbl`
/// exists), or a NIfTI-1 file (`.nii` / `.nii.gz`, image only).
pub fn read_volume(path: &Path) -> Result<(Volume, Option<LabelVolume>)> {
    let name = path.to_string_lossy();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        let v = crate::nifti::read_nifti(path)?;
        return Ok((v, None));
    }
    if path.extension().and_then(|e| e.to_str()) != Some("vol") {
        return Err(Error::Config(format!(
            "unsupported volume file (expected .vol, .nii, or .nii.gz): {}",
            path.display()
        )));
    }
    let scp = sidecar_path(path);
    let sc_raw = fs::read(&scp).map_err(|e| Error::io(&scp, e))?;
    let sc: Sidecar = serde_json::from_slice(&sc_raw)
        .map_err(|e| Error::format(&scp, format!("bad sidecar JSON: {e}")))?;
    if sc.dtype != "f32le" {
        return Err(Error::format(path, format!("unsupported dtype {:?}", sc.dtype)));
    }
    let shape = (sc.shape[0], sc.shape[1], sc.shape[2]);
    let spacing = (sc.spacing[0], sc.spacing[1], sc.spacing[2]);
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() != numel(shape) * 4 {
        return Err(Error::format(
            path,
            format!("payload holds {} bytes but sidecar shape {:?} needs {}", raw.len(), shape, numel(shape) * 4),
        ));
    }
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let case_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into());
    let vol = Volume::new(shape, spacing, data, case_id)?;
    let lp = label_path(path);
    let labels = if lp.exists() {
        let lraw = fs::read(&lp).map_err(|e| Error::io(&lp, e))?;
        if lraw.len() != numel(shape) {
            return Err(Error::format(
                &lp,
                format!("label payload holds {} bytes, shape needs {}", lraw.len(), numel(shape)),
            ));
        }
        let num_classes = sc
            .num_classes
            .unwrap_or_else(|| lraw.iter().copied().max().unwrap_or(0) as usize + 1);
        Some(LabelVolume::new(shape, spacing, lraw, num_classes)?)
    } else {
        None
    };
    Ok((vol, labels))
}

fn unit_shape(shape: (usize, usize, usize), spacing: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let f = |n: usize, s: f64| -> Result<usize> {
        let m = (n as f64 * s).round() as usize;
        if m == 0 {
            return Err(Error::Shape(format!(
                "resampling dimension {n} at spacing {s} collapses to zero"
            )));
        }
        Ok(m)
    };
    Ok((f(shape.0, spacing.0)?, f(shape.1, spacing.1)?, f(shape.2, spacing.2)?))
}

/// Resamples to 1 mm isotropic spacing: trilinear interpolation for the
/// image, nearest-neighbor for labels. Output shape = round(shape × spacing).
/// At unit input spacing this is exactly the identity.
pub fn resample_to_unit_spacing(
    v: &Volume,
    l: Option<&LabelVolume>,
) -> Result<(Volume, Option<LabelVolume>)> {
    let out_shape = unit_shape(v.shape, v.spacing)?;
    let (od, oh, ow) = out_shape;
    let mut data = vec![0f32; od * oh * ow];
    let clampf = |c: f64, n: usize| c.max(0.0).min((n - 1) as f64);
    for z in 0..od {
        let cz = clampf(z as f64 / v.spacing.0, v.shape.0);
        let z0 = cz.floor() as usize;
        let z1 = (z0 + 1).min(v.shape.0 - 1);
        let fz = cz - z0 as f64;
        for y in 0..oh {
            let cy = clampf(y as f64 / v.spacing.1, v.shape.1);
            let y0 = cy.floor() as usize;
            let y1 = (y0 + 1).min(v.shape.1 - 1);
            let fy = cy - y0 as f64;
            for x in 0..ow {
                let cx = clampf(x as f64 / v.spacing.2, v.shape.2);
                let x0 = cx.floor() as usize;
                let x1 = (x0 + 1).min(v.shape.2 - 1);
                let fx = cx - x0 as f64;
                let s = |zz: usize, yy: usize, xx: usize| v.at(zz, yy, xx) as f64;
                let c00 = s(z0, y0, x0) * (1.0 - fx) + s(z0, y0, x1) * fx;
                let c01 = s(z0, y1, x0) * (1.0 - fx) + s(z0, y1, x1) * fx;
                let c10 = s(z1, y0, x0) * (1.0 - fx) + s(z1, y0, x1) * fx;
                let c11 = s(z1, y1, x0) * (1.0 - fx) + s(z1, y1, x1) * fx;
                let c0 = c00 * (1.0 - fy) + c01 * fy;
                let c1 = c10 * (1.0 - fy) + c11 * fy;
                data[(z * oh + y) * ow + x] = (c0 * (1.0 - fz) + c1 * fz) as f32;
            }
        }
    }
    let out_v = Volume::new(out_shape, (1.0, 1.0, 1.0), data, v.case_id.clone())?;
    let out_l = match l {
        None => None,
        Some(lv) => {
            if lv.shape != v.shape {
                return Err(Error::Shape(format!(
                    "label shape {:?} != volume shape {:?}",
                    lv.shape, v.shape
                )));
            }
            let mut labels = vec![0u8; od * oh * ow];
            for z in 0..od {
                let sz = clampf(z as f64 / v.spacing.0, v.shape.0).round() as usize;
                for y in 0..oh {
                    let sy = clampf(y as f64 / v.spacing.1, v.shape.1).round() as usize;
                    for x in 0..ow {
                        let sx = clampf(x as f64 / v.spacing.2, v.shape.2).round() as usize;
                        labels[(z * oh + y) * ow + x] = lv.at(sz, sy, sx);
                    }
                }
            }
            Some(LabelVolume::new(out_shape, (1.0, 1.0, 1.0), labels, lv.num_classes)?)
        }
    };
    Ok((out_v, out_l))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("case07.vol");
        let data: Vec<f32> = (0..64).map(|i| (i as f32) * 0.25 - 3.0).collect();
        let v = Volume::new((4, 4, 4), (0.7, 0.7, 3.0), data, "case07").unwrap();
        let labels: Vec<u8> = (0..64).map(|i| (i % 8) as u8).collect();
        let l = LabelVolume::new((4, 4, 4), (0.7, 0.7, 3.0), labels, 8).unwrap();
        write_volume(&v, Some(&l), &path).unwrap();
        let (v2, l2) = read_volume(&path).unwrap();
        assert_eq!(v.data, v2.data);
        assert_eq!(v.shape, v2.shape);
        assert_eq!(v.spacing, v2.spacing);
        let l2 = l2.unwrap();
        assert_eq!(l.labels, l2.labels);
        assert_eq!(l.num_classes, l2.num_classes);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vol");
        let v = Volume::new((4, 4, 4), (1.0, 1.0, 1.0), vec![0.0; 64], "bad").unwrap();
        write_volume(&v, None, &path).unwrap();
        // Truncate the payload to 60 values.
        let raw = std::fs::read(&path).unwrap();
        std::fs::write(&path, &raw[..60 * 4]).unwrap();
        let err = read_volume(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "got {err:?}");
    }

    #[test]
    fn unit_spacing_resample_is_identity() {
        let data: Vec<f32> = (0..60).map(|i| (i as f32).sin()).collect();
        let v = Volume::new((3, 4, 5), (1.0, 1.0, 1.0), data.clone(), "id").unwrap();
        let (out, _) = resample_to_unit_spacing(&v, None).unwrap();
        assert_eq!(out.shape, v.shape);
        assert_eq!(out.data, data);
        // Idempotence: resampling again changes nothing.
        let (out2, _) = resample_to_unit_spacing(&out, None).unwrap();
        assert_eq!(out2.data, out.data);
    }

    #[test]
    fn anisotropic_shape_arithmetic() {
        let v = Volume::new((4, 4, 4), (2.0, 1.0, 1.0), vec![1.5; 64], "aniso").unwrap();
        let l = LabelVolume::new((4, 4, 4), (2.0, 1.0, 1.0), vec![2; 64], 3).unwrap();
        let (ov, ol) = resample_to_unit_spacing(&v, Some(&l)).unwrap();
        assert_eq!(ov.shape, (8, 4, 4));
        // Constant volume stays constant under interpolation.
        assert!(ov.data.iter().all(|&x| (x - 1.5).abs() < 1e-6));
        let ol = ol.unwrap();
        assert_eq!(ol.shape, (8, 4, 4));
        assert!(ol.labels.iter().all(|&x| x == 2));
    }

    #[test]
    fn invalid_construction_is_rejected() {
        assert!(Volume::new((0, 4, 4), (1.0, 1.0, 1.0), vec![], "x").is_err());
        assert!(Volume::new((2, 2, 2), (0.0, 1.0, 1.0), vec![0.0; 8], "x").is_err());
        assert!(Volume::new((2, 2, 2), (1.0, 1.0, 1.0), vec![f32::NAN; 8], "x").is_err());
        assert!(LabelVolume::new((2, 2, 2), (1.0, 1.0, 1.0), vec![9; 8], 4).is_err());
    }
}
