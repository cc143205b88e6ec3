//! Evaluation: per-class Dice and HD95, case-level report aggregation, and
//! sliding-window full-volume inference.
//!
//! HD95 convention: 95th percentile of the POOLED symmetric surface
//! distances (pred-surface -> nearest gt-surface voxel and vice versa, one
//! pooled list, percentile by linear interpolation between order
//! statistics). The pooled form is symmetric in (pred, gt).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::edt::{squared_edt, surface_of_mask};
use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};

pub type Dims = (usize, usize, usize);

/// Dice coefficient of two binary masks: 1.0 when both are empty, 0.0 when
/// exactly one is empty.
pub fn dice_masks(pred: &[bool], gt: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "mask lengths differ");
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut g = 0usize;
    for (&a, &b) in pred.iter().zip(gt) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    if p + g == 0 {
        return 1.0;
    }
    2.0 * inter as f64 / (p + g) as f64
}

/// Percentile in [0, 1] of an ascending-sorted slice, linear interpolation
/// between order statistics.
pub fn percentile_linear(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty list");
    assert!((0.0..=1.0).contains(&q), "percentile fraction out of range");
    let r = q * (sorted.len() - 1) as f64;
    let lo = r.floor() as usize;
    let frac = r - lo as f64;
    if frac == 0.0 || lo + 1 == sorted.len() {
        sorted[lo]
    } else {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    }
}

/// Pooled symmetric surface distances between two non-empty masks.
/// Returns None when either mask is empty (metric undefined).
pub fn pooled_surface_distances(
    pred: &[bool],
    gt: &[bool],
    dims: Dims,
    spacing: (f64, f64, f64),
) -> Option<Vec<f64>> {
    if !pred.iter().any(|&m| m) || !gt.iter().any(|&m| m) {
        return None;
    }
    let sp = surface_of_mask(pred, dims);
    let sg = surface_of_mask(gt, dims);
    let d2_to_g = squared_edt(&sg, dims, spacing);
    let d2_to_p = squared_edt(&sp, dims, spacing);
    let mut pooled = Vec::new();
    for i in 0..pred.len() {
        if sp[i] {
            pooled.push(d2_to_g[i].sqrt());
        }
        if sg[i] {
            pooled.push(d2_to_p[i].sqrt());
        }
    }
    Some(pooled)
}

/// HD95 over binary masks; None when either mask is empty.
pub fn hd95_masks(pred: &[bool], gt: &[bool], dims: Dims, spacing: (f64, f64, f64)) -> Option<f64> {
    let mut pooled = pooled_surface_distances(pred, gt, dims, spacing)?;
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(percentile_linear(&pooled, 0.95))
}

fn class_mask(labels: &[u8], class: u8) -> Vec<bool> {
    labels.iter().map(|&l| l == class).collect()
}

fn check_aligned(pred: &LabelVolume, gt: &LabelVolume) -> Result<()> {
    if pred.shape != gt.shape {
        return Err(Error::Shape(format!(
            "prediction shape {:?} does not match ground truth {:?}",
            pred.shape, gt.shape
        )));
    }
    if pred.spacing != gt.spacing {
        return Err(Error::Shape(format!(
            "prediction spacing {:?} does not match ground truth {:?}",
            pred.spacing, gt.spacing
        )));
    }
    Ok(())
}

/// Per-class Dice over label volumes.
pub fn dice_score(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<f64> {
    check_aligned(pred, gt)?;
    Ok(dice_masks(&class_mask(&pred.labels, class), &class_mask(&gt.labels, class)))
}

/// Per-class HD95 in physical units; None when the class is empty on either
/// side (reported as missing and excluded from means).
pub fn hd95(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<Option<f64>> {
    check_aligned(pred, gt)?;
    Ok(hd95_masks(
        &class_mask(&pred.labels, class),
        &class_mask(&gt.labels, class),
        gt.shape,
        gt.spacing,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassMetrics {
    pub dice: f64,
    /// Missing when the class is empty on either side.
    pub hd95: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub case_id: String,
    /// Non-background classes present in prediction or ground truth.
    pub per_class: BTreeMap<u8, ClassMetrics>,
    /// Mean over evaluated classes; None when no class was evaluated.
    pub mean_dice: Option<f64>,
    /// Mean over classes with a defined HD95; None when none have one.
    pub mean_hd95: Option<f64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

/// Per-case metrics over all non-background classes. Classes absent from
/// both volumes are excluded; classes present on exactly one side score
/// dice 0 with HD95 missing.
pub fn evaluate_case(pred: &LabelVolume, gt: &LabelVolume, case_id: &str) -> Result<MetricsReport> {
    check_aligned(pred, gt)?;
    let num_classes = pred.num_classes.max(gt.num_classes);
    let mut per_class = BTreeMap::new();
    for class in 1..num_classes {
        let class = class as u8;
        let pm = class_mask(&pred.labels, class);
        let gm = class_mask(&gt.labels, class);
        let p_any = pm.iter().any(|&m| m);
        let g_any = gm.iter().any(|&m| m);
        if !p_any && !g_any {
            continue;
        }
        per_class.insert(
            class,
            ClassMetrics {
                dice: dice_masks(&pm, &gm),
                hd95: hd95_masks(&pm, &gm, gt.shape, gt.spacing),
            },
        );
    }
    let dices: Vec<f64> = per_class.values().map(|m| m.dice).collect();
    let hds: Vec<f64> = per_class.values().filter_map(|m| m.hd95).collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(MetricsReport {
        case_id: case_id.to_string(),
        per_class,
        mean_dice: mean(&dices),
        mean_hd95: mean(&hds),
    })
}

/// CSV export: one row per (case, class); empty HD95 cell when missing.
pub fn reports_to_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("case_id,class,dice,hd95\n");
    for r in reports {
        for (class, m) in &r.per_class {
            let hd = m.hd95.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.case_id, class, m.dice, hd));
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct SlidingWindowConfig {
    /// Cubic window edge (the model's patch size).
    pub patch: usize,
    pub num_classes: usize,
    /// Fraction of the window shared between neighbors (0.5 = half-stride).
    pub overlap: f64,
    /// Gaussian weight sigma as a fraction of the patch edge.
    pub sigma_scale: f64,
}

impl SlidingWindowConfig {
    pub fn new(patch: usize, num_classes: usize) -> Self {
        SlidingWindowConfig { patch, num_classes, overlap: 0.5, sigma_scale: 1.0 / 8.0 }
    }
}

fn window_starts(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut pos = 0;
    loop {
        if pos + patch >= dim {
            starts.push(dim - patch);
            break;
        }
        starts.push(pos);
        pos += stride;
    }
    starts
}

/// Blended class logits over the whole (padded) volume. The model closure
/// maps a patch (len patch^3, voxel order z,y,x) to logits [C, patch^3].
pub fn sliding_window_logits<F>(
    v: &Volume,
    cfg: &SlidingWindowConfig,
    mut model: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let p = cfg.patch;
    if p == 0 || cfg.num_classes == 0 {
        return Err(Error::Config("patch and num_classes must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.overlap) {
        return Err(Error::Config(format!("overlap {} outside [0,1)", cfg.overlap)));
    }
    let (d0, h0, w0) = v.shape;
    // Zero-pad trailing edges so every axis holds at least one window.
    let (d, h, w) = (d0.max(p), h0.max(p), w0.max(p));
    let mut img = vec![0.0f64; d * h * w];
    for z in 0..d0 {
        for y in 0..h0 {
            for x in 0..w0 {
                img[(z * h + y) * w + x] = v.data[(z * h0 + y) * w0 + x] as f64;
            }
        }
    }
    let stride = ((p as f64) * (1.0 - cfg.overlap)).round().max(1.0) as usize;
    let zs = window_starts(d, p, stride);
    let ys = window_starts(h, p, stride);
    let xs = window_starts(w, p, stride);
    // Separable Gaussian bump centered on the window.
    let sigma = cfg.sigma_scale * p as f64;
    let center = (p as f64 - 1.0) / 2.0;
    let g1: Vec<f64> =
        (0..p).map(|i| (-((i as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let n = d * h * w;
    let c = cfg.num_classes;
    let mut acc = vec![0.0f64; c * n];
    let mut wsum = vec![0.0f64; n];
    let mut patch_buf = vec![0.0f64; p * p * p];
    for &z0 in &zs {
        for &y0 in &ys {
            for &x0 in &xs {
                for z in 0..p {
                    for y in 0..p {
                        for x in 0..p {
                            patch_buf[(z * p + y) * p + x] =
                                img[((z0 + z) * h + y0 + y) * w + x0 + x];
                        }
                    }
                }
                let logits = model(&patch_buf)?;
                if logits.len() != c * p * p * p {
                    return Err(Error::Shape(format!(
                        "model returned {} logits, expected {}",
                        logits.len(),
                        c * p * p * p
                    )));
                }
                for z in 0..p {
                    for y in 0..p {
                        for x in 0..p {
                            let wgt = g1[z] * g1[y] * g1[x];
                            let pi = (z * p + y) * p + x;
                            let vi = ((z0 + z) * h + y0 + y) * w + x0 + x;
                            wsum[vi] += wgt;
                            for k in 0..c {
                                acc[k * n + vi] += wgt * logits[k * p * p * p + pi];
                            }
                        }
                    }
                }
            }
        }
    }
    // Normalize and crop back to the original shape.
    let n0 = d0 * h0 * w0;
    let mut out = vec![0.0f64; c * n0];
    for z in 0..d0 {
        for y in 0..h0 {
            for x in 0..w0 {
                let vi = (z * h + y) * w + x;
                let oi = (z * h0 + y) * w0 + x;
                for k in 0..c {
                    out[k * n0 + oi] = acc[k * n + vi] / wsum[vi];
                }
            }
        }
    }
    Ok(out)
}

/// Full-volume prediction: blended logits, then per-voxel argmax.
pub fn sliding_window_inference<F>(
    v: &Volume,
    cfg: &SlidingWindowConfig,
    model: F,
) -> Result<LabelVolume>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let logits = sliding_window_logits(v, cfg, model)?;
    let n = v.shape.0 * v.shape.1 * v.shape.2;
    let labels = crate::loss::hard_labels_from_logits(&logits, cfg.num_classes, n);
    LabelVolume::new(v.shape, v.spacing, labels, cfg.num_classes)
}
