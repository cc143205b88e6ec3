//! Training objectives: soft Dice + cross-entropy, the focal variants, and
//! a distance-transform term that weights segmentation errors by how far
//! they sit from the ground-truth class surface.
//!
//! Layout convention: network logits arrive as [C, N] (class-major, N = D*H*W
//! voxels); internally everything is transposed once to [N, C] so per-voxel
//! softmax and per-class reductions map onto row/column ops.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::edt::signed_distance_to_surface;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

/// Smoothing added to soft-Dice numerator and denominator.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Floor inside (1 - dice + floor)^(1/gamma) so the fractional power keeps a
/// finite gradient when a class is segmented perfectly.
pub const FOCAL_DICE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    DiceCe,
    FocalDice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistMode {
    /// Distance term computed from the hard argmax prediction; contributes
    /// its value to the total but no gradient.
    Literal,
    /// Distance term computed from softmax probabilities inside the graph.
    Differentiable,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Weight of the distance term; exactly zero skips the term entirely so
    /// the total is bit-identical to the base loss.
    pub lambda_dist: f64,
    pub dist_mode: DistMode,
    /// Focal exponent gamma (cross-entropy focusing and Dice root).
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::DiceCe,
            lambda_dist: 1.0,
            dist_mode: DistMode::Differentiable,
            gamma: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_dist >= 0.0) {
            return Err(Error::Config("lambda_dist must be >= 0".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config("gamma must be positive".into()));
        }
        Ok(())
    }

    /// Stable identifier used by ablation tables and logs.
    pub fn variant_name(&self) -> &'static str {
        match (self.kind, self.lambda_dist > 0.0) {
            (LossKind::DiceCe, false) => "dice_ce",
            (LossKind::DiceCe, true) => "dice_ce_dist",
            (LossKind::FocalDice, false) => "focal_dice",
            (LossKind::FocalDice, true) => "focal_dice_dist",
        }
    }

    /// The four-variant ablation ladder.
    pub fn ablation_variants() -> Vec<LossConfig> {
        vec![
            LossConfig { kind: LossKind::DiceCe, lambda_dist: 0.0, ..Default::default() },
            LossConfig { kind: LossKind::FocalDice, lambda_dist: 0.0, ..Default::default() },
            LossConfig { kind: LossKind::DiceCe, lambda_dist: 1.0, ..Default::default() },
            LossConfig { kind: LossKind::FocalDice, lambda_dist: 1.0, ..Default::default() },
        ]
    }
}

/// One-hot encoding in [N, C] (voxel-major) layout.
pub fn one_hot_nc(labels: &[u8], num_classes: usize) -> Result<Vec<f64>> {
    let mut oh = vec![0.0; labels.len() * num_classes];
    for (v, &l) in labels.iter().enumerate() {
        if (l as usize) >= num_classes {
            return Err(Error::Shape(format!(
                "label {l} at voxel {v} exceeds num_classes {num_classes}"
            )));
        }
        oh[v * num_classes + l as usize] = 1.0;
    }
    Ok(oh)
}

/// Transposes class-major logits [C, N] to voxel-major [N, C].
pub fn logits_to_nc(g: &mut Graph, logits: Var, num_classes: usize, n: usize) -> Var {
    let mut map = Vec::with_capacity(n * num_classes);
    for v in 0..n {
        for c in 0..num_classes {
            map.push((c * n + v) as i64);
        }
    }
    g.gather(logits, Arc::new(map), vec![n, num_classes])
}

/// Hard per-voxel argmax of class-major logits [C, N].
pub fn hard_labels_from_logits(logits: &[f64], num_classes: usize, n: usize) -> Vec<u8> {
    let mut out = vec![0u8; n];
    for v in 0..n {
        let mut best = 0usize;
        let mut bv = logits[v];
        for c in 1..num_classes {
            let x = logits[c * n + v];
            if x > bv {
                bv = x;
                best = c;
            }
        }
        out[v] = best as u8;
    }
    out
}

/// Per-class |signed distance to the ground-truth surface|, normalized to
/// [0, 1] per class, stored voxel-major [N, C]. Classes absent from the
/// ground truth weight every voxel 1 (a false positive there is maximally
/// far from any true surface).
pub struct DistWeights {
    pub num_classes: usize,
    pub n: usize,
    /// [N, C]
    pub w: Vec<f64>,
}

impl DistWeights {
    pub fn new(labels: &[u8], dims: (usize, usize, usize), num_classes: usize) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "labels len {} does not match dims {dims:?}",
                labels.len()
            )));
        }
        let mut w = vec![0.0; n * num_classes];
        let mut mask = vec![false; n];
        for c in 0..num_classes {
            for (m, &l) in mask.iter_mut().zip(labels) {
                *m = l as usize == c;
            }
            if !mask.iter().any(|&m| m) {
                for v in 0..n {
                    w[v * num_classes + c] = 1.0;
                }
                continue;
            }
            let sdt = signed_distance_to_surface(&mask, dims, (1.0, 1.0, 1.0));
            let max = sdt.iter().fold(0.0f64, |a, &d| a.max(d.abs()));
            if max > 0.0 {
                for v in 0..n {
                    w[v * num_classes + c] = sdt[v].abs() / max;
                }
            }
        }
        Ok(DistWeights { num_classes, n, w })
    }
}

/// Differentiable distance term: mean over classes and voxels of
/// |onehot - prob| * weight. Zero exactly when `probs` equals the one-hot
/// ground truth; bounded by [0, 1] because weights are in [0, 1] and the
/// per-voxel L1 gap is at most 2 <= C.
pub fn dist_loss_term(g: &mut Graph, probs_nc: Var, gt_onehot_nc: Var, dw: &DistWeights) -> Var {
    let diff = g.sub(gt_onehot_nc, probs_nc);
    let diff = g.abs(diff);
    let wv = g.constant(dw.w.clone(), vec![dw.n, dw.num_classes]);
    let weighted = g.mul(diff, wv);
    let s = g.sum_all(weighted);
    g.scale(s, 1.0 / (dw.num_classes * dw.n) as f64)
}

/// Literal distance term over hard masks: each disagreeing voxel contributes
/// the weights of both the predicted and the true class.
pub fn dist_loss_term_literal(pred: &[u8], gt: &[u8], dw: &DistWeights) -> f64 {
    assert_eq!(pred.len(), dw.n, "pred length");
    assert_eq!(gt.len(), dw.n, "gt length");
    let c = dw.num_classes;
    let mut s = 0.0;
    for v in 0..dw.n {
        if pred[v] != gt[v] {
            s += dw.w[v * c + pred[v] as usize] + dw.w[v * c + gt[v] as usize];
        }
    }
    s / (c * dw.n) as f64
}

/// Intermediate graph nodes shared by the base losses.
struct SoftmaxCtx {
    /// [N, C] softmax probabilities.
    sm: Var,
    /// [N, C] log-softmax.
    lsm: Var,
    /// [N, C] one-hot ground truth (constant).
    oh: Var,
    /// [C] soft Dice score per class.
    dice_c: Var,
    n: usize,
    c: usize,
}

fn softmax_ctx(g: &mut Graph, logits: Var, labels: &[u8], num_classes: usize) -> Result<SoftmaxCtx> {
    let n = labels.len();
    if g.data(logits).len() != num_classes * n {
        return Err(Error::Shape(format!(
            "logits hold {} values, expected {} classes x {} voxels",
            g.data(logits).len(),
            num_classes,
            n
        )));
    }
    let lt = logits_to_nc(g, logits, num_classes, n);
    let sm = g.softmax_rows(lt, n, num_classes);
    let lsm = g.log_softmax_rows(lt, n, num_classes);
    let oh = one_hot_nc(labels, num_classes)?;
    let oh = g.constant(oh, vec![n, num_classes]);
    let inter = g.mul(sm, oh);
    let inter = g.col_sum(inter, n, num_classes);
    let psum = g.col_sum(sm, n, num_classes);
    let gsum = g.col_sum(oh, n, num_classes);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, DICE_SMOOTH);
    let den = g.add(psum, gsum);
    let den = g.add_scalar(den, DICE_SMOOTH);
    let dice_c = g.div(num, den);
    Ok(SoftmaxCtx { sm, lsm, oh, dice_c, n, c: num_classes })
}

pub struct BaseLoss {
    pub total: Var,
    /// Dice part (1 - mean dice, or its focal root).
    pub dice: Var,
    /// Cross-entropy part (plain or focal).
    pub ce: Var,
    /// Softmax probabilities [N, C], reused by the distance term.
    pub probs_nc: Var,
    pub onehot_nc: Var,
}

/// Soft Dice loss plus voxel-mean cross-entropy.
pub fn dice_ce(g: &mut Graph, logits: Var, labels: &[u8], num_classes: usize) -> Result<BaseLoss> {
    let ctx = softmax_ctx(g, logits, labels, num_classes)?;
    let picked = g.mul(ctx.oh, ctx.lsm);
    let s = g.sum_all(picked);
    let ce = g.scale(s, -1.0 / ctx.n as f64);
    let mean_dice = g.mean_all(ctx.dice_c);
    let neg = g.scale(mean_dice, -1.0);
    let dice = g.add_scalar(neg, 1.0);
    let total = g.add(dice, ce);
    Ok(BaseLoss { total, dice, ce, probs_nc: ctx.sm, onehot_nc: ctx.oh })
}

/// Focal cross-entropy (1-p_t)^gamma * -log p_t plus focal Dice
/// mean_c (1 - dice_c)^(1/gamma).
pub fn focal_dice(
    g: &mut Graph,
    logits: Var,
    labels: &[u8],
    num_classes: usize,
    gamma: f64,
) -> Result<BaseLoss> {
    let ctx = softmax_ctx(g, logits, labels, num_classes)?;
    let pt_rows = g.mul(ctx.oh, ctx.sm);
    let pt = g.row_mean(pt_rows, ctx.n, ctx.c);
    let pt = g.scale(pt, ctx.c as f64);
    let lpt_rows = g.mul(ctx.oh, ctx.lsm);
    let lpt = g.row_mean(lpt_rows, ctx.n, ctx.c);
    let lpt = g.scale(lpt, ctx.c as f64);
    let one_minus = g.scale(pt, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let focus = g.pow_scalar(one_minus, gamma);
    let weighted = g.mul(focus, lpt);
    let mean = g.mean_all(weighted);
    let ce = g.scale(mean, -1.0);
    let neg_dice = g.scale(ctx.dice_c, -1.0);
    let gap = g.add_scalar(neg_dice, 1.0 + FOCAL_DICE_FLOOR);
    let rooted = g.pow_scalar(gap, 1.0 / gamma);
    let dice = g.mean_all(rooted);
    let total = g.add(dice, ce);
    Ok(BaseLoss { total, dice, ce, probs_nc: ctx.sm, onehot_nc: ctx.oh })
}

/// Scalar component values of one loss evaluation (for logs and tables).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossComponents {
    pub total: f64,
    pub dice: f64,
    pub ce: f64,
    pub dist: f64,
}

pub struct LossOut {
    pub total: Var,
    pub components: LossComponents,
}

/// Full training objective: base loss plus lambda * distance term.
/// `dims` are the patch dimensions of `labels` (needed for the surface
/// transform when lambda_dist > 0).
pub fn total_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[u8],
    dims: (usize, usize, usize),
    num_classes: usize,
    cfg: &LossConfig,
) -> Result<LossOut> {
    cfg.validate()?;
    let base = match cfg.kind {
        LossKind::DiceCe => dice_ce(g, logits, labels, num_classes)?,
        LossKind::FocalDice => focal_dice(g, logits, labels, num_classes, cfg.gamma)?,
    };
    if cfg.lambda_dist == 0.0 {
        let components = LossComponents {
            total: g.data(base.total)[0],
            dice: g.data(base.dice)[0],
            ce: g.data(base.ce)[0],
            dist: 0.0,
        };
        return Ok(LossOut { total: base.total, components });
    }
    let dw = DistWeights::new(labels, dims, num_classes)?;
    let (total, dist_value) = match cfg.dist_mode {
        DistMode::Differentiable => {
            let dist = dist_loss_term(g, base.probs_nc, base.onehot_nc, &dw);
            let scaled = g.scale(dist, cfg.lambda_dist);
            (g.add(base.total, scaled), g.data(dist)[0])
        }
        DistMode::Literal => {
            let pred = hard_labels_from_logits(g.data(logits), num_classes, labels.len());
            let dist = dist_loss_term_literal(&pred, labels, &dw);
            (g.add_scalar(base.total, cfg.lambda_dist * dist), dist)
        }
    };
    let components = LossComponents {
        total: g.data(total)[0],
        dice: g.data(base.dice)[0],
        ce: g.data(base.ce)[0],
        dist: dist_value,
    };
    Ok(LossOut { total, components })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_logits(c: usize, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..c * n).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    fn rand_labels(c: usize, n: usize, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(0..c as u8)) .collect()
    }

    /// Independent scalar reimplementation of dice_ce for small cases.
    fn dice_ce_oracle(logits: &[f64], labels: &[u8], c: usize) -> (f64, f64) {
        let n = labels.len();
        let mut probs = vec![0.0; n * c];
        for v in 0..n {
            let row: Vec<f64> = (0..c).map(|k| logits[k * n + v]).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for k in 0..c {
                probs[v * c + k] = exps[k] / z;
            }
        }
        let mut ce = 0.0;
        for v in 0..n {
            ce -= probs[v * c + labels[v] as usize].ln();
        }
        ce /= n as f64;
        let mut dice_sum = 0.0;
        for k in 0..c {
            let mut inter = 0.0;
            let mut psum = 0.0;
            let mut gsum = 0.0;
            for v in 0..n {
                let gt = if labels[v] as usize == k { 1.0 } else { 0.0 };
                inter += probs[v * c + k] * gt;
                psum += probs[v * c + k];
                gsum += gt;
            }
            dice_sum += (2.0 * inter + DICE_SMOOTH) / (psum + gsum + DICE_SMOOTH);
        }
        (1.0 - dice_sum / c as f64, ce)
    }

    #[test]
    fn dice_ce_matches_scalar_oracle() {
        let c = 3;
        let n = 4 * 4 * 4;
        let logits = rand_logits(c, n, 1);
        let labels = rand_labels(c, n, 2);
        let mut g = Graph::new();
        let lv = g.leaf(logits.clone(), vec![c, n], false);
        let out = dice_ce(&mut g, lv, &labels, c).unwrap();
        let (dice_o, ce_o) = dice_ce_oracle(&logits, &labels, c);
        assert!((g.data(out.dice)[0] - dice_o).abs() < 1e-12);
        assert!((g.data(out.ce)[0] - ce_o).abs() < 1e-12);
        assert!((g.data(out.total)[0] - (dice_o + ce_o)).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_logits_drive_both_terms_to_zero() {
        let c = 4;
        let n = 3 * 3 * 3;
        let labels = rand_labels(c, n, 7);
        let mut logits = vec![-40.0; c * n];
        for (v, &l) in labels.iter().enumerate() {
            logits[l as usize * n + v] = 40.0;
        }
        let mut g = Graph::new();
        let lv = g.leaf(logits, vec![c, n], false);
        let out = dice_ce(&mut g, lv, &labels, c).unwrap();
        assert!(g.data(out.ce)[0] < 1e-10, "ce {}", g.data(out.ce)[0]);
        assert!(g.data(out.dice)[0] < 1e-4, "dice {}", g.data(out.dice)[0]);
    }

    #[test]
    fn focal_terms_match_scalar_oracle() {
        let c = 3;
        let n = 8;
        let gamma = 2.0;
        let logits = rand_logits(c, n, 11);
        let labels = rand_labels(c, n, 12);
        let mut g = Graph::new();
        let lv = g.leaf(logits.clone(), vec![c, n], false);
        let out = focal_dice(&mut g, lv, &labels, c, gamma).unwrap();
        // Oracle
        let mut fce = 0.0;
        let mut probs = vec![0.0; n * c];
        for v in 0..n {
            let row: Vec<f64> = (0..c).map(|k| logits[k * n + v]).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for k in 0..c {
                probs[v * c + k] = exps[k] / z;
            }
            let pt = probs[v * c + labels[v] as usize];
            fce += (1.0 - pt).powf(gamma) * (-pt.ln());
        }
        fce /= n as f64;
        let mut fdice = 0.0;
        for k in 0..c {
            let mut inter = 0.0;
            let mut psum = 0.0;
            let mut gsum = 0.0;
            for v in 0..n {
                let gt = if labels[v] as usize == k { 1.0 } else { 0.0 };
                inter += probs[v * c + k] * gt;
                psum += probs[v * c + k];
                gsum += gt;
            }
            let dice = (2.0 * inter + DICE_SMOOTH) / (psum + gsum + DICE_SMOOTH);
            fdice += (1.0 - dice + FOCAL_DICE_FLOOR).powf(1.0 / gamma);
        }
        fdice /= c as f64;
        assert!((g.data(out.ce)[0] - fce).abs() < 1e-12);
        assert!((g.data(out.dice)[0] - fdice).abs() < 1e-12);
    }

    #[test]
    fn dist_weights_are_normalized_and_surface_is_zero() {
        // 5^3 volume, class 1 cube in the center.
        let d = 5;
        let n = d * d * d;
        let mut labels = vec![0u8; n];
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    labels[(z * d + y) * d + x] = 1;
                }
            }
        }
        let dw = DistWeights::new(&labels, (d, d, d), 3).unwrap();
        assert!(dw.w.iter().all(|&w| (0.0..=1.0).contains(&w)));
        // Class 2 is absent: weight 1 everywhere.
        assert!((0..n).all(|v| dw.w[v * 3 + 2] == 1.0));
        // Center voxel of the cube is strictly inside: nonzero weight.
        let center = (2 * d + 2) * d + 2;
        assert!(dw.w[center * 3 + 1] > 0.0);
        // A surface voxel of the cube has zero weight for class 1.
        let surf = (d + 1) * d + 1;
        assert_eq!(dw.w[surf * 3 + 1], 0.0);
        // Max weight 1 attained for both present classes.
        for c in 0..2 {
            let m = (0..n).map(|v| dw.w[v * 3 + c]).fold(0.0f64, f64::max);
            assert_eq!(m, 1.0);
        }
    }

    #[test]
    fn dist_term_zero_on_identical_masks_in_both_modes() {
        let d = 6;
        let n = d * d * d;
        let labels = rand_labels(3, n, 21);
        let dw = DistWeights::new(&labels, (d, d, d), 3).unwrap();
        // Literal mode.
        assert_eq!(dist_loss_term_literal(&labels, &labels, &dw), 0.0);
        // Differentiable mode evaluated at exact one-hot probabilities.
        let oh = one_hot_nc(&labels, 3).unwrap();
        let mut g = Graph::new();
        let probs = g.constant(oh.clone(), vec![n, 3]);
        let gt = g.constant(oh, vec![n, 3]);
        let dist = dist_loss_term(&mut g, probs, gt, &dw);
        assert_eq!(g.data(dist)[0], 0.0);
    }

    #[test]
    fn dist_term_modes_agree_on_hard_masks() {
        let d = 6;
        let n = d * d * d;
        let gt = rand_labels(4, n, 31);
        let mut pred = gt.clone();
        let mut rng = ChaCha12Rng::seed_from_u64(32);
        for _ in 0..40 {
            let v = rng.gen_range(0..n);
            pred[v] = rng.gen_range(0..4);
        }
        let dw = DistWeights::new(&gt, (d, d, d), 4).unwrap();
        let lit = dist_loss_term_literal(&pred, &gt, &dw);
        let mut g = Graph::new();
        let po = g.constant(one_hot_nc(&pred, 4).unwrap(), vec![n, 4]);
        let go = g.constant(one_hot_nc(&gt, 4).unwrap(), vec![n, 4]);
        let dist = dist_loss_term(&mut g, po, go, &dw);
        assert!((g.data(dist)[0] - lit).abs() < 1e-12);
        assert!(lit > 0.0);
    }

    #[test]
    fn dist_term_stays_in_unit_interval_on_random_cases() {
        let d = 5;
        let n = d * d * d;
        for seed in 0..10 {
            let c = 2 + (seed as usize % 3);
            let gt = rand_labels(c, n, 100 + seed);
            let pred_logits = rand_logits(c, n, 200 + seed);
            let dw = DistWeights::new(&gt, (d, d, d), c).unwrap();
            let pred = hard_labels_from_logits(&pred_logits, c, n);
            let lit = dist_loss_term_literal(&pred, &gt, &dw);
            assert!((0.0..=1.0).contains(&lit), "literal {lit}");
            let mut g = Graph::new();
            let lv = g.leaf(pred_logits, vec![c, n], false);
            let lt = logits_to_nc(&mut g, lv, c, n);
            let sm = g.softmax_rows(lt, n, c);
            let go = g.constant(one_hot_nc(&gt, c).unwrap(), vec![n, c]);
            let dist = dist_loss_term(&mut g, sm, go, &dw);
            let dv = g.data(dist)[0];
            assert!((0.0..=1.0).contains(&dv), "differentiable {dv}");
        }
    }

    #[test]
    fn lambda_zero_total_is_bitwise_base_loss() {
        let c = 3;
        let n = 4 * 4 * 4;
        let logits = rand_logits(c, n, 41);
        let labels = rand_labels(c, n, 42);
        let cfg = LossConfig { lambda_dist: 0.0, ..Default::default() };
        let mut g = Graph::new();
        let lv = g.leaf(logits.clone(), vec![c, n], false);
        let out = total_loss(&mut g, lv, &labels, (4, 4, 4), c, &cfg).unwrap();
        let mut g2 = Graph::new();
        let lv2 = g2.leaf(logits, vec![c, n], false);
        let base = dice_ce(&mut g2, lv2, &labels, c).unwrap();
        let a = g.data(out.total)[0];
        let b = g2.data(base.total)[0];
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(out.components.dist, 0.0);
    }

    #[test]
    fn total_loss_components_are_consistent() {
        let c = 3;
        let n = 4 * 4 * 4;
        let logits = rand_logits(c, n, 51);
        let labels = rand_labels(c, n, 52);
        for mode in [DistMode::Differentiable, DistMode::Literal] {
            let cfg = LossConfig { dist_mode: mode, lambda_dist: 0.7, ..Default::default() };
            let mut g = Graph::new();
            let lv = g.leaf(logits.clone(), vec![c, n], false);
            let out = total_loss(&mut g, lv, &labels, (4, 4, 4), c, &cfg).unwrap();
            let comp = out.components;
            assert!(comp.dist > 0.0);
            assert!(
                (comp.total - (comp.dice + comp.ce + 0.7 * comp.dist)).abs() < 1e-12,
                "{comp:?}"
            );
        }
    }

    #[test]
    fn literal_mode_adds_value_but_no_gradient() {
        let c = 2;
        let n = 3 * 3 * 3;
        let logits = rand_logits(c, n, 61);
        let labels = rand_labels(c, n, 62);
        let grad_of = |mode: Option<DistMode>| -> (f64, Vec<f64>) {
            let cfg = match mode {
                Some(m) => LossConfig { dist_mode: m, lambda_dist: 1.0, ..Default::default() },
                None => LossConfig { lambda_dist: 0.0, ..Default::default() },
            };
            let mut g = Graph::new();
            let lv = g.leaf(logits.clone(), vec![c, n], true);
            let out = total_loss(&mut g, lv, &labels, (3, 3, 3), c, &cfg).unwrap();
            let grads = g.backward(out.total);
            (g.data(out.total)[0], grads.get(lv).unwrap().to_vec())
        };
        let (t0, g0) = grad_of(None);
        let (tl, gl) = grad_of(Some(DistMode::Literal));
        let (td, gd) = grad_of(Some(DistMode::Differentiable));
        assert!(tl > t0, "literal mode must add its value");
        assert_eq!(g0, gl, "literal mode must not alter gradients");
        assert!(td > t0);
        assert!(gd != g0, "differentiable mode must alter gradients");
    }

    #[test]
    fn loss_gradients_match_fd() {
        let c = 3;
        let n = 3 * 3 * 3;
        let labels = rand_labels(c, n, 71);
        let logits = rand_logits(c, n, 72);
        for cfg in [
            LossConfig { lambda_dist: 0.0, ..Default::default() },
            LossConfig { kind: LossKind::FocalDice, lambda_dist: 0.0, ..Default::default() },
            LossConfig::default(),
            LossConfig { kind: LossKind::FocalDice, ..Default::default() },
        ] {
            let labels = labels.clone();
            let cfg2 = cfg.clone();
            let build = move |g: &mut Graph, vs: &[Var]| -> Var {
                total_loss(g, vs[0], &labels, (3, 3, 3), c, &cfg2).unwrap().total
            };
            let rep = check_gradients(&build, &[(vec![c, n], logits.clone())], 12, 1e-6);
            assert!(rep.max_rel < 1e-3, "cfg {:?}: max rel {}", cfg, rep.max_rel);
        }
    }

    #[test]
    fn invalid_labels_are_rejected() {
        assert!(one_hot_nc(&[0, 3, 1], 3).is_err());
        let mut g = Graph::new();
        let lv = g.leaf(vec![0.0; 6], vec![2, 3], false);
        assert!(dice_ce(&mut g, lv, &[0, 1, 2], 2).is_err());
        // Shape mismatch between logits and labels.
        let lv2 = g.leaf(vec![0.0; 6], vec![2, 3], false);
        assert!(dice_ce(&mut g, lv2, &[0, 1], 2).is_err());
    }

    #[test]
    fn variant_names_cover_ablation_ladder() {
        let names: Vec<&str> =
            LossConfig::ablation_variants().iter().map(|c| c.variant_name()).collect();
        assert_eq!(names, vec!["dice_ce", "focal_dice", "dice_ce_dist", "focal_dice_dist"]);
    }
}
