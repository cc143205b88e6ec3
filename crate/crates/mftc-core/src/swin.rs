//! 3D shifted-window transformer encoder: patch embedding, window
//! multi-head self-attention with relative position bias, hierarchical
//! stages with patch merging.
//!
//! Token maps are row-major [T, C] with T = d*h*w in z,y,x order. Window
//! partition, cyclic shifts, padding, and head splits are all expressed as
//! gather index maps so the autodiff graph stays a small fixed op set.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::aperture::Shape3;
use crate::error::{Error, Result};
use crate::graph::{Graph, IndexMap, Var};
use crate::kernels::Conv3Spec;
use crate::params::{Init, ParamSource};

pub const LN_EPS: f64 = 1e-5;
/// Additive mask for disallowed attention pairs; large enough to zero the
/// softmax weight at f64 precision.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SwinConfig {
    pub embed_dim: usize,
    pub patch_size: usize,
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: f64,
    pub num_stages: usize,
}

impl SwinConfig {
    pub fn desk() -> Self {
        SwinConfig {
            embed_dim: 12,
            patch_size: 2,
            depths: vec![2, 2],
            num_heads: vec![2, 4],
            window_size: 4,
            mlp_ratio: 4.0,
            num_stages: 2,
        }
    }

    pub fn paper() -> Self {
        SwinConfig {
            embed_dim: 48,
            patch_size: 2,
            depths: vec![2, 2, 2, 2],
            num_heads: vec![3, 6, 12, 24],
            window_size: 7,
            mlp_ratio: 4.0,
            num_stages: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stages == 0 {
            return Err(Error::Config("num_stages must be >= 1".into()));
        }
        if self.depths.len() != self.num_stages || self.num_heads.len() != self.num_stages {
            return Err(Error::Config(format!(
                "depths ({}) and num_heads ({}) must both have num_stages ({}) entries",
                self.depths.len(),
                self.num_heads.len(),
                self.num_stages
            )));
        }
        if self.embed_dim == 0 || self.patch_size == 0 || self.window_size == 0 {
            return Err(Error::Config("embed_dim, patch_size, window_size must be >= 1".into()));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        for k in 0..self.num_stages {
            let c = self.embed_dim << k;
            if self.depths[k] == 0 {
                return Err(Error::Config(format!("stage {k} depth must be >= 1")));
            }
            if self.num_heads[k] == 0 || !c.is_multiple_of(self.num_heads[k]) {
                return Err(Error::Config(format!(
                    "stage {k} channels {c} not divisible by {} heads",
                    self.num_heads[k]
                )));
            }
        }
        Ok(())
    }
}

pub fn mlp_hidden(c: usize, ratio: f64) -> usize {
    (((c as f64) * ratio).round() as usize).max(1)
}

/// Token grid after patch embedding.
pub fn token_grid(crop: Shape3, p: usize) -> Result<Shape3> {
    if !crop.0.is_multiple_of(p) || !crop.1.is_multiple_of(p) || !crop.2.is_multiple_of(p) {
        return Err(Error::Shape(format!("crop {crop:?} not divisible by patch size {p}")));
    }
    Ok((crop.0 / p, crop.1 / p, crop.2 / p))
}

/// Stage count for a given grid: capped so the deepest map keeps at least
/// two tokens per axis, never below one stage.
pub fn capped_stages(cfg: &SwinConfig, grid: Shape3) -> usize {
    let g = grid.0.min(grid.1).min(grid.2).max(1);
    let floor_log2 = (usize::BITS - 1 - g.leading_zeros()) as usize;
    floor_log2.min(cfg.num_stages).max(1)
}

/// Per-axis window capped to the grid.
pub fn effective_window(grid: Shape3, w: usize) -> Shape3 {
    (grid.0.min(w), grid.1.min(w), grid.2.min(w))
}

/// Cyclic shift for the shifted block: half the window, zero where the
/// window already covers the whole axis.
pub fn shift_for(grid: Shape3, win: Shape3) -> Shape3 {
    let s = |g: usize, w: usize| if w >= g { 0 } else { w / 2 };
    (s(grid.0, win.0), s(grid.1, win.1), s(grid.2, win.2))
}

#[inline]
fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

fn padded_dims(grid: Shape3, win: Shape3) -> Shape3 {
    (
        ceil_div(grid.0, win.0) * win.0,
        ceil_div(grid.1, win.1) * win.1,
        ceil_div(grid.2, win.2) * win.2,
    )
}

pub fn num_windows(grid: Shape3, win: Shape3) -> usize {
    let p = padded_dims(grid, win);
    (p.0 / win.0) * (p.1 / win.1) * (p.2 / win.2)
}

/// Gather map [nW*Twin, C] <- [T, C]: cyclic shift by `shift`, zero padding
/// to window multiples, then window partition. Returns the map and nW.
pub fn window_partition_map(grid: Shape3, win: Shape3, shift: Shape3, c: usize) -> (IndexMap, usize) {
    let (gd, gh, gw) = grid;
    let (wd, wh, ww) = win;
    let (dp, hp, wp) = padded_dims(grid, win);
    let (nd, nh, nw) = (dp / wd, hp / wh, wp / ww);
    let n_windows = nd * nh * nw;
    let mut map = Vec::with_capacity(n_windows * wd * wh * ww * c);
    for wz in 0..nd {
        for wy in 0..nh {
            for wx in 0..nw {
                for tz in 0..wd {
                    for ty in 0..wh {
                        for tx in 0..ww {
                            // Roll by -shift: position p reads source (p+s) mod padded.
                            let sz = (wz * wd + tz + shift.0) % dp;
                            let sy = (wy * wh + ty + shift.1) % hp;
                            let sx = (wx * ww + tx + shift.2) % wp;
                            let src = if sz < gd && sy < gh && sx < gw {
                                (((sz * gh + sy) * gw + sx) * c) as i64
                            } else {
                                -1
                            };
                            for ch in 0..c {
                                map.push(if src < 0 { -1 } else { src + ch as i64 });
                            }
                        }
                    }
                }
            }
        }
    }
    (Arc::new(map), n_windows)
}

/// Inverse of `window_partition_map`: gather map [T, C] <- [nW*Twin, C].
pub fn window_reverse_map(grid: Shape3, win: Shape3, shift: Shape3, c: usize) -> IndexMap {
    let (gd, gh, gw) = grid;
    let (wd, wh, ww) = win;
    let (dp, hp, wp) = padded_dims(grid, win);
    let (nh, nw) = (hp / wh, wp / ww);
    let twin = wd * wh * ww;
    let mut map = Vec::with_capacity(gd * gh * gw * c);
    for z in 0..gd {
        for y in 0..gh {
            for x in 0..gw {
                let qz = (z + dp - shift.0) % dp;
                let qy = (y + hp - shift.1) % hp;
                let qx = (x + wp - shift.2) % wp;
                let widx = ((qz / wd) * nh + qy / wh) * nw + qx / ww;
                let tidx = ((qz % wd) * wh + qy % wh) * ww + qx % ww;
                let row = widx * twin + tidx;
                for ch in 0..c {
                    map.push((row * c + ch) as i64);
                }
            }
        }
    }
    Arc::new(map)
}

/// Attention mask [nW, Twin*Twin] for shifted windows: pairs whose tokens
/// come from different pre-shift boundary regions get MASK_NEG.
pub fn shift_attn_mask(grid: Shape3, win: Shape3, shift: Shape3) -> Arc<Vec<f64>> {
    let (wd, wh, ww) = win;
    let (dp, hp, wp) = padded_dims(grid, win);
    let (nd, nh, nw) = (dp / wd, hp / wh, wp / ww);
    let twin = wd * wh * ww;
    let id_axis = |u: usize, len: usize, w: usize, s: usize| -> usize {
        if s == 0 || u < len - w {
            0
        } else if u < len - s {
            1
        } else {
            2
        }
    };
    let mut mask = vec![0.0; nd * nh * nw * twin * twin];
    let mut ids = vec![0usize; twin];
    for wz in 0..nd {
        for wy in 0..nh {
            for wx in 0..nw {
                let widx = (wz * nh + wy) * nw + wx;
                for tz in 0..wd {
                    for ty in 0..wh {
                        for tx in 0..ww {
                            let sz = (wz * wd + tz + shift.0) % dp;
                            let sy = (wy * wh + ty + shift.1) % hp;
                            let sx = (wx * ww + tx + shift.2) % wp;
                            let id = (id_axis(sz, dp, wd, shift.0) * 3
                                + id_axis(sy, hp, wh, shift.1))
                                * 3
                                + id_axis(sx, wp, ww, shift.2);
                            ids[(tz * wh + ty) * ww + tx] = id;
                        }
                    }
                }
                let base = widx * twin * twin;
                for i in 0..twin {
                    for j in 0..twin {
                        if ids[i] != ids[j] {
                            mask[base + i * twin + j] = MASK_NEG;
                        }
                    }
                }
            }
        }
    }
    Arc::new(mask)
}

/// Relative position bias gather map [H, Twin*Twin] <- table [(2w-1)^3, H].
/// Offsets are indexed against the configured table window so the table
/// shape never depends on the runtime-effective window.
fn rel_bias_map(win: Shape3, table_win: usize, heads: usize) -> IndexMap {
    let (wd, wh, ww) = win;
    assert!(wd <= table_win && wh <= table_win && ww <= table_win, "window exceeds bias table");
    let m = 2 * table_win - 1;
    let twin = wd * wh * ww;
    let coord = |t: usize| -> (i64, i64, i64) {
        let z = t / (wh * ww);
        let y = (t / ww) % wh;
        let x = t % ww;
        (z as i64, y as i64, x as i64)
    };
    let off = (table_win - 1) as i64;
    let mut map = Vec::with_capacity(heads * twin * twin);
    for h in 0..heads {
        for i in 0..twin {
            let (iz, iy, ix) = coord(i);
            for j in 0..twin {
                let (jz, jy, jx) = coord(j);
                let rz = (iz - jz + off) as usize;
                let ry = (iy - jy + off) as usize;
                let rx = (ix - jx + off) as usize;
                let row = (rz * m + ry) * m + rx;
                map.push((row * heads + h) as i64);
            }
        }
    }
    Arc::new(map)
}

fn head_split_map(n_windows: usize, twin: usize, heads: usize, dh: usize) -> IndexMap {
    let c = heads * dh;
    let mut map = Vec::with_capacity(n_windows * twin * c);
    for w in 0..n_windows {
        for h in 0..heads {
            for t in 0..twin {
                let src = (w * twin + t) * c + h * dh;
                for d in 0..dh {
                    map.push((src + d) as i64);
                }
            }
        }
    }
    Arc::new(map)
}

fn head_merge_map(n_windows: usize, twin: usize, heads: usize, dh: usize) -> IndexMap {
    let mut map = Vec::with_capacity(n_windows * twin * heads * dh);
    for w in 0..n_windows {
        for t in 0..twin {
            for h in 0..heads {
                let src = ((w * heads + h) * twin + t) * dh;
                for d in 0..dh {
                    map.push((src + d) as i64);
                }
            }
        }
    }
    Arc::new(map)
}

/// [C, d, h, w] -> [T, C]
pub fn cdhw_to_tokens(g: &mut Graph, x: Var, c: usize, grid: Shape3) -> Var {
    let t = grid.0 * grid.1 * grid.2;
    let mut map = Vec::with_capacity(t * c);
    for tok in 0..t {
        for ch in 0..c {
            map.push((ch * t + tok) as i64);
        }
    }
    g.gather(x, Arc::new(map), vec![t, c])
}

/// [T, C] -> [C, d, h, w]
pub fn tokens_to_cdhw(g: &mut Graph, x: Var, c: usize, grid: Shape3) -> Var {
    let t = grid.0 * grid.1 * grid.2;
    let mut map = Vec::with_capacity(t * c);
    for ch in 0..c {
        for tok in 0..t {
            map.push((tok * c + ch) as i64);
        }
    }
    g.gather(x, Arc::new(map), vec![c, grid.0, grid.1, grid.2])
}

/// Non-overlapping p^3 blocks linearly projected to `c` channels via a
/// stride-p convolution. Output layout [c, d/p, h/p, w/p].
pub fn patch_embed(
    g: &mut Graph,
    crop: Var,
    w: Var,
    b: Var,
    crop_shape: Shape3,
    p: usize,
    c: usize,
) -> Result<Var> {
    token_grid(crop_shape, p)?;
    let spec = Conv3Spec {
        cin: 1,
        cout: c,
        d: crop_shape.0,
        h: crop_shape.1,
        w: crop_shape.2,
        k: p,
        stride: p,
        pad: 0,
    };
    Ok(g.conv3(crop, w, Some(b), spec))
}

pub struct AttnParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wp: Var,
    pub bp: Var,
    /// Relative position bias table [(2*table_win-1)^3, heads].
    pub table: Var,
    pub table_win: usize,
}

pub fn attn_params(
    g: &mut Graph,
    src: &mut dyn ParamSource,
    prefix: &str,
    c: usize,
    heads: usize,
    table_win: usize,
) -> AttnParams {
    let m = 2 * table_win - 1;
    AttnParams {
        wq: src.fetch(g, &format!("{prefix}.wq"), &[c, c], Init::TruncNormal),
        bq: src.fetch(g, &format!("{prefix}.bq"), &[c], Init::Zeros),
        wk: src.fetch(g, &format!("{prefix}.wk"), &[c, c], Init::TruncNormal),
        bk: src.fetch(g, &format!("{prefix}.bk"), &[c], Init::Zeros),
        wv: src.fetch(g, &format!("{prefix}.wv"), &[c, c], Init::TruncNormal),
        bv: src.fetch(g, &format!("{prefix}.bv"), &[c], Init::Zeros),
        wp: src.fetch(g, &format!("{prefix}.wp"), &[c, c], Init::TruncNormal),
        bp: src.fetch(g, &format!("{prefix}.bp"), &[c], Init::Zeros),
        table: src.fetch(g, &format!("{prefix}.rel"), &[m * m * m, heads], Init::TruncNormal),
        table_win,
    }
}

pub struct AttnOut {
    pub y: Var,
    /// Softmax attention weights [nW*heads*Twin, Twin], exposed so tests can
    /// assert row sums and uniformity directly.
    pub probs: Var,
}

/// Per-window multi-head self-attention with relative position bias.
/// `x` is [n_windows*Twin, C]; `mask` (if any) is [n_windows, Twin*Twin].
#[allow(clippy::too_many_arguments)]
pub fn window_attention(
    g: &mut Graph,
    x: Var,
    p: &AttnParams,
    n_windows: usize,
    win: Shape3,
    heads: usize,
    c: usize,
    mask: Option<Arc<Vec<f64>>>,
) -> AttnOut {
    assert_eq!(c % heads, 0, "channels not divisible by heads");
    let twin = win.0 * win.1 * win.2;
    let rows = n_windows * twin;
    let dh = c / heads;
    let q = g.linear(x, p.wq, Some(p.bq), rows, c, c);
    let k = g.linear(x, p.wk, Some(p.bk), rows, c, c);
    let v = g.linear(x, p.wv, Some(p.bv), rows, c, c);
    let split = head_split_map(n_windows, twin, heads, dh);
    let qh = g.gather(q, split.clone(), vec![n_windows * heads * twin, dh]);
    let kh = g.gather(k, split.clone(), vec![n_windows * heads * twin, dh]);
    let vh = g.gather(v, split, vec![n_windows * heads * twin, dh]);
    let attn = g.bmm(qh, kh, n_windows * heads, twin, dh, twin, true);
    let attn = g.scale(attn, 1.0 / (dh as f64).sqrt());
    let bias = g.gather(p.table, rel_bias_map(win, p.table_win, heads), vec![heads, twin * twin]);
    let attn = g.add_bias_broadcast(attn, bias, n_windows);
    let attn = match mask {
        Some(m) => g.add_mask(attn, m, n_windows, heads, twin * twin),
        None => attn,
    };
    let probs = g.softmax_rows(attn, n_windows * heads * twin, twin);
    let out = g.bmm(probs, vh, n_windows * heads, twin, twin, dh, false);
    let merged = g.gather(out, head_merge_map(n_windows, twin, heads, dh), vec![rows, c]);
    let y = g.linear(merged, p.wp, Some(p.bp), rows, c, c);
    AttnOut { y, probs }
}

pub struct BlockParams {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub attn: AttnParams,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn block_params(
    g: &mut Graph,
    src: &mut dyn ParamSource,
    prefix: &str,
    c: usize,
    heads: usize,
    table_win: usize,
    mlp_ratio: f64,
) -> BlockParams {
    let hid = mlp_hidden(c, mlp_ratio);
    BlockParams {
        ln1_g: src.fetch(g, &format!("{prefix}.ln1.g"), &[c], Init::Ones),
        ln1_b: src.fetch(g, &format!("{prefix}.ln1.b"), &[c], Init::Zeros),
        attn: attn_params(g, src, &format!("{prefix}.attn"), c, heads, table_win),
        ln2_g: src.fetch(g, &format!("{prefix}.ln2.g"), &[c], Init::Ones),
        ln2_b: src.fetch(g, &format!("{prefix}.ln2.b"), &[c], Init::Zeros),
        w1: src.fetch(g, &format!("{prefix}.mlp.w1"), &[c, hid], Init::TruncNormal),
        b1: src.fetch(g, &format!("{prefix}.mlp.b1"), &[hid], Init::Zeros),
        w2: src.fetch(g, &format!("{prefix}.mlp.w2"), &[hid, c], Init::TruncNormal),
        b2: src.fetch(g, &format!("{prefix}.mlp.b2"), &[c], Init::Zeros),
    }
}

/// Pre-norm transformer block: LN -> W-MSA -> residual, LN -> MLP -> residual.
#[allow(clippy::too_many_arguments)]
pub fn swin_block(
    g: &mut Graph,
    x: Var,
    bp: &BlockParams,
    grid: Shape3,
    c: usize,
    heads: usize,
    win: Shape3,
    shift: Shape3,
    mlp_ratio: f64,
) -> Var {
    let t = grid.0 * grid.1 * grid.2;
    let h = g.layer_norm_rows(x, bp.ln1_g, bp.ln1_b, t, c, LN_EPS);
    let (pmap, n_windows) = window_partition_map(grid, win, shift, c);
    let twin = win.0 * win.1 * win.2;
    let xw = g.gather(h, pmap, vec![n_windows * twin, c]);
    let mask = if shift.0 > 0 || shift.1 > 0 || shift.2 > 0 {
        Some(shift_attn_mask(grid, win, shift))
    } else {
        None
    };
    let a = window_attention(g, xw, &bp.attn, n_windows, win, heads, c, mask);
    let rmap = window_reverse_map(grid, win, shift, c);
    let ar = g.gather(a.y, rmap, vec![t, c]);
    let x1 = g.add(x, ar);
    let h2 = g.layer_norm_rows(x1, bp.ln2_g, bp.ln2_b, t, c, LN_EPS);
    let hid = mlp_hidden(c, mlp_ratio);
    let m = g.linear(h2, bp.w1, Some(bp.b1), t, c, hid);
    let m = g.gelu(m);
    let m = g.linear(m, bp.w2, Some(bp.b2), t, hid, c);
    g.add(x1, m)
}

pub struct StageParams {
    pub blocks: Vec<BlockParams>,
}

#[allow(clippy::too_many_arguments)]
pub fn stage_params(
    g: &mut Graph,
    src: &mut dyn ParamSource,
    prefix: &str,
    c: usize,
    heads: usize,
    depth: usize,
    table_win: usize,
    mlp_ratio: f64,
) -> StageParams {
    let blocks = (0..depth)
        .map(|i| block_params(g, src, &format!("{prefix}.b{i}"), c, heads, table_win, mlp_ratio))
        .collect();
    StageParams { blocks }
}

/// Runs the stage's blocks (alternating regular and shifted windows) on a
/// [T, C] token map. Patch merging is a separate op.
#[allow(clippy::too_many_arguments)]
pub fn swin_stage(
    g: &mut Graph,
    x: Var,
    sp: &StageParams,
    grid: Shape3,
    c: usize,
    heads: usize,
    window_size: usize,
    mlp_ratio: f64,
) -> Var {
    let win = effective_window(grid, window_size);
    let mut cur = x;
    for (i, bp) in sp.blocks.iter().enumerate() {
        let shift = if i % 2 == 1 { shift_for(grid, win) } else { (0, 0, 0) };
        cur = swin_block(g, cur, bp, grid, c, heads, win, shift, mlp_ratio);
    }
    cur
}

pub struct MergeParams {
    pub ln_g: Var,
    pub ln_b: Var,
    pub w: Var,
}

pub fn merge_params(g: &mut Graph, src: &mut dyn ParamSource, prefix: &str, c: usize) -> MergeParams {
    MergeParams {
        ln_g: src.fetch(g, &format!("{prefix}.ln.g"), &[8 * c], Init::Ones),
        ln_b: src.fetch(g, &format!("{prefix}.ln.b"), &[8 * c], Init::Zeros),
        w: src.fetch(g, &format!("{prefix}.w"), &[8 * c, 2 * c], Init::TruncNormal),
    }
}

/// 2x2x2 neighborhood concat -> LN(8C) -> Linear 8C->2C (no bias): halves
/// each spatial dim, doubles channels.
pub fn patch_merge(
    g: &mut Graph,
    x: Var,
    mp: &MergeParams,
    grid: Shape3,
    c: usize,
) -> Result<(Var, Shape3)> {
    if !grid.0.is_multiple_of(2) || !grid.1.is_multiple_of(2) || !grid.2.is_multiple_of(2) {
        return Err(Error::Shape(format!("patch merge needs even grid, got {grid:?}")));
    }
    let half = (grid.0 / 2, grid.1 / 2, grid.2 / 2);
    let t2 = half.0 * half.1 * half.2;
    let mut map = Vec::with_capacity(t2 * 8 * c);
    for z in 0..half.0 {
        for y in 0..half.1 {
            for x2 in 0..half.2 {
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let tok = ((2 * z + dz) * grid.1 + 2 * y + dy) * grid.2 + 2 * x2 + dx;
                            for ch in 0..c {
                                map.push((tok * c + ch) as i64);
                            }
                        }
                    }
                }
            }
        }
    }
    let xm = g.gather(x, Arc::new(map), vec![t2, 8 * c]);
    let xn = g.layer_norm_rows(xm, mp.ln_g, mp.ln_b, t2, 8 * c, LN_EPS);
    let y = g.linear(xn, mp.w, None, t2, 8 * c, 2 * c);
    Ok((y, half))
}

pub struct EncoderParams {
    pub embed_w: Var,
    pub embed_b: Var,
    pub ln_g: Var,
    pub ln_b: Var,
    pub stages: Vec<StageParams>,
    pub merges: Vec<MergeParams>,
}

pub fn encoder_params(
    g: &mut Graph,
    src: &mut dyn ParamSource,
    prefix: &str,
    cfg: &SwinConfig,
    stages: usize,
) -> EncoderParams {
    let c = cfg.embed_dim;
    let p = cfg.patch_size;
    let embed_w = src.fetch(g, &format!("{prefix}.embed.w"), &[c, 1, p, p, p], Init::TruncNormal);
    let embed_b = src.fetch(g, &format!("{prefix}.embed.b"), &[c], Init::Zeros);
    let ln_g = src.fetch(g, &format!("{prefix}.embed.ln.g"), &[c], Init::Ones);
    let ln_b = src.fetch(g, &format!("{prefix}.embed.ln.b"), &[c], Init::Zeros);
    let mut stage_ps = Vec::with_capacity(stages);
    let mut merge_ps = Vec::new();
    for k in 0..stages {
        let ck = c << k;
        stage_ps.push(stage_params(
            g,
            src,
            &format!("{prefix}.s{k}"),
            ck,
            cfg.num_heads[k],
            cfg.depths[k],
            cfg.window_size,
            cfg.mlp_ratio,
        ));
        if k + 1 < stages {
            merge_ps.push(merge_params(g, src, &format!("{prefix}.m{k}"), ck));
        }
    }
    EncoderParams { embed_w, embed_b, ln_g, ln_b, stages: stage_ps, merges: merge_ps }
}

/// One stage's output feature map in token layout.
#[derive(Debug, Clone, Copy)]
pub struct StageFeature {
    pub tokens: Var,
    pub grid: Shape3,
    pub channels: usize,
}

/// Full encoder over one aperture crop: patch embed, LN, then the capped
/// stage stack with merging between stages. Returns every stage's output
/// (decoder skips); the last entry is the aperture's transformer output.
pub fn encode_aperture(
    g: &mut Graph,
    params: &EncoderParams,
    crop: Var,
    crop_shape: Shape3,
    cfg: &SwinConfig,
) -> Result<Vec<StageFeature>> {
    let grid0 = token_grid(crop_shape, cfg.patch_size)?;
    let stages = params.stages.len();
    let div = 1usize << (stages - 1);
    if grid0.0 % div != 0 || grid0.1 % div != 0 || grid0.2 % div != 0 {
        return Err(Error::Shape(format!(
            "token grid {grid0:?} not divisible by 2^(stages-1) = {div}"
        )));
    }
    let emb = patch_embed(g, crop, params.embed_w, params.embed_b, crop_shape, cfg.patch_size, cfg.embed_dim)?;
    let tok = cdhw_to_tokens(g, emb, cfg.embed_dim, grid0);
    let t0 = grid0.0 * grid0.1 * grid0.2;
    let mut cur = g.layer_norm_rows(tok, params.ln_g, params.ln_b, t0, cfg.embed_dim, LN_EPS);
    let mut grid = grid0;
    let mut c = cfg.embed_dim;
    let mut out = Vec::with_capacity(stages);
    for k in 0..stages {
        cur = swin_stage(g, cur, &params.stages[k], grid, c, cfg.num_heads[k], cfg.window_size, cfg.mlp_ratio);
        out.push(StageFeature { tokens: cur, grid, channels: c });
        if k + 1 < stages {
            let (merged, half) = patch_merge(g, cur, &params.merges[k], grid, c)?;
            cur = merged;
            grid = half;
            c *= 2;
        }
    }
    Ok(out)
}

pub fn attn_param_count(c: usize, heads: usize, table_win: usize) -> usize {
    let m = 2 * table_win - 1;
    4 * (c * c + c) + m * m * m * heads
}

pub fn block_param_count(c: usize, heads: usize, table_win: usize, mlp_ratio: f64) -> usize {
    let hid = mlp_hidden(c, mlp_ratio);
    4 * c + attn_param_count(c, heads, table_win) + (c * hid + hid) + (hid * c + c)
}

/// Closed-form scalar parameter count of one encoder; must match exactly
/// what `encoder_params` registers.
pub fn encoder_param_count(cfg: &SwinConfig, stages: usize) -> usize {
    let c = cfg.embed_dim;
    let mut n = c * cfg.patch_size.pow(3) + c + 2 * c;
    for k in 0..stages {
        let ck = c << k;
        n += cfg.depths[k] * block_param_count(ck, cfg.num_heads[k], cfg.window_size, cfg.mlp_ratio);
        if k + 1 < stages {
            n += 2 * (8 * ck) + (8 * ck) * (2 * ck);
        }
    }
    n
}
