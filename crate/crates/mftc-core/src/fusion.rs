//! Per-aperture convolutional module and the fusion block combining the
//! transformer map (via SE), the Hadamard product, and the convolutional
//! map (via CBAM), concatenated then projected back to C channels.
//!
//! Feature maps are channel-first [C, d*h*w] throughout this module.

use std::sync::Arc;

use crate::aperture::Shape3;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::Conv3Spec;
use crate::params::{Init, ParamSource};

pub const LN_EPS: f64 = 1e-5;

/// Replicate (border-clamp) padding as a gather: [c, d, h, w] ->
/// [c, d+2p, h+2p, w+2p]. Keeps spatially constant maps exactly constant
/// under convolution, which zero padding would break at the borders.
fn replicate_pad(g: &mut Graph, x: Var, c: usize, dims: Shape3, p: usize) -> Var {
    let (d, h, w) = dims;
    let (dp, hp, wp) = (d + 2 * p, h + 2 * p, w + 2 * p);
    let clamp = |v: usize, n: usize| v.saturating_sub(p).min(n - 1);
    let mut map = Vec::with_capacity(c * dp * hp * wp);
    for ch in 0..c {
        for z in 0..dp {
            let sz = clamp(z, d);
            for y in 0..hp {
                let sy = clamp(y, h);
                for x2 in 0..wp {
                    let sx = clamp(x2, w);
                    map.push(((ch * d + sz) * h * w + sy * w + sx) as i64);
                }
            }
        }
    }
    g.gather(x, Arc::new(map), vec![c, dp, hp, wp])
}

/// Internal width of the convolutional module. The conceptual default is a
/// 2x expansion; the ratio is configurable so paper-scale models can trade
/// it against the overall parameter budget.
pub fn conv_hidden(c: usize, ratio: f64) -> usize {
    (((c as f64) * ratio).round() as usize).max(1)
}

/// Largest divisor of `c` not exceeding the requested reduction, so gate
/// bottlenecks stay integral for any channel count.
pub fn effective_reduction(c: usize, r: usize) -> usize {
    let r = r.max(1);
    (1..=r.min(c)).rev().find(|d| c.is_multiple_of(*d)).unwrap_or(1)
}

fn conv_spec(cin: usize, cout: usize, dims: Shape3, k: usize, pad: usize) -> Conv3Spec {
    Conv3Spec { cin, cout, d: dims.0, h: dims.1, w: dims.2, k, stride: 1, pad }
}

pub struct ConvModuleParams {
    pub w1: Var,
    pub b1: Var,
    pub ln_g: Var,
    pub ln_b: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn conv_module_params(
    g: &mut Graph,
    src: &mut dyn ParamSource,
    prefix: &str,
    c: usize,
    hidden: usize,
) -> ConvModuleParams {
    ConvModuleParams {
        w1: src.fetch(g, &format!("{prefix}.w1"), &[hidden, c, 3, 3, 3], Init::He { fan_in: c * 27 }),
        b1: src.fetch(g, &format!("{prefix}.b1"), &[hidden], Init::Zeros),
        ln_g: src.fetch(g, &format!("{prefix}.ln.g"), &[hidden], Init::Ones),
        ln_b: src.fetch(g, &format!("{prefix}.ln.b"), &[hidden], Init::Zeros),
        w2: src.fetch(g, &format!("{prefix}.w2"), &[c, hidden, 3, 3, 3], Init::He { fan_in: hidden * 27 }),
        b2: src.fetch(g, &format!("{prefix}.b2"), &[c], Init::Zeros),
    }
}

/// Residual local-feature block: x + conv3x3(gelu(norm(conv3x3(x)))).
/// Channel count and spatial dims are preserved.
pub fn conv_module(
    g: &mut Graph,
    x: Var,
    p: &ConvModuleParams,
    c: usize,
    hidden: usize,
    dims: Shape3,
) -> Var {
    let t = dims.0 * dims.1 * dims.2;
    let h = g.conv3(x, p.w1, Some(p.b1), conv_spec(c, hidden, dims, 3, 1));
    let h = g.layer_norm_cols(h, p.ln_g, p.ln_b, hidden, t, LN_EPS);
    let h = g.gelu(h);
    let h = g.conv3(h, p.w2, Some(p.b2), conv_spec(hidden, c, dims, 3, 1));
    g.add(x, h)
}

pub fn conv_module_param_count(c: usize, hidden: usize) -> usize {
    hidden * c * 27 + hidden + 2 * hidden + c * hidden * 27 + c
}

pub struct SeParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn se_params(
    g: &mut Graph,
    src: &mut dyn ParamSource,
    prefix: &str,
    c: usize,
    r: usize,
) -> Result<SeParams> {
    if r == 0 || !c.is_multiple_of(r) {
        return Err(Error::Config(format!("SE reduction {r} does not divide {c} channels")));
    }
    let m = c / r;
    Ok(SeParams {
        w1: src.fetch(g, &format!("{prefix}.w1"), &[c, m], Init::TruncNormal),
        b1: src.fetch(g, &format!("{prefix}.b1"), &[m], Init::Zeros),
        w2: src.fetch(g, &format!("{prefix}.w2"), &[m, c], Init::TruncNormal),
        b2: src.fetch(g, &format!("{prefix}.b2"), &[c], Init::Zeros),
    })
}

pub struct SeOut {
    pub y: Var,
    /// Channel gate in (0,1)^C.
    pub gate: Var,
}

/// Squeeze-and-excitation: global average pool -> C -> C/r -> ReLU -> C ->
/// sigmoid -> channel-wise gate.
pub fn se_block(
    g: &mut Graph,
    x: Var,
    p: &SeParams,
    c: usize,
    r: usize,
    t: usize,
) -> Result<SeOut> {
    if r == 0 || !c.is_multiple_of(r) {
        return Err(Error::Config(format!("SE reduction {r} does not divide {c} channels")));
    }
    let m = c / r;
    let gap = g.row_mean(x, c, t);
    let h = g.linear(gap, p.w1, Some(p.b1), 1, c, m);
    let h = g.relu(h);
    let h = g.linear(h, p.w2, Some(p.b2), 1, m, c);
    let gate = g.sigmoid(h);
    let y = g.mul_col_broadcast(x, gate, c, t);
    Ok(SeOut { y, gate })
}

pub fn se_param_count(c: usize, r: usize) -> usize {
    let m = c / r;
    c * m + m + m * c + c
}

pub struct CbamParams {
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub conv_w: Var,
    pub conv_b: Var,
}

pub fn cbam_params(
    g: &mut Graph,
    src: &mut dyn ParamSource,
    prefix: &str,
    c: usize,
    r: usize,
) -> Result<CbamParams> {
    if r == 0 || !c.is_multiple_of(r) {
        return Err(Error::Config(format!("CBAM reduction {r} does not divide {c} channels")));
    }
    let m = c / r;
    Ok(CbamParams {
        mlp_w1: src.fetch(g, &format!("{prefix}.mlp.w1"), &[c, m], Init::TruncNormal),
        mlp_b1: src.fetch(g, &format!("{prefix}.mlp.b1"), &[m], Init::Zeros),
        mlp_w2: src.fetch(g, &format!("{prefix}.mlp.w2"), &[m, c], Init::TruncNormal),
        mlp_b2: src.fetch(g, &format!("{prefix}.mlp.b2"), &[c], Init::Zeros),
        conv_w: src.fetch(g, &format!("{prefix}.conv.w"), &[1, 2, 7, 7, 7], Init::He { fan_in: 2 * 343 }),
        conv_b: src.fetch(g, &format!("{prefix}.conv.b"), &[1], Init::Zeros),
    })
}

pub struct CbamOut {
    pub y: Var,
    pub channel_gate: Var,
    pub spatial_gate: Var,
}

/// Convolutional block attention: channel attention (shared MLP over avg-
/// and max-pooled descriptors, summed, sigmoid) followed by spatial
/// attention (7^3 convolution over channel-wise avg and max maps, sigmoid).
pub fn cbam(
    g: &mut Graph,
    x: Var,
    p: &CbamParams,
    c: usize,
    r: usize,
    dims: Shape3,
) -> Result<CbamOut> {
    if r == 0 || !c.is_multiple_of(r) {
        return Err(Error::Config(format!("CBAM reduction {r} does not divide {c} channels")));
    }
    let m = c / r;
    let t = dims.0 * dims.1 * dims.2;
    let mlp = |g: &mut Graph, d: Var| -> Var {
        let h = g.linear(d, p.mlp_w1, Some(p.mlp_b1), 1, c, m);
        let h = g.relu(h);
        g.linear(h, p.mlp_w2, Some(p.mlp_b2), 1, m, c)
    };
    let avg = g.row_mean(x, c, t);
    let mx = g.row_max(x, c, t);
    let ma = mlp(g, avg);
    let mm = mlp(g, mx);
    let s = g.add(ma, mm);
    let channel_gate = g.sigmoid(s);
    let x1 = g.mul_col_broadcast(x, channel_gate, c, t);
    let savg = g.col_mean(x1, c, t);
    let smax = g.col_max(x1, c, t);
    let stack = g.concat(&[savg, smax], vec![2, dims.0, dims.1, dims.2]);
    let padded = replicate_pad(g, stack, 2, dims, 3);
    let pdims = (dims.0 + 6, dims.1 + 6, dims.2 + 6);
    let sconv = g.conv3(padded, p.conv_w, Some(p.conv_b), conv_spec(2, 1, pdims, 7, 0));
    let spatial_gate = g.sigmoid(sconv);
    let y = g.mul_row_broadcast(x1, spatial_gate, c, t);
    Ok(CbamOut { y, channel_gate, spatial_gate })
}

pub fn cbam_param_count(c: usize, r: usize) -> usize {
    let m = c / r;
    c * m + m + m * c + c + 2 * 343 + 1
}

pub struct FuseParams {
    pub se: SeParams,
    pub cbam: CbamParams,
    pub proj_w: Var,
    pub proj_b: Var,
    /// Reduction actually used: largest divisor of C <= the requested one.
    pub reduction: usize,
}

pub fn fuse_params(
    g: &mut Graph,
    src: &mut dyn ParamSource,
    prefix: &str,
    c: usize,
    requested_r: usize,
) -> Result<FuseParams> {
    let r = effective_reduction(c, requested_r);
    Ok(FuseParams {
        se: se_params(g, src, &format!("{prefix}.se"), c, r)?,
        cbam: cbam_params(g, src, &format!("{prefix}.cbam"), c, r)?,
        proj_w: src.fetch(g, &format!("{prefix}.proj.w"), &[c, 3 * c, 1, 1, 1], Init::He { fan_in: 3 * c }),
        proj_b: src.fetch(g, &format!("{prefix}.proj.b"), &[c], Init::Zeros),
        reduction: r,
    })
}

pub struct FuseOut {
    /// Pre-projection concatenation [3C, d, h, w]: SE(t), t .* c, CBAM(c).
    pub pre: Var,
    /// Projected fused map [C, d, h, w].
    pub y: Var,
}

/// Fusion block: concat(SE(t), t .* c, CBAM(c)) followed by a 1x1x1
/// projection from 3C back to C channels.
pub fn fuse(
    g: &mut Graph,
    t_map: Var,
    c_map: Var,
    p: &FuseParams,
    c: usize,
    dims: Shape3,
) -> Result<FuseOut> {
    if g.data(t_map).len() != g.data(c_map).len() {
        return Err(Error::Shape(format!(
            "fuse inputs differ: {} vs {} values",
            g.data(t_map).len(),
            g.data(c_map).len()
        )));
    }
    let t = dims.0 * dims.1 * dims.2;
    let se = se_block(g, t_map, &p.se, c, p.reduction, t)?;
    let had = g.mul(t_map, c_map);
    let cb = cbam(g, c_map, &p.cbam, c, p.reduction, dims)?;
    let pre = g.concat(&[se.y, had, cb.y], vec![3 * c, dims.0, dims.1, dims.2]);
    let y = g.conv3(pre, p.proj_w, Some(p.proj_b), conv_spec(3 * c, c, dims, 1, 0));
    Ok(FuseOut { pre, y })
}

pub fn fuse_param_count(c: usize, requested_r: usize) -> usize {
    let r = effective_reduction(c, requested_r);
    se_param_count(c, r) + cbam_param_count(c, r) + c * 3 * c + c
}
