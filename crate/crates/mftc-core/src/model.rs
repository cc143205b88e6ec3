//! Full network assembly: per-aperture transformer encoders, paired
//! convolutional modules and fusion blocks, and a decoder that reassembles
//! the nested apertures into full-resolution logits.
//!
//! The decoder performs nested center insertion: the outermost aperture's
//! fused map seeds a coarse canvas; each smaller aperture's fused map is
//! projected and added into the canvas center region at the offset recorded
//! by the pyramid (scaled by the current stride); transposed convolutions
//! halve the stride until the full patch resolution, where a raw-voxel stem
//! joins in and a 1x1x1 head emits per-class logits. All normalization in
//! the decoder is per-position over channels, so feature edits stay local.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    conv_hidden, conv_module, conv_module_param_count, conv_module_params, fuse, fuse_param_count,
    fuse_params, ConvModuleParams, FuseParams,
};
use crate::graph::{Graph, Var};
use crate::kernels::Conv3Spec;
use crate::params::{Init, ParamSource, ParamStore};
use crate::swin::{
    capped_stages, encode_aperture, encoder_param_count, encoder_params, tokens_to_cdhw,
    EncoderParams, SwinConfig,
};

/// Refinement conv blocks per decoder level (3x3x3 above full resolution,
/// 1x1x1 at full resolution to keep the last level strictly local).
pub const REFINES_PER_LEVEL: usize = 2;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub swin: SwinConfig,
    /// Number of nested apertures A (1..=4).
    pub apertures: usize,
    pub fusion_enabled: bool,
    pub num_classes: usize,
    /// Cubic training patch edge length.
    pub patch: usize,
    /// Decoder width per level, coarsest first; must have one entry per
    /// stride level from the top canvas down to full resolution.
    pub decoder_channels: Vec<usize>,
    pub se_reduction: usize,
    pub conv_hidden_ratio: f64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            swin: SwinConfig::desk(),
            apertures: 4,
            fusion_enabled: true,
            num_classes: 9,
            patch: 32,
            decoder_channels: vec![48, 24, 12],
            se_reduction: 4,
            conv_hidden_ratio: 2.0,
        }
    }

    pub fn paper() -> Self {
        ModelConfig {
            swin: SwinConfig::paper(),
            apertures: 4,
            fusion_enabled: true,
            num_classes: 9,
            patch: 128,
            decoder_channels: vec![480, 240, 120, 60, 30],
            se_reduction: 16,
            conv_hidden_ratio: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        plan(self).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelPlan {
    pub stride: usize,
    pub width: usize,
    /// Cubic canvas edge at this level.
    pub size: usize,
    /// Apertures (k >= 1) whose fused map inserts at this level.
    pub inserts: Vec<usize>,
    /// Aperture-0 stage skip joining at this level: (stage index, channels).
    pub skip: Option<(usize, usize)>,
}

/// Static geometry derived from the config; registration, forward, and the
/// closed-form parameter count all follow this one plan.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPlan {
    pub crops: Vec<usize>,
    pub grids: Vec<usize>,
    pub stages: Vec<usize>,
    pub t_channels: Vec<usize>,
    pub fstride: Vec<usize>,
    /// Cumulative center offset of aperture k in patch voxels.
    pub offsets: Vec<usize>,
    pub s_top: usize,
    pub levels: Vec<LevelPlan>,
}

struct ApertureGeometry {
    crops: Vec<usize>,
    grids: Vec<usize>,
    stages: Vec<usize>,
    t_channels: Vec<usize>,
    fstride: Vec<usize>,
    offsets: Vec<usize>,
}

fn aperture_geometry(cfg: &ModelConfig) -> Result<ApertureGeometry> {
    cfg.swin.validate()?;
    if !(1..=4).contains(&cfg.apertures) {
        return Err(Error::Config(format!("apertures must be 1..=4, got {}", cfg.apertures)));
    }
    if cfg.num_classes < 2 {
        return Err(Error::Config("num_classes must be >= 2".into()));
    }
    if cfg.se_reduction == 0 {
        return Err(Error::Config("se_reduction must be >= 1".into()));
    }
    if !(cfg.conv_hidden_ratio > 0.0) {
        return Err(Error::Config("conv_hidden_ratio must be positive".into()));
    }
    let p = cfg.swin.patch_size;
    if !p.is_power_of_two() {
        return Err(Error::Config(format!(
            "patch_size {p} must be a power of two so decoder strides can halve to 1"
        )));
    }
    let a = cfg.apertures;
    if cfg.patch == 0 || !cfg.patch.is_multiple_of(1 << (a - 1)) {
        return Err(Error::Config(format!(
            "patch {} not divisible by 2^(A-1) = {}",
            cfg.patch,
            1 << (a - 1)
        )));
    }
    let mut geo = ApertureGeometry {
        crops: Vec::with_capacity(a),
        grids: Vec::with_capacity(a),
        stages: Vec::with_capacity(a),
        t_channels: Vec::with_capacity(a),
        fstride: Vec::with_capacity(a),
        offsets: Vec::with_capacity(a),
    };
    for k in 0..a {
        let n_k = cfg.patch >> k;
        if !n_k.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "aperture {k} crop {n_k} not divisible by patch_size {p}"
            )));
        }
        let grid = n_k / p;
        let s_k = capped_stages(&cfg.swin, (grid, grid, grid));
        if !grid.is_multiple_of(1 << (s_k - 1)) {
            return Err(Error::Config(format!(
                "aperture {k} token grid {grid} not divisible by 2^(stages-1) = {}",
                1 << (s_k - 1)
            )));
        }
        let fs = p << (s_k - 1);
        let off = (cfg.patch - n_k) / 2;
        if k > 0 && !off.is_multiple_of(fs) {
            return Err(Error::Config(format!(
                "aperture {k} center offset {off} is not aligned to its feature stride {fs}; \
                 choose patch/apertures so offsets stay divisible"
            )));
        }
        geo.crops.push(n_k);
        geo.grids.push(grid);
        geo.stages.push(s_k);
        geo.t_channels.push(cfg.swin.embed_dim << (s_k - 1));
        geo.fstride.push(fs);
        geo.offsets.push(off);
    }
    Ok(geo)
}

pub fn plan(cfg: &ModelConfig) -> Result<ModelPlan> {
    let ApertureGeometry { crops, grids, stages, t_channels, fstride, offsets } =
        aperture_geometry(cfg)?;
    let a = cfg.apertures;
    let p = cfg.swin.patch_size;
    let s_top = fstride[0];
    let n_levels = s_top.trailing_zeros() as usize + 1;
    if cfg.decoder_channels.len() != n_levels {
        return Err(Error::Config(format!(
            "decoder_channels has {} entries but the stride ladder {s_top}..1 needs {n_levels}",
            cfg.decoder_channels.len()
        )));
    }
    let mut levels = Vec::with_capacity(n_levels);
    for i in 0..n_levels {
        let stride = s_top >> i;
        let width = cfg.decoder_channels[i];
        if width == 0 {
            return Err(Error::Config("decoder widths must be >= 1".into()));
        }
        let inserts: Vec<usize> = (1..a).filter(|&k| fstride[k] == stride).collect();
        let skip = (0..stages[0].saturating_sub(1))
            .find(|&j| (p << j) == stride)
            .map(|j| (j, cfg.swin.embed_dim << j));
        levels.push(LevelPlan { stride, width, size: cfg.patch / stride, inserts, skip });
    }
    Ok(ModelPlan { crops, grids, stages, t_channels, fstride, offsets, s_top, levels })
}

pub struct LevelParams {
    pub up: Option<(Var, Var)>,
    pub skip_merge: Option<(Var, Var)>,
    pub stem: Option<(Var, Var)>,
    pub stem_merge: Option<(Var, Var)>,
    /// (conv w, conv b, ln gamma, ln beta) per refinement block.
    pub refine: Vec<(Var, Var, Var, Var)>,
}

pub struct DecoderParams {
    pub proj0: (Var, Var),
    /// Insertion projections for apertures 1..A.
    pub ins: Vec<(Var, Var)>,
    pub levels: Vec<LevelParams>,
    pub head: (Var, Var),
}

pub struct ModelParams {
    pub encoders: Vec<EncoderParams>,
    pub convs: Vec<ConvModuleParams>,
    pub fuses: Vec<FuseParams>,
    pub dec: DecoderParams,
    pub plan: ModelPlan,
}

fn level_of(plan: &ModelPlan, stride: usize) -> usize {
    (plan.s_top / stride).trailing_zeros() as usize
}

/// Registers every learnable parameter in canonical order and returns the
/// bound graph leaves. The order defines checkpoint layout.
pub fn model_params(g: &mut Graph, src: &mut dyn ParamSource, cfg: &ModelConfig) -> Result<ModelParams> {
    let plan = plan(cfg)?;
    let a = cfg.apertures;
    let mut encoders = Vec::with_capacity(a);
    for k in 0..a {
        encoders.push(encoder_params(g, src, &format!("enc{k}"), &cfg.swin, plan.stages[k]));
    }
    let mut convs = Vec::new();
    let mut fuses = Vec::new();
    if cfg.fusion_enabled {
        for k in 0..a {
            let c = plan.t_channels[k];
            let hidden = conv_hidden(c, cfg.conv_hidden_ratio);
            convs.push(conv_module_params(g, src, &format!("conv{k}"), c, hidden));
            fuses.push(fuse_params(g, src, &format!("fuse{k}"), c, cfg.se_reduction)?);
        }
    }
    let dec = decoder_params(g, src, cfg, &plan);
    Ok(ModelParams { encoders, convs, fuses, dec, plan })
}

fn decoder_params(
    g: &mut Graph,
    src: &mut dyn ParamSource,
    cfg: &ModelConfig,
    plan: &ModelPlan,
) -> DecoderParams {
    let w0 = plan.levels[0].width;
    let c0 = plan.t_channels[0];
    let proj0 = (
        src.fetch(g, "dec.proj0.w", &[w0, c0, 1, 1, 1], Init::He { fan_in: c0 }),
        src.fetch(g, "dec.proj0.b", &[w0], Init::Zeros),
    );
    let mut ins = Vec::new();
    for k in 1..cfg.apertures {
        let w = plan.levels[level_of(plan, plan.fstride[k])].width;
        let ck = plan.t_channels[k];
        ins.push((
            src.fetch(g, &format!("dec.ins{k}.w"), &[w, ck, 1, 1, 1], Init::He { fan_in: ck }),
            src.fetch(g, &format!("dec.ins{k}.b"), &[w], Init::Zeros),
        ));
    }
    let mut levels = Vec::with_capacity(plan.levels.len());
    for (i, lv) in plan.levels.iter().enumerate() {
        let w = lv.width;
        let up = (i > 0).then(|| {
            let wp = plan.levels[i - 1].width;
            (
                src.fetch(g, &format!("dec.up{i}.w"), &[wp, w, 2, 2, 2], Init::He { fan_in: wp }),
                src.fetch(g, &format!("dec.up{i}.b"), &[w], Init::Zeros),
            )
        });
        let skip_merge = lv.skip.map(|(_, cs)| {
            (
                src.fetch(g, &format!("dec.skip{i}.w"), &[w, w + cs, 1, 1, 1], Init::He { fan_in: w + cs }),
                src.fetch(g, &format!("dec.skip{i}.b"), &[w], Init::Zeros),
            )
        });
        let (stem, stem_merge) = if lv.stride == 1 {
            (
                Some((
                    src.fetch(g, "dec.stem.w", &[w, 1, 3, 3, 3], Init::He { fan_in: 27 }),
                    src.fetch(g, "dec.stem.b", &[w], Init::Zeros),
                )),
                Some((
                    src.fetch(g, "dec.stem_merge.w", &[w, 2 * w, 1, 1, 1], Init::He { fan_in: 2 * w }),
                    src.fetch(g, "dec.stem_merge.b", &[w], Init::Zeros),
                )),
            )
        } else {
            (None, None)
        };
        let k = if lv.stride > 1 { 3 } else { 1 };
        let refine = (0..REFINES_PER_LEVEL)
            .map(|r| {
                (
                    src.fetch(
                        g,
                        &format!("dec.l{i}.r{r}.w"),
                        &[w, w, k, k, k],
                        Init::He { fan_in: w * k * k * k },
                    ),
                    src.fetch(g, &format!("dec.l{i}.r{r}.b"), &[w], Init::Zeros),
                    src.fetch(g, &format!("dec.l{i}.r{r}.ln.g"), &[w], Init::Ones),
                    src.fetch(g, &format!("dec.l{i}.r{r}.ln.b"), &[w], Init::Zeros),
                )
            })
            .collect();
        levels.push(LevelParams { up, skip_merge, stem, stem_merge, refine });
    }
    let wl = plan.levels.last().unwrap().width;
    let head = (
        src.fetch(g, "dec.head.w", &[cfg.num_classes, wl, 1, 1, 1], Init::TruncNormal),
        src.fetch(g, "dec.head.b", &[cfg.num_classes], Init::Zeros),
    );
    DecoderParams { proj0, ins, levels, head }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Replace this aperture's fused map with zeros before decoding
    /// (perturbation-locality probes).
    pub zero_fused: Option<usize>,
}

pub struct ForwardOut {
    /// [num_classes, patch, patch, patch]
    pub logits: Var,
    /// Per-aperture decoder inputs (fused maps, or transformer maps when
    /// fusion is disabled), channel-first.
    pub fused: Vec<Var>,
}

fn conv1x1(g: &mut Graph, x: Var, w: Var, b: Var, cin: usize, cout: usize, m: usize) -> Var {
    g.conv3(x, w, Some(b), Conv3Spec { cin, cout, d: m, h: m, w: m, k: 1, stride: 1, pad: 0 })
}

/// Index map for adding a [c, e^3] patch into the center of a [c, m^3]
/// canvas at cubic offset `o`.
fn insert_indices(c: usize, m: usize, e: usize, o: usize) -> Arc<Vec<usize>> {
    let mut idx = Vec::with_capacity(c * e * e * e);
    for ch in 0..c {
        for z in 0..e {
            for y in 0..e {
                for x in 0..e {
                    idx.push(((ch * m + o + z) * m + o + y) * m + o + x);
                }
            }
        }
    }
    Arc::new(idx)
}

/// Full forward pass over the aperture crops (crops[k] is [1, n_k^3]).
pub fn forward(
    g: &mut Graph,
    p: &ModelParams,
    cfg: &ModelConfig,
    crops: &[Var],
    opts: ForwardOptions,
) -> Result<ForwardOut> {
    let plan = &p.plan;
    let a = cfg.apertures;
    if crops.len() != a {
        return Err(Error::Shape(format!("expected {a} aperture crops, got {}", crops.len())));
    }
    for (k, &crop) in crops.iter().enumerate() {
        let n = plan.crops[k];
        if g.data(crop).len() != n * n * n {
            return Err(Error::Shape(format!(
                "aperture {k} crop has {} voxels, expected {}",
                g.data(crop).len(),
                n * n * n
            )));
        }
    }
    // Encoders and fusion.
    let mut fused = Vec::with_capacity(a);
    let mut skips0 = Vec::new();
    for (k, &crop) in crops.iter().enumerate() {
        let n = plan.crops[k];
        let feats = encode_aperture(g, &p.encoders[k], crop, (n, n, n), &cfg.swin)?;
        if k == 0 {
            skips0 = feats.clone();
        }
        let tf = feats.last().unwrap();
        let gdim = tf.grid;
        let c = tf.channels;
        let t_map = tokens_to_cdhw(g, tf.tokens, c, gdim);
        let f = if cfg.fusion_enabled {
            let hidden = conv_hidden(c, cfg.conv_hidden_ratio);
            let c_map = conv_module(g, t_map, &p.convs[k], c, hidden, gdim);
            fuse(g, t_map, c_map, &p.fuses[k], c, gdim)?.y
        } else {
            t_map
        };
        let f = if opts.zero_fused == Some(k) {
            let e = gdim.0 * gdim.1 * gdim.2;
            g.constant(vec![0.0; c * e], vec![c, gdim.0, gdim.1, gdim.2])
        } else {
            f
        };
        fused.push(f);
    }
    // Decoder.
    let mut carried: Option<Var> = None;
    for (i, lv) in plan.levels.iter().enumerate() {
        let m = lv.size;
        let w = lv.width;
        let mut canvas = if let Some(prev) = carried {
            let (uw, ub) = p.dec.levels[i].up.unwrap();
            let wp = plan.levels[i - 1].width;
            let mp = plan.levels[i - 1].size;
            g.convt3_k2s2(prev, uw, Some(ub), wp, w, mp, mp, mp)
        } else {
            debug_assert_eq!(plan.grids[0] >> (plan.stages[0] - 1), m);
            conv1x1(g, fused[0], p.dec.proj0.0, p.dec.proj0.1, plan.t_channels[0], w, m)
        };
        for &k in &lv.inserts {
            let e = plan.grids[k] >> (plan.stages[k] - 1);
            let o = plan.offsets[k] / lv.stride;
            let (iw, ib) = p.dec.ins[k - 1];
            let patch = conv1x1(g, fused[k], iw, ib, plan.t_channels[k], w, e);
            canvas = g.add_into(canvas, patch, insert_indices(w, m, e, o));
        }
        if let Some((j, cs)) = lv.skip {
            let sf = &skips0[j];
            let skip_map = tokens_to_cdhw(g, sf.tokens, cs, sf.grid);
            let cat = g.concat(&[canvas, skip_map], vec![w + cs, m, m, m]);
            let (sw, sb) = p.dec.levels[i].skip_merge.unwrap();
            canvas = conv1x1(g, cat, sw, sb, w + cs, w, m);
        }
        if lv.stride == 1 {
            let (tw, tb) = p.dec.levels[i].stem.unwrap();
            let stem = g.conv3(
                crops[0],
                tw,
                Some(tb),
                Conv3Spec { cin: 1, cout: w, d: m, h: m, w: m, k: 3, stride: 1, pad: 1 },
            );
            let cat = g.concat(&[canvas, stem], vec![2 * w, m, m, m]);
            let (sw, sb) = p.dec.levels[i].stem_merge.unwrap();
            canvas = conv1x1(g, cat, sw, sb, 2 * w, w, m);
        }
        let t = m * m * m;
        for &(rw, rb, lg, lb) in &p.dec.levels[i].refine {
            let kk = if lv.stride > 1 { 3 } else { 1 };
            let pad = if lv.stride > 1 { 1 } else { 0 };
            let h = g.conv3(
                canvas,
                rw,
                Some(rb),
                Conv3Spec { cin: w, cout: w, d: m, h: m, w: m, k: kk, stride: 1, pad },
            );
            let h = g.layer_norm_cols(h, lg, lb, w, t, LN_EPS);
            canvas = g.gelu(h);
        }
        carried = Some(canvas);
    }
    let canvas = carried.unwrap();
    let wl = plan.levels.last().unwrap().width;
    let logits = conv1x1(g, canvas, p.dec.head.0, p.dec.head.1, wl, cfg.num_classes, cfg.patch);
    Ok(ForwardOut { logits, fused })
}

/// Closed-form learnable scalar count; must agree exactly with enumerating
/// the registered parameter containers. An empty decoder schedule counts
/// the encoder/fusion side alone (such a config cannot run forward).
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    let geo = aperture_geometry(cfg)?;
    let a = cfg.apertures;
    let mut n = 0;
    for k in 0..a {
        n += encoder_param_count(&cfg.swin, geo.stages[k]);
    }
    if cfg.fusion_enabled {
        for k in 0..a {
            let c = geo.t_channels[k];
            n += conv_module_param_count(c, conv_hidden(c, cfg.conv_hidden_ratio));
            n += fuse_param_count(c, cfg.se_reduction);
        }
    }
    if !cfg.decoder_channels.is_empty() {
        n += decoder_param_count(cfg, &plan(cfg)?);
    }
    Ok(n)
}

fn decoder_param_count(cfg: &ModelConfig, plan: &ModelPlan) -> usize {
    if cfg.decoder_channels.is_empty() {
        return 0;
    }
    let w0 = plan.levels[0].width;
    let mut n = plan.t_channels[0] * w0 + w0;
    for k in 1..cfg.apertures {
        let w = plan.levels[level_of(plan, plan.fstride[k])].width;
        n += plan.t_channels[k] * w + w;
    }
    for (i, lv) in plan.levels.iter().enumerate() {
        let w = lv.width;
        if i > 0 {
            n += plan.levels[i - 1].width * w * 8 + w;
        }
        if let Some((_, cs)) = lv.skip {
            n += (w + cs) * w + w;
        }
        if lv.stride == 1 {
            n += 27 * w + w + 2 * w * w + w;
        }
        let k3 = if lv.stride > 1 { 27 } else { 1 };
        n += REFINES_PER_LEVEL * (w * w * k3 + w + 2 * w);
    }
    let wl = plan.levels.last().unwrap().width;
    n + wl * cfg.num_classes + cfg.num_classes
}

/// Builds a fully registered parameter store for the config (fresh init).
pub fn store_for_config(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new(seed);
    let mut g = Graph::new();
    model_params(&mut g, &mut store, cfg)?;
    store.begin_graph();
    Ok(store)
}

/// Records parameter names and shapes without allocating values; used to
/// enumerate paper-scale models cheaply.
pub struct ShapeRecorder {
    pub entries: Vec<(String, Vec<usize>)>,
}

impl ShapeRecorder {
    pub fn new() -> Self {
        ShapeRecorder { entries: Vec::new() }
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

impl Default for ShapeRecorder {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSource for ShapeRecorder {
    fn fetch(&mut self, g: &mut Graph, name: &str, shape: &[usize], _init: Init) -> Var {
        self.entries.push((name.to_string(), shape.to_vec()));
        g.leaf(vec![0.0], vec![1], false)
    }
}

/// Serializable PRNG position for exact training resumption.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    /// u128 word position, decimal string (JSON numbers stop at u64).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha12Rng) -> Self {
        RngState { seed: rng.get_seed(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha12Rng> {
        let mut rng = ChaCha12Rng::from_seed(self.seed);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Config(format!("bad rng word_pos {:?}", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub epoch: usize,
    pub best_metric: f64,
    pub rng_state: RngState,
    pub param_scalars: usize,
}

fn ckpt_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Writes `<stem>.json` (manifest) and `<stem>.bin` (f64 little-endian
/// parameter blob in canonical registration order).
pub fn save_checkpoint(stem: &Path, meta: &CheckpointMeta, store: &ParamStore) -> Result<()> {
    let (jp, bp) = ckpt_paths(stem);
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(&jp, e))?;
        }
    }
    let meta = CheckpointMeta { param_scalars: store.num_scalars(), ..meta.clone() };
    let mj = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Runtime(format!("manifest serialization failed: {e}")))?;
    std::fs::write(&jp, mj).map_err(|e| Error::io(&jp, e))?;
    let f = File::create(&bp).map_err(|e| Error::io(&bp, e))?;
    let mut w = BufWriter::new(f);
    for v in store.to_flat() {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&bp, e))?;
    }
    w.flush().map_err(|e| Error::io(&bp, e))?;
    Ok(())
}

/// Reads a checkpoint pair; the blob length must match the manifest.
pub fn load_checkpoint(stem: &Path) -> Result<(CheckpointMeta, Vec<f64>)> {
    let (jp, bp) = ckpt_paths(stem);
    let mj = std::fs::read_to_string(&jp).map_err(|e| Error::io(&jp, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&mj)
        .map_err(|e| Error::format(&jp, format!("bad checkpoint manifest: {e}")))?;
    let f = File::open(&bp).map_err(|e| Error::io(&bp, e))?;
    let mut r = BufReader::new(f);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(&bp, e))?;
    if bytes.len() != meta.param_scalars * 8 {
        return Err(Error::format(
            &bp,
            format!("blob holds {} bytes, manifest expects {}", bytes.len(), meta.param_scalars * 8),
        ));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((meta, flat))
}

/// Rebuilds a ready-to-use parameter store from a checkpoint.
pub fn store_from_checkpoint(meta: &CheckpointMeta, flat: &[f64]) -> Result<ParamStore> {
    let mut store = store_for_config(&meta.config, 0)?;
    store.load_flat(flat)?;
    Ok(store)
}

/// Extracts the A aperture crops of a cubic patch as graph leaves.
pub fn leaf_crops(
    g: &mut Graph,
    image: &[f64],
    patch: usize,
    apertures: usize,
) -> Result<Vec<Var>> {
    let sample = crate::aperture::PatchSample {
        image: image.to_vec(),
        labels: vec![0; image.len()],
        shape: (patch, patch, patch),
        corner: (0, 0, 0),
        case_id: String::new(),
    };
    let pyr = crate::aperture::build_aperture_pyramid(&sample, apertures)?;
    Ok(pyr
        .crops
        .into_iter()
        .zip(pyr.sizes)
        .map(|(c, s)| g.leaf(c, vec![1, s.0, s.1, s.2], false))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::check_gradients;
    use crate::params::VarList;
    use rand::{Rng, SeedableRng};

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            swin: SwinConfig {
                embed_dim: 4,
                patch_size: 2,
                depths: vec![1, 1],
                num_heads: vec![2, 2],
                window_size: 2,
                mlp_ratio: 2.0,
                num_stages: 2,
            },
            apertures: 2,
            fusion_enabled: true,
            num_classes: 3,
            patch: 16,
            decoder_channels: vec![8, 6, 4],
            se_reduction: 4,
            conv_hidden_ratio: 1.0,
        }
    }

    #[test]
    fn plan_geometry_desk() {
        let cfg = ModelConfig::desk();
        let pl = plan(&cfg).unwrap();
        assert_eq!(pl.crops, vec![32, 16, 8, 4]);
        assert_eq!(pl.grids, vec![16, 8, 4, 2]);
        assert_eq!(pl.stages, vec![2, 2, 2, 1]);
        assert_eq!(pl.t_channels, vec![24, 24, 24, 12]);
        assert_eq!(pl.fstride, vec![4, 4, 4, 2]);
        assert_eq!(pl.offsets, vec![0, 8, 12, 14]);
        assert_eq!(pl.s_top, 4);
        assert_eq!(pl.levels.len(), 3);
        assert_eq!(pl.levels[0].inserts, vec![1, 2]);
        assert_eq!(pl.levels[1].inserts, vec![3]);
        assert_eq!(pl.levels[1].skip, Some((0, 12)));
        assert_eq!(pl.levels[2].inserts, Vec::<usize>::new());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut bad = ModelConfig::desk();
        bad.apertures = 5;
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::desk();
        bad.decoder_channels = vec![48, 24];
        assert!(bad.validate().is_err());
        // patch = 96 = 3 * 32 leaves aperture 3's offset 42 misaligned with
        // its stride-4 features.
        let mut bad = ModelConfig::desk();
        bad.patch = 96;
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::desk();
        bad.patch = 30;
        assert!(bad.validate().is_err());
        // 16^3 cannot host four apertures (the innermost crop of 2 would sit
        // at offset 7, misaligned with stride 2).
        let mut bad = ModelConfig::desk();
        bad.patch = 16;
        assert!(bad.validate().is_err());
        bad.apertures = 3;
        assert!(bad.validate().is_ok());
    }

    #[test]
    fn forward_shape_and_determinism() {
        let cfg = tiny_cfg();
        let mut store = store_for_config(&cfg, 3).unwrap();
        let image = rand_vec(16 * 16 * 16, 9);
        let run = |store: &mut ParamStore| -> Vec<f64> {
            let mut g = Graph::new();
            store.begin_graph();
            let mp = model_params(&mut g, store, &cfg).unwrap();
            let crops = leaf_crops(&mut g, &image, 16, 2).unwrap();
            let out = forward(&mut g, &mp, &cfg, &crops, ForwardOptions::default()).unwrap();
            assert_eq!(g.shape(out.logits), &[3, 16, 16, 16]);
            g.data(out.logits).to_vec()
        };
        let a = run(&mut store);
        let b = run(&mut store);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_aperture_reduces_to_plain_encoder_decoder() {
        let mut cfg = tiny_cfg();
        cfg.apertures = 1;
        cfg.fusion_enabled = false;
        let store = store_for_config(&cfg, 1).unwrap();
        for name in store.names() {
            assert!(
                name.starts_with("enc0") || name.starts_with("dec."),
                "unexpected parameter {name} in single-aperture config"
            );
        }
        let mut g = Graph::new();
        let mut s = store.clone();
        let mp = model_params(&mut g, &mut s, &cfg).unwrap();
        assert!(mp.dec.ins.is_empty());
        let crops = leaf_crops(&mut g, &rand_vec(4096, 4), 16, 1).unwrap();
        let out = forward(&mut g, &mp, &cfg, &crops, ForwardOptions::default()).unwrap();
        assert_eq!(g.shape(out.logits), &[3, 16, 16, 16]);
    }

    #[test]
    fn fusion_disabled_never_registers_fusion_params() {
        let mut cfg = tiny_cfg();
        cfg.fusion_enabled = false;
        let store = store_for_config(&cfg, 1).unwrap();
        for name in store.names() {
            assert!(!name.starts_with("conv") && !name.starts_with("fuse"), "{name}");
        }
    }

    #[test]
    fn param_count_matches_enumeration() {
        for cfg in [
            tiny_cfg(),
            ModelConfig::desk(),
            {
                let mut c = ModelConfig::desk();
                c.fusion_enabled = false;
                c
            },
            {
                let mut c = ModelConfig::desk();
                c.apertures = 1;
                c.fusion_enabled = false;
                c
            },
        ] {
            let store = store_for_config(&cfg, 0).unwrap();
            assert_eq!(store.num_scalars(), param_count(&cfg).unwrap(), "{cfg:?}");
            let mut rec = ShapeRecorder::new();
            let mut g = Graph::new();
            model_params(&mut g, &mut rec, &cfg).unwrap();
            assert_eq!(rec.total_scalars(), param_count(&cfg).unwrap());
        }
        // Paper scale via shape recording only.
        let cfg = ModelConfig::paper();
        let mut rec = ShapeRecorder::new();
        let mut g = Graph::new();
        model_params(&mut g, &mut rec, &cfg).unwrap();
        assert_eq!(rec.total_scalars(), param_count(&cfg).unwrap());
    }

    #[test]
    fn empty_decoder_schedule_counts_encoders_only() {
        let mut cfg = tiny_cfg();
        cfg.fusion_enabled = false;
        cfg.decoder_channels = vec![];
        let pl = plan(&tiny_cfg()).unwrap();
        let enc_sum: usize =
            (0..cfg.apertures).map(|k| encoder_param_count(&cfg.swin, pl.stages[k])).sum();
        assert_eq!(param_count(&cfg).unwrap(), enc_sum);
        // Additivity: the full config is the encoder sum plus the decoder.
        let full = param_count(&tiny_cfg()).unwrap();
        let mut fusionless = tiny_cfg();
        fusionless.fusion_enabled = false;
        assert!(param_count(&fusionless).unwrap() > enc_sum);
        assert!(full > param_count(&fusionless).unwrap());
    }

    #[test]
    fn doubling_embed_dim_quadruples_attention_projections() {
        use crate::swin::attn_param_count;
        let c = 24;
        let heads = 4;
        let w = 4;
        let small = attn_param_count(c, heads, w);
        let big = attn_param_count(2 * c, heads, w);
        let m = 2 * w - 1;
        let table = m * m * m * heads;
        // Projection part (total minus bias and table) scales exactly 4x.
        assert_eq!(big - table - 4 * 2 * c, 4 * (small - table - 4 * c));
    }

    #[test]
    fn ablation_ladder_grows_and_hits_reference_budgets() {
        // Aperture count 1..4 without fusion, then fusion on top, at both
        // scales. Reference totals (millions) for the large preset.
        let reference = [26.0e6, 30.0e6, 34.0e6, 36.0e6, 40.0e6];
        for (base, check_budget) in [(ModelConfig::desk(), false), (ModelConfig::paper(), true)] {
            let mut prev = 0;
            for (i, (a, fusion)) in
                [(1, false), (2, false), (3, false), (4, false), (4, true)].iter().enumerate()
            {
                let mut cfg = base.clone();
                cfg.apertures = *a;
                cfg.fusion_enabled = *fusion;
                let n = param_count(&cfg).unwrap();
                assert!(n > prev, "ladder step {i} did not grow: {n} <= {prev}");
                prev = n;
                if check_budget {
                    let lo = reference[i] * 0.8;
                    let hi = reference[i] * 1.2;
                    assert!(
                        (n as f64) >= lo && (n as f64) <= hi,
                        "step {i}: {n} outside [{lo}, {hi}]"
                    );
                }
            }
        }
    }

    #[test]
    fn zeroing_innermost_aperture_is_spatially_local() {
        // Desk config: aperture 3 inserts at the stride-2 level, region
        // [7,9) per axis. Two 3^3 refinement convs dilate it to [5,11);
        // upsampling doubles it to [10,22); the full-resolution level is
        // strictly 1x1x1. Logits may differ only inside [10,22)^3.
        let cfg = ModelConfig::desk();
        let mut store = store_for_config(&cfg, 5).unwrap();
        let image = rand_vec(32 * 32 * 32, 31);
        let run = |store: &mut ParamStore, opts: ForwardOptions| -> Vec<f64> {
            let mut g = Graph::new();
            store.begin_graph();
            let mp = model_params(&mut g, store, &cfg).unwrap();
            let crops = leaf_crops(&mut g, &image, 32, 4).unwrap();
            let out = forward(&mut g, &mp, &cfg, &crops, opts).unwrap();
            g.data(out.logits).to_vec()
        };
        let base = run(&mut store, ForwardOptions::default());
        let pert = run(&mut store, ForwardOptions { zero_fused: Some(3) });
        let mut changed_inside = false;
        for c in 0..cfg.num_classes {
            for z in 0..32 {
                for y in 0..32 {
                    for x in 0..32 {
                        let i = ((c * 32 + z) * 32 + y) * 32 + x;
                        let diff = (base[i] - pert[i]).abs();
                        let inside = (10..22).contains(&z)
                            && (10..22).contains(&y)
                            && (10..22).contains(&x);
                        if inside {
                            changed_inside |= diff > 0.0;
                        } else {
                            assert_eq!(diff, 0.0, "leak at c={c} z={z} y={y} x={x}");
                        }
                    }
                }
            }
        }
        assert!(changed_inside, "perturbation had no effect at all");
    }

    #[test]
    fn forward_param_gradients_match_fd() {
        // Spot-check analytic gradients end to end on the tiny config.
        let cfg = tiny_cfg();
        let store = store_for_config(&cfg, 11).unwrap();
        let image = rand_vec(16 * 16 * 16, 13);
        let mut inputs = Vec::new();
        for i in 0..store.num_params() {
            inputs.push((store.shape_of(i).to_vec(), store.value_of(i).to_vec()));
        }
        // One coordinate per tensor here; the dense sweep lives in the
        // acceptance suite.
        let build = |g: &mut Graph, vars: &[Var]| -> Var {
            let mut vl = VarList::new(vars);
            let mp = model_params(g, &mut vl, &cfg).unwrap();
            let crops = leaf_crops(g, &image, 16, 2).unwrap();
            let out = forward(g, &mp, &cfg, &crops, ForwardOptions::default()).unwrap();
            g.mean_all(out.logits)
        };
        let rep = check_gradients(&build, &inputs, 1, 1e-5);
        assert!(rep.max_rel < 1e-3, "max rel err {}", rep.max_rel);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = tiny_cfg();
        let mut store = store_for_config(&cfg, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let rng = ChaCha12Rng::seed_from_u64(77);
        let meta = CheckpointMeta {
            config: cfg.clone(),
            epoch: 3,
            best_metric: 0.875,
            rng_state: RngState::capture(&rng),
            param_scalars: 0,
        };
        save_checkpoint(&stem, &meta, &store).unwrap();
        let (meta2, flat) = load_checkpoint(&stem).unwrap();
        assert_eq!(meta2.config, cfg);
        assert_eq!(meta2.epoch, 3);
        assert_eq!(meta2.best_metric, 0.875);
        let mut store2 = store_from_checkpoint(&meta2, &flat).unwrap();
        assert_eq!(store.to_flat(), store2.to_flat());
        let image = rand_vec(4096, 41);
        let run = |store: &mut ParamStore| -> Vec<f64> {
            let mut g = Graph::new();
            store.begin_graph();
            let mp = model_params(&mut g, store, &cfg).unwrap();
            let crops = leaf_crops(&mut g, &image, 16, 2).unwrap();
            let out = forward(&mut g, &mp, &cfg, &crops, ForwardOptions::default()).unwrap();
            g.data(out.logits).to_vec()
        };
        assert_eq!(run(&mut store), run(&mut store2));
        // RNG state survives the round trip exactly.
        let mut r1 = meta.rng_state.restore().unwrap();
        let mut r2 = meta2.rng_state.restore().unwrap();
        assert_eq!(r1.gen::<u64>(), r2.gen::<u64>());
    }
}
