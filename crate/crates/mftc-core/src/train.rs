//! Training: AdamW over the flat parameter vector, cross-validation /
//! holdout splits, per-epoch sliding-window validation with best-checkpoint
//! retention, JSONL logging, and the loss/architecture ablation driver.

use std::collections::BTreeMap;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::aperture::{augment, sample_patch, AugmentConfig, PatchSample};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{total_loss, LossComponents, LossConfig};
use crate::metrics::{
    evaluate_case, sliding_window_inference, ClassMetrics, MetricsReport, SlidingWindowConfig,
};
use crate::model::{
    leaf_crops, model_params, param_count, save_checkpoint, CheckpointMeta, ForwardOptions,
    ModelConfig, RngState,
};
use crate::params::ParamStore;
use crate::phantom::{DatasetManifest, MANIFEST_NAME};
use crate::volume::{read_volume, LabelVolume, Volume};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

/// How cases are assigned to train/validation sets.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitMode {
    /// K-fold cross-validation (`folds` folds); `fold` picks the held-out one.
    #[default]
    CrossVal,
    /// Fixed split: first `train_cases` of the shuffled list train, the rest
    /// validate. Only fold 0 exists.
    Holdout { train_cases: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Patches drawn per epoch; optimizer steps per epoch is this divided by
    /// `batch_size` (rounded up).
    pub patches_per_epoch: usize,
    pub batch_size: usize,
    pub folds: usize,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    pub split: SplitMode,
    pub dataset_root: PathBuf,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 5e-5,
            epochs: 50,
            patches_per_epoch: 64,
            batch_size: 1,
            folds: 5,
            seed: 0,
            lr_schedule: LrSchedule::Constant,
            split: SplitMode::CrossVal,
            dataset_root: PathBuf::from("data"),
            model: ModelConfig::desk(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay > 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be positive, got {}",
                self.weight_decay
            )));
        }
        if self.epochs == 0 || self.patches_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs, patches_per_epoch, and batch_size must be positive".into(),
            ));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!(
                "cross-validation needs at least 2 folds, got {}",
                self.folds
            )));
        }
        if let SplitMode::Holdout { train_cases } = self.split {
            if train_cases == 0 {
                return Err(Error::Config("holdout split needs at least one training case".into()));
            }
        }
        self.model.validate()?;
        self.loss.validate()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.patches_per_epoch.div_ceil(self.batch_size)
    }

    /// Learning rate at 0-based global step `t` of `total` steps.
    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let frac = if total == 0 { 0.0 } else { t as f64 / total as f64 };
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Deterministic k-fold partition: shuffle by seed, deal round-robin.
/// Fold sizes differ by at most one; every id lands in exactly one fold.
pub fn kfold_split(case_ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > case_ids.len() {
        return Err(Error::Config(format!(
            "cannot split {} cases into {k} folds",
            case_ids.len()
        )));
    }
    let shuffled = seeded_shuffle(case_ids, seed);
    let mut folds = vec![Vec::new(); k];
    for (i, id) in shuffled.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(folds)
}

/// Deterministic fixed split: first `n_train` shuffled ids train, rest
/// validate.
pub fn holdout_split(
    case_ids: &[String],
    n_train: usize,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if n_train == 0 || n_train >= case_ids.len() {
        return Err(Error::Config(format!(
            "holdout train size {n_train} must leave both sides non-empty ({} cases)",
            case_ids.len()
        )));
    }
    let mut shuffled = seeded_shuffle(case_ids, seed);
    let val = shuffled.split_off(n_train);
    Ok((shuffled, val))
}

fn seeded_shuffle(ids: &[String], seed: u64) -> Vec<String> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut v: Vec<String> = ids.to_vec();
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
    v
}

/// Loads every case listed by the manifest; each must carry labels.
pub fn load_dataset(root: &Path) -> Result<Vec<(Volume, LabelVolume)>> {
    let mp = root.join(MANIFEST_NAME);
    let raw = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&raw)
        .map_err(|e| Error::format(&mp, format!("bad manifest JSON: {e}")))?;
    if manifest.case_ids.is_empty() {
        return Err(Error::format(&mp, "manifest lists no cases"));
    }
    let mut cases = Vec::with_capacity(manifest.case_ids.len());
    for id in &manifest.case_ids {
        let path = root.join(format!("{id}.vol"));
        let (v, l) = read_volume(&path)?;
        let l = l.ok_or_else(|| Error::format(&path, "case has no label channel"))?;
        cases.push((v, l));
    }
    Ok(cases)
}

/// AdamW with decoupled weight decay over the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamW {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        AdamW { weight_decay, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn apply(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(theta.len(), self.m.len(), "parameter count changed under the optimizer");
        assert_eq!(theta.len(), grad.len(), "gradient length mismatch");
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..theta.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + self.weight_decay * theta[i]);
        }
    }
}

fn opt_path(stem: &Path) -> PathBuf {
    stem.with_extension("opt.bin")
}

/// Persists optimizer moments next to a checkpoint: `<stem>.opt.bin` holds
/// step, count, then m and v as little-endian f64.
pub fn save_opt_state(stem: &Path, opt: &AdamW) -> Result<()> {
    let p = opt_path(stem);
    let n = opt.m.len();
    let mut buf = Vec::with_capacity(16 + 16 * n);
    buf.extend_from_slice(&opt.step.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    for x in opt.m.iter().chain(opt.v.iter()) {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(&p, buf).map_err(|e| Error::io(&p, e))
}

pub fn load_opt_state(stem: &Path, weight_decay: f64) -> Result<AdamW> {
    let p = opt_path(stem);
    let raw = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
    if raw.len() < 16 {
        return Err(Error::format(&p, "optimizer state file is truncated"));
    }
    let step = u64::from_le_bytes(raw[0..8].try_into().unwrap());
    let n = u64::from_le_bytes(raw[8..16].try_into().unwrap()) as usize;
    if raw.len() != 16 + 16 * n {
        return Err(Error::format(
            &p,
            format!("optimizer state holds {} bytes, expected {}", raw.len(), 16 + 16 * n),
        ));
    }
    let mut vals = raw[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let m: Vec<f64> = vals.by_ref().take(n).collect();
    let v: Vec<f64> = vals.collect();
    Ok(AdamW { weight_decay, step, m, v })
}

/// Mean loss over a batch of patches and the gradient in canonical flat
/// parameter order. The store's values are read, not modified.
pub fn loss_and_grad(
    cfg: &TrainConfig,
    store: &mut ParamStore,
    samples: &[PatchSample],
) -> Result<(LossComponents, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Config("loss_and_grad needs at least one sample".into()));
    }
    let mc = &cfg.model;
    let patch = mc.patch;
    let mut g = Graph::new();
    store.begin_graph();
    let params = model_params(&mut g, store, mc)?;
    let mut root: Option<Var> = None;
    let inv = 1.0 / samples.len() as f64;
    let mut comp = LossComponents { total: 0.0, dice: 0.0, ce: 0.0, dist: 0.0 };
    for s in samples {
        if s.shape != (patch, patch, patch) {
            return Err(Error::Shape(format!(
                "sample shape {:?} does not match model patch {patch}",
                s.shape
            )));
        }
        let crops = leaf_crops(&mut g, &s.image, patch, mc.apertures)?;
        let out = forward_patch(&mut g, &params, mc, &crops)?;
        let lo = total_loss(
            &mut g,
            out,
            &s.labels,
            (patch, patch, patch),
            mc.num_classes,
            &cfg.loss,
        )?;
        comp.dice += lo.components.dice * inv;
        comp.ce += lo.components.ce * inv;
        comp.dist += lo.components.dist * inv;
        root = Some(match root {
            Some(r) => g.add(r, lo.total),
            None => lo.total,
        });
    }
    let mut root = root.expect("non-empty batch");
    if samples.len() > 1 {
        root = g.scale(root, inv);
    }
    comp.total = g.data(root)[0];
    let grads = g.backward(root);
    let mut flat = Vec::with_capacity(store.num_scalars());
    for &(i, var) in store.bound() {
        match grads.get(var) {
            Some(gv) => flat.extend_from_slice(gv),
            None => flat.extend(std::iter::repeat_n(0.0, store.value_of(i).len())),
        }
    }
    Ok((comp, flat))
}

fn forward_patch(
    g: &mut Graph,
    params: &crate::model::ModelParams,
    mc: &ModelConfig,
    crops: &[Var],
) -> Result<Var> {
    Ok(crate::model::forward(g, params, mc, crops, ForwardOptions::default())?.logits)
}

/// One optimizer step: draw a batch from `cases`, backprop, update the
/// store in place. Errors on a non-finite loss.
pub fn train_step(
    cfg: &TrainConfig,
    store: &mut ParamStore,
    opt: &mut AdamW,
    cases: &[(Volume, LabelVolume)],
    rng: &mut ChaCha12Rng,
    lr: f64,
) -> Result<LossComponents> {
    if cases.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let patch = cfg.model.patch;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let (v, l) = &cases[rng.gen_range(0..cases.len())];
        let s = sample_patch(v, l, (patch, patch, patch), rng)?;
        batch.push(augment(&s, &cfg.augment, rng));
    }
    let (comp, grad) = loss_and_grad(cfg, store, &batch)?;
    if !comp.total.is_finite() {
        return Err(Error::Runtime(format!(
            "non-finite training loss {} (dice {}, ce {}, dist {})",
            comp.total, comp.dice, comp.ce, comp.dist
        )));
    }
    let mut theta = store.to_flat();
    opt.apply(&mut theta, &grad, lr);
    store.load_flat(&theta)?;
    Ok(comp)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub loss_components: LossComponents,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ValLog {
    pub epoch: usize,
    pub mean_dice: Option<f64>,
    pub mean_hd95: Option<f64>,
    pub per_class: BTreeMap<u8, ClassMetrics>,
}

/// Line-oriented JSONL sink; a disabled logger drops records.
pub struct TrainLogger {
    w: Option<std::io::BufWriter<std::fs::File>>,
}

impl TrainLogger {
    pub fn disabled() -> Self {
        TrainLogger { w: None }
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(TrainLogger { w: Some(std::io::BufWriter::new(f)) })
    }

    fn log<T: Serialize>(&mut self, record: &T) -> Result<()> {
        if let Some(w) = self.w.as_mut() {
            let line = serde_json::to_string(record).expect("log record serializes");
            writeln!(w, "{line}").map_err(|e| Error::Runtime(format!("log write failed: {e}")))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.w.as_mut() {
            w.flush().map_err(|e| Error::Runtime(format!("log flush failed: {e}")))?;
        }
        Ok(())
    }
}

/// Aggregates per-case reports into one epoch validation record.
pub fn aggregate_reports(epoch: usize, reports: &[MetricsReport]) -> ValLog {
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let dices: Vec<f64> = reports.iter().filter_map(|r| r.mean_dice).collect();
    let hds: Vec<f64> = reports.iter().filter_map(|r| r.mean_hd95).collect();
    let mut class_dice: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    let mut class_hd: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (&c, m) in &r.per_class {
            class_dice.entry(c).or_default().push(m.dice);
            if let Some(h) = m.hd95 {
                class_hd.entry(c).or_default().push(h);
            }
        }
    }
    let per_class = class_dice
        .into_iter()
        .map(|(c, ds)| {
            let hd = class_hd.get(&c).and_then(|v| mean(v));
            (c, ClassMetrics { dice: mean(&ds).expect("non-empty by construction"), hd95: hd })
        })
        .collect();
    ValLog { epoch, mean_dice: mean(&dices), mean_hd95: mean(&hds), per_class }
}

/// Full-volume validation of the current parameters over `val` cases.
pub fn validate_cases(
    cfg: &TrainConfig,
    store: &mut ParamStore,
    val: &[(Volume, LabelVolume)],
) -> Result<Vec<MetricsReport>> {
    let mc = &cfg.model;
    let sw = SlidingWindowConfig::new(mc.patch, mc.num_classes);
    let mut reports = Vec::with_capacity(val.len());
    for (v, gt) in val {
        let pred = sliding_window_inference(v, &sw, |patch: &[f64]| {
            let mut g = Graph::new();
            store.begin_graph();
            let params = model_params(&mut g, store, mc)?;
            let crops = leaf_crops(&mut g, patch, mc.patch, mc.apertures)?;
            let logits = forward_patch(&mut g, &params, mc, &crops)?;
            Ok(g.data(logits).to_vec())
        })?;
        reports.push(evaluate_case(&pred, gt, &v.case_id)?);
    }
    Ok(reports)
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_cases: Vec<String>,
    pub val_cases: Vec<String>,
    pub steps: Vec<StepLog>,
    pub vals: Vec<ValLog>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub checkpoint_stem: Option<PathBuf>,
}

fn mix_seed(seed: u64, fold: usize, stream: u64) -> u64 {
    seed ^ (fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Trains one fold end to end: deterministic split, AdamW over
/// `epochs x steps_per_epoch` steps, sliding-window validation each epoch,
/// best-mean-Dice checkpoint written to `out_dir` (when given) as
/// `fold{F}_best.{json,bin,opt.bin}` plus a `fold{F}_log.jsonl`.
pub fn train_fold(cfg: &TrainConfig, fold: usize, out_dir: Option<&Path>) -> Result<FoldReport> {
    cfg.validate()?;
    let cases = load_dataset(&cfg.dataset_root)?;
    let ids: Vec<String> = cases.iter().map(|(v, _)| v.case_id.clone()).collect();
    let (train_ids, val_ids) = match cfg.split {
        SplitMode::CrossVal => {
            let folds = kfold_split(&ids, cfg.folds, cfg.seed)?;
            if fold >= folds.len() {
                return Err(Error::Config(format!(
                    "fold {fold} out of range for {} folds",
                    folds.len()
                )));
            }
            let val = folds[fold].clone();
            let train: Vec<String> =
                ids.iter().filter(|id| !val.contains(id)).cloned().collect();
            (train, val)
        }
        SplitMode::Holdout { train_cases } => {
            if fold != 0 {
                return Err(Error::Config("holdout split has only fold 0".into()));
            }
            holdout_split(&ids, train_cases, cfg.seed)?
        }
    };
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(Error::Config("split produced an empty train or validation set".into()));
    }
    let pick = |wanted: &[String]| -> Vec<(Volume, LabelVolume)> {
        cases.iter().filter(|(v, _)| wanted.contains(&v.case_id)).cloned().collect()
    };
    let train_set = pick(&train_ids);
    let val_set = pick(&val_ids);
    for (_, l) in train_set.iter().chain(val_set.iter()) {
        if l.num_classes > cfg.model.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} label classes but the model predicts {}",
                l.num_classes, cfg.model.num_classes
            )));
        }
    }

    let mut logger = match out_dir {
        Some(dir) => TrainLogger::to_file(&dir.join(format!("fold{fold}_log.jsonl")))?,
        None => TrainLogger::disabled(),
    };
    let mut store = crate::model::store_for_config(&cfg.model, mix_seed(cfg.seed, fold, 0))?;
    let mut opt = AdamW::new(store.num_scalars(), cfg.weight_decay);
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, fold, 1));

    let steps_per_epoch = cfg.steps_per_epoch();
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut steps = Vec::with_capacity(total_steps);
    let mut vals = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<f64>, AdamW, RngState)> = None;
    let mut global = 0usize;
    for epoch in 0..cfg.epochs {
        for _ in 0..steps_per_epoch {
            let lr = cfg.lr_at(global, total_steps);
            let comp =
                train_step(cfg, &mut store, &mut opt, &train_set, &mut rng, lr).map_err(|e| {
                    Error::Runtime(format!("fold {fold} epoch {epoch} step {global}: {e}"))
                })?;
            let rec = StepLog { step: global, epoch, loss: comp.total, loss_components: comp };
            logger.log(&rec)?;
            steps.push(rec);
            global += 1;
        }
        let reports = validate_cases(cfg, &mut store, &val_set)?;
        let vlog = aggregate_reports(epoch, &reports);
        logger.log(&vlog)?;
        let score = vlog.mean_dice.unwrap_or(0.0);
        vals.push(vlog);
        let improved = best.as_ref().is_none_or(|(b, ..)| score > *b);
        if improved {
            best = Some((score, epoch, store.to_flat(), opt.clone(), RngState::capture(&rng)));
        }
    }
    logger.flush()?;

    let (best_dice, best_epoch, best_flat, best_opt, best_rng) =
        best.expect("at least one epoch ran");
    let checkpoint_stem = if let Some(dir) = out_dir {
        let stem = dir.join(format!("fold{fold}_best"));
        store.load_flat(&best_flat)?;
        let meta = CheckpointMeta {
            config: cfg.model.clone(),
            epoch: best_epoch,
            best_metric: best_dice,
            rng_state: best_rng,
            param_scalars: store.num_scalars(),
        };
        save_checkpoint(&stem, &meta, &store)?;
        save_opt_state(&stem, &best_opt)?;
        Some(stem)
    } else {
        None
    };

    Ok(FoldReport {
        fold,
        train_cases: train_ids,
        val_cases: val_ids,
        steps,
        vals,
        best_epoch,
        best_val_dice: best_dice,
        checkpoint_stem,
    })
}

/// One (model, loss) cell of an ablation sweep.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AblationCell {
    pub label: String,
    pub model: ModelConfig,
    pub loss: LossConfig,
}

/// Loss-function sweep over the four objective variants at a fixed model.
pub fn loss_ablation_cells(model: &ModelConfig) -> Vec<AblationCell> {
    LossConfig::ablation_variants()
        .into_iter()
        .map(|loss| AblationCell { label: loss.variant_name().to_string(), model: model.clone(), loss })
        .collect()
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub params: usize,
    pub mean_dice: Option<f64>,
    pub mean_hd95: Option<f64>,
    /// Mean loss components over the first epoch's steps.
    pub first_epoch: LossComponents,
}

/// Trains fold 0 for every cell and tabulates parameter count and best
/// validation metrics. A single-cell matrix reproduces `train_fold` exactly.
pub fn run_ablation(
    base: &TrainConfig,
    cells: &[AblationCell],
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    if cells.is_empty() {
        return Err(Error::Config("ablation needs at least one cell".into()));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut cfg = base.clone();
        cfg.model = cell.model.clone();
        cfg.loss = cell.loss.clone();
        let cell_dir = out_dir.map(|d| d.join(&cell.label));
        let report = train_fold(&cfg, 0, cell_dir.as_deref())?;
        let first: Vec<&StepLog> = report.steps.iter().filter(|s| s.epoch == 0).collect();
        let inv = 1.0 / first.len().max(1) as f64;
        let mut fe = LossComponents { total: 0.0, dice: 0.0, ce: 0.0, dist: 0.0 };
        for s in &first {
            fe.total += s.loss_components.total * inv;
            fe.dice += s.loss_components.dice * inv;
            fe.ce += s.loss_components.ce * inv;
            fe.dist += s.loss_components.dist * inv;
        }
        let best = report.vals.iter().find(|v| v.epoch == report.best_epoch);
        rows.push(AblationRow {
            label: cell.label.clone(),
            params: param_count(&cell.model)?,
            mean_dice: Some(report.best_val_dice),
            mean_hd95: best.and_then(|v| v.mean_hd95),
            first_epoch: fe,
        });
    }
    Ok(rows)
}

/// Plain-text ablation table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<18} {:>12} {:>10} {:>10} {:>12} {:>12}\n",
        "variant", "params", "mean_dice", "mean_hd95", "loss@ep0", "dist@ep0"
    ));
    for r in rows {
        let fmt_opt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "-".to_string(),
        };
        out.push_str(&format!(
            "{:<18} {:>12} {:>10} {:>10} {:>12.4} {:>12.4}\n",
            r.label,
            r.params,
            fmt_opt(r.mean_dice),
            fmt_opt(r.mean_hd95),
            r.first_epoch.total,
            r.first_epoch.dist
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::DistMode;
    use crate::model::load_checkpoint;
    use crate::phantom::{generate_dataset, PhantomSpec};
    use crate::swin::SwinConfig;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            swin: SwinConfig {
                embed_dim: 4,
                patch_size: 2,
                depths: vec![1, 1],
                num_heads: vec![2, 2],
                window_size: 2,
                mlp_ratio: 1.0,
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

    fn tiny_dataset(dir: &Path, n: usize) -> PhantomSpec {
        let spec = PhantomSpec {
            shape: (24, 24, 24),
            num_organs: 2,
            min_semi_axis: 2.5,
            max_semi_axis: 4.0,
            organ_noise_std: 0.02,
            background_noise_std: 0.05,
            seed: 11,
        };
        generate_dataset(&spec, n, dir).unwrap();
        spec
    }

    fn tiny_cfg(root: &Path) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            epochs: 1,
            patches_per_epoch: 3,
            batch_size: 1,
            folds: 2,
            seed: 7,
            lr_schedule: LrSchedule::Constant,
            split: SplitMode::CrossVal,
            dataset_root: root.to_path_buf(),
            model: tiny_model(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
        }
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("case_{i:03}")).collect()
    }

    #[test]
    fn kfold_partitions_deterministically() {
        let all = ids(30);
        let folds = kfold_split(&all, 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            assert_eq!(f.len(), 6);
        }
        let mut seen: Vec<String> = folds.concat();
        seen.sort();
        let mut want = all.clone();
        want.sort();
        assert_eq!(seen, want);
        assert_eq!(folds, kfold_split(&all, 5, 3).unwrap());
        assert_ne!(folds, kfold_split(&all, 5, 4).unwrap());
        // Uneven split: sizes differ by at most one.
        let folds = kfold_split(&ids(7), 3, 0).unwrap();
        let mut sizes: Vec<usize> = folds.iter().map(|f| f.len()).collect();
        sizes.sort();
        assert_eq!(sizes, vec![2, 2, 3]);
        assert!(kfold_split(&ids(3), 4, 0).is_err());
        assert!(kfold_split(&all, 1, 0).is_err());
    }

    #[test]
    fn holdout_keeps_both_sides() {
        let all = ids(30);
        let (tr, va) = holdout_split(&all, 18, 9).unwrap();
        assert_eq!((tr.len(), va.len()), (18, 12));
        let mut seen = tr.clone();
        seen.extend(va.clone());
        seen.sort();
        let mut want = all.clone();
        want.sort();
        assert_eq!(seen, want);
        assert_eq!(holdout_split(&all, 18, 9).unwrap(), (tr, va));
        assert!(holdout_split(&all, 0, 0).is_err());
        assert!(holdout_split(&all, 30, 0).is_err());
    }

    #[test]
    fn adamw_matches_hand_derivation() {
        // One parameter, constant gradient 0.5, lr 0.1, no decay:
        // m1 = 0.05, v1 = 0.00025, m^ = 0.5, v^ = 0.25.
        let mut opt = AdamW::new(1, 1e-12);
        let mut theta = vec![1.0];
        opt.apply(&mut theta, &[0.5], 0.1);
        let want = 1.0 - 0.1 * (0.5 / (0.25f64.sqrt() + ADAM_EPS) + 1e-12 * 1.0);
        assert!((theta[0] - want).abs() < 1e-15, "{} vs {want}", theta[0]);
        // Second step with gradient -0.25.
        let t1 = theta[0];
        opt.apply(&mut theta, &[-0.25], 0.1);
        let m2: f64 = 0.9 * 0.05 + 0.1 * (-0.25);
        let v2: f64 = 0.999 * 0.00025 + 0.001 * 0.0625;
        let bc1 = 1.0 - 0.9f64.powi(2);
        let bc2 = 1.0 - 0.999f64.powi(2);
        let want2 = t1 - 0.1 * ((m2 / bc1) / ((v2 / bc2).sqrt() + ADAM_EPS) + 1e-12 * t1);
        assert!((theta[0] - want2).abs() < 1e-15, "{} vs {want2}", theta[0]);
        // Decoupled decay shrinks the weight even at zero gradient.
        let mut opt = AdamW::new(1, 0.5);
        let mut theta = vec![2.0];
        opt.apply(&mut theta, &[0.0], 0.1);
        assert!((theta[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn opt_state_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck");
        let mut opt = AdamW::new(3, 0.01);
        let mut theta = vec![1.0, -2.0, 0.5];
        opt.apply(&mut theta, &[0.3, -0.1, 0.9], 0.05);
        opt.apply(&mut theta, &[-0.2, 0.4, 0.1], 0.05);
        save_opt_state(&stem, &opt).unwrap();
        let back = load_opt_state(&stem, 0.01).unwrap();
        assert_eq!(back, opt);
    }

    #[test]
    fn cosine_schedule_decays_from_base() {
        let mut cfg = TrainConfig {
            lr_schedule: LrSchedule::Cosine,
            learning_rate: 2.0,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0, 100), 2.0);
        assert!((cfg.lr_at(50, 100) - 1.0).abs() < 1e-12);
        assert!(cfg.lr_at(99, 100) < 0.01);
        cfg.lr_schedule = LrSchedule::Constant;
        assert_eq!(cfg.lr_at(73, 100), 2.0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = TrainConfig::default();
        let mut c = base.clone();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.weight_decay = -1.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.folds = 1;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = base;
        c.split = SplitMode::Holdout { train_cases: 0 };
        assert!(c.validate().is_err());
    }

    #[test]
    fn one_step_decreases_loss_on_fixed_patch() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path(), 2);
        let cfg = tiny_cfg(dir.path());
        let cases = load_dataset(dir.path()).unwrap();
        let mut store = crate::model::store_for_config(&cfg.model, 0).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let p = cfg.model.patch;
        let sample = sample_patch(&cases[0].0, &cases[0].1, (p, p, p), &mut rng).unwrap();
        let (before, grad) = loss_and_grad(&cfg, &mut store, std::slice::from_ref(&sample)).unwrap();
        let mut opt = AdamW::new(store.num_scalars(), cfg.weight_decay);
        let mut theta = store.to_flat();
        opt.apply(&mut theta, &grad, cfg.learning_rate);
        store.load_flat(&theta).unwrap();
        let (after, _) = loss_and_grad(&cfg, &mut store, &[sample]).unwrap();
        assert!(
            after.total < before.total,
            "loss did not decrease: {} -> {}",
            before.total,
            after.total
        );
    }

    #[test]
    fn fold_training_is_bit_exact_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path(), 4);
        let mut cfg = tiny_cfg(dir.path());
        cfg.patches_per_epoch = 5;
        let a = train_fold(&cfg, 0, None).unwrap();
        let b = train_fold(&cfg, 0, None).unwrap();
        assert_eq!(a.steps.len(), 5);
        for (x, y) in a.steps.iter().zip(&b.steps) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits(), "step {} diverged", x.step);
        }
        assert_eq!(a.vals, b.vals);
        assert_eq!(a.best_val_dice.to_bits(), b.best_val_dice.to_bits());
        // Different folds see different validation cases.
        let c = train_fold(&cfg, 1, None).unwrap();
        assert_ne!(a.val_cases, c.val_cases);
        assert!(train_fold(&cfg, 2, None).is_err());
    }

    #[test]
    fn distance_term_changes_the_trajectory_after_one_step() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path(), 4);
        let mut cfg = tiny_cfg(dir.path());
        cfg.patches_per_epoch = 2;
        cfg.loss.lambda_dist = 0.0;
        let base = train_fold(&cfg, 0, None).unwrap();
        cfg.loss.lambda_dist = 1.0;
        cfg.loss.dist_mode = DistMode::Differentiable;
        let with_dist = train_fold(&cfg, 0, None).unwrap();
        // Step 0 runs on identical parameters and data: the dice+ce parts
        // agree bitwise while the dist component is live only with lambda=1.
        let b0 = &base.steps[0].loss_components;
        let d0 = &with_dist.steps[0].loss_components;
        assert_eq!(b0.dice.to_bits(), d0.dice.to_bits());
        assert_eq!(b0.ce.to_bits(), d0.ce.to_bits());
        assert_eq!(b0.dist, 0.0);
        assert!(d0.dist > 0.0);
        // The extra gradient moves the parameters: step 1 diverges.
        let b1 = &base.steps[1].loss_components;
        let d1 = &with_dist.steps[1].loss_components;
        assert_ne!(b1.dice.to_bits(), d1.dice.to_bits());
    }

    #[test]
    fn full_fold_writes_best_checkpoint_and_log() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        tiny_dataset(&data, 4);
        let out = dir.path().join("run");
        let mut cfg = tiny_cfg(&data);
        cfg.epochs = 2;
        cfg.patches_per_epoch = 2;
        let report = train_fold(&cfg, 0, Some(&out)).unwrap();
        assert_eq!(report.steps.len(), 4);
        assert_eq!(report.vals.len(), 2);
        // Best-checkpoint invariant: retained metric >= every epoch's.
        for v in &report.vals {
            assert!(report.best_val_dice >= v.mean_dice.unwrap_or(0.0));
        }
        let stem = report.checkpoint_stem.clone().unwrap();
        let (meta, flat) = load_checkpoint(&stem).unwrap();
        assert_eq!(meta.epoch, report.best_epoch);
        assert_eq!(meta.best_metric.to_bits(), report.best_val_dice.to_bits());
        assert_eq!(meta.config, cfg.model);
        assert_eq!(flat.len(), meta.param_scalars);
        let opt = load_opt_state(&stem, cfg.weight_decay).unwrap();
        assert_eq!(opt.m.len(), flat.len());
        assert!(opt.step > 0);
        // JSONL log: one line per step and one per validation epoch, each
        // carrying the contract's field names.
        let log = std::fs::read_to_string(out.join("fold0_log.jsonl")).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), 4 + 2);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        for key in ["step", "epoch", "loss", "loss_components"] {
            assert!(first.get(key).is_some(), "step record missing {key}");
        }
        let val_line: serde_json::Value = serde_json::from_str(lines[2]).unwrap();
        for key in ["epoch", "mean_dice", "mean_hd95", "per_class"] {
            assert!(val_line.get(key).is_some(), "val record missing {key}");
        }
    }

    #[test]
    fn single_cell_ablation_reproduces_direct_training() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path(), 4);
        let cfg = tiny_cfg(dir.path());
        let direct = train_fold(&cfg, 0, None).unwrap();
        let cells = vec![AblationCell {
            label: "direct".into(),
            model: cfg.model.clone(),
            loss: cfg.loss.clone(),
        }];
        let rows = run_ablation(&cfg, &cells, None).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].mean_dice.unwrap().to_bits(), direct.best_val_dice.to_bits());
        assert_eq!(rows[0].params, param_count(&cfg.model).unwrap());
        let table = ablation_table(&rows);
        assert!(table.contains("direct"));
        assert_eq!(table.lines().count(), 2);
    }

    #[test]
    fn loss_sweep_produces_four_labeled_cells() {
        let cells = loss_ablation_cells(&tiny_model());
        let labels: Vec<&str> = cells.iter().map(|c| c.label.as_str()).collect();
        assert_eq!(labels, vec!["dice_ce", "focal_dice", "dice_ce_dist", "focal_dice_dist"]);
    }

    #[test]
    fn nonfinite_loss_aborts_with_diagnostic() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path(), 4);
        let mut cfg = tiny_cfg(dir.path());
        cfg.learning_rate = 1e200;
        cfg.patches_per_epoch = 4;
        let err = train_fold(&cfg, 0, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-finite"), "unexpected diagnostic: {msg}");
    }
}
