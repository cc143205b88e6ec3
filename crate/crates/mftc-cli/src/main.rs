//! `mftc` — command-line driver for the MFTC-Net 3D segmentation pipeline.
//!
//! Subcommands: `phantom` (synthesize a dataset), `train` (k-fold or
//! holdout training), `eval` (metrics from prediction/ground-truth pairs
//! or from a checkpoint), `ablate` (loss-variant grid), `params`
//! (parameter-count ladder), `viz` (slice montages and surface meshes).
//!
//! Exit codes: 0 on success, 2 for configuration/usage errors, 1 for
//! anything else. Every run that produces files echoes its effective
//! configuration to `<out>/config.json`, which reparses to the exact same
//! configuration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mftc_core::config::{apply_overrides, load_config, parse_set, AppConfig};
use mftc_core::error::{Error, Result};
use mftc_core::metrics::MetricsReport;
use mftc_core::model::{load_checkpoint, param_count, store_from_checkpoint, ModelConfig};
use mftc_core::phantom::generate_dataset;
use mftc_core::train::{
    ablation_table, load_dataset, loss_ablation_cells, run_ablation, train_fold, validate_cases,
    SplitMode,
};
use mftc_core::viz::{write_class_meshes, write_montage_png, MONTAGE_FRACTIONS};
use mftc_core::volume::read_volume;

#[derive(Parser)]
#[command(name = "mftc", version, about = "Multi-aperture fused transformer-convolution 3D segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON configuration file (defaults apply when omitted).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Dotted-path override, repeatable: --set train.learning_rate=0.01
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Seed override applied to phantom generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Write into an existing non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-organ phantom dataset.
    Phantom,
    /// Train the model (all folds of the split, or one with --fold).
    Train {
        /// Train only this fold.
        #[arg(long)]
        fold: Option<usize>,
        /// Dataset directory (overrides train.dataset_root).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Compute Dice/HD95 metrics: label pairs (--pred/--gt) or a
    /// checkpoint run over a dataset (--checkpoint/--data).
    Eval {
        /// Directory of predicted label volumes.
        #[arg(long, value_name = "DIR", requires = "gt")]
        pred: Option<PathBuf>,
        /// Directory of ground-truth label volumes.
        #[arg(long, value_name = "DIR", requires = "pred")]
        gt: Option<PathBuf>,
        /// Checkpoint stem (or its .json path) to run inference with.
        #[arg(long, value_name = "STEM", conflicts_with = "pred")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory (overrides train.dataset_root).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Train every loss variant on fold 0 and tabulate the results.
    Ablate,
    /// Print the parameter-count ladder across aperture/fusion variants.
    Params,
    /// Render slice montages and per-class surface meshes.
    Viz {
        /// Volume to render (.vol stem with labels, or an image file).
        /// When omitted, one phantom case is generated from the config.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    match &cli.command {
        Command::Phantom => {
            let out = prepare_out(&cli, &cfg)?;
            cmd_phantom(&cfg, &out)
        }
        Command::Train { fold, data } => {
            let out = prepare_out(&cli, &cfg)?;
            cmd_train(&cfg, &out, *fold, data.as_deref())
        }
        Command::Eval { pred, gt, checkpoint, data } => {
            let out = prepare_out(&cli, &cfg)?;
            cmd_eval(&cfg, &out, pred.as_deref(), gt.as_deref(), checkpoint.as_deref(), data.as_deref())
        }
        Command::Ablate => {
            let out = prepare_out(&cli, &cfg)?;
            cmd_ablate(&cfg, &out)
        }
        Command::Params => {
            let out = match &cli.out {
                Some(_) => Some(prepare_out(&cli, &cfg)?),
                None => None,
            };
            cmd_params(&cfg, out.as_deref())
        }
        Command::Viz { input } => {
            let out = prepare_out(&cli, &cfg)?;
            cmd_viz(&cfg, &out, input.as_deref())
        }
    }
}

/// File + overrides + seed flag, validated.
fn effective_config(cli: &Cli) -> Result<AppConfig> {
    let base = match &cli.config {
        Some(p) => load_config(p)?,
        None => AppConfig::default(),
    };
    let sets: Vec<(String, String)> =
        cli.set.iter().map(|s| parse_set(s)).collect::<Result<_>>()?;
    let mut cfg = apply_overrides(&base, &sets)?;
    if let Some(seed) = cli.seed {
        cfg.phantom.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Resolves --out, refuses non-empty directories without --force, and
/// echoes the effective config into it.
fn prepare_out(cli: &Cli, cfg: &AppConfig) -> Result<PathBuf> {
    let out = cli
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out DIR is required for this subcommand".into()))?;
    if out.exists() {
        let occupied =
            std::fs::read_dir(&out).map_err(|e| Error::io(&out, e))?.next().is_some();
        if occupied && !cli.force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --force to write into it",
                out.display()
            )));
        }
    } else {
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    }
    let echo = out.join("config.json");
    std::fs::write(&echo, cfg.to_json_pretty()).map_err(|e| Error::io(&echo, e))?;
    Ok(out)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Runtime(format!("serializing {}: {e}", path.display())))?;
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn cmd_phantom(cfg: &AppConfig, out: &Path) -> Result<()> {
    let ids = generate_dataset(&cfg.phantom, cfg.cases, out)?;
    println!("wrote {} cases to {}", ids.len(), out.display());
    Ok(())
}

fn cmd_train(cfg: &AppConfig, out: &Path, fold: Option<usize>, data: Option<&Path>) -> Result<()> {
    let mut tc = cfg.train.clone();
    if let Some(root) = data {
        tc.dataset_root = root.to_path_buf();
    }
    let folds: Vec<usize> = match (fold, &tc.split) {
        (Some(f), _) => vec![f],
        (None, SplitMode::Holdout { .. }) => vec![0],
        (None, SplitMode::CrossVal) => (0..tc.folds).collect(),
    };
    let mut reports = Vec::with_capacity(folds.len());
    for f in folds {
        let report = train_fold(&tc, f, Some(out))?;
        println!(
            "fold {f}: best mean Dice {:.6} at epoch {} ({} train / {} val cases)",
            report.best_val_dice,
            report.best_epoch,
            report.train_cases.len(),
            report.val_cases.len()
        );
        reports.push(report);
    }
    let mean: f64 =
        reports.iter().map(|r| r.best_val_dice).sum::<f64>() / reports.len() as f64;
    println!("mean best Dice over {} fold(s): {mean:.6}", reports.len());
    write_json(&out.join("train_summary.json"), &reports)
}

fn cmd_eval(
    cfg: &AppConfig,
    out: &Path,
    pred: Option<&Path>,
    gt: Option<&Path>,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
) -> Result<()> {
    let reports = match (pred, gt, checkpoint) {
        (Some(pred), Some(gt), None) => eval_label_dirs(pred, gt)?,
        (None, None, Some(stem)) => {
            let (meta, flat) = load_checkpoint(stem)?;
            let mut store = store_from_checkpoint(&meta, &flat)?;
            let mut tc = cfg.train.clone();
            tc.model = meta.config.clone();
            let root = data.unwrap_or(&tc.dataset_root);
            let cases = load_dataset(root)?;
            validate_cases(&tc, &mut store, &cases)?
        }
        _ => {
            return Err(Error::Config(
                "eval needs either --pred DIR with --gt DIR, or --checkpoint STEM (with optional --data DIR)".into(),
            ))
        }
    };
    write_json(&out.join("metrics.json"), &reports)?;
    let csv_path = out.join("metrics.csv");
    std::fs::write(&csv_path, mftc_core::metrics::reports_to_csv(&reports))
        .map_err(|e| Error::io(&csv_path, e))?;
    print_metrics_summary(&reports);
    Ok(())
}

/// Case ids in a label directory: sorted stems of `*.vol` files.
fn label_cases(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("vol") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Config(format!("no .vol volumes found in {}", dir.display())));
    }
    Ok(ids)
}

fn read_labels(dir: &Path, id: &str) -> Result<mftc_core::volume::LabelVolume> {
    let path = dir.join(format!("{id}.vol"));
    let (_, labels) = read_volume(&path)?;
    labels.ok_or_else(|| Error::format(&path, "volume has no label sidecar"))
}

fn eval_label_dirs(pred: &Path, gt: &Path) -> Result<Vec<MetricsReport>> {
    let ids = label_cases(gt)?;
    let mut reports = Vec::with_capacity(ids.len());
    for id in &ids {
        let g = read_labels(gt, id)?;
        let p = read_labels(pred, id)?;
        reports.push(mftc_core::metrics::evaluate_case(&p, &g, id)?);
    }
    Ok(reports)
}

fn print_metrics_summary(reports: &[MetricsReport]) {
    let dices: Vec<f64> = reports.iter().filter_map(|r| r.mean_dice).collect();
    let hds: Vec<f64> = reports.iter().filter_map(|r| r.mean_hd95).collect();
    println!("evaluated {} case(s)", reports.len());
    if !dices.is_empty() {
        println!("mean Dice: {:.6}", dices.iter().sum::<f64>() / dices.len() as f64);
    }
    if !hds.is_empty() {
        println!("mean HD95: {:.6}", hds.iter().sum::<f64>() / hds.len() as f64);
    }
}

fn cmd_ablate(cfg: &AppConfig, out: &Path) -> Result<()> {
    let cells = loss_ablation_cells(&cfg.train.model);
    let rows = run_ablation(&cfg.train, &cells, Some(out))?;
    let table = ablation_table(&rows);
    print!("{table}");
    let table_path = out.join("ablation.txt");
    std::fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    write_json(&out.join("ablation.json"), &rows)
}

/// The five-variant ladder: apertures 1..4 without fusion, then fusion.
const LADDER: [(&str, usize, bool); 5] = [
    ("T1", 1, false),
    ("T1+T2", 2, false),
    ("T1+T2+T3", 3, false),
    ("T1+T2+T3+T4", 4, false),
    ("T1+T2+T3+T4+fusion", 4, true),
];

fn ladder_counts(base: &ModelConfig) -> Result<Vec<usize>> {
    LADDER
        .iter()
        .map(|(_, apertures, fusion)| {
            let mut cfg = base.clone();
            cfg.apertures = *apertures;
            cfg.fusion_enabled = *fusion;
            param_count(&cfg)
        })
        .collect()
}

fn cmd_params(cfg: &AppConfig, out: Option<&Path>) -> Result<()> {
    let desk = ladder_counts(&ModelConfig::desk())?;
    let paper = ladder_counts(&ModelConfig::paper())?;
    let mut table = String::new();
    table.push_str(&format!(
        "{:<22} {:>9} {:>6} {:>12} {:>14}\n",
        "variant", "apertures", "fusion", "desk_params", "paper_params"
    ));
    for (i, (label, apertures, fusion)) in LADDER.iter().enumerate() {
        table.push_str(&format!(
            "{:<22} {:>9} {:>6} {:>12} {:>14}\n",
            label,
            apertures,
            if *fusion { "on" } else { "off" },
            desk[i],
            paper[i]
        ));
    }
    let configured = param_count(&cfg.train.model)?;
    table.push_str(&format!(
        "configured model: {configured} parameters (apertures {}, fusion {})\n",
        cfg.train.model.apertures,
        if cfg.train.model.fusion_enabled { "on" } else { "off" }
    ));
    print!("{table}");
    if let Some(out) = out {
        let path = out.join("params.txt");
        std::fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
        let rows: Vec<serde_json::Value> = LADDER
            .iter()
            .enumerate()
            .map(|(i, (label, apertures, fusion))| {
                serde_json::json!({
                    "variant": label,
                    "apertures": apertures,
                    "fusion": fusion,
                    "desk_params": desk[i],
                    "paper_params": paper[i],
                })
            })
            .collect();
        write_json(&out.join("params.json"), &rows)?;
    }
    Ok(())
}

fn cmd_viz(cfg: &AppConfig, out: &Path, input: Option<&Path>) -> Result<()> {
    let (volume, labels) = match input {
        Some(path) => read_volume(path)?,
        None => {
            let (v, l) = mftc_core::phantom::generate_phantom(&cfg.phantom)?;
            println!("no --input given; rendering one phantom case (seed {})", cfg.phantom.seed);
            (v, Some(l))
        }
    };
    let png = out.join(format!("{}_montage.png", volume.case_id));
    write_montage_png(&volume, labels.as_ref(), &MONTAGE_FRACTIONS, &png)?;
    println!("montage: {}", png.display());
    match &labels {
        Some(l) => {
            for export in write_class_meshes(l, out, &volume.case_id)? {
                match &export.path {
                    Some(p) => println!(
                        "class {}: {} vertices, {} faces -> {}",
                        export.class,
                        export.vertices,
                        export.faces,
                        p.display()
                    ),
                    None => println!("class {}: absent, mesh skipped", export.class),
                }
            }
        }
        None => println!("volume has no labels; skipping surface meshes"),
    }
    Ok(())
}
