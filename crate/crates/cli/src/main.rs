//! brainparc: brain MRI parcellation pipeline.
//!
//! Subcommands cover the full flow: `standardize` raw scans, `augment`
//! them with simulated artifacts, `train` the desk-scale scorer on
//! phantoms or NIfTI pairs, `segment` volumes with a trained model,
//! `evaluate` predictions against ground truth, and compute `icv` and
//! `stats`. Every output file gets a provenance sidecar; all randomness
//! flows from a single `--seed`.

mod provenance;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use brainparc::augment::{apply_pipeline, AugmentConfig};
use brainparc::hierarchy::{load_tree, trees, LabelTree};
use brainparc::inference::{segment_volume, PredictionMode};
use brainparc::metrics;
use brainparc::nifti;
use brainparc::standardize;
use brainparc::train::{self, TrainConfig};
use brainparc::{LabelVolume, Volume};
use provenance::Provenance;

#[derive(Parser)]
#[command(name = "brainparc", version, about = "Brain MRI parcellation pipeline")]
struct Cli {
    /// Seed for all randomness; drawn from entropy and recorded in the
    /// provenance sidecar when absent.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker cap; 1 guarantees bitwise determinism. The current
    /// implementation is single-threaded regardless.
    #[arg(long, global = true, default_value_t = 1, env = "BRAINPARC_THREADS")]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Fusion,
    Vote,
}

#[derive(Subcommand)]
enum Command {
    /// Reorient to RAS, resample to ~1 mm isotropic, normalize to [0, 1],
    /// and pad/crop to a cube.
    Standardize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        /// Paired label volume to carry through the same geometry.
        #[arg(long, requires = "labels_out")]
        labels: Option<PathBuf>,
        #[arg(long, requires = "labels")]
        labels_out: Option<PathBuf>,
        /// Cube side length of the standardized volume.
        #[arg(long, default_value_t = 256)]
        side: usize,
    },
    /// Apply the artifact-simulation pipeline to a standardized volume.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long, requires = "labels_out")]
        labels: Option<PathBuf>,
        #[arg(long, requires = "labels")]
        labels_out: Option<PathBuf>,
        /// TOML parameter ranges; defaults cover the standard 256-cube.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the slice scorer on synthetic phantoms or NIfTI pairs.
    Train {
        #[arg(long = "out")]
        output: PathBuf,
        /// Label tree: "phantom", "atlas", or a schema file path.
        #[arg(long, default_value = "phantom")]
        tree: String,
        /// Training TOML config; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of generated training phantoms.
        #[arg(long, default_value_t = 20)]
        phantoms: usize,
        /// Number of generated validation phantoms.
        #[arg(long, default_value_t = 5)]
        val_phantoms: usize,
        /// Phantom side length in voxels.
        #[arg(long, default_value_t = 32)]
        side: usize,
        /// Directory of `*_img.nii[.gz]` / `*_lab.nii[.gz]` pairs to use
        /// instead of generated phantoms (last 20% become validation).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Train unlabeled background with distance-weighted soft targets.
        #[arg(long)]
        weak: bool,
    },
    /// Segment a standardized volume with a trained model.
    Segment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Label tree: "phantom", "atlas", or a schema file path.
        #[arg(long)]
        tree: String,
        #[arg(long, value_enum, default_value_t = Mode::Fusion)]
        mode: Mode,
        #[arg(long = "out")]
        output: PathBuf,
        /// z-chunk length for fusion mode (bounds the score footprint).
        #[arg(long)]
        chunk: Option<usize>,
    },
    /// Per-region DSC/VS report against a ground-truth labeling.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        tree: String,
        #[arg(long = "out")]
        output: PathBuf,
        /// Region mapping file: `truth_id [pred_id]` per line.
        #[arg(long)]
        mapping: Option<PathBuf>,
    },
    /// Intracranial volume of a label volume in mm^3.
    Icv {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long = "out")]
        output: Option<PathBuf>,
    },
    /// Statistical tests and agreement analyses on value files.
    Stats {
        #[command(subcommand)]
        test: StatsCommand,
    },
}

#[derive(Subcommand)]
enum StatsCommand {
    /// Two-sided Wilcoxon signed-rank test on paired value files.
    Wilcoxon {
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        y: PathBuf,
    },
    /// Two-sided Mann-Whitney U test on independent value files.
    MannWhitney {
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        y: PathBuf,
    },
    /// Bland-Altman agreement of paired value files.
    BlandAltman {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Write the (mean, diff) points as a two-column table.
        #[arg(long)]
        points_out: Option<PathBuf>,
    },
    /// Annual percentage volume change.
    Apc {
        #[arg(long)]
        baseline: f64,
        #[arg(long)]
        followup: f64,
        #[arg(long)]
        years: f64,
    },
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

fn resolve_tree(spec: &str) -> Result<LabelTree> {
    match spec {
        "phantom" => Ok(trees::phantom()),
        "atlas" => Ok(trees::atlas_133()),
        path => load_tree(path).with_context(|| format!("loading tree {path}")),
    }
}

fn parse_values(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading values from {}", path.display()))?;
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(
            line.parse::<f64>()
                .with_context(|| format!("{}:{}: not a number", path.display(), lineno + 1))?,
        );
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli
        .seed
        .unwrap_or_else(|| rand::rng().random::<u64>());
    let threads = cli.threads.max(1);
    match cli.command {
        Command::Standardize {
            input,
            output,
            labels,
            labels_out,
            side,
        } => {
            let volume = nifti::read_volume(&input)?;
            let ras = nifti::reorient_to_ras(&volume)?;
            let iso = standardize::resample_to_isotropic(&ras, standardize::Interpolation::Linear);
            let norm = standardize::normalize_intensity(&iso)?;
            let cube = standardize::pad_crop_to_cube(&norm, side, 0.0);
            nifti::write_volume(&cube, &output)?;
            let mut prov = Provenance::new("standardize", seed);
            prov.input("volume", &input)
                .param("side", side)
                .param("threads", threads);
            prov.write_for(&output)?;
            if let (Some(lab_in), Some(lab_out)) = (labels.as_ref(), labels_out.as_ref()) {
                let l = nifti::read_label_volume(lab_in)?;
                let l = nifti::reorient_labels_to_ras(&l)?;
                let l = standardize::resample_labels_to_isotropic(&l);
                let l = standardize::pad_crop_labels_to_cube(&l, side);
                nifti::write_label_volume(&l, lab_out)?;
                let mut prov = Provenance::new("standardize", seed);
                prov.input("labels", lab_in).param("side", side);
                prov.write_for(lab_out)?;
            }
            Ok(())
        }
        Command::Augment {
            input,
            output,
            labels,
            labels_out,
            config,
        } => {
            let mut aug = match config.as_ref() {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .with_context(|| format!("reading config {}", path.display()))?;
                    AugmentConfig::from_toml(&text)?
                }
                None => AugmentConfig::default(),
            };
            if cli.seed.is_some() {
                aug.seed = seed;
            }
            let volume = nifti::read_volume(&input)?;
            let label_volume = labels
                .as_ref()
                .map(nifti::read_label_volume)
                .transpose()?;
            let mut rng = ChaCha8Rng::seed_from_u64(aug.seed);
            let (out_v, out_l) = apply_pipeline(&aug, &volume, label_volume.as_ref(), &mut rng)?;
            nifti::write_volume(&out_v, &output)?;
            let mut prov = Provenance::new("augment", aug.seed);
            prov.input("volume", &input)
                .param("config", aug.to_toml())
                .param("threads", threads);
            if let Some(p) = config.as_ref() {
                prov.input("config_file", p);
            }
            prov.write_for(&output)?;
            if let (Some(l), Some(path)) = (out_l, labels_out.as_ref()) {
                nifti::write_label_volume(&l, path)?;
                let mut prov = Provenance::new("augment", aug.seed);
                prov.input("labels", labels.as_ref().unwrap());
                prov.write_for(path)?;
            }
            Ok(())
        }
        Command::Train {
            output,
            tree,
            config,
            phantoms,
            val_phantoms,
            side,
            data_dir,
            iters,
            lr,
            weak,
        } => {
            let tree = resolve_tree(&tree)?;
            let mut cfg = match config.as_ref() {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .with_context(|| format!("reading config {}", path.display()))?;
                    toml::from_str::<TrainConfig>(&text)?
                }
                None => TrainConfig::default(),
            };
            if cli.seed.is_some() {
                cfg.seed = seed;
            }
            if let Some(n) = iters {
                cfg.schedule.max_iters = n;
            }
            if let Some(v) = lr {
                cfg.lr = v;
            }
            if weak {
                cfg.weak_supervision = true;
            }
            let (train_set, val_set) = match data_dir.as_ref() {
                Some(dir) => load_pairs(dir)?,
                None => {
                    let t = train::phantom_dataset(cfg.seed, phantoms, side, &tree);
                    let v =
                        train::phantom_dataset(cfg.seed + phantoms as u64, val_phantoms, side, &tree);
                    (t, v)
                }
            };
            let state = train::train(&train_set, &val_set, &tree, &cfg)?;
            train::save_model(&output, &state.backbone, &state.plane_weights, &tree)?;
            let mut prov = Provenance::new("train", cfg.seed);
            prov.param("config", toml::to_string(&cfg)?)
                .param("train_samples", train_set.len())
                .param("val_samples", val_set.len())
                .param("iterations_run", state.iterations_run)
                .param("best_val_loss", state.best_val_loss)
                .param(
                    "parameter_count",
                    state.backbone.shape.param_count() + 3,
                )
                .param("threads", threads);
            if let Some(d) = data_dir.as_ref() {
                prov.input("data_dir", d);
            }
            prov.write_for(&output)?;
            println!(
                "trained {} iterations ({} parameters), best validation loss {:.6}",
                state.iterations_run,
                state.backbone.shape.param_count() + 3,
                state.best_val_loss
            );
            Ok(())
        }
        Command::Segment {
            input,
            model,
            tree,
            mode,
            output,
            chunk,
        } => {
            let tree = resolve_tree(&tree)?;
            let volume = nifti::read_volume(&input)?;
            let (backbone, weights) = train::load_model(&model, &tree)?;
            let mode_val = match mode {
                Mode::Fusion => PredictionMode::Fusion,
                Mode::Vote => PredictionMode::Vote,
            };
            let labels = segment_volume(&volume, &backbone, &tree, mode_val, &weights, chunk)?;
            nifti::write_label_volume(&labels, &output)?;
            let mut prov = Provenance::new("segment", seed);
            prov.input("volume", &input)
                .input("model", &model)
                .param(
                    "mode",
                    match mode {
                        Mode::Fusion => "fusion",
                        Mode::Vote => "vote",
                    },
                )
                .param("threads", threads);
            if let Some(c) = chunk {
                prov.param("chunk", c);
            }
            prov.write_for(&output)?;
            Ok(())
        }
        Command::Evaluate {
            pred,
            truth,
            tree,
            output,
            mapping,
        } => {
            let tree = resolve_tree(&tree)?;
            let pred_l = nifti::read_label_volume(&pred)?;
            let truth_l = nifti::read_label_volume(&truth)?;
            let map = mapping
                .as_ref()
                .map(|p| -> Result<metrics::RegionMapping> {
                    let text = std::fs::read_to_string(p)
                        .with_context(|| format!("reading mapping {}", p.display()))?;
                    Ok(metrics::RegionMapping::parse(&text)?)
                })
                .transpose()?;
            let report = metrics::region_report(&pred_l, &truth_l, &tree, map.as_ref())?;
            std::fs::write(&output, report.to_tsv())
                .with_context(|| format!("writing report {}", output.display()))?;
            print!("{}", report.summary_text());
            let mut prov = Provenance::new("evaluate", seed);
            prov.input("pred", &pred)
                .input("truth", &truth)
                .param("mean_dsc", report.mean_dsc)
                .param("mean_vs", report.mean_vs);
            if let Some(m) = mapping.as_ref() {
                prov.input("mapping", m);
            }
            prov.write_for(&output)?;
            Ok(())
        }
        Command::Icv { labels, output } => {
            let l = nifti::read_label_volume(&labels)?;
            let v = metrics::icv(&l);
            println!("{v}");
            if let Some(out) = output {
                std::fs::write(&out, format!("{v}\n"))
                    .with_context(|| format!("writing {}", out.display()))?;
                let mut prov = Provenance::new("icv", seed);
                prov.input("labels", &labels).param("icv_mm3", v);
                prov.write_for(&out)?;
            }
            Ok(())
        }
        Command::Stats { test } => run_stats(test, seed),
    }
}

fn run_stats(test: StatsCommand, seed: u64) -> Result<()> {
    match test {
        StatsCommand::Wilcoxon { x, y } => {
            let xs = parse_values(&x)?;
            let ys = parse_values(&y)?;
            let (stat, p) = metrics::wilcoxon_signed_rank(&xs, &ys)?;
            println!("wilcoxon statistic={stat} p={p}");
        }
        StatsCommand::MannWhitney { x, y } => {
            let xs = parse_values(&x)?;
            let ys = parse_values(&y)?;
            let (u, p) = metrics::mann_whitney_u(&xs, &ys)?;
            println!("mann-whitney U={u} p={p}");
        }
        StatsCommand::BlandAltman { a, b, points_out } => {
            let av = parse_values(&a)?;
            let bv = parse_values(&b)?;
            let ba = metrics::bland_altman(&av, &bv)?;
            println!(
                "bland-altman mean={} sd={} loa=[{}, {}]",
                ba.mean_diff, ba.sd_diff, ba.loa_low, ba.loa_high
            );
            if let Some(out) = points_out {
                std::fs::write(&out, ba.points_tsv())
                    .with_context(|| format!("writing {}", out.display()))?;
                let mut prov = Provenance::new("stats.bland-altman", seed);
                prov.input("a", &a)
                    .input("b", &b)
                    .param("mean_diff", ba.mean_diff)
                    .param("sd_diff", ba.sd_diff);
                prov.write_for(&out)?;
            }
        }
        StatsCommand::Apc {
            baseline,
            followup,
            years,
        } => {
            let v = metrics::annual_pct_change(baseline, followup, years)?;
            println!("annual-change {v} %/yr");
        }
    }
    Ok(())
}

type SampleSet = Vec<(Volume, LabelVolume)>;

/// Load `*_img.nii[.gz]` / `*_lab.nii[.gz]` pairs; the last 20% (at
/// least one) become the validation split, ordered by file name.
fn load_pairs(dir: &Path) -> Result<(SampleSet, SampleSet)> {
    let mut stems: Vec<(String, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().unwrap_or_default().to_string_lossy().to_string();
        for suffix in ["_img.nii.gz", "_img.nii"] {
            if let Some(stem) = name.strip_suffix(suffix) {
                stems.push((stem.to_string(), path.clone()));
            }
        }
    }
    stems.sort();
    if stems.len() < 2 {
        bail!(
            "need at least 2 *_img.nii[.gz] pairs under {} (train + validation)",
            dir.display()
        );
    }
    let mut samples = Vec::new();
    for (stem, img_path) in stems {
        let lab_path = ["_lab.nii.gz", "_lab.nii"]
            .iter()
            .map(|s| dir.join(format!("{stem}{s}")))
            .find(|p| p.exists())
            .with_context(|| format!("no label file for {stem}"))?;
        samples.push((
            nifti::read_volume(&img_path)?,
            nifti::read_label_volume(&lab_path)?,
        ));
    }
    let n_val = (samples.len() / 5).max(1);
    let val = samples.split_off(samples.len() - n_val);
    Ok((samples, val))
}
