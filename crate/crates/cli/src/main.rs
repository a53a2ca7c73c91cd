use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use stprompt::feature_io::{generate_synthetic, DatasetManifest, SynthConfig};
use stprompt::metrics::{self, roc_curve, write_roc_csv};
use stprompt::prompt_bank::QuerySet;
use stprompt::spatial_localizer::{
    box_records, frame_heat, localize_video, read_box_records, write_box_records, write_heatmap_png,
    LocalizerConfig,
};
use stprompt::trainer::{self, grad_check, Checkpoint, GradCheckConfig, TrainConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct EvalConfig {
    iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.5 }
    }
}

/// Everything a run can be configured with. Any section may be omitted
/// from a config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    synth: SynthConfig,
    train: TrainConfig,
    localizer: LocalizerConfig,
    grad_check: GradCheckConfig,
    evaluate: EvalConfig,
}

#[derive(Parser)]
#[command(name = "stprompt", version, about = "Weakly supervised video anomaly detection and localization")]
struct Cli {
    /// Seed for data generation, training and the gradient audit; overrides the config file
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config file; see `print-defaults` for every key
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads [default: available cores]
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (streams, ground truth, manifests, queries) to --out
    GenSynth,
    /// Train on a manifest; writes checkpoint.stck and loss_log.csv
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Epochs [default: train.epochs = 200]
        #[arg(long)]
        epochs: Option<usize>,
        /// Batch size [default: train.batch_size = 64]
        #[arg(long)]
        batch_size: Option<usize>,
        /// Learning rate [default: train.learning_rate = 1e-4]
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Score every frame of every manifest video; writes scores.csv
    Infer {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Spatially localize anomalies; writes boxes.csv and optionally heatmap PNGs
    Localize {
        #[arg(long)]
        manifest: PathBuf,
        /// Query set index (queries.json)
        #[arg(long)]
        queries: PathBuf,
        /// Checkpoint used to score frames for the localization trigger
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Precomputed scores.csv used for the trigger instead of a checkpoint
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Localize every frame regardless of its temporal score
        #[arg(long, default_value_t = false)]
        no_gate: bool,
        /// Also write one heatmap PNG per localized frame under heatmaps/
        #[arg(long, default_value_t = false)]
        heatmaps: bool,
    },
    /// Compute frame AUC and TIoU; writes eval.json and roc.csv
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Box records from `localize`; TIoU is omitted without them
        #[arg(long)]
        boxes: Option<PathBuf>,
        /// IoU needed for a frame to count as localized [default: evaluate.iou_threshold = 0.5]
        #[arg(long)]
        iou_threshold: Option<f64>,
    },
    /// Compare analytic gradients with finite differences; exit code 3 on failure
    GradCheck {
        /// Random instances [default: grad_check.instances = 20]
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Print the full default configuration as TOML
    PrintDefaults,
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
        cfg.grad_check.seed = seed;
    }
    Ok(cfg)
}

fn create_out(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_manifest(path: &Path) -> anyhow::Result<DatasetManifest> {
    DatasetManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn infer_scores(manifest: &DatasetManifest, ck: &Checkpoint) -> anyhow::Result<BTreeMap<String, Vec<f64>>> {
    let model = ck.model();
    let tau = ck.config.loss.tau;
    let scored: Vec<(String, Vec<f64>)> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let stream = manifest.load_stream(e)?;
            Ok((e.video_id.clone(), model.frame_scores(&stream, tau)?))
        })
        .collect::<stprompt::Result<_>>()?;
    Ok(scored.into_iter().collect())
}

fn run(cli: &Cli) -> anyhow::Result<u8> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::PrintDefaults => {
            print!("{}", toml::to_string_pretty(&RunConfig::default())?);
        }
        Command::GenSynth => {
            create_out(&cli.out)?;
            let ds = generate_synthetic(&cfg.synth)?;
            let w = ds.write(&cli.out)?;
            println!("train manifest: {}", w.train_manifest.display());
            println!("test manifest:  {}", w.test_manifest.display());
            println!("queries:        {}", w.queries.display());
        }
        Command::Train {
            manifest,
            epochs,
            batch_size,
            lr,
        } => {
            let mut tc = cfg.train.clone();
            if let Some(e) = epochs {
                tc.epochs = *e;
            }
            if let Some(b) = batch_size {
                tc.batch_size = *b;
            }
            if let Some(l) = lr {
                tc.learning_rate = *l;
            }
            let m = load_manifest(manifest)?;
            create_out(&cli.out)?;
            let out = trainer::train(&m, &tc)?;
            let ck = cli.out.join("checkpoint.stck");
            out.checkpoint.save(&ck)?;
            trainer::write_loss_log(cli.out.join("loss_log.csv"), &out.log)?;
            if let Some(last) = out.log.last() {
                println!("epoch {}: total loss {:.6}", last.epoch, last.total);
            }
            println!("checkpoint: {}", ck.display());
        }
        Command::Infer { manifest, checkpoint } => {
            let m = load_manifest(manifest)?;
            let ck = Checkpoint::load(checkpoint)?;
            create_out(&cli.out)?;
            let scores = infer_scores(&m, &ck)?;
            let path = cli.out.join("scores.csv");
            metrics::write_scores(&path, &scores)?;
            println!("scores for {} videos: {}", scores.len(), path.display());
        }
        Command::Localize {
            manifest,
            queries,
            checkpoint,
            scores,
            no_gate,
            heatmaps,
        } => {
            let m = load_manifest(manifest)?;
            let q = QuerySet::load(queries)?;
            let gate: Option<BTreeMap<String, Vec<f64>>> = match (no_gate, scores, checkpoint) {
                (true, _, _) => None,
                (false, Some(s), _) => Some(metrics::read_scores(s)?),
                (false, None, Some(c)) => Some(infer_scores(&m, &Checkpoint::load(c)?)?),
                (false, None, None) => {
                    return Err(UsageError("localize needs --checkpoint, --scores or --no-gate".into()).into())
                }
            };
            create_out(&cli.out)?;
            if *heatmaps {
                create_out(&cli.out.join("heatmaps"))?;
            }
            let lc = &cfg.localizer;
            let mut records = Vec::new();
            for e in &m.entries {
                let stream = m.load_stream(e)?;
                let frame_scores = match &gate {
                    Some(g) => Some(
                        g.get(&e.video_id)
                            .with_context(|| format!("no scores for video {}", e.video_id))?
                            .as_slice(),
                    ),
                    None => None,
                };
                let boxes = localize_video(&stream, frame_scores, &q, lc, m.nominal_frame_size)?;
                if *heatmaps {
                    for t in 0..stream.frames() {
                        if frame_scores.is_some_and(|s| s[t] <= lc.trigger) {
                            continue;
                        }
                        let heat = frame_heat(&stream, t, &q, lc, m.nominal_frame_size)?;
                        write_heatmap_png(&heat, cli.out.join(format!("heatmaps/{}_{t:05}.png", e.video_id)))?;
                    }
                }
                records.extend(box_records(&e.video_id, &boxes));
            }
            let path = cli.out.join("boxes.csv");
            write_box_records(&path, &records)?;
            println!("{} boxes: {}", records.len(), path.display());
        }
        Command::Evaluate {
            scores,
            manifest,
            boxes,
            iou_threshold,
        } => {
            let m = load_manifest(manifest)?;
            let s = metrics::read_scores(scores)?;
            let b = boxes.as_ref().map(read_box_records).transpose()?;
            let thr = iou_threshold.unwrap_or(cfg.evaluate.iou_threshold);
            let report = metrics::evaluate(&s, b.as_deref(), &m, thr)?;
            create_out(&cli.out)?;
            report.save(cli.out.join("eval.json"))?;
            let mut all_scores = Vec::new();
            let mut all_flags = Vec::new();
            for e in &m.entries {
                let gt = m.load_ground_truth(e)?.expect("checked by evaluate");
                all_scores.extend_from_slice(&s[&e.video_id]);
                all_flags.extend(gt.frame_flags);
            }
            write_roc_csv(cli.out.join("roc.csv"), &roc_curve(&all_scores, &all_flags)?)?;
            match report.tiou {
                Some(t) => println!("AUC {:.4}  TIoU@{thr} {:.4}", report.auc, t),
                None => println!("AUC {:.4}  TIoU@{thr} n/a", report.auc),
            }
        }
        Command::GradCheck { instances } => {
            let mut gc = cfg.grad_check.clone();
            if let Some(n) = instances {
                gc.instances = *n;
            }
            let report = grad_check(&gc)?;
            for (tensor, term, err) in report.worst_by_tensor() {
                println!("{tensor:<28} {:<6} {err:.3e}", term.name());
            }
            let verdict = if report.passed() { "PASS" } else { "FAIL" };
            println!(
                "{verdict}: max relative error {:.3e} (tolerance {:.0e})",
                report.max_error(),
                report.tolerance
            );
            if !report.passed() {
                return Ok(EXIT_CHECK);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_DATA)
            }
        }
    }
}
