use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use csi_mopoe::csi_ingest::{ingest, load_subcarrier_indices, IngestOptions, Split};
use csi_mopoe::dataset_windows::Dataset;
use csi_mopoe::harness::{collect_ablation, export_video, make_synthetic, mean_image_baseline_psnr, run_variant, AblationPlan, SyntheticSpec};
use csi_mopoe::metrics_eval::{evaluate_variant, extractor_from_spec, FeatureExtractor, MetricsReport};
use csi_mopoe::models::{TrainedModel, Variant};
use csi_mopoe::training::{grid_search, train_protocol, validation_evaluator, Grid, SearchMode, TrainConfig};
use csi_mopoe::Error;
use log::{info, warn};
use serde::Deserialize;

const EXIT_INPUT: u8 = 1;
const EXIT_ABORTED: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "csi-mopoe", version, about = "Reconstruct camera frames from WiFi CSI with a mixture-of-products-of-experts VAE")]
struct Cli {
    /// Base seed for training runs and synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run on a single worker thread so every result is bitwise reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    /// TOML or JSON file with `train`, `grid` and `synthetic` tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse a CSI log and frame manifest into a dataset directory.
    Ingest {
        #[arg(long)]
        csi_log: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        image_size: u32,
        #[arg(long)]
        trim_start_us: Option<i64>,
        #[arg(long)]
        trim_end_us: Option<i64>,
        /// `default` for the 52 L-LTF subcarriers, or a file of 52 indices.
        #[arg(long, default_value = "default")]
        subcarriers: String,
    },
    /// Generate a synthetic recording and ingest it.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        packets: Option<usize>,
        #[arg(long)]
        image_size: Option<u32>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train one variant under the multi-run protocol.
    Train {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Grid search over batch size, window length and β.
    Search {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long, default_value = "coord", value_parser = parse_mode)]
        mode: SearchMode,
    },
    /// Evaluate checkpoints on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "model")]
        label: String,
        /// `tiny-random-conv` or `inception-v3-pool3:<weights.safetensors>`.
        #[arg(long)]
        fid: Option<String>,
    },
    /// Train and evaluate the aggregation variants.
    Ablate {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long, value_delimiter = ',', default_values = ["UW", "GW", "C", "C+T"])]
        variants: Vec<Variant>,
        /// Run each variant in its own process.
        #[arg(long)]
        parallel_variants: bool,
        #[arg(long)]
        fid: Option<String>,
        #[arg(long, hide = true)]
        worker: Option<Variant>,
    },
    /// Export a side-by-side reconstruction video and its 1−SSIM curve.
    Video {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 30)]
        fps: u16,
    },
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
}

fn parse_mode(s: &str) -> Result<SearchMode, String> {
    match s {
        "coord" => Ok(SearchMode::Coord),
        "full" => Ok(SearchMode::Full),
        _ => Err(format!("unknown search mode {s:?}; use coord or full")),
    }
}

#[derive(Default, Deserialize)]
#[serde(default)]
struct FileConfig {
    train: TrainConfig,
    grid: Grid,
    synthetic: SyntheticSpec,
}

fn load_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    Ok(cfg)
}

fn train_config(cli: &Cli, file: &FileConfig, args: &TrainArgs) -> TrainConfig {
    let mut c = file.train.clone();
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(e) = args.epochs {
        c.epochs = e;
    }
    if let Some(r) = args.runs {
        c.runs = r;
    }
    c
}

fn open_dataset(dir: &Path) -> anyhow::Result<Dataset> {
    Dataset::open(dir).with_context(|| format!("opening dataset {}", dir.display()))
}

fn extractor(spec: Option<&str>) -> anyhow::Result<Option<Box<dyn FeatureExtractor>>> {
    spec.map(|s| extractor_from_spec(s).with_context(|| format!("loading FID extractor {s:?}"))).transpose()
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: &Cli) -> anyhow::Result<u8> {
    let file = load_config(cli.config.as_deref())?;
    match &cli.command {
        Cmd::Ingest { csi_log, manifest, out, image_size, trim_start_us, trim_end_us, subcarriers } => {
            let mut opts = IngestOptions::new(csi_log, manifest);
            opts.image_size = *image_size;
            opts.trim_start_us = *trim_start_us;
            opts.trim_end_us = *trim_end_us;
            opts.subcarriers = load_subcarrier_indices(subcarriers)?;
            let ds = ingest(&opts)?;
            ds.write(out)?;
            info!("wrote {} pairs ({}/{}/{}) to {}", ds.n_packets(), ds.meta.n_train, ds.meta.n_val, ds.meta.n_test, out.display());
        }
        Cmd::Synth { out, packets, image_size, noise } => {
            let mut spec = file.synthetic.clone();
            spec.n_packets = packets.unwrap_or(spec.n_packets);
            spec.image_size = image_size.unwrap_or(spec.image_size);
            spec.noise = noise.unwrap_or(spec.noise);
            let ds = make_synthetic(&spec, cli.seed.unwrap_or(0), out)?;
            let l = file.train.window_len();
            match mean_image_baseline_psnr(&ds, l) {
                Ok(p) => info!("mean-image baseline PSNR (L = {l}): {p:.3} dB"),
                Err(e) => warn!("no baseline: {e}"),
            }
        }
        Cmd::Train { common, variant } => {
            let mut config = train_config(cli, &file, common);
            if let Some(v) = variant {
                config.model = config.model.with_variant(*v);
            }
            let ds = open_dataset(&common.data)?;
            create_dir(&common.out)?;
            write_json(&common.out.join("config.json"), &config)?;
            let outcome = train_protocol(&config, &ds, Some(&common.out))?;
            let best = outcome.best_run();
            info!("best run {} (epoch {}, val loss {:.6})", best.record.run_id, best.record.best_epoch, best.record.best_val_loss());
            if let Some(ckpt) = &best.record.checkpoint {
                let link = common.out.join("best.safetensors");
                std::fs::copy(ckpt, &link).with_context(|| format!("copying {}", ckpt.display()))?;
            }
            if !outcome.aborted.is_empty() {
                warn!("{} of {} runs aborted", outcome.aborted.len(), config.runs);
            }
        }
        Cmd::Search { common, mode } => {
            let base = train_config(cli, &file, common);
            let ds = open_dataset(&common.data)?;
            create_dir(&common.out)?;
            let outcome = grid_search(&base, &file.grid, *mode, validation_evaluator(&ds, base.epochs))?;
            write_json(&common.out.join("search.json"), &outcome)?;
            info!(
                "best: batch {} window {} beta {} ({} evaluations)",
                outcome.best.batch_size,
                outcome.best.window_len(),
                outcome.best.beta,
                outcome.evaluations.len()
            );
        }
        Cmd::Eval { data, checkpoint, out, label, fid } => {
            let ds = open_dataset(data)?;
            let ex = extractor(fid.as_deref())?;
            let mut models = checkpoint.iter().map(|p| TrainedModel::load(p)).collect::<csi_mopoe::Result<Vec<_>>>()?;
            let row = evaluate_variant(label, &mut models, &ds, ex.as_deref())?;
            create_dir(out)?;
            let report = MetricsReport { rows: vec![row], fid_extractor: ex.map(|e| e.id().to_string()) };
            report.write_csv(&out.join("report.csv"))?;
            write_json(&out.join("report.json"), &report)?;
        }
        Cmd::Ablate { common, variants, parallel_variants, fid, worker } => {
            let plan = AblationPlan { variants: variants.clone(), train: train_config(cli, &file, common), out_dir: common.out.clone() };
            let ds = open_dataset(&common.data)?;
            let ex = extractor(fid.as_deref())?;
            create_dir(&plan.out_dir)?;
            if let Some(v) = worker {
                run_variant(&plan, *v, &ds, ex.as_deref())?;
                return Ok(0);
            }
            write_json(&plan.out_dir.join("plan.json"), &plan)?;
            if *parallel_variants {
                spawn_workers(&plan)?;
            } else {
                for &v in &plan.variants {
                    run_variant(&plan, v, &ds, ex.as_deref())?;
                }
            }
            let report = collect_ablation(&plan, &ds, ex.as_deref())?;
            for r in &report.rows {
                info!(
                    "{:>4}: PSNR {:.2}±{:.2}  SSIM {:.3}±{:.3}  RMSE {:.2}±{:.2}",
                    r.variant, r.psnr.mean, r.psnr.std, r.ssim.mean, r.ssim.std, r.rmse.mean, r.rmse.std
                );
            }
            if report.rows.iter().any(|r| r.failed) {
                return Ok(EXIT_PARTIAL);
            }
        }
        Cmd::Video { data, checkpoint, out, split, start, frames, fps } => {
            let ds = open_dataset(data)?;
            let mut model = TrainedModel::load(checkpoint)?;
            create_dir(out)?;
            let sum = export_video(&mut model, &ds, *split, *start..start + frames, *fps, &out.join("video.png"), &out.join("one_minus_ssim.csv"))?;
            info!("wrote {} frames to {}", sum.frames, out.join("video.png").display());
        }
    }
    Ok(0)
}

/// Re-invokes this binary once per variant with disjoint output directories.
fn spawn_workers(plan: &AblationPlan) -> anyhow::Result<()> {
    let exe = std::env::current_exe()?;
    let raw: Vec<String> = std::env::args().skip(1).filter(|a| a != "--parallel-variants").collect();
    let mut children = Vec::new();
    for &v in &plan.variants {
        let child = Command::new(&exe).args(&raw).arg("--worker").arg(v.slug()).spawn().with_context(|| format!("starting worker for {v}"))?;
        children.push((v, child));
    }
    for (v, mut child) in children {
        let status = child.wait()?;
        if !status.success() {
            bail!("worker for variant {v} exited with {status}");
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::AllRunsAborted(_) | Error::NonFinite { .. }) => EXIT_ABORTED,
        _ => EXIT_INPUT,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.deterministic {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            warn!("could not pin the thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
