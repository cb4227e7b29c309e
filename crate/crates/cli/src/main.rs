use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cellvta::data::{self, load_sample, split_by_patient, DatasetManifest, LabeledSample};
use cellvta::exec::{self, Execution};
use cellvta::harness::{self, MagnificationMode, Profile, RunConfig, Variant};
use cellvta::types::Image;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cellvta", version, about = "Nuclei instance segmentation with a ViT adapter")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Default settings to start from.
    #[arg(long, global = true, default_value = "toy")]
    profile: Profile,
    /// JSON file with overrides on top of the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run per-image work on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with exact ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train on a manifest split by patient; writes logs and best.ckpt.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Segment samples and write label PNG + JSON per sample.
    Infer {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Required unless --ideal is given.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "native")]
        mode: MagnificationMode,
        /// Feed ground-truth-derived maps instead of a model (debug oracle).
        #[arg(long)]
        ideal: bool,
        /// Also write boundary overlays under <out>/overlays.
        #[arg(long)]
        overlays: bool,
        /// Only the held-out test split of the manifest.
        #[arg(long)]
        test_split: bool,
    },
    /// Score a prediction directory against a manifest.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        test_split: bool,
    },
    /// Compare fine-tuning strategies on synthetic data over several seeds.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Skip the full fine-tuning variant.
        #[arg(long)]
        skip_full: bool,
    },
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(common.profile, path)?,
        None => RunConfig::for_profile(common.profile),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn load_all(manifest: &DatasetManifest, exec: Execution) -> Result<Vec<LabeledSample>> {
    Ok(exec::try_map(&manifest.samples, exec, |e| load_sample(manifest, e))?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn selected(manifest: DatasetManifest, cfg: &RunConfig, test_only: bool) -> Result<DatasetManifest> {
    Ok(if test_only {
        split_by_patient(&manifest, cfg.split, cfg.seed)?.test
    } else {
        manifest
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = run_config(&cli.common)?;
    let exec = if cli.common.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Synth { out, count, size } => {
            let mut s = cfg.synth.clone();
            s.count = count.unwrap_or(s.count);
            s.image_size = size.unwrap_or(s.image_size);
            let m = data::generate_synthetic(&out, &s, exec)?;
            for w in &m.warnings {
                log::warn!("{w}");
            }
            log::info!("wrote {} samples to {}", m.samples.len(), out.display());
        }
        Command::Train { manifest, out, epochs } => {
            let mut cfg = cfg;
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.paths.manifest = Some(manifest.clone());
            cfg.paths.out_dir = Some(out.clone());
            let m = DatasetManifest::load(&manifest)?;
            let split = split_by_patient(&m, cfg.split, cfg.seed)?;
            let train = load_all(&split.train, exec)?;
            let val = load_all(&split.val, exec)?;
            log::info!("train {} / val {} / test {} samples", train.len(), val.len(), split.test.samples.len());
            let trained = harness::train(&cfg, &train, &val, &m.class_names, exec)?;
            log::info!(
                "best epoch {} (val mPQ {:?}); checkpoint in {}",
                trained.history.best_epoch,
                trained.history.best_val_mpq,
                out.join("best.ckpt").display()
            );
        }
        Command::Infer {
            manifest,
            out,
            checkpoint,
            mode,
            ideal,
            overlays,
            test_split,
        } => {
            let m = selected(DatasetManifest::load(&manifest)?, &cfg, test_split)?;
            let samples = load_all(&m, exec)?;
            let results = if ideal {
                harness::ideal_results(&samples, m.num_classes(), &cfg.postprocess, exec)?
            } else {
                let Some(ckpt) = checkpoint else {
                    bail!("--checkpoint is required unless --ideal is given");
                };
                let model = harness::load_model(&cfg, &ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
                let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
                harness::infer_samples(&model, &images, mode, cfg.eval_batch_size, &cfg.postprocess, exec)?
            };
            std::fs::create_dir_all(&out)?;
            if overlays {
                std::fs::create_dir_all(out.join("overlays"))?;
            }
            let pairs: Vec<_> = samples.iter().zip(&results).collect();
            exec::try_map(&pairs, exec, |(s, r)| -> cellvta::Result<()> {
                r.save(&out, &s.name)?;
                if overlays {
                    harness::write_overlay(&out.join("overlays").join(format!("{}.png", s.name)), &s.image, r)?;
                }
                Ok(())
            })?;
            log::info!("wrote {} predictions to {}", results.len(), out.display());
        }
        Command::Eval {
            pred,
            manifest,
            out,
            test_split,
        } => {
            let m = selected(DatasetManifest::load(&manifest)?, &cfg, test_split)?;
            let samples = load_all(&m, exec)?;
            let preds = harness::load_predictions(&pred, &samples)?;
            let report = harness::evaluate_samples(&samples, &preds, &m.class_names, exec)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
        }
        Command::Ablate { out, seeds, skip_full } => {
            let mut cfg = cfg;
            cfg.paths.out_dir = Some(out.clone());
            std::fs::create_dir_all(&out)?;
            let variants: Vec<Variant> = Variant::ALL
                .into_iter()
                .filter(|v| !(skip_full && *v == Variant::FullFinetune))
                .collect();
            let report = harness::ablate(&cfg, &seeds, &variants, exec)?;
            write_json(&out.join("ablation.json"), &report)?;
            print!("{}", report.table());
            println!(
                "adapter > decoder-only on {}/{} seeds; degraded < clean on {}/{}",
                report.adapter_wins,
                seeds.len(),
                report.degradation_drops,
                seeds.len()
            );
        }
    }
    Ok(())
}
