//! `tryon` command-line interface.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde_json::json;
use tryon_core::backbone::backbone_by_name;
use tryon_core::metrics::{fid, inception_score};
use tryon_pipeline::dataset::{save_viton_sample, Dataset};
use tryon_pipeline::evaluate::{images_from_dir, toy_probe_backbone};
use tryon_pipeline::infer::{infer_tryon, PersonAsset, TryonModel};
use tryon_pipeline::service::{serve, AppState};
use tryon_pipeline::train::{train, Stage, TrainOptions};
use tryon_pipeline::{imageio, toy, PipelineConfig, PipelineError, Result};

#[derive(Debug, Parser)]
#[command(name = "tryon", version, about = "Two-stage garment transfer: data, training, inference and serving")]
struct Cli {
    /// TOML configuration file; built-in toy defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set optim.lr=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write procedural toy scenes in VITON layout.
    Toygen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        start: u64,
    },
    /// Train stage one (layout generator).
    TrainShape {
        /// Discard an existing checkpoint instead of resuming.
        #[arg(long)]
        fresh: bool,
    },
    /// Train stage two (renderer and alignment).
    TrainAppearance {
        #[arg(long)]
        fresh: bool,
    },
    /// Dress one person in one garment and write the images.
    Infer {
        #[arg(long)]
        person: String,
        #[arg(long)]
        garment: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Image-quality metrics over PNG folders.
    Metrics {
        #[command(subcommand)]
        metric: Metric,
    },
    /// Run the HTTP service.
    Serve {
        /// Listen address; defaults to `serve.addr` from the config.
        #[arg(long)]
        addr: Option<String>,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

#[derive(Debug, Subcommand)]
enum Metric {
    /// Fréchet distance between embedded real and generated images.
    Fid {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
        #[arg(long, default_value = "random-conv")]
        backbone: String,
    },
    /// Inception-style score with a classifier head fitted to toy garment hue.
    Is {
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = tryon_core::metrics::DEFAULT_SPLITS)]
        splits: usize,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let base = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print_json(v: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&v).expect("json values serialise"));
}

fn run_training(cfg: &PipelineConfig, stage: Stage, fresh: bool) -> Result<()> {
    let every = (cfg.train.checkpoint_every / 5).max(1);
    let summary = train(cfg, stage, TrainOptions { fresh }, |r| {
        if r.step % every == 0 {
            let shown: Vec<String> = r.losses.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
            tracing::info!("{} step {} ({:.0} ms) {}", r.stage, r.step, r.elapsed_ms, shown.join(" "));
        }
    })?;
    print_json(json!({
        "stage": summary.stage,
        "start_step": summary.start_step,
        "end_step": summary.end_step,
        "checkpoint": summary.checkpoint,
        "last": summary.last,
    }));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::ShowConfig => print!("{}", cfg.to_toml()),
        Command::Toygen { out, count, start } => {
            let geom = cfg.geometry()?;
            let mut train_ids = Vec::new();
            let mut val_ids = Vec::new();
            for seed in start..start + count {
                let id = format!("{seed:06}");
                save_viton_sample(&out, &id, &toy::generate_toy_scene(seed, geom)?)?;
                if toy::is_validation(seed) { &mut val_ids } else { &mut train_ids }.push(id);
            }
            for (name, ids) in [("train.txt", &train_ids), ("val.txt", &val_ids)] {
                let path = out.join(name);
                std::fs::write(&path, ids.join("\n") + "\n").map_err(|e| PipelineError::io_at(&path, e))?;
            }
            print_json(json!({ "out": out, "train": train_ids.len(), "val": val_ids.len() }));
        }
        Command::TrainShape { fresh } => run_training(&cfg, Stage::Shape, fresh)?,
        Command::TrainAppearance { fresh } => run_training(&cfg, Stage::Appearance, fresh)?,
        Command::Infer { person, garment, out } => {
            let data = Dataset::from_config(&cfg)?;
            let model = TryonModel::load(&cfg)?;
            let p = data.sample(&person)?;
            let g = data.sample(&garment)?;
            let result = infer_tryon(&model, &PersonAsset::from(&p), &g.cloth)?;
            std::fs::create_dir_all(&out).map_err(|e| PipelineError::io_at(&out, e))?;
            imageio::write_rgb(&out.join("output.png"), &result.output)?;
            imageio::write_seg(&out.join("seg.png"), &result.seg)?;
            imageio::write_rgb(&out.join("warped_cloth.png"), &result.warped_cloth)?;
            print_json(json!({
                "person_id": person,
                "garment_id": garment,
                "out": out,
                "theta": result.theta.points(),
                "timing": result.timing,
            }));
        }
        Command::Metrics { metric: Metric::Fid { real, fake, backbone } } => {
            let b = backbone_by_name(&backbone)?;
            let (r, f) = (images_from_dir(&real)?, images_from_dir(&fake)?);
            let d = fid(&r, &f, &b)?;
            print_json(json!({ "fid": d, "n_real": r.shape()[0], "n_fake": f.shape()[0], "backbone": backbone }));
        }
        Command::Metrics { metric: Metric::Is { images, splits } } => {
            let x = images_from_dir(&images)?;
            let geom = tryon_core::data::ImageGeometry::new(x.shape()[2], x.shape()[3])?;
            let b = toy_probe_backbone(geom, 200)?;
            let s = inception_score(&x, &b, splits)?;
            print_json(json!({ "is_mean": s.mean, "is_std": s.std, "n": x.shape()[0], "splits": splits }));
        }
        Command::Serve { addr } => {
            let addr = addr.unwrap_or_else(|| cfg.serve.addr.clone());
            let state = Arc::new(AppState::from_config(&cfg)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&addr).await?;
                tracing::info!("listening on http://{}", listener.local_addr()?);
                let shutdown = async {
                    let _ = tokio::signal::ctrl_c().await;
                };
                serve(state, &cfg.serve.cors_origin, listener, shutdown).await
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
