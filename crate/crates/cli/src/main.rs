use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use forge_cli::batch::{self, GenerateConfig};
use forge_cli::service::{router, AppState};
use forge_core::io::load_manifest;
use forge_core::metrics::MetricConfig;
use forge_core::pipeline::PipelineConfig;
use forge_core::postprocess::{Matcher, PostprocessConfig, DEFAULT_TAU_S, DEFAULT_TPM_RADIUS};
use forge_core::prompt_encoding::{TeiConfig, DEFAULT_SIGMA};
use forge_core::saliency_backend::{Backend, BackendKind};

/// Exit status when some images failed but the run completed.
const EXIT_PARTIAL: u8 = 1;
/// Exit status for errors that stop the command outright.
const EXIT_FATAL: u8 = 2;

#[derive(Parser)]
#[command(
    name = "forge",
    version,
    about = "Single-point pseudo-labels for infrared small targets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate pseudo labels for every manifest image.
    Generate {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted masks against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Centroid distance, in pixels, for a target to count as detected.
        #[arg(long, default_value_t = 3.0)]
        deviation: f64,
        /// JSON report path; a CSV with the same stem is written next to it.
        #[arg(long)]
        report: PathBuf,
    },
    /// Write three-channel TNSR model inputs for offline inference.
    Encode {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the annotation service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Where finalized labels and prompts.csv go.
        #[arg(long)]
        out: PathBuf,
        /// Makes manifest images available by id.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Static UI bundle served at `/`.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PipelineArgs {
    /// reference, precomputed:PATTERN (with {id}) or remote:URL
    #[arg(long, default_value = "reference")]
    backend: BackendKind,
    #[arg(long, default_value_t = Matcher::Bbm)]
    matcher: Matcher,
    #[arg(long = "tau-s", default_value_t = DEFAULT_TAU_S)]
    tau_s: f64,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    #[arg(long = "tpm-radius", default_value_t = DEFAULT_TPM_RADIUS)]
    tpm_radius: f64,
}

impl PipelineArgs {
    fn split(self) -> anyhow::Result<(BackendKind, PipelineConfig)> {
        let cfg = PipelineConfig {
            tei: TeiConfig::with_sigma(self.sigma)?,
            postprocess: PostprocessConfig {
                tau_s: self.tau_s,
                matcher: self.matcher,
                tpm_radius: self.tpm_radius,
            },
        };
        cfg.validate()?;
        Ok((self.backend, cfg))
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Generate {
            manifest,
            pipeline,
            out,
        } => {
            let m = load_manifest(&manifest)?;
            let (backend, pipeline) = pipeline.split()?;
            let summary = batch::generate(&m, &GenerateConfig { backend, pipeline }, &out)?;
            log::info!(
                "{} of {} images labeled, config {}",
                summary.succeeded,
                summary.images.len(),
                summary.config_hash
            );
            if summary.failed > 0 {
                eprintln!(
                    "{} image(s) failed; see {}",
                    summary.failed,
                    out.join(batch::SUMMARY_FILE).display()
                );
                return Ok(ExitCode::from(EXIT_PARTIAL));
            }
        }
        Command::Evaluate {
            pred,
            gt,
            deviation,
            report,
        } => {
            let cfg = MetricConfig {
                deviation_px: deviation,
                ..MetricConfig::default()
            };
            let r = batch::evaluate(&pred, &gt, &cfg)?;
            batch::write_report(&r, &report)?;
            println!(
                "IoU {:.4}  Pd {:.4}  Fa {:.3e} ({:.3} x1e-6)  Fat {:.4}",
                r.iou, r.pd, r.fa, r.fa_scaled, r.fat
            );
        }
        Command::Encode {
            manifest,
            sigma,
            out,
        } => {
            let m = load_manifest(&manifest)?;
            let failed = batch::encode(&m, &TeiConfig::with_sigma(sigma)?, &out)?;
            if !failed.is_empty() {
                eprintln!("failed: {}", failed.join(", "));
                return Ok(ExitCode::from(EXIT_PARTIAL));
            }
        }
        Command::Serve {
            addr,
            pipeline,
            out,
            manifest,
            ui,
        } => {
            let manifest = manifest.map(load_manifest).transpose()?;
            let (backend, cfg) = pipeline.split()?;
            let backend = Arc::new(Backend::new(backend)?);
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let state = Arc::new(AppState::new(backend, cfg, out, manifest));
            let app = router(state, ui.as_deref());
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&addr)
                    .await
                    .with_context(|| format!("binding {addr}"))?;
                log::info!("listening on http://{}", listener.local_addr()?);
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FORGE_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}
