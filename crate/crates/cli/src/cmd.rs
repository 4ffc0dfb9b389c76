use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use layoutdiff_core::denoise::Denoiser;
use layoutdiff_core::export::{export_depth, export_masks};
use layoutdiff_core::fit::FitConfig;
use layoutdiff_core::latent::{read_snapshot, write_snapshot, LatentTensor};
use layoutdiff_core::layout::{save_layout, EditDoc};
use layoutdiff_core::orchestrator::{
    edit_apply, generate_scene, latent_shape, regenerate_view, GenerationConfig, ParallelismMode, RunContext,
};
use layoutdiff_core::raster::render;
use layoutdiff_core::scene::{apply_edits, diff_scenes, EditError, Scene, SceneEdit};
use layoutdiff_core::toy::{decode_preview, ToyDenoiser, ToySchedule};
use layoutdiff_gateway::RemoteDenoiser;
use layoutdiff_service::{Service, ServiceConfig};

use crate::bench::{render_table, run_bench, BenchOptions};
use crate::curate::curate_dir;
use crate::error::{load_scene, read_file, CliError};

#[derive(Debug, Parser)]
#[command(name = "layoutdiff", version, about = "3D layout guided image generation and editing")]
pub struct Cli {
    /// Service config (TOML); LAYOUTDIFF_* variables override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Denoising steps (default from the config, 50 otherwise).
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// `toy` or the URL of a denoiser server.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Parallel,
    SequentialEmulation,
}

impl From<ModeArg> for ParallelismMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Parallel => ParallelismMode::Parallel,
            ModeArg::SequentialEmulation => ParallelismMode::SequentialEmulation,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the depth and mask PNGs of a layout.
    Render {
        layout: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Lift annotated depth images to layouts and fit their cameras.
    Curate {
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        restarts: usize,
    },
    /// Generate a latent for a layout.
    Generate {
        layout: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        two_stage: bool,
        #[arg(long)]
        no_background_path: bool,
        #[arg(long, value_enum, default_value = "parallel")]
        mode: ModeArg,
    },
    /// Edit a generated latent, given an edit list or a target layout.
    Edit {
        layout: PathBuf,
        /// Latent snapshot of `layout`, as written by `generate`.
        #[arg(long)]
        latent: PathBuf,
        /// JSON array of edits.
        #[arg(long, conflicts_with = "target", required_unless_present = "target")]
        edits: Option<PathBuf>,
        /// Layout to edit towards.
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "parallel")]
        mode: ModeArg,
    },
    /// Time generation over growing grid layouts.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "2,8")]
        sizes: Vec<usize>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "parallel,sequential-emulation")]
        modes: Vec<ModeArg>,
        #[arg(long, default_value_t = 256)]
        resolution: u32,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Machine-readable report.
        #[arg(long, short, default_value = "bench_report.json")]
        out: PathBuf,
    },
    /// Run the session service.
    Serve {
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Serve the toy denoiser over the step protocol.
    ServeToy {
        #[arg(long, default_value = "127.0.0.1:9000")]
        listen: String,
    },
}

/// Global settings after config file, environment and flags.
struct Settings {
    config: ServiceConfig,
    seed: u64,
    steps: usize,
}

impl Settings {
    fn resolve(cli: &Cli) -> Result<Settings, CliError> {
        if let Some(p) = &cli.config {
            if !p.is_file() {
                return Err(CliError::NotFound(p.clone()));
            }
        }
        let mut config = ServiceConfig::load(cli.config.as_deref()).map_err(|e| CliError::Other(e.into()))?;
        if let Some(b) = &cli.backend {
            config.backend = b.clone();
        }
        if let Some(s) = cli.steps {
            config.default_steps = s;
        }
        config.validate().map_err(|e| CliError::Other(e.into()))?;
        Ok(Settings {
            steps: config.default_steps,
            seed: cli.seed.unwrap_or(0),
            config,
        })
    }

    fn backend(&self) -> Result<Arc<dyn Denoiser>, CliError> {
        if self.config.uses_toy() {
            return Ok(Arc::new(ToyDenoiser::new(ToySchedule::linear(self.steps), self.config.channels)));
        }
        let remote = RemoteDenoiser::connect(&self.config.backend, self.config.backend_timeout())
            .map_err(|e| CliError::Other(e.into()))?;
        Ok(Arc::new(remote))
    }

    fn generation(&self, mode: ModeArg) -> GenerationConfig {
        GenerationConfig {
            steps: self.steps,
            seed: self.seed,
            mode: mode.into(),
            channels: self.config.channels,
            ..Default::default()
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn check_grid(scene: &Scene, path: &Path, channels: usize) -> Result<(), CliError> {
    latent_shape(&scene.camera, channels).map(|_| ()).map_err(|e| CliError::InvalidLayout {
        path: path.to_owned(),
        report: format!("  camera.resolution: {e}"),
    })
}

/// Latent snapshot, preview and layout of a result.
fn write_result(out: &Path, scene: &Scene, latent: &LatentTensor) -> Result<serde_json::Value, CliError> {
    create_dir(out)?;
    let latent_path = out.join("latent.ltnt");
    let preview_path = out.join("preview.png");
    let layout_path = out.join("layout.json");
    write(&latent_path, &write_snapshot(latent))?;
    write(&preview_path, &decode_preview(latent).map_err(|e| CliError::Other(e.into()))?)?;
    write(&layout_path, &save_layout(scene))?;
    Ok(json!({
        "latent": latent_path,
        "latent_hash": latent.content_hash(),
        "preview": preview_path,
        "layout": layout_path,
    }))
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Other(e.into()))
}

fn announce(addr: std::net::SocketAddr) {
    println!("listening on http://{addr}");
    let _ = std::io::stdout().flush();
}

fn edit_failure(path: &Path, e: EditError) -> CliError {
    CliError::InvalidLayout {
        path: path.to_owned(),
        report: format!("  {e}"),
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let settings = Settings::resolve(&cli)?;
    match cli.command {
        Command::Render { layout, out } => {
            let scene = load_scene(&layout)?;
            let rendered = render(&scene);
            let stem = layout.file_stem().and_then(|s| s.to_str()).unwrap_or("layout");
            create_dir(&out)?;
            let depth = out.join(format!("{stem}.depth.png"));
            let masks = out.join(format!("{stem}.masks.png"));
            write(&depth, &export_depth(&rendered.depth).map_err(|e| CliError::Other(e.into()))?)?;
            write(&masks, &export_masks(&rendered.masks).map_err(|e| CliError::Other(e.into()))?)?;
            print_json(&json!({"depth": depth, "masks": masks}));
        }
        Command::Curate { input, out, restarts } => {
            let fit = FitConfig {
                restarts,
                seed: settings.seed,
                ..Default::default()
            };
            let report = curate_dir(&input, &out, &fit)?;
            eprintln!("curated {} scenes, {} failed", report.succeeded, report.failed);
            if report.succeeded == 0 {
                return Err(CliError::AllFailed);
            }
        }
        Command::Generate {
            layout,
            out,
            two_stage,
            no_background_path,
            mode,
        } => {
            let scene = load_scene(&layout)?;
            check_grid(&scene, &layout, settings.config.channels)?;
            let cfg = GenerationConfig {
                two_stage,
                use_background_path: !no_background_path,
                ..settings.generation(mode)
            };
            let backend = settings.backend()?;
            let ctx = RunContext::default();
            let started = Instant::now();
            let g = generate_scene(&scene, backend.as_ref(), &cfg, &ctx).map_err(|e| CliError::Other(e.into()))?;
            let seconds = started.elapsed().as_secs_f64();
            let mut summary = write_result(&out, &scene, &g.latent)?;
            summary["seconds"] = json!(seconds);
            summary["peak_bytes"] = json!(ctx.tracker.peak());
            summary["reference_id"] = json!(g.reference.map(|r| r.id));
            print_json(&summary);
        }
        Command::Edit {
            layout,
            latent,
            edits,
            target,
            out,
            mode,
        } => {
            let old = load_scene(&layout)?;
            check_grid(&old, &layout, settings.config.channels)?;
            let z = read_snapshot(&read_file(&latent)?)
                .map_err(|e| CliError::Other(anyhow!("{}: {e}", latent.display())))?;
            let new = match (edits, target) {
                (Some(p), _) => {
                    let docs: Vec<EditDoc> = serde_json::from_slice(&read_file(&p)?)
                        .with_context(|| format!("{}: not an edit list", p.display()))?;
                    let edits: Vec<SceneEdit> = docs.iter().map(SceneEdit::from).collect();
                    apply_edits(&old, &edits).map_err(|e| edit_failure(&p, e))?
                }
                (None, Some(t)) => load_scene(&t)?,
                (None, None) => unreachable!("clap requires --edits or --target"),
            };
            check_grid(&new, &layout, settings.config.channels)?;
            let cfg = settings.generation(mode);
            let backend = settings.backend()?;
            let ctx = RunContext::default();
            let regenerate = diff_scenes(&old, &new)
                .iter()
                .any(|e| matches!(e, SceneEdit::SetCamera(_) | SceneEdit::SetBackgroundPrompt(_)));
            let result = if regenerate {
                regenerate_view(&old, &new, &z, backend.as_ref(), &cfg, &ctx).map(|g| g.latent)
            } else {
                edit_apply(&old, &new, &z, backend.as_ref(), &cfg, &ctx)
            }
            .map_err(|e| CliError::Other(e.into()))?;
            let mut summary = write_result(&out, &new, &result)?;
            summary["regenerated"] = json!(regenerate);
            print_json(&summary);
        }
        Command::Bench {
            sizes,
            modes,
            resolution,
            repeats,
            out,
        } => {
            let options = BenchOptions {
                sizes,
                modes: modes.into_iter().map(Into::into).collect(),
                steps: settings.steps,
                resolution,
                repeats,
                seed: settings.seed,
            };
            options.validate().map_err(|e| CliError::Other(anyhow!(e)))?;
            let backend = settings.backend()?;
            let report = run_bench(&options, backend.as_ref()).map_err(|e| CliError::Other(e.into()))?;
            print!("{}", render_table(&report));
            let bytes = serde_json::to_vec_pretty(&report).map_err(|e| CliError::Other(e.into()))?;
            write(&out, &bytes)?;
            eprintln!("report written to {}", out.display());
        }
        Command::Serve { listen, data_dir } => {
            let mut config = settings.config;
            if let Some(l) = listen {
                config.listen = l;
            }
            if let Some(d) = data_dir {
                config.data_dir = d;
            }
            let service = Service::open(config.clone()).map_err(|e| CliError::Other(e.into()))?;
            runtime()?.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&config.listen)
                    .await
                    .with_context(|| format!("cannot listen on {}", config.listen))?;
                announce(listener.local_addr()?);
                info!("serving sessions from {}", config.data_dir.display());
                layoutdiff_service::serve(listener, service, std::future::pending()).await?;
                Ok::<(), anyhow::Error>(())
            })?;
        }
        Command::ServeToy { listen } => {
            let toy: Arc<dyn Denoiser> =
                Arc::new(ToyDenoiser::new(ToySchedule::linear(settings.steps), settings.config.channels));
            runtime()?.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&listen)
                    .await
                    .with_context(|| format!("cannot listen on {listen}"))?;
                announce(listener.local_addr()?);
                layoutdiff_gateway::serve(listener, toy, std::future::pending()).await?;
                Ok::<(), anyhow::Error>(())
            })?;
        }
    }
    Ok(())
}
