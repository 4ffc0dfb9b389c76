//! Wall-clock and tracked-memory benchmark of `generate_scene` over
//! growing grid layouts.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use layoutdiff_core::denoise::Denoiser;
use layoutdiff_core::orchestrator::{generate_scene, GenerationConfig, OrchestratorError, ParallelismMode, RunContext};
use layoutdiff_core::synth::grid_scene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    /// Object counts, strictly increasing.
    pub sizes: Vec<usize>,
    pub modes: Vec<ParallelismMode>,
    pub steps: usize,
    pub resolution: u32,
    /// Timed runs per cell; the fastest is reported.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            sizes: vec![2, 8],
            modes: vec![ParallelismMode::Parallel, ParallelismMode::SequentialEmulation],
            steps: 50,
            resolution: 256,
            repeats: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub objects: usize,
    pub mode: ParallelismMode,
    pub seconds: f64,
    pub peak_bytes: usize,
    pub latent_bytes: usize,
    pub latent_hash: String,
}

/// `t(largest) / t(smallest)` for one mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeRatio {
    pub mode: ParallelismMode,
    pub from_objects: usize,
    pub to_objects: usize,
    pub time_ratio: f64,
    /// Growth of peak tracked bytes per added object, in latents.
    pub peak_latents_per_object: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub backend: String,
    pub options: BenchOptions,
    pub rows: Vec<BenchRow>,
    pub ratios: Vec<ModeRatio>,
    /// Every object count produced the same latent in every mode.
    pub modes_agree: bool,
}

impl BenchOptions {
    pub fn validate(&self) -> Result<(), String> {
        if self.sizes.is_empty() || self.modes.is_empty() {
            return Err("at least one size and one mode are needed".into());
        }
        if self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(format!("sizes must be strictly increasing, got {:?}", self.sizes));
        }
        if self.repeats == 0 || self.steps == 0 {
            return Err("repeats and steps must be at least 1".into());
        }
        Ok(())
    }
}

/// Runs every (size, mode) cell `repeats` times, interleaved so slow
/// drift on the machine hits all cells alike.
pub fn run_bench(options: &BenchOptions, denoiser: &dyn Denoiser) -> Result<BenchReport, OrchestratorError> {
    options.validate().map_err(OrchestratorError::Config)?;
    let scenes: Vec<_> = options.sizes.iter().map(|n| grid_scene(*n, options.resolution)).collect();
    let config = |mode| GenerationConfig {
        steps: options.steps,
        seed: options.seed,
        mode,
        ..Default::default()
    };
    let mut rows: Vec<BenchRow> = Vec::new();
    for repeat in 0..options.repeats {
        for (scene, &objects) in scenes.iter().zip(&options.sizes) {
            for &mode in &options.modes {
                let ctx = RunContext::default();
                let started = Instant::now();
                let latent = generate_scene(scene, denoiser, &config(mode), &ctx)?.latent;
                let seconds = started.elapsed().as_secs_f64();
                let row = BenchRow {
                    objects,
                    mode,
                    seconds,
                    peak_bytes: ctx.tracker.peak(),
                    latent_bytes: latent.byte_len(),
                    latent_hash: latent.content_hash(),
                };
                if repeat == 0 {
                    rows.push(row);
                } else if let Some(r) = rows.iter_mut().find(|r| r.objects == objects && r.mode == mode) {
                    r.seconds = r.seconds.min(seconds);
                }
            }
        }
    }
    let modes_agree = options.sizes.iter().all(|n| {
        let mut hashes = rows.iter().filter(|r| r.objects == *n).map(|r| &r.latent_hash);
        let first = hashes.next();
        hashes.all(|h| Some(h) == first)
    });
    let ratios = options
        .modes
        .iter()
        .filter_map(|&mode| {
            let of = |n: usize| rows.iter().find(|r| r.objects == n && r.mode == mode);
            let (a, b) = (of(options.sizes[0])?, of(*options.sizes.last()?)?);
            if a.objects == b.objects {
                return None;
            }
            let added = (b.objects - a.objects) as f64;
            Some(ModeRatio {
                mode,
                from_objects: a.objects,
                to_objects: b.objects,
                time_ratio: b.seconds / a.seconds,
                peak_latents_per_object: (b.peak_bytes as f64 - a.peak_bytes as f64) / a.latent_bytes as f64 / added,
            })
        })
        .collect();
    Ok(BenchReport {
        backend: denoiser.descriptor().name,
        options: options.clone(),
        rows,
        ratios,
        modes_agree,
    })
}

pub fn mode_name(mode: ParallelismMode) -> &'static str {
    match mode {
        ParallelismMode::Parallel => "parallel",
        ParallelismMode::SequentialEmulation => "sequential-emulation",
    }
}

pub fn render_table(report: &BenchReport) -> String {
    let o = &report.options;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "backend {} | {} steps | {}x{} | best of {}",
        report.backend, o.steps, o.resolution, o.resolution, o.repeats
    );
    let _ = writeln!(out, "{:>7}  {:<20}  {:>10}  {:>12}  {:>8}", "objects", "mode", "seconds", "peak bytes", "latents");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{:>7}  {:<20}  {:>10.4}  {:>12}  {:>8.1}",
            r.objects,
            mode_name(r.mode),
            r.seconds,
            r.peak_bytes,
            r.peak_bytes as f64 / r.latent_bytes as f64
        );
    }
    for r in &report.ratios {
        let _ = writeln!(
            out,
            "{:<20}  t({})/t({}) = {:.3}  peak +{:.2} latents per object",
            mode_name(r.mode),
            r.to_objects,
            r.from_objects,
            r.time_ratio,
            r.peak_latents_per_object
        );
    }
    let _ = writeln!(out, "modes agree bitwise: {}", report.modes_agree);
    out
}
