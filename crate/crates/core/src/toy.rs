//! Deterministic in-process denoiser with a closed-form limit.
//!
//! Each step moves every cell a fraction `alpha_t` of the way to a target:
//! `z' = T - (1 - alpha_t) * (T - z)`. The target is a per-channel constant hashed
//! from the prompt, plus `0.1 *` the normalized control depth averaged over
//! the latent cell. With a reference, the target becomes the even mix of that
//! and the reference's mean signature for the same prompt.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, RwLock};

use rayon::prelude::*;

use crate::denoise::{BackendDescriptor, Conditioning, DenoiseError, Denoiser, Reference, StepFailure, StepInput};
use crate::export::{encode_rgb, DepthCodes, ExportError};
use crate::latent::LatentTensor;
use crate::raster::DepthMap;

pub const BACKEND_NAME: &str = "toy";
pub const DEPTH_WEIGHT: f64 = 0.1;
pub const REFERENCE_MIX: f64 = 0.5;
pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_CHANNELS: usize = 4;
pub const MAX_BATCH: usize = 64;

/// Per-step contraction rates.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySchedule {
    pub alphas: Vec<f32>,
}

impl ToySchedule {
    /// Rates rising linearly from 0.2 to 0.5 over `steps`.
    pub fn linear(steps: usize) -> Self {
        let alphas = (0..steps)
            .map(|t| {
                let frac = if steps > 1 { t as f32 / (steps - 1) as f32 } else { 0.0 };
                0.2 + 0.3 * frac
            })
            .collect();
        ToySchedule { alphas }
    }

    pub fn constant(steps: usize, alpha: f32) -> Self {
        ToySchedule {
            alphas: vec![alpha; steps],
        }
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    /// `prod(1 - alpha_t)`: the fraction of the initial distance left after
    /// the full schedule.
    pub fn residual(&self) -> f64 {
        self.alphas.iter().map(|a| 1.0 - *a as f64).product()
    }
}

impl Default for ToySchedule {
    fn default() -> Self {
        ToySchedule::linear(DEFAULT_STEPS)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stable 64-bit prompt hash.
pub fn prompt_hash(prompt: &str) -> u64 {
    fnv1a64(prompt.as_bytes())
}

/// Per-channel base values in [-1, 1) derived from the prompt hash.
pub fn prompt_base(prompt: &str, channels: usize) -> Vec<f64> {
    let h = prompt_hash(prompt);
    (0..channels as u64)
        .map(|c| {
            let bits = splitmix64(h ^ c.wrapping_mul(0x9e37_79b9_7f4a_7c15)) >> 11;
            bits as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

/// Normalized inverse-depth codes averaged over each latent cell, row major.
pub fn control_cell_means(depth: &DepthMap, height: usize, width: usize) -> Result<Vec<f64>, String> {
    if height == 0 || width == 0 || !depth.width.is_multiple_of(width) || !depth.height.is_multiple_of(height) || depth.width / width != depth.height / height {
        return Err(format!(
            "control depth {}x{} does not tile a {}x{} latent grid",
            depth.width, depth.height, width, height
        ));
    }
    let f = depth.width / width;
    let codes = DepthCodes::from_depth(depth);
    let mut out = Vec::with_capacity(width * height);
    for cy in 0..height {
        for cx in 0..width {
            let mut s = 0.0;
            for y in cy * f..(cy + 1) * f {
                for x in cx * f..(cx + 1) * f {
                    s += codes.normalized(x, y);
                }
            }
            out.push(s / (f * f) as f64);
        }
    }
    Ok(out)
}

type ControlKey = (usize, usize, usize);

pub struct ToyDenoiser {
    schedule: ToySchedule,
    channels: usize,
    signatures: RwLock<HashMap<String, BTreeMap<String, Vec<f64>>>>,
    // holds the Arc so the pointer key cannot be reused while cached
    control_cache: Mutex<Vec<ControlEntry>>,
}

type ControlEntry = (Arc<DepthMap>, ControlKey, Arc<Vec<f64>>);

impl Default for ToyDenoiser {
    fn default() -> Self {
        ToyDenoiser::new(ToySchedule::default(), DEFAULT_CHANNELS)
    }
}

impl ToyDenoiser {
    pub fn new(schedule: ToySchedule, channels: usize) -> Self {
        ToyDenoiser {
            schedule,
            channels,
            signatures: RwLock::new(HashMap::new()),
            control_cache: Mutex::new(Vec::new()),
        }
    }

    pub fn with_steps(steps: usize) -> Self {
        ToyDenoiser::new(ToySchedule::linear(steps), DEFAULT_CHANNELS)
    }

    pub fn schedule(&self) -> &ToySchedule {
        &self.schedule
    }

    pub fn has_reference(&self, id: &str) -> bool {
        self.signatures.read().unwrap().contains_key(id)
    }

    fn control(&self, depth: &Arc<DepthMap>, height: usize, width: usize) -> Result<Arc<Vec<f64>>, String> {
        let key = (Arc::as_ptr(depth) as usize, height, width);
        {
            let cache = self.control_cache.lock().unwrap();
            if let Some((_, _, v)) = cache.iter().find(|(_, k, _)| *k == key) {
                return Ok(v.clone());
            }
        }
        let v = Arc::new(control_cell_means(depth, height, width)?);
        let mut cache = self.control_cache.lock().unwrap();
        if cache.len() >= 16 {
            cache.remove(0);
        }
        cache.push((depth.clone(), key, v.clone()));
        Ok(v)
    }

    /// The latent this denoiser converges to under `conditioning`.
    pub fn target_latent(&self, conditioning: &Conditioning, shape: (usize, usize, usize)) -> Result<LatentTensor, String> {
        let (channels, height, width) = shape;
        let base = prompt_base(&conditioning.prompt, channels);
        let control = self.control(&conditioning.control_depth, height, width)?;
        let signature = match &conditioning.reference_id {
            None => None,
            Some(id) => {
                let store = self.signatures.read().unwrap();
                let by_prompt = store.get(id).ok_or_else(|| format!("unknown reference_id {id}"))?;
                by_prompt.get(&conditioning.prompt).cloned()
            }
        };
        let mut out = LatentTensor::zeros(channels, height, width);
        let plane = height * width;
        for c in 0..channels {
            for (i, nd) in control.iter().enumerate() {
                let own = base[c] + DEPTH_WEIGHT * nd;
                let v = match &signature {
                    Some(sig) => (1.0 - REFERENCE_MIX) * own + REFERENCE_MIX * sig[c],
                    None => own,
                };
                out.data[c * plane + i] = v as f32;
            }
        }
        Ok(out)
    }

    pub fn alpha(&self, t: usize) -> Option<f32> {
        self.schedule.alphas.get(t).copied()
    }
}

impl Denoiser for ToyDenoiser {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            name: BACKEND_NAME.into(),
            channels: self.channels,
            max_batch: MAX_BATCH,
        }
    }

    fn step(&self, input: &StepInput<'_>) -> Result<LatentTensor, DenoiseError> {
        let alpha = self.alpha(input.timestep).ok_or_else(|| {
            DenoiseError::step(
                input,
                StepFailure::TimestepOutOfRange,
                format!("timestep must be below {}", self.schedule.steps()),
            )
        })?;
        // written so that alpha = 1 and z = T both give T exactly
        let keep = 1.0 - alpha;
        let z = input.latent;
        let target = self.target_latent(input.conditioning, z.shape()).map_err(|m| {
            let kind = if m.starts_with("unknown reference") {
                StepFailure::UnknownReference
            } else {
                StepFailure::ShapeMismatch
            };
            DenoiseError::step(input, kind, m)
        })?;
        let data = z
            .data
            .iter()
            .zip(&target.data)
            .map(|(z, t)| t - keep * (t - z))
            .collect();
        Ok(LatentTensor { data, ..target })
    }

    fn step_batch(&self, batch: &[StepInput<'_>]) -> Result<Vec<LatentTensor>, DenoiseError> {
        batch.par_iter().map(|i| self.step(i)).collect()
    }

    fn register_reference(&self, reference: &Reference) -> Result<(), DenoiseError> {
        if reference.latent.channels != self.channels {
            return Err(DenoiseError::Reference(format!(
                "reference has {} channels, backend uses {}",
                reference.latent.channels, self.channels
            )));
        }
        self.signatures
            .write()
            .unwrap()
            .insert(reference.id.clone(), reference.signatures());
        Ok(())
    }
}

pub const PREVIEW_SCALE: usize = 8;

/// Grayscale-ramp rendering of channel 0 (0 maps to mid-gray, +-2 saturate),
/// upsampled by [`PREVIEW_SCALE`], as an RGB PNG.
pub fn decode_preview(latent: &LatentTensor) -> Result<Vec<u8>, ExportError> {
    let (w, h) = (latent.width * PREVIEW_SCALE, latent.height * PREVIEW_SCALE);
    let mut rgb = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let v = latent.get(0, y / PREVIEW_SCALE, x / PREVIEW_SCALE);
            let g = (128.0 + 63.75 * v.clamp(-2.0, 2.0)).round().clamp(0.0, 255.0) as u8;
            rgb.extend_from_slice(&[g, g, g]);
        }
    }
    encode_rgb(w, h, &rgb)
}
