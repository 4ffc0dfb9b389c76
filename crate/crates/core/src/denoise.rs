//! The one-step denoiser contract that separates orchestration from any
//! concrete backend, plus the reference images used for identity anchoring.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::latent::LatentTensor;
use crate::raster::{DepthMap, Mask, MaskSet};
use crate::scene::Scene;

#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub prompt: String,
    /// Full-resolution layout depth used as the geometric control.
    pub control_depth: Arc<DepthMap>,
    pub reference_id: Option<String>,
    pub guidance: f32,
}

impl Conditioning {
    pub fn new(prompt: impl Into<String>, control_depth: Arc<DepthMap>) -> Self {
        Conditioning {
            prompt: prompt.into(),
            control_depth,
            reference_id: None,
            guidance: 7.5,
        }
    }

    pub fn with_reference(mut self, reference_id: Option<String>) -> Self {
        self.reference_id = reference_id;
        self
    }
}

/// One path's request within a timestep.
#[derive(Clone, Copy, Debug)]
pub struct StepInput<'a> {
    pub path: &'a str,
    pub timestep: usize,
    pub latent: &'a LatentTensor,
    pub conditioning: &'a Conditioning,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub channels: usize,
    pub max_batch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepFailure {
    Timeout,
    Transport,
    Malformed,
    ShapeMismatch,
    TimestepOutOfRange,
    UnknownReference,
    Backend,
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum DenoiseError {
    #[error("path {path} at timestep {timestep}: {kind:?}: {message}")]
    Step {
        path: String,
        timestep: usize,
        kind: StepFailure,
        message: String,
    },
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend incompatible: {0}")]
    Incompatible(String),
    #[error("reference upload failed: {0}")]
    Reference(String),
}

impl DenoiseError {
    pub fn step(input: &StepInput<'_>, kind: StepFailure, message: impl Into<String>) -> Self {
        DenoiseError::Step {
            path: input.path.to_owned(),
            timestep: input.timestep,
            kind,
            message: message.into(),
        }
    }
}

pub trait Denoiser: Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;

    /// Predicts the next latent for one path. Deterministic in its inputs;
    /// the output has the input's shape.
    fn step(&self, input: &StepInput<'_>) -> Result<LatentTensor, DenoiseError>;

    /// Order-preserving batch; semantically equal to calling `step` per item.
    fn step_batch(&self, batch: &[StepInput<'_>]) -> Result<Vec<LatentTensor>, DenoiseError> {
        batch.iter().map(|i| self.step(i)).collect()
    }

    /// Makes a reference image available to later `reference_id` lookups.
    fn register_reference(&self, reference: &Reference) -> Result<(), DenoiseError>;
}

impl<D: Denoiser + ?Sized> Denoiser for Arc<D> {
    fn descriptor(&self) -> BackendDescriptor {
        (**self).descriptor()
    }
    fn step(&self, input: &StepInput<'_>) -> Result<LatentTensor, DenoiseError> {
        (**self).step(input)
    }
    fn step_batch(&self, batch: &[StepInput<'_>]) -> Result<Vec<LatentTensor>, DenoiseError> {
        (**self).step_batch(batch)
    }
    fn register_reference(&self, reference: &Reference) -> Result<(), DenoiseError> {
        (**self).register_reference(reference)
    }
}

/// Fails fast when a backend cannot serve latents of the session's width.
pub fn check_compatible(desc: &BackendDescriptor, channels: usize) -> Result<(), DenoiseError> {
    if desc.channels != channels {
        return Err(DenoiseError::Incompatible(format!(
            "backend {} produces {} latent channels, session uses {}",
            desc.name, desc.channels, channels
        )));
    }
    if desc.max_batch == 0 {
        return Err(DenoiseError::Incompatible(format!("backend {} reports max_batch 0", desc.name)));
    }
    Ok(())
}

/// A generated image kept as an identity anchor: its latent plus, per
/// object prompt, the latent-grid region that prompt occupied.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub id: String,
    pub latent: LatentTensor,
    pub regions: Vec<(String, Mask)>,
}

impl Reference {
    /// `masks` must be at latent resolution. Objects sharing a prompt share
    /// one region.
    pub fn from_image(latent: LatentTensor, scene: &Scene, masks: &MaskSet) -> Self {
        let mut regions: BTreeMap<String, Mask> = BTreeMap::new();
        for obj in &scene.objects {
            if let Some(m) = masks.object_mask(obj.id()) {
                regions
                    .entry(obj.prompt.clone())
                    .and_modify(|r| *r = r.union(&m))
                    .or_insert(m);
            }
        }
        Reference::new(latent, regions.into_iter().collect())
    }

    /// The id is derived from the content, so equal references share it.
    pub fn new(latent: LatentTensor, regions: Vec<(String, Mask)>) -> Self {
        let id = Self::derive_id(&latent, &regions);
        Reference { id, latent, regions }
    }

    fn derive_id(latent: &LatentTensor, regions: &[(String, Mask)]) -> String {
        let mut h = Sha256::new();
        h.update(latent.content_hash().as_bytes());
        for (prompt, mask) in regions {
            h.update((prompt.len() as u64).to_le_bytes());
            h.update(prompt.as_bytes());
            h.update(mask.bits.iter().map(|b| *b as u8).collect::<Vec<u8>>());
        }
        format!("ref-{}", &hex::encode(h.finalize())[..24])
    }

    /// Per-channel mean of the latent over each prompt's region; prompts
    /// whose region is empty are omitted.
    pub fn signatures(&self) -> BTreeMap<String, Vec<f64>> {
        self.regions
            .iter()
            .filter_map(|(p, m)| self.latent.masked_channel_means(m).map(|s| (p.clone(), s)))
            .collect()
    }
}
