//! Multi-path generation and mask-guided editing over any [`Denoiser`].
//!
//! Every path denoises the same shared latent under its own conditioning;
//! after each timestep the predictions are composed by their occlusion-aware
//! masks and the composite feeds every path at the next step. Edits run the
//! same loop over the active region only, re-imposing the source latent on
//! the preserved cells at every step.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoise::{check_compatible, Conditioning, DenoiseError, Denoiser, Reference, StepFailure, StepInput};
use crate::latent::{blend_latents, inpaint_blend, LatentError, LatentTensor};
use crate::raster::{downsample_masks, render, render_masks, DepthMap, Mask, MaskSet, RasterError};
use crate::scene::{apply_edit, diff_scenes, validate_scene, Camera, EditError, ObjectSpec, OrientedBox, Scene, SceneEdit, Violation};

/// Image pixels per latent cell along each axis.
pub const LATENT_FACTOR: usize = 8;
pub const BACKGROUND_PATH: &str = "background";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParallelismMode {
    /// All paths of a timestep go to the backend as batches.
    #[default]
    Parallel,
    /// One backend call per path, composed as results arrive.
    SequentialEmulation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub steps: usize,
    pub seed: u64,
    pub use_background_path: bool,
    pub two_stage: bool,
    pub mode: ParallelismMode,
    pub channels: usize,
    pub guidance: f32,
    /// Extra attempts for a failed timestep before the job fails.
    pub retries: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            steps: 50,
            seed: 0,
            use_background_path: true,
            two_stage: false,
            mode: ParallelismMode::Parallel,
            channels: 4,
            guidance: 7.5,
            retries: 2,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if self.steps == 0 {
            return Err(OrchestratorError::Config("steps must be at least 1".into()));
        }
        if self.channels == 0 {
            return Err(OrchestratorError::Config("channels must be at least 1".into()));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(OrchestratorError::Config("guidance must be a finite value >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid scene: {}", describe(.0))]
    InvalidScene(Vec<Violation>),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Denoise(#[from] DenoiseError),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error("unsupported edit: {0}")]
    Unsupported(String),
    #[error("latent shape {found:?} does not match the scene grid {expected:?}")]
    LatentShape {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("edit masks need at least one box with a single id")]
    BadBoxes,
}

fn describe(v: &[Violation]) -> String {
    v.iter().map(|v| format!("{}: {}", v.field, v.rule)).collect::<Vec<_>>().join("; ")
}

/// Live and peak bytes of latents held by the orchestrator.
#[derive(Debug, Default)]
pub struct MemoryTracker {
    live: AtomicUsize,
    peak: AtomicUsize,
}

impl MemoryTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn hold(&self, bytes: usize) -> TrackGuard<'_> {
        let now = self.live.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(now, Ordering::SeqCst);
        TrackGuard { tracker: self, bytes }
    }

    pub fn live(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn reset_peak(&self) {
        self.peak.store(self.live(), Ordering::SeqCst);
    }
}

#[must_use]
pub struct TrackGuard<'a> {
    tracker: &'a MemoryTracker,
    bytes: usize,
}

impl Drop for TrackGuard<'_> {
    fn drop(&mut self) {
        self.tracker.live.fetch_sub(self.bytes, Ordering::SeqCst);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Progress {
    pub completed: usize,
    pub total: usize,
}

/// Per-job observation hooks.
#[derive(Default)]
pub struct RunContext<'a> {
    pub tracker: MemoryTracker,
    pub progress: Option<&'a (dyn Fn(Progress) + Sync)>,
}

impl<'a> RunContext<'a> {
    pub fn with_progress(progress: &'a (dyn Fn(Progress) + Sync)) -> Self {
        RunContext {
            tracker: MemoryTracker::new(),
            progress: Some(progress),
        }
    }
}

struct Counter<'c, 'a> {
    ctx: &'c RunContext<'a>,
    completed: usize,
    total: usize,
}

impl Counter<'_, '_> {
    fn advance(&mut self, n: usize) {
        self.completed = (self.completed + n).min(self.total);
        if let Some(cb) = self.ctx.progress {
            cb(Progress {
                completed: self.completed,
                total: self.total,
            });
        }
    }
}

/// The `(channels, height, width)` latent shape for a camera.
pub fn latent_shape(camera: &Camera, channels: usize) -> Result<(usize, usize, usize), OrchestratorError> {
    let (w, h) = (camera.width as usize, camera.height as usize);
    if w % LATENT_FACTOR != 0 || h % LATENT_FACTOR != 0 || w == 0 || h == 0 {
        return Err(RasterError::NonDivisibleFactor {
            factor: LATENT_FACTOR,
            width: w,
            height: h,
        }
        .into());
    }
    Ok((channels, h / LATENT_FACTOR, w / LATENT_FACTOR))
}

/// Scene masks reduced to the latent grid.
pub fn latent_masks(scene: &Scene) -> Result<MaskSet, OrchestratorError> {
    Ok(downsample_masks(&render_masks(scene), LATENT_FACTOR)?)
}

fn check_scene(scene: &Scene) -> Result<(), OrchestratorError> {
    let report = validate_scene(scene);
    if report.is_empty() {
        Ok(())
    } else {
        Err(OrchestratorError::InvalidScene(report))
    }
}

struct PathPlan {
    id: String,
    conditioning: Conditioning,
    mask: Mask,
}

/// Paths plus an optional region copied from `fill` (or, when `fill` is
/// `None`, from the current latent) instead of from any path.
struct Plan<'z> {
    paths: Vec<PathPlan>,
    keep: Option<(Mask, Option<&'z LatentTensor>)>,
}

impl Plan<'_> {
    fn check_partition(&self) -> Result<(), LatentError> {
        let mut masks: Vec<&Mask> = self.paths.iter().map(|p| &p.mask).collect();
        if let Some((m, _)) = &self.keep {
            masks.push(m);
        }
        let Some(first) = masks.first() else {
            return Err(LatentError::Empty);
        };
        let mut count = vec![0usize; first.bits.len()];
        for m in &masks {
            if m.width != first.width || m.height != first.height {
                return Err(LatentError::MaskShape {
                    expected: (first.height, first.width),
                    found: (m.height, m.width),
                });
            }
            for (c, b) in count.iter_mut().zip(&m.bits) {
                *c += *b as usize;
            }
        }
        match count.iter().position(|c| *c != 1) {
            Some(i) => Err(LatentError::NotAPartition {
                x: i % first.width,
                y: i / first.width,
                count: count[i],
            }),
            None => Ok(()),
        }
    }
}

fn check_prediction(input: &StepInput<'_>, pred: &LatentTensor) -> Result<(), DenoiseError> {
    if pred.shape() != input.latent.shape() || pred.data.len() != input.latent.data.len() {
        return Err(DenoiseError::step(
            input,
            StepFailure::ShapeMismatch,
            format!("expected {:?}, got {:?}", input.latent.shape(), pred.shape()),
        ));
    }
    Ok(())
}

fn run_plan(
    denoiser: &dyn Denoiser,
    plan: &Plan<'_>,
    z0: LatentTensor,
    config: &GenerationConfig,
    counter: &mut Counter<'_, '_>,
) -> Result<LatentTensor, OrchestratorError> {
    plan.check_partition()?;
    let tracker = &counter.ctx.tracker;
    let max_batch = denoiser.descriptor().max_batch.max(1);
    let mut z = z0;
    let mut _z_guard = tracker.hold(z.byte_len());
    for t in 0..config.steps {
        let mut attempt = 0;
        let (next, guard) = loop {
            let result = match config.mode {
                ParallelismMode::Parallel => parallel_step(denoiser, plan, &z, t, config.seed, max_batch, tracker),
                ParallelismMode::SequentialEmulation => sequential_step(denoiser, plan, &z, t, config.seed, tracker),
            };
            match result {
                Ok(v) => break v,
                Err(OrchestratorError::Denoise(e)) if attempt < config.retries => {
                    attempt += 1;
                    warn!("timestep {t} failed ({e}); retry {attempt}/{}", config.retries);
                }
                Err(e) => return Err(e),
            }
        };
        z = next;
        _z_guard = guard;
        counter.advance(1);
    }
    debug!("plan of {} paths done, peak {} bytes", plan.paths.len(), tracker.peak());
    Ok(z)
}

fn parallel_step<'t>(
    denoiser: &dyn Denoiser,
    plan: &Plan<'_>,
    z: &LatentTensor,
    t: usize,
    seed: u64,
    max_batch: usize,
    tracker: &'t MemoryTracker,
) -> Result<(LatentTensor, TrackGuard<'t>), OrchestratorError> {
    let inputs: Vec<StepInput<'_>> = plan
        .paths
        .iter()
        .map(|p| StepInput {
            path: &p.id,
            timestep: t,
            latent: z,
            conditioning: &p.conditioning,
            seed,
        })
        .collect();
    let mut preds = Vec::with_capacity(inputs.len());
    let mut guards = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(max_batch) {
        let out = denoiser.step_batch(chunk)?;
        if out.len() != chunk.len() {
            return Err(DenoiseError::step(
                &chunk[0],
                StepFailure::Malformed,
                format!("batch of {} returned {} results", chunk.len(), out.len()),
            )
            .into());
        }
        for (input, pred) in chunk.iter().zip(out) {
            check_prediction(input, &pred)?;
            guards.push(tracker.hold(pred.byte_len()));
            preds.push(pred);
        }
    }
    let mut parts: Vec<(&LatentTensor, &Mask)> = preds.iter().zip(&plan.paths).map(|(p, pp)| (p, &pp.mask)).collect();
    if let Some((mask, fill)) = &plan.keep {
        parts.push((fill.unwrap_or(z), mask));
    }
    let out = blend_latents(&parts)?;
    let guard = tracker.hold(out.byte_len());
    Ok((out, guard))
}

/// Same composite as [`parallel_step`], holding one prediction at a time.
/// The plan is a checked partition, so copying each path's cells into the
/// accumulator selects exactly what the blend would.
fn sequential_step<'t>(
    denoiser: &dyn Denoiser,
    plan: &Plan<'_>,
    z: &LatentTensor,
    t: usize,
    seed: u64,
    tracker: &'t MemoryTracker,
) -> Result<(LatentTensor, TrackGuard<'t>), OrchestratorError> {
    let mut acc = match &plan.keep {
        Some((_, Some(fill))) => (*fill).clone(),
        _ => z.clone(),
    };
    let guard = tracker.hold(acc.byte_len());
    let plane = acc.plane();
    for p in &plan.paths {
        let input = StepInput {
            path: &p.id,
            timestep: t,
            latent: z,
            conditioning: &p.conditioning,
            seed,
        };
        let pred = denoiser.step(&input)?;
        check_prediction(&input, &pred)?;
        let _g = tracker.hold(pred.byte_len());
        for c in 0..acc.channels {
            let base = c * plane;
            for (i, bit) in p.mask.bits.iter().enumerate() {
                if *bit {
                    acc.data[base + i] = pred.data[base + i];
                }
            }
        }
    }
    Ok((acc, guard))
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub latent: LatentTensor,
    /// The first-pass image used as the identity anchor, when two-stage.
    pub reference: Option<Reference>,
}

fn generation_plan<'z>(
    scene: &Scene,
    masks: &MaskSet,
    control: &Arc<DepthMap>,
    config: &GenerationConfig,
    reference_id: Option<&str>,
) -> Plan<'z> {
    let mut paths: Vec<PathPlan> = scene
        .objects
        .iter()
        .enumerate()
        .map(|(i, obj)| PathPlan {
            id: format!("object:{}", obj.id()),
            conditioning: Conditioning {
                prompt: obj.prompt.clone(),
                control_depth: control.clone(),
                reference_id: reference_id.map(str::to_owned),
                guidance: config.guidance,
            },
            mask: masks.label_mask(i as u16 + 1),
        })
        .collect();
    let background = masks.background_mask();
    let keep = if config.use_background_path {
        paths.push(PathPlan {
            id: BACKGROUND_PATH.into(),
            conditioning: Conditioning {
                prompt: scene.background_prompt.clone(),
                control_depth: control.clone(),
                reference_id: None,
                guidance: config.guidance,
            },
            mask: background,
        });
        None
    } else {
        // uncovered cells carry the current latent forward unchanged
        Some((background, None))
    };
    Plan { paths, keep }
}

fn prepare(
    scene: &Scene,
    denoiser: &dyn Denoiser,
    config: &GenerationConfig,
) -> Result<(usize, usize, usize), OrchestratorError> {
    config.validate()?;
    check_scene(scene)?;
    let shape = latent_shape(&scene.camera, config.channels)?;
    check_compatible(&denoiser.descriptor(), config.channels)?;
    Ok(shape)
}

/// Generates a scene from seeded noise with one path per object plus the
/// background. With `two_stage`, a first pass produces a reference and a
/// second pass from the same noise conditions every object path on it.
pub fn generate_scene(
    scene: &Scene,
    denoiser: &dyn Denoiser,
    config: &GenerationConfig,
    ctx: &RunContext<'_>,
) -> Result<Generation, OrchestratorError> {
    let (c, h, w) = prepare(scene, denoiser, config)?;
    let rendered = render(scene);
    let control = Arc::new(rendered.depth);
    let masks = downsample_masks(&rendered.masks, LATENT_FACTOR)?;
    let passes = if config.two_stage { 2 } else { 1 };
    let mut counter = Counter {
        ctx,
        completed: 0,
        total: passes * config.steps,
    };

    let plan = generation_plan(scene, &masks, &control, config, None);
    let first = run_plan(denoiser, &plan, LatentTensor::noise(c, h, w, config.seed), config, &mut counter)?;
    if !config.two_stage {
        return Ok(Generation {
            latent: first,
            reference: None,
        });
    }
    let reference = Reference::from_image(first, scene, &masks);
    let _ref_guard = ctx.tracker.hold(reference.latent.byte_len());
    denoiser.register_reference(&reference)?;
    let plan = generation_plan(scene, &masks, &control, config, Some(&reference.id));
    let latent = run_plan(denoiser, &plan, LatentTensor::noise(c, h, w, config.seed), config, &mut counter)?;
    Ok(Generation {
        latent,
        reference: Some(reference),
    })
}

/// Regenerates `new_scene` from scratch with every object path anchored on
/// `z_img`, the current image of `old_scene`. Used for camera changes,
/// which cannot be expressed as local inpainting.
pub fn regenerate_view(
    old_scene: &Scene,
    new_scene: &Scene,
    z_img: &LatentTensor,
    denoiser: &dyn Denoiser,
    config: &GenerationConfig,
    ctx: &RunContext<'_>,
) -> Result<Generation, OrchestratorError> {
    let (c, h, w) = prepare(new_scene, denoiser, config)?;
    let old_shape = latent_shape(&old_scene.camera, config.channels)?;
    if z_img.shape() != old_shape {
        return Err(OrchestratorError::LatentShape {
            expected: old_shape,
            found: z_img.shape(),
        });
    }
    let reference = Reference::from_image(z_img.clone(), old_scene, &latent_masks(old_scene)?);
    let _ref_guard = ctx.tracker.hold(reference.latent.byte_len());
    denoiser.register_reference(&reference)?;

    let rendered = render(new_scene);
    let control = Arc::new(rendered.depth);
    let masks = downsample_masks(&rendered.masks, LATENT_FACTOR)?;
    let mut counter = Counter {
        ctx,
        completed: 0,
        total: config.steps,
    };
    let plan = generation_plan(new_scene, &masks, &control, config, Some(&reference.id));
    let latent = run_plan(denoiser, &plan, LatentTensor::noise(c, h, w, config.seed), config, &mut counter)?;
    Ok(Generation {
        latent,
        reference: Some(reference),
    })
}

/// Latent-grid masks for one object edit.
#[derive(Clone, Debug, PartialEq)]
pub struct EditMaskTriple {
    /// Destination region of the object.
    pub m_add: Mask,
    /// Region the object vacates.
    pub m_rem: Mask,
    /// Everything kept from the source latent.
    pub m_pres: Mask,
}

impl EditMaskTriple {
    pub fn active(&self) -> Mask {
        self.m_add.union(&self.m_rem)
    }
}

/// Builds the edit masks for moving, adding or removing one object.
///
/// Each box is rendered among the other objects of `scene` (the object with
/// the box's id is replaced, or appended when absent), so the regions are
/// occlusion-aware. Cells claimed by both regions go to `m_add`.
pub fn make_edit_masks(
    old_box: Option<&OrientedBox>,
    new_box: Option<&OrientedBox>,
    scene: &Scene,
) -> Result<EditMaskTriple, OrchestratorError> {
    let id = match (old_box, new_box) {
        (Some(a), Some(b)) if a.id != b.id => return Err(OrchestratorError::BadBoxes),
        (Some(a), _) => a.id.clone(),
        (None, Some(b)) => b.id.clone(),
        (None, None) => return Err(OrchestratorError::BadBoxes),
    };
    let (_, h, w) = latent_shape(&scene.camera, 1)?;
    let region = |b: Option<&OrientedBox>| -> Result<Mask, OrchestratorError> {
        let Some(b) = b else {
            return Ok(Mask::empty(w, h));
        };
        let mut s = scene.clone();
        match s.index_of(&id) {
            Some(i) => s.objects[i].bbox = b.clone(),
            None => s.objects.push(ObjectSpec::new(b.clone(), "edit")),
        }
        Ok(latent_masks(&s)?.object_mask(&id).expect("box is in the scene"))
    };
    let m_add = region(new_box)?;
    let m_rem = region(old_box)?.difference(&m_add);
    let m_pres = m_add.union(&m_rem).complement();
    Ok(EditMaskTriple { m_add, m_rem, m_pres })
}

/// Applies the object edits that turn `old_scene` into `new_scene` to
/// `z_img`, one edit at a time. Cells outside each edit's active region are
/// copied from the latent before that edit at every step, so they come out
/// bit-identical.
///
/// Camera and background-prompt changes are rejected: they alter every cell
/// and go through [`regenerate_view`] instead.
pub fn edit_apply(
    old_scene: &Scene,
    new_scene: &Scene,
    z_img: &LatentTensor,
    denoiser: &dyn Denoiser,
    config: &GenerationConfig,
    ctx: &RunContext<'_>,
) -> Result<LatentTensor, OrchestratorError> {
    config.validate()?;
    check_scene(old_scene)?;
    check_scene(new_scene)?;
    let shape = latent_shape(&old_scene.camera, config.channels)?;
    if z_img.shape() != shape {
        return Err(OrchestratorError::LatentShape {
            expected: shape,
            found: z_img.shape(),
        });
    }
    let edits = diff_scenes(old_scene, new_scene);
    if let Some(e) = edits
        .iter()
        .find(|e| matches!(e, SceneEdit::SetCamera(_) | SceneEdit::SetBackgroundPrompt(_)))
    {
        let what = match e {
            SceneEdit::SetCamera(_) => "camera change",
            _ => "background prompt change",
        };
        return Err(OrchestratorError::Unsupported(format!("{what} requires full regeneration")));
    }
    if edits.is_empty() {
        return Ok(z_img.clone());
    }
    check_compatible(&denoiser.descriptor(), config.channels)?;

    let mut counter = Counter {
        ctx,
        completed: 0,
        total: edits.len() * config.steps,
    };
    let (c, h, w) = shape;
    let mut cur = old_scene.clone();
    let mut z = z_img.clone();
    let _z_guard = ctx.tracker.hold(z.byte_len());
    for (k, edit) in edits.iter().enumerate() {
        let next = apply_edit(&cur, edit)?;
        let control = Arc::new(render(&next).depth);
        let cond = |prompt: &str, reference_id: Option<String>| Conditioning {
            prompt: prompt.to_owned(),
            control_depth: control.clone(),
            reference_id,
            guidance: config.guidance,
        };
        let bg = next.background_prompt.as_str();
        let (triple, paths) = match edit {
            SceneEdit::TransformObject(id, _) => {
                let old_box = &cur.object(id).expect("edit applied").bbox;
                let obj = next.object(id).expect("edit applied");
                let triple = make_edit_masks(Some(old_box), Some(&obj.bbox), &next)?;
                let reference = Reference::from_image(z.clone(), &cur, &latent_masks(&cur)?);
                denoiser.register_reference(&reference)?;
                let paths = vec![
                    PathPlan {
                        id: format!("add:{id}"),
                        conditioning: cond(&obj.prompt, Some(reference.id.clone())),
                        mask: triple.m_add.clone(),
                    },
                    PathPlan {
                        id: format!("remove:{id}"),
                        conditioning: cond(bg, None),
                        mask: triple.m_rem.clone(),
                    },
                ];
                (triple, paths)
            }
            SceneEdit::AddObject(spec) => {
                let obj = next.object(spec.id()).expect("edit applied");
                let triple = make_edit_masks(None, Some(&obj.bbox), &next)?;
                let path = PathPlan {
                    id: format!("add:{}", spec.id()),
                    conditioning: cond(&obj.prompt, None),
                    mask: triple.m_add.clone(),
                };
                (triple, vec![path])
            }
            SceneEdit::ReplaceObject(id, prompt) => {
                let b = &next.object(id).expect("edit applied").bbox;
                let triple = make_edit_masks(Some(b), Some(b), &next)?;
                let path = PathPlan {
                    id: format!("replace:{id}"),
                    conditioning: cond(prompt, None),
                    mask: triple.m_add.clone(),
                };
                (triple, vec![path])
            }
            SceneEdit::RemoveObject(id) => {
                let b = &cur.object(id).expect("edit applied").bbox;
                let triple = make_edit_masks(Some(b), None, &cur)?;
                let path = PathPlan {
                    id: format!("remove:{id}"),
                    conditioning: cond(bg, None),
                    mask: triple.m_rem.clone(),
                };
                (triple, vec![path])
            }
            SceneEdit::SetCamera(_) | SceneEdit::SetBackgroundPrompt(_) => unreachable!("rejected above"),
        };
        let paths: Vec<PathPlan> = paths.into_iter().filter(|p| !p.mask.is_empty()).collect();
        if paths.is_empty() {
            debug!("edit {k} touches no latent cell");
            counter.advance(config.steps);
            cur = next;
            continue;
        }
        let active = triple.active();
        let noise = LatentTensor::noise(c, h, w, config.seed.wrapping_add(k as u64));
        let init = inpaint_blend(&noise, &active, &z)?;
        drop(noise);
        let plan = Plan {
            paths,
            keep: Some((triple.m_pres, Some(&z))),
        };
        let out = run_plan(denoiser, &plan, init, config, &mut counter)?;
        drop(plan);
        z = out;
        cur = next;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::LatentTensor;
    use crate::scene::{Camera, OrientedBox};
    use crate::toy::ToyDenoiser;
    use std::sync::atomic::AtomicUsize;
    use std::sync::Mutex;

    fn cam64() -> Camera {
        Camera::looking([0.0, 0.0, 0.0], 0.0, 0.0, 64, 64)
    }

    // fronto-parallel faces whose edges fall on latent cell boundaries
    fn aligned_scene() -> Scene {
        Scene::new(cam64(), "a quiet room")
            .with_object(OrientedBox::new("a", [1.0, 0.0, 4.5], [1.0, 1.0, 1.0], 0.0), "a red chair")
            .with_object(OrientedBox::new("b", [-1.0, 0.5, 4.5], [1.0, 1.0, 1.0], 0.0), "a lamp")
    }

    fn expected_limit(toy: &ToyDenoiser, scene: &Scene, reference: Option<&str>) -> LatentTensor {
        let rendered = render(scene);
        let control = Arc::new(rendered.depth);
        let masks = downsample_masks(&rendered.masks, 8).unwrap();
        let shape = (4, 8, 8);
        let mut out = LatentTensor::zeros(4, 8, 8);
        for y in 0..8 {
            for x in 0..8 {
                let label = masks.labels[y * 8 + x] as usize;
                let (prompt, r) = if label == 0 {
                    (scene.background_prompt.clone(), None)
                } else {
                    (scene.objects[label - 1].prompt.clone(), reference.map(str::to_owned))
                };
                let c = Conditioning::new(prompt, control.clone()).with_reference(r);
                let t = toy.target_latent(&c, shape).unwrap();
                for ch in 0..4 {
                    out.set(ch, y, x, t.get(ch, y, x));
                }
            }
        }
        out
    }

    #[test]
    fn empty_scene_converges_to_background_target() {
        let toy = ToyDenoiser::default();
        let scene = Scene::new(cam64(), "a quiet room");
        let g = generate_scene(&scene, &toy, &GenerationConfig::default(), &RunContext::default()).unwrap();
        assert!(g.latent.max_abs_diff(&expected_limit(&toy, &scene, None)) < 1e-3);
    }

    #[test]
    fn regions_converge_to_their_own_targets() {
        let toy = ToyDenoiser::default();
        let scene = aligned_scene();
        let g = generate_scene(&scene, &toy, &GenerationConfig::default(), &RunContext::default()).unwrap();
        assert!(g.latent.max_abs_diff(&expected_limit(&toy, &scene, None)) < 1e-3);
    }

    #[test]
    fn modes_agree_bitwise_and_track_memory() {
        let toy = ToyDenoiser::default();
        let scene = aligned_scene();
        let mut outs = Vec::new();
        let mut peaks = Vec::new();
        for mode in [ParallelismMode::Parallel, ParallelismMode::SequentialEmulation] {
            let ctx = RunContext::default();
            let cfg = GenerationConfig { mode, seed: 9, ..Default::default() };
            outs.push(generate_scene(&scene, &toy, &cfg, &ctx).unwrap().latent);
            assert_eq!(ctx.tracker.live(), 0);
            peaks.push(ctx.tracker.peak());
        }
        assert_eq!(outs[0], outs[1]);
        let one = LatentTensor::zeros(4, 8, 8).byte_len();
        // three paths plus the current latent and the composite
        assert_eq!(peaks[0], 5 * one);
        assert_eq!(peaks[1], 3 * one);
    }

    #[test]
    fn background_path_off_keeps_noise_in_uncovered_cells() {
        let toy = ToyDenoiser::default();
        let scene = aligned_scene();
        let cfg = GenerationConfig { use_background_path: false, ..Default::default() };
        let g = generate_scene(&scene, &toy, &cfg, &RunContext::default()).unwrap();
        let noise = LatentTensor::noise(4, 8, 8, cfg.seed);
        let bg = latent_masks(&scene).unwrap().background_mask();
        let limit = expected_limit(&toy, &scene, None);
        for (i, b) in bg.bits.iter().enumerate() {
            for ch in 0..4 {
                let k = ch * 64 + i;
                if *b {
                    assert_eq!(g.latent.data[k], noise.data[k]);
                } else {
                    assert!((g.latent.data[k] - limit.data[k]).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn two_stage_mixes_in_first_pass_signature() {
        let toy = ToyDenoiser::default();
        let scene = aligned_scene();
        let cfg = GenerationConfig { two_stage: true, ..Default::default() };
        let g = generate_scene(&scene, &toy, &cfg, &RunContext::default()).unwrap();
        let reference = g.reference.expect("two-stage keeps its reference");
        assert!(toy.has_reference(&reference.id));
        let limit = expected_limit(&toy, &scene, Some(&reference.id));
        assert!(g.latent.max_abs_diff(&limit) < 1e-3);
    }

    #[test]
    fn progress_is_monotone_and_complete() {
        let toy = ToyDenoiser::default();
        let seen = Mutex::new(Vec::new());
        let cb = |p: Progress| seen.lock().unwrap().push(p);
        let ctx = RunContext::with_progress(&cb);
        let cfg = GenerationConfig { two_stage: true, steps: 10, ..Default::default() };
        generate_scene(&aligned_scene(), &ToyDenoiser::with_steps(10), &cfg, &ctx).unwrap();
        let seen = seen.into_inner().unwrap();
        assert_eq!(seen.len(), 20);
        assert!(seen.windows(2).all(|w| w[0].completed < w[1].completed));
        assert_eq!(seen.last().unwrap(), &Progress { completed: 20, total: 20 });
        let _ = toy;
    }

    struct Flaky {
        inner: ToyDenoiser,
        fail_first: usize,
        calls: AtomicUsize,
    }

    impl Denoiser for Flaky {
        fn descriptor(&self) -> crate::denoise::BackendDescriptor {
            self.inner.descriptor()
        }
        fn step(&self, input: &StepInput<'_>) -> Result<LatentTensor, DenoiseError> {
            if self.calls.fetch_add(1, Ordering::SeqCst) < self.fail_first {
                return Err(DenoiseError::step(input, StepFailure::Transport, "connection reset"));
            }
            self.inner.step(input)
        }
        fn register_reference(&self, r: &Reference) -> Result<(), DenoiseError> {
            self.inner.register_reference(r)
        }
    }

    #[test]
    fn failed_timesteps_are_retried_then_reported() {
        let scene = aligned_scene();
        let cfg = GenerationConfig { steps: 5, ..Default::default() };
        let clean = generate_scene(&scene, &ToyDenoiser::with_steps(5), &cfg, &RunContext::default()).unwrap();
        let flaky = Flaky { inner: ToyDenoiser::with_steps(5), fail_first: 2, calls: AtomicUsize::new(0) };
        let retried = generate_scene(&scene, &flaky, &cfg, &RunContext::default()).unwrap();
        assert_eq!(retried.latent, clean.latent);

        let dead = Flaky { inner: ToyDenoiser::with_steps(5), fail_first: usize::MAX, calls: AtomicUsize::new(0) };
        match generate_scene(&scene, &dead, &cfg, &RunContext::default()) {
            Err(OrchestratorError::Denoise(DenoiseError::Step { path, timestep, .. })) => {
                assert_eq!(path, "object:a");
                assert_eq!(timestep, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(dead.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn incompatible_backend_fails_before_any_step() {
        let toy = ToyDenoiser::new(crate::toy::ToySchedule::default(), 8);
        let err = generate_scene(&aligned_scene(), &toy, &GenerationConfig::default(), &RunContext::default());
        assert!(matches!(err, Err(OrchestratorError::Denoise(DenoiseError::Incompatible(_)))));
    }

    #[test]
    fn edit_masks_cases() {
        let scene = aligned_scene();
        let a = scene.objects[0].bbox.clone();
        let same = make_edit_masks(Some(&a), Some(&a), &scene).unwrap();
        assert!(same.m_rem.is_empty());
        assert_eq!(same.m_add, latent_masks(&scene).unwrap().object_mask(&a.id).unwrap());

        let mut moved = a.clone();
        moved.center.y -= 1.0;
        let t = make_edit_masks(Some(&a), Some(&moved), &scene).unwrap();
        assert!(t.m_add.intersect(&t.m_rem).is_empty());
        assert_eq!(t.m_pres, t.active().complement());
        assert_eq!(t, make_edit_masks(Some(&a), Some(&moved), &scene).unwrap());

        let gone = make_edit_masks(Some(&a), None, &scene).unwrap();
        assert!(gone.m_add.is_empty());
        assert_eq!(gone.m_rem, same.m_add);
        assert!(matches!(make_edit_masks(None, None, &scene), Err(OrchestratorError::BadBoxes)));
    }

    fn generated(scene: &Scene, toy: &ToyDenoiser) -> LatentTensor {
        generate_scene(scene, toy, &GenerationConfig::default(), &RunContext::default()).unwrap().latent
    }

    #[test]
    fn identity_edit_returns_source() {
        let toy = ToyDenoiser::default();
        let scene = aligned_scene();
        let z = LatentTensor::noise(4, 8, 8, 5);
        let out = edit_apply(&scene, &scene, &z, &toy, &GenerationConfig::default(), &RunContext::default()).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn move_preserves_rest_and_reuses_identity() {
        let toy = ToyDenoiser::default();
        let old = aligned_scene();
        let z_img = generated(&old, &toy);
        let mut new = old.clone();
        // a 2-cell drop at the same depth
        new.objects[0].bbox.center.y -= 1.0;
        let triple = make_edit_masks(Some(&old.objects[0].bbox), Some(&new.objects[0].bbox), &new).unwrap();
        let out = edit_apply(&old, &new, &z_img, &toy, &GenerationConfig::default(), &RunContext::default()).unwrap();

        let reference = Reference::from_image(z_img.clone(), &old, &latent_masks(&old).unwrap());
        let sig = &reference.signatures()["a red chair"];
        let bg = expected_limit(&toy, &new, None);
        for i in 0..64 {
            for (ch, &s) in sig.iter().enumerate() {
                let k = ch * 64 + i;
                if triple.m_pres.bits[i] {
                    assert_eq!(out.data[k].to_bits(), z_img.data[k].to_bits());
                } else if triple.m_add.bits[i] {
                    assert!((out.data[k] as f64 - s).abs() < 1e-3);
                } else {
                    assert!((out.data[k] - bg.data[k]).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn replace_converges_to_new_prompt() {
        let toy = ToyDenoiser::default();
        let old = aligned_scene().with_object(OrientedBox::new("pet", [0.0, -1.0, 4.5], [1.0; 3], 0.0), "cat");
        let z_img = generated(&old, &toy);
        let mut new = old.clone();
        new.objects[2].prompt = "dog".into();
        let out = edit_apply(&old, &new, &z_img, &toy, &GenerationConfig::default(), &RunContext::default()).unwrap();
        let region = latent_masks(&new).unwrap().object_mask(&"pet".into()).unwrap();
        let dog = expected_limit(&toy, &new, None);
        let cat = expected_limit(&toy, &old, None);
        for (i, b) in region.bits.iter().enumerate() {
            for ch in 0..4 {
                let k = ch * 64 + i;
                if *b {
                    assert!((out.data[k] - dog.data[k]).abs() < 1e-3);
                    assert!((out.data[k] - cat.data[k]).abs() > 1e-2);
                } else {
                    assert_eq!(out.data[k], z_img.data[k]);
                }
            }
        }
    }

    #[test]
    fn remove_fills_with_background() {
        let toy = ToyDenoiser::default();
        let old = aligned_scene();
        let z_img = generated(&old, &toy);
        let mut new = old.clone();
        new.objects.remove(1);
        let out = edit_apply(&old, &new, &z_img, &toy, &GenerationConfig::default(), &RunContext::default()).unwrap();
        let gone = make_edit_masks(Some(&old.objects[1].bbox), None, &old).unwrap();
        assert!(!gone.m_rem.is_empty());
        let limit = expected_limit(&toy, &new, None);
        for (i, b) in gone.m_rem.bits.iter().enumerate() {
            for ch in 0..4 {
                let k = ch * 64 + i;
                if *b {
                    assert!((out.data[k] - limit.data[k]).abs() < 1e-3);
                } else {
                    assert_eq!(out.data[k].to_bits(), z_img.data[k].to_bits());
                }
            }
        }
    }

    #[test]
    fn camera_edit_is_routed_to_regeneration() {
        let toy = ToyDenoiser::default();
        let old = aligned_scene();
        let z_img = generated(&old, &toy);
        let mut new = old.clone();
        new.camera.position.x += 0.3;
        let err = edit_apply(&old, &new, &z_img, &toy, &GenerationConfig::default(), &RunContext::default());
        assert!(matches!(err, Err(OrchestratorError::Unsupported(_))));
        let g = regenerate_view(&old, &new, &z_img, &toy, &GenerationConfig::default(), &RunContext::default()).unwrap();
        let reference = g.reference.unwrap();
        assert!(g.latent.max_abs_diff(&expected_limit(&toy, &new, Some(&reference.id))) < 1e-3);
    }

    #[test]
    fn edits_reject_wrong_latent_shape() {
        let toy = ToyDenoiser::default();
        let scene = aligned_scene();
        let z = LatentTensor::zeros(4, 4, 4);
        let err = edit_apply(&scene, &scene, &z, &toy, &GenerationConfig::default(), &RunContext::default());
        assert!(matches!(err, Err(OrchestratorError::LatentShape { .. })));
    }
}
