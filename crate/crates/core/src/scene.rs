//! Scene data model: a pinhole camera plus an ordered set of yaw-oriented
//! boxes, each bound to a text prompt, and the edit verbs that transform it.
//!
//! World frame is right-handed with +Y up. A camera with zero yaw and pitch
//! looks along world +Z; image `u` grows to the viewer's right and image `v`
//! grows downward.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Stable object identifier, unique within a scene.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(pub String);

impl ObjectId {
    pub fn new(id: impl Into<String>) -> Self {
        ObjectId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ObjectId {
    fn from(s: &str) -> Self {
        ObjectId(s.to_owned())
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    if (-PI..PI).contains(&yaw) {
        return yaw;
    }
    let wrapped = (yaw + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can land exactly on 2*pi through rounding
    if wrapped >= PI {
        wrapped - 2.0 * PI
    } else {
        wrapped
    }
}

/// A box with its own up-axis rotation. `size` is (width, height, depth) in
/// the box's local frame before the yaw is applied.
#[derive(Clone, Debug, PartialEq)]
pub struct OrientedBox {
    pub id: ObjectId,
    pub center: Point3<f64>,
    pub size: Vector3<f64>,
    pub yaw: f64,
}

impl OrientedBox {
    pub fn new(id: impl Into<ObjectId>, center: [f64; 3], size: [f64; 3], yaw: f64) -> Self {
        OrientedBox {
            id: id.into(),
            center: Point3::from(center),
            size: Vector3::from(size),
            yaw,
        }
    }

    pub fn half_extents(&self) -> Vector3<f64> {
        self.size * 0.5
    }

    /// World-space direction of the box's local x and z axes.
    pub fn local_axes(&self) -> (Vector3<f64>, Vector3<f64>) {
        let (s, c) = self.yaw.sin_cos();
        (Vector3::new(c, 0.0, -s), Vector3::new(s, 0.0, c))
    }

    /// Maps a world point into the box frame (origin at the center, axes
    /// aligned with the box faces).
    pub fn to_local(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.dir_to_local(&(p - self.center))
    }

    pub fn dir_to_local(&self, d: &Vector3<f64>) -> Vector3<f64> {
        let (ax, az) = self.local_axes();
        Vector3::new(ax.dot(d), d.y, az.dot(d))
    }

    pub fn corners(&self) -> [Point3<f64>; 8] {
        let (ax, az) = self.local_axes();
        let h = self.half_extents();
        let mut out = [self.center; 8];
        for (i, corner) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -h.x } else { h.x };
            let sy = if i & 2 == 0 { -h.y } else { h.y };
            let sz = if i & 4 == 0 { -h.z } else { h.z };
            *corner = self.center + ax * sx + Vector3::y() * sy + az * sz;
        }
        out
    }
}

impl From<String> for ObjectId {
    fn from(s: String) -> Self {
        ObjectId(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub bbox: OrientedBox,
    pub prompt: String,
}

impl ObjectSpec {
    pub fn new(bbox: OrientedBox, prompt: impl Into<String>) -> Self {
        ObjectSpec {
            bbox,
            prompt: prompt.into(),
        }
    }

    pub fn id(&self) -> &ObjectId {
        &self.bbox.id
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Pinhole camera with roll fixed at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub position: Point3<f64>,
    pub yaw: f64,
    pub pitch: f64,
    pub intrinsics: Intrinsics,
    pub width: u32,
    pub height: u32,
}

/// Orthonormal camera frame expressed in world coordinates.
#[derive(Clone, Copy, Debug)]
pub struct CameraBasis {
    pub right: Vector3<f64>,
    pub up: Vector3<f64>,
    pub forward: Vector3<f64>,
}

impl Camera {
    /// Camera at `position` with default intrinsics: fx = fy = width and the
    /// principal point at the image center.
    pub fn looking(position: [f64; 3], yaw: f64, pitch: f64, width: u32, height: u32) -> Self {
        Camera {
            position: Point3::from(position),
            yaw,
            pitch,
            intrinsics: Intrinsics {
                fx: width as f64,
                fy: width as f64,
                cx: width as f64 / 2.0,
                cy: height as f64 / 2.0,
            },
            width,
            height,
        }
    }

    pub fn basis(&self) -> CameraBasis {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        let forward = Vector3::new(sy * cp, sp, cy * cp);
        let up = Vector3::new(-sy * sp, cp, -cy * sp);
        CameraBasis {
            right: forward.cross(&up),
            up,
            forward,
        }
    }

    /// World point to camera space (x right, y up, z forward).
    pub fn to_camera(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.to_camera_with(&self.basis(), p)
    }

    pub fn to_camera_with(&self, b: &CameraBasis, p: &Point3<f64>) -> Vector3<f64> {
        let d = p - self.position;
        Vector3::new(b.right.dot(&d), b.up.dot(&d), b.forward.dot(&d))
    }

    /// Projects a camera-space point to continuous pixel coordinates.
    pub fn project_camera_point(&self, c: &Vector3<f64>) -> (f64, f64) {
        let k = &self.intrinsics;
        (k.cx + k.fx * c.x / c.z, k.cy - k.fy * c.y / c.z)
    }

    /// Unnormalized world direction through continuous pixel position
    /// `(u, v)`, scaled so its forward component is exactly one.
    pub fn ray_direction(&self, b: &CameraBasis, u: f64, v: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let x = (u - k.cx) / k.fx;
        let y = -(v - k.cy) / k.fy;
        b.right * x + b.up * y + b.forward
    }

    /// Camera-space point at pixel `(u, v)` and depth `z` lifted into world.
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Point3<f64> {
        let b = self.basis();
        self.position + self.ray_direction(&b, u, v) * z
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub camera: Camera,
    pub objects: Vec<ObjectSpec>,
    pub background_prompt: String,
}

impl Scene {
    pub fn new(camera: Camera, background_prompt: impl Into<String>) -> Self {
        Scene {
            camera,
            objects: Vec::new(),
            background_prompt: background_prompt.into(),
        }
    }

    pub fn with_object(mut self, bbox: OrientedBox, prompt: impl Into<String>) -> Self {
        self.objects.push(ObjectSpec::new(bbox, prompt));
        self
    }

    pub fn object(&self, id: &ObjectId) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.id() == id)
    }

    pub fn index_of(&self, id: &ObjectId) -> Option<usize> {
        self.objects.iter().position(|o| o.id() == id)
    }

    pub fn boxes(&self) -> impl Iterator<Item = &OrientedBox> {
        self.objects.iter().map(|o| &o.bbox)
    }
}

/// A user-facing layout edit.
#[derive(Clone, Debug, PartialEq)]
pub enum SceneEdit {
    AddObject(ObjectSpec),
    RemoveObject(ObjectId),
    ReplaceObject(ObjectId, String),
    TransformObject(ObjectId, OrientedBox),
    SetCamera(Camera),
    SetBackgroundPrompt(String),
}

impl SceneEdit {
    pub fn target(&self) -> Option<&ObjectId> {
        match self {
            SceneEdit::AddObject(spec) => Some(spec.id()),
            SceneEdit::RemoveObject(id)
            | SceneEdit::ReplaceObject(id, _)
            | SceneEdit::TransformObject(id, _) => Some(id),
            SceneEdit::SetCamera(_) | SceneEdit::SetBackgroundPrompt(_) => None,
        }
    }
}

/// One broken invariant, naming the offending field and the rule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

pub const RULE_SIZE_POSITIVE: &str = "size must be positive";
pub const RULE_DUPLICATE_ID: &str = "duplicate id";

pub fn validate_scene(scene: &Scene) -> Vec<Violation> {
    let mut report = Vec::new();
    let mut push = |field: String, rule: &str| {
        report.push(Violation {
            field,
            rule: rule.to_owned(),
        })
    };

    let cam = &scene.camera;
    let k = &cam.intrinsics;
    if cam.width == 0 || cam.height == 0 {
        push("camera.resolution".into(), "width and height must be positive");
    }
    if !(k.fx > 0.0 && k.fx.is_finite()) {
        push("camera.fx".into(), "focal length must be positive");
    }
    if !(k.fy > 0.0 && k.fy.is_finite()) {
        push("camera.fy".into(), "focal length must be positive");
    }
    if !(k.cx >= 0.0 && k.cx < cam.width as f64) {
        push("camera.cx".into(), "principal point must lie inside the image");
    }
    if !(k.cy >= 0.0 && k.cy < cam.height as f64) {
        push("camera.cy".into(), "principal point must lie inside the image");
    }
    if !(cam.pitch > -PI / 2.0 && cam.pitch < PI / 2.0) {
        push("camera.pitch".into(), "pitch must be in (-pi/2, pi/2)");
    }
    if !(cam.position.coords.iter().all(|v| v.is_finite()) && cam.yaw.is_finite()) {
        push("camera.position".into(), "pose must be finite");
    }
    if scene.background_prompt.trim().is_empty() {
        push("background_prompt".into(), "prompt must be non-empty");
    }

    let mut seen = HashSet::new();
    for (i, obj) in scene.objects.iter().enumerate() {
        let b = &obj.bbox;
        let field = |name: &str| format!("objects[{i}].{name}");
        if !seen.insert(&b.id) {
            push(field("id"), RULE_DUPLICATE_ID);
        }
        if b.id.0.is_empty() {
            push(field("id"), "id must be non-empty");
        }
        if !b.size.iter().all(|s| *s > 0.0 && s.is_finite()) {
            push(field("size"), RULE_SIZE_POSITIVE);
        }
        if !b.center.coords.iter().all(|v| v.is_finite()) {
            push(field("center"), "center must be finite");
        }
        if !(-PI..PI).contains(&b.yaw) {
            push(field("yaw"), "yaw must be in [-pi, pi)");
        }
        if obj.prompt.trim().is_empty() {
            push(field("prompt"), "prompt must be non-empty");
        }
    }
    report
}

#[derive(Debug, Error, PartialEq)]
pub enum EditError {
    #[error("unknown id {0}")]
    UnknownId(ObjectId),
    #[error("duplicate id {0}")]
    DuplicateId(ObjectId),
    #[error("edit target id {found} does not match {expected}")]
    IdMismatch { expected: ObjectId, found: ObjectId },
    #[error("edit produces an invalid scene: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

/// Applies one edit and returns the new scene. The input is left untouched.
pub fn apply_edit(scene: &Scene, edit: &SceneEdit) -> Result<Scene, EditError> {
    let mut next = scene.clone();
    match edit {
        SceneEdit::AddObject(spec) => {
            if scene.object(spec.id()).is_some() {
                return Err(EditError::DuplicateId(spec.id().clone()));
            }
            let mut spec = spec.clone();
            spec.bbox.yaw = normalize_yaw(spec.bbox.yaw);
            next.objects.push(spec);
        }
        SceneEdit::RemoveObject(id) => {
            let idx = scene
                .index_of(id)
                .ok_or_else(|| EditError::UnknownId(id.clone()))?;
            next.objects.remove(idx);
        }
        SceneEdit::ReplaceObject(id, prompt) => {
            let idx = scene
                .index_of(id)
                .ok_or_else(|| EditError::UnknownId(id.clone()))?;
            next.objects[idx].prompt = prompt.clone();
        }
        SceneEdit::TransformObject(id, bbox) => {
            let idx = scene
                .index_of(id)
                .ok_or_else(|| EditError::UnknownId(id.clone()))?;
            if &bbox.id != id {
                return Err(EditError::IdMismatch {
                    expected: id.clone(),
                    found: bbox.id.clone(),
                });
            }
            let mut bbox = bbox.clone();
            bbox.yaw = normalize_yaw(bbox.yaw);
            next.objects[idx].bbox = bbox;
        }
        SceneEdit::SetCamera(camera) => next.camera = camera.clone(),
        SceneEdit::SetBackgroundPrompt(prompt) => next.background_prompt = prompt.clone(),
    }
    let report = validate_scene(&next);
    if !report.is_empty() {
        return Err(EditError::Invalid(report));
    }
    Ok(next)
}

pub fn apply_edits(scene: &Scene, edits: &[SceneEdit]) -> Result<Scene, EditError> {
    edits
        .iter()
        .try_fold(scene.clone(), |s, e| apply_edit(&s, e))
}

/// Computes an edit list that turns `old` into `new`.
///
/// Edits can only append objects, so objects of `new` that keep their
/// relative order and precede every newcomer are updated in place (moves
/// become `TransformObject`); anything else is removed and re-added.
pub fn diff_scenes(old: &Scene, new: &Scene) -> Vec<SceneEdit> {
    let old_pos: HashMap<&ObjectId, usize> = old
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| (o.id(), i))
        .collect();

    let mut kept = 0;
    let mut last = None;
    for obj in &new.objects {
        match old_pos.get(obj.id()) {
            Some(&p) if last.is_none_or(|l| p > l) => {
                last = Some(p);
                kept += 1;
            }
            _ => break,
        }
    }
    let kept_ids: HashSet<&ObjectId> = new.objects[..kept].iter().map(|o| o.id()).collect();

    let mut edits = Vec::new();
    for obj in &old.objects {
        if !kept_ids.contains(obj.id()) {
            edits.push(SceneEdit::RemoveObject(obj.id().clone()));
        }
    }
    for obj in &new.objects[..kept] {
        let prev = &old.objects[old_pos[obj.id()]];
        if prev.bbox != obj.bbox {
            edits.push(SceneEdit::TransformObject(obj.id().clone(), obj.bbox.clone()));
        }
        if prev.prompt != obj.prompt {
            edits.push(SceneEdit::ReplaceObject(obj.id().clone(), obj.prompt.clone()));
        }
    }
    for obj in &new.objects[kept..] {
        edits.push(SceneEdit::AddObject(obj.clone()));
    }
    if old.background_prompt != new.background_prompt {
        edits.push(SceneEdit::SetBackgroundPrompt(new.background_prompt.clone()));
    }
    if old.camera != new.camera {
        edits.push(SceneEdit::SetCamera(new.camera.clone()));
    }
    edits
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn two_object_scene() -> Scene {
        Scene::new(Camera::looking([0.0, 0.0, 0.0], 0.0, 0.0, 128, 128), "a quiet room")
            .with_object(OrientedBox::new("a", [-1.0, 0.0, 5.0], [1.0, 1.0, 1.0], 0.0), "a red chair")
            .with_object(OrientedBox::new("b", [1.0, 0.0, 6.0], [1.0, 2.0, 1.0], 0.3), "a lamp")
    }

    #[test]
    fn well_formed_scene_validates() {
        assert!(validate_scene(&two_object_scene()).is_empty());
    }

    #[test]
    fn negative_size_is_reported() {
        let mut s = two_object_scene();
        s.objects[0].bbox.size = Vector3::new(1.0, -1.0, 1.0);
        let report = validate_scene(&s);
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].rule, RULE_SIZE_POSITIVE);
        assert_eq!(report[0].field, "objects[0].size");
    }

    #[test]
    fn duplicate_id_is_reported() {
        let mut s = two_object_scene();
        s.objects[1].bbox.id = ObjectId::new("a");
        let report = validate_scene(&s);
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].rule, RULE_DUPLICATE_ID);
    }

    #[test]
    fn camera_rules() {
        let mut s = two_object_scene();
        s.camera.intrinsics.fx = 0.0;
        s.camera.intrinsics.cx = 128.0;
        s.camera.pitch = PI / 2.0;
        let fields: Vec<_> = validate_scene(&s).into_iter().map(|v| v.field).collect();
        assert_eq!(fields, vec!["camera.fx", "camera.cx", "camera.pitch"]);
    }

    #[test]
    fn translate_moves_only_target() {
        let s = two_object_scene();
        let mut moved = s.objects[0].bbox.clone();
        moved.center.x += 1.0;
        let next = apply_edit(&s, &SceneEdit::TransformObject("a".into(), moved)).unwrap();
        assert_eq!(next.objects[0].bbox.center, Point3::new(0.0, 0.0, 5.0));
        assert_eq!(next.objects[1], s.objects[1]);
        assert_eq!(next.camera, s.camera);
        // input untouched
        assert_eq!(s.objects[0].bbox.center.x, -1.0);
    }

    #[test]
    fn remove_leaves_the_rest() {
        let s = two_object_scene();
        let next = apply_edit(&s, &SceneEdit::RemoveObject("a".into())).unwrap();
        assert_eq!(next.objects.len(), 1);
        assert_eq!(next.objects[0].id().as_str(), "b");
    }

    #[test]
    fn unknown_and_duplicate_ids_fail() {
        let s = two_object_scene();
        let bx = OrientedBox::new("z", [0.0; 3], [1.0; 3], 0.0);
        assert_eq!(
            apply_edit(&s, &SceneEdit::TransformObject("z".into(), bx)),
            Err(EditError::UnknownId("z".into()))
        );
        let dup = s.objects[0].clone();
        assert_eq!(
            apply_edit(&s, &SceneEdit::AddObject(dup)),
            Err(EditError::DuplicateId("a".into()))
        );
    }

    #[test]
    fn edit_producing_invalid_scene_fails() {
        let s = two_object_scene();
        let mut bx = s.objects[0].bbox.clone();
        bx.size.x = 0.0;
        assert!(matches!(
            apply_edit(&s, &SceneEdit::TransformObject("a".into(), bx)),
            Err(EditError::Invalid(_))
        ));
        assert!(matches!(
            apply_edit(&s, &SceneEdit::ReplaceObject("a".into(), "  ".into())),
            Err(EditError::Invalid(_))
        ));
    }

    #[test]
    fn rotation_is_wrapped() {
        let s = two_object_scene();
        let mut bx = s.objects[0].bbox.clone();
        bx.yaw = 3.0 * PI / 2.0;
        let next = apply_edit(&s, &SceneEdit::TransformObject("a".into(), bx)).unwrap();
        assert!((next.objects[0].bbox.yaw + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_yaw_range() {
        for y in [-10.0, -PI, -1.0, 0.0, PI, 7.5, 1e3] {
            let n = normalize_yaw(y);
            assert!((-PI..PI).contains(&n), "{y} -> {n}");
            assert!(((n - y) / (2.0 * PI)).fract().abs() < 1e-9 || ((n - y) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        }
    }

    #[test]
    fn diff_identical_is_empty() {
        let s = two_object_scene();
        assert!(diff_scenes(&s, &s).is_empty());
    }

    #[test]
    fn diff_reports_move_as_transform() {
        let s = two_object_scene();
        let mut bx = s.objects[1].bbox.clone();
        bx.center.z += 2.0;
        let next = apply_edit(&s, &SceneEdit::TransformObject("b".into(), bx.clone())).unwrap();
        assert_eq!(
            diff_scenes(&s, &next),
            vec![SceneEdit::TransformObject("b".into(), bx)]
        );
    }

    #[test]
    fn diff_handles_reinsertion_order() {
        let s = two_object_scene();
        let a = s.objects[0].clone();
        let next = apply_edits(
            &s,
            &[SceneEdit::RemoveObject("a".into()), SceneEdit::AddObject(a)],
        )
        .unwrap();
        let edits = diff_scenes(&s, &next);
        assert_eq!(apply_edits(&s, &edits).unwrap(), next);
    }

    #[test]
    fn camera_basis_is_orthonormal_and_right_handed_view() {
        let cam = Camera::looking([0.0; 3], 0.4, -0.2, 64, 64);
        let b = cam.basis();
        for v in [b.right, b.up, b.forward] {
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
        assert!(b.right.dot(&b.up).abs() < 1e-12);
        assert!(b.right.dot(&b.forward).abs() < 1e-12);
        assert!(b.up.dot(&b.forward).abs() < 1e-12);
        // looking along +Z with +Y up, the viewer's right is world -X
        let level = Camera::looking([0.0; 3], 0.0, 0.0, 64, 64).basis();
        assert_eq!(level.right, Vector3::new(-1.0, 0.0, 0.0));
    }

    #[test]
    fn corners_of_rotated_box_respect_extents() {
        let bx = OrientedBox::new("r", [1.0, 2.0, 3.0], [2.0, 1.0, 4.0], 0.7);
        for c in bx.corners() {
            let l = bx.to_local(&c);
            assert!((l.x.abs() - 1.0).abs() < 1e-12);
            assert!((l.y.abs() - 0.5).abs() < 1e-12);
            assert!((l.z.abs() - 2.0).abs() < 1e-12);
        }
    }
}
