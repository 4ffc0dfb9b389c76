//! On-disk layout documents (JSON).
//!
//! ```json
//! {"schema_version": 1, "background_prompt": "...",
//!  "camera": {"position": [x, y, z], "yaw": 0, "pitch": 0,
//!             "fx": 256, "fy": 256, "cx": 128, "cy": 128, "width": 256, "height": 256},
//!  "objects": [{"id": "a", "prompt": "...", "center": [x, y, z], "size": [w, h, d], "yaw": 0}]}
//! ```
//!
//! Unknown fields are accepted and reported as warnings.

use std::collections::BTreeMap;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::scene::{Camera, Intrinsics, ObjectId, ObjectSpec, OrientedBox, Scene, SceneEdit};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("layout parse error at line {line}, column {column} (field `{path}`): {message}")]
    Parse {
        line: usize,
        column: usize,
        path: String,
        message: String,
    },
    #[error("unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    SchemaVersion { found: u64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraDoc {
    pub position: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    #[serde(flatten, skip_serializing)]
    extra: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObjectDoc {
    pub id: String,
    pub prompt: String,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    #[serde(flatten, skip_serializing)]
    extra: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayoutDoc {
    pub schema_version: u64,
    pub background_prompt: String,
    pub camera: CameraDoc,
    pub objects: Vec<ObjectDoc>,
    #[serde(flatten, skip_serializing)]
    extra: BTreeMap<String, Value>,
}

impl From<&Camera> for CameraDoc {
    fn from(c: &Camera) -> Self {
        CameraDoc {
            position: c.position.coords.into(),
            yaw: c.yaw,
            pitch: c.pitch,
            fx: c.intrinsics.fx,
            fy: c.intrinsics.fy,
            cx: c.intrinsics.cx,
            cy: c.intrinsics.cy,
            width: c.width,
            height: c.height,
            extra: BTreeMap::new(),
        }
    }
}

impl From<&CameraDoc> for Camera {
    fn from(d: &CameraDoc) -> Self {
        Camera {
            position: Point3::from(d.position),
            yaw: d.yaw,
            pitch: d.pitch,
            intrinsics: Intrinsics {
                fx: d.fx,
                fy: d.fy,
                cx: d.cx,
                cy: d.cy,
            },
            width: d.width,
            height: d.height,
        }
    }
}

impl From<&ObjectSpec> for ObjectDoc {
    fn from(o: &ObjectSpec) -> Self {
        ObjectDoc {
            id: o.bbox.id.0.clone(),
            prompt: o.prompt.clone(),
            center: o.bbox.center.coords.into(),
            size: o.bbox.size.into(),
            yaw: o.bbox.yaw,
            extra: BTreeMap::new(),
        }
    }
}

impl From<&ObjectDoc> for ObjectSpec {
    fn from(d: &ObjectDoc) -> Self {
        ObjectSpec {
            bbox: OrientedBox {
                id: ObjectId(d.id.clone()),
                center: Point3::from(d.center),
                size: Vector3::from(d.size),
                yaw: d.yaw,
            },
            prompt: d.prompt.clone(),
        }
    }
}

impl From<&Scene> for LayoutDoc {
    fn from(s: &Scene) -> Self {
        LayoutDoc {
            schema_version: SCHEMA_VERSION as u64,
            background_prompt: s.background_prompt.clone(),
            camera: (&s.camera).into(),
            objects: s.objects.iter().map(ObjectDoc::from).collect(),
            extra: BTreeMap::new(),
        }
    }
}

impl LayoutDoc {
    pub fn to_scene(&self) -> Scene {
        Scene {
            camera: (&self.camera).into(),
            objects: self.objects.iter().map(ObjectSpec::from).collect(),
            background_prompt: self.background_prompt.clone(),
        }
    }

    /// Dotted paths of every field the schema does not know about.
    pub fn unknown_fields(&self) -> Vec<String> {
        let mut out: Vec<String> = self.extra.keys().cloned().collect();
        out.extend(self.camera.extra.keys().map(|k| format!("camera.{k}")));
        for (i, o) in self.objects.iter().enumerate() {
            out.extend(o.extra.keys().map(|k| format!("objects[{i}].{k}")));
        }
        out
    }
}

/// A parsed layout plus the forward-compatibility warnings it produced.
#[derive(Clone, Debug)]
pub struct LoadedLayout {
    pub scene: Scene,
    pub warnings: Vec<String>,
}

pub fn save_layout(scene: &Scene) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(&LayoutDoc::from(scene)).expect("layout serializes");
    bytes.push(b'\n');
    bytes
}

pub fn load_layout(bytes: &[u8]) -> Result<LoadedLayout, LayoutError> {
    let doc: LayoutDoc = parse_json(bytes)?;
    if doc.schema_version != SCHEMA_VERSION as u64 {
        return Err(LayoutError::SchemaVersion {
            found: doc.schema_version,
        });
    }
    let warnings = doc
        .unknown_fields()
        .into_iter()
        .map(|f| format!("ignored unknown field `{f}`"))
        .collect::<Vec<_>>();
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(LoadedLayout {
        scene: doc.to_scene(),
        warnings,
    })
}

pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<T, LayoutError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        LayoutError::Parse {
            line: inner.line(),
            column: inner.column(),
            path,
            message: inner.to_string(),
        }
    })
}

/// JSON form of [`SceneEdit`], used by the session API and the CLI.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditDoc {
    AddObject {
        object: ObjectDoc,
    },
    RemoveObject {
        id: String,
    },
    ReplaceObject {
        id: String,
        prompt: String,
    },
    TransformObject {
        id: String,
        center: [f64; 3],
        size: [f64; 3],
        yaw: f64,
    },
    SetCamera {
        camera: CameraDoc,
    },
    SetBackgroundPrompt {
        prompt: String,
    },
}

impl From<&SceneEdit> for EditDoc {
    fn from(e: &SceneEdit) -> Self {
        match e {
            SceneEdit::AddObject(spec) => EditDoc::AddObject {
                object: spec.into(),
            },
            SceneEdit::RemoveObject(id) => EditDoc::RemoveObject { id: id.0.clone() },
            SceneEdit::ReplaceObject(id, prompt) => EditDoc::ReplaceObject {
                id: id.0.clone(),
                prompt: prompt.clone(),
            },
            SceneEdit::TransformObject(id, b) => EditDoc::TransformObject {
                id: id.0.clone(),
                center: b.center.coords.into(),
                size: b.size.into(),
                yaw: b.yaw,
            },
            SceneEdit::SetCamera(c) => EditDoc::SetCamera { camera: c.into() },
            SceneEdit::SetBackgroundPrompt(p) => EditDoc::SetBackgroundPrompt { prompt: p.clone() },
        }
    }
}

impl From<&EditDoc> for SceneEdit {
    fn from(d: &EditDoc) -> Self {
        match d {
            EditDoc::AddObject { object } => SceneEdit::AddObject(object.into()),
            EditDoc::RemoveObject { id } => SceneEdit::RemoveObject(ObjectId(id.clone())),
            EditDoc::ReplaceObject { id, prompt } => {
                SceneEdit::ReplaceObject(ObjectId(id.clone()), prompt.clone())
            }
            EditDoc::TransformObject {
                id,
                center,
                size,
                yaw,
            } => SceneEdit::TransformObject(
                ObjectId(id.clone()),
                OrientedBox::new(id.as_str(), *center, *size, *yaw),
            ),
            EditDoc::SetCamera { camera } => SceneEdit::SetCamera(camera.into()),
            EditDoc::SetBackgroundPrompt { prompt } => {
                SceneEdit::SetBackgroundPrompt(prompt.clone())
            }
        }
    }
}
