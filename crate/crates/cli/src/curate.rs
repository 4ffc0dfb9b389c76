//! Dataset curation: depth PNG plus 2D box annotations in, fitted layout
//! documents out.
//!
//! Each scene is a pair `<name>.png` (16-bit inverse-depth export) and
//! `<name>.json`:
//!
//! ```json
//! {"background_prompt": "a kitchen",
//!  "camera": {"position": [0, 0, 0], "yaw": 0, "pitch": 0,
//!             "fx": 128, "fy": 128, "cx": 64, "cy": 64, "width": 128, "height": 128},
//!  "boxes": [{"id": "mug", "prompt": "a red mug", "rect": [40, 50, 70, 90]}]}
//! ```
//!
//! `camera` is the initial guess and carries the intrinsics; when absent a
//! camera at the origin with `fx = fy = width` is used. `rect` is
//! `[x_min, y_min, x_max, y_max]` in pixels.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use layoutdiff_core::export::decode_depth_png;
use layoutdiff_core::fit::{fit_camera, lift_box, FitConfig, LiftConfig, Rect2D};
use layoutdiff_core::layout::{save_layout, CameraDoc};
use layoutdiff_core::scene::{validate_scene, Camera, ObjectSpec, Scene};

use crate::error::CliError;

pub const REPORT_FILE: &str = "fit_report.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnotatedBox {
    pub id: String,
    pub prompt: String,
    pub rect: [f64; 4],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(default = "default_background")]
    pub background_prompt: String,
    #[serde(default)]
    pub camera: Option<CameraDoc>,
    pub boxes: Vec<AnnotatedBox>,
}

fn default_background() -> String {
    "an empty room".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub name: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub scenes: Vec<SceneReport>,
    pub succeeded: usize,
    pub failed: usize,
}

/// A curated scene with its fit quality.
#[derive(Clone, Debug)]
pub struct Curated {
    pub scene: Scene,
    pub final_loss: f64,
    pub iterations: usize,
}

/// Lifts every annotated rectangle through the depth map at the initial
/// camera, then fits the camera pose to the rectangles.
pub fn curate_pair(depth_png: &[u8], annotation: &Annotation, fit: &FitConfig) -> Result<Curated, String> {
    let depth = decode_depth_png(depth_png).map_err(|e| format!("depth: {e}"))?.to_depth_map();
    let camera: Camera = match &annotation.camera {
        Some(doc) => doc.into(),
        None => Camera::looking([0.0; 3], 0.0, 0.0, depth.width as u32, depth.height as u32),
    };
    if (camera.width as usize, camera.height as usize) != (depth.width, depth.height) {
        return Err(format!(
            "camera is {}x{} but the depth map is {}x{}",
            camera.width, camera.height, depth.width, depth.height
        ));
    }
    if annotation.boxes.is_empty() {
        return Err("no boxes annotated".into());
    }
    let mut rects = Vec::with_capacity(annotation.boxes.len());
    let mut objects = Vec::with_capacity(annotation.boxes.len());
    for b in &annotation.boxes {
        let [x0, y0, x1, y1] = b.rect;
        let rect = Rect2D::new(x0, y0, x1, y1);
        if !(rect.width() > 0.0 && rect.height() > 0.0) {
            return Err(format!("box {} has zero area", b.id));
        }
        let lifted = lift_box(b.id.as_str(), &rect, &depth, &camera, &LiftConfig::default())
            .map_err(|e| format!("box {}: {e}", b.id))?;
        objects.push(ObjectSpec::new(lifted, b.prompt.clone()));
        rects.push(rect);
    }
    let boxes: Vec<_> = objects.iter().map(|o| o.bbox.clone()).collect();
    let result = fit_camera(&boxes, &rects, &camera, fit).map_err(|e| e.to_string())?;
    let scene = Scene {
        camera: result.camera,
        objects,
        background_prompt: annotation.background_prompt.clone(),
    };
    let report = validate_scene(&scene);
    if !report.is_empty() {
        let lines: Vec<String> = report.iter().map(|v| v.to_string()).collect();
        return Err(format!("curated scene is invalid: {}", lines.join("; ")));
    }
    Ok(Curated {
        scene,
        final_loss: result.final_loss,
        iterations: result.iterations,
    })
}

/// `<name>` for every `<name>.json` that has a sibling `<name>.png`,
/// sorted. Unpaired files are logged and left out.
pub fn find_pairs(input: &Path) -> Result<Vec<String>, CliError> {
    if !input.is_dir() {
        return Err(CliError::NotFound(input.to_owned()));
    }
    let mut names = Vec::new();
    for entry in fs::read_dir(input).map_err(|e| CliError::io(input, e))? {
        let path = entry.map_err(|e| CliError::io(input, e))?.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") if path.with_extension("png").is_file() => names.push(stem.to_owned()),
            Some("json") => warn!("{}: no matching depth png, skipped", path.display()),
            Some("png") if !path.with_extension("json").is_file() => {
                warn!("{}: no matching annotation, skipped", path.display())
            }
            _ => {}
        }
    }
    names.sort();
    Ok(names)
}

fn curate_one(input: &Path, name: &str, fit: &FitConfig) -> Result<Curated, String> {
    let png = fs::read(input.join(format!("{name}.png"))).map_err(|e| e.to_string())?;
    let json = fs::read(input.join(format!("{name}.json"))).map_err(|e| e.to_string())?;
    let annotation: Annotation = serde_json::from_slice(&json).map_err(|e| format!("annotation: {e}"))?;
    curate_pair(&png, &annotation, fit)
}

/// Curates every pair in `input`, writing `<name>.json` layouts and
/// [`REPORT_FILE`] to `out`. Failed scenes are reported and skipped.
pub fn curate_dir(input: &Path, out: &Path, fit: &FitConfig) -> Result<CurationReport, CliError> {
    let names = find_pairs(input)?;
    if names.is_empty() {
        return Err(CliError::EmptyInput(input.to_owned()));
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut scenes = Vec::with_capacity(names.len());
    for name in names {
        match curate_one(input, &name, fit) {
            Ok(c) => {
                let path: PathBuf = out.join(format!("{name}.json"));
                fs::write(&path, save_layout(&c.scene)).map_err(|e| CliError::io(&path, e))?;
                info!("{name}: loss {:.4} after {} iterations", c.final_loss, c.iterations);
                scenes.push(SceneReport {
                    name,
                    ok: true,
                    final_loss: Some(c.final_loss),
                    iterations: Some(c.iterations),
                    error: None,
                });
            }
            Err(e) => {
                warn!("{name}: skipped: {e}");
                scenes.push(SceneReport {
                    name,
                    ok: false,
                    final_loss: None,
                    iterations: None,
                    error: Some(e),
                });
            }
        }
    }
    let succeeded = scenes.iter().filter(|s| s.ok).count();
    let report = CurationReport {
        failed: scenes.len() - succeeded,
        succeeded,
        scenes,
    };
    let path = out.join(REPORT_FILE);
    let bytes = serde_json::to_vec_pretty(&report).map_err(|e| CliError::Other(e.into()))?;
    fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use layoutdiff_core::export::export_depth;
    use layoutdiff_core::fit::project_box_rect;
    use layoutdiff_core::raster::render_depth;
    use layoutdiff_core::scene::OrientedBox;

    fn synthetic() -> (Vec<u8>, Annotation) {
        let camera = Camera::looking([0.0, 0.5, 0.0], 0.05, -0.05, 128, 128);
        let scene = Scene::new(camera.clone(), "a yard")
            .with_object(OrientedBox::new("a", [0.8, 0.3, 5.0], [1.0, 1.2, 1.0], 0.0), "a crate")
            .with_object(OrientedBox::new("b", [-1.0, 0.6, 7.0], [1.4, 0.8, 1.0], 0.0), "a bench");
        let boxes = scene
            .objects
            .iter()
            .map(|o| {
                let r = project_box_rect(&camera, &o.bbox).unwrap();
                AnnotatedBox { id: o.bbox.id.0.clone(), prompt: o.prompt.clone(), rect: [r.x_min, r.y_min, r.x_max, r.y_max] }
            })
            .collect();
        let png = export_depth(&render_depth(&scene)).unwrap();
        (png, Annotation { background_prompt: "a yard".into(), camera: Some((&camera).into()), boxes })
    }

    #[test]
    fn synthetic_pair_fits_well() {
        let (png, ann) = synthetic();
        let c = curate_pair(&png, &ann, &FitConfig::default()).unwrap();
        assert!(c.final_loss < 0.05, "{}", c.final_loss);
        assert_eq!(c.scene.objects.len(), 2);
        assert_eq!(c.scene.objects[1].prompt, "a bench");
    }

    #[test]
    fn zero_area_box_fails_the_scene() {
        let (png, mut ann) = synthetic();
        ann.boxes[0].rect[2] = ann.boxes[0].rect[0];
        let err = curate_pair(&png, &ann, &FitConfig::default()).unwrap_err();
        assert!(err.contains("zero area"), "{err}");
    }

    #[test]
    fn directory_run_reports_each_scene() {
        let (png, ann) = synthetic();
        let input = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        fs::write(input.path().join("good.png"), &png).unwrap();
        fs::write(input.path().join("good.json"), serde_json::to_vec(&ann).unwrap()).unwrap();
        let mut bad = ann.clone();
        bad.boxes[1].rect = [10.0, 10.0, 10.0, 30.0];
        fs::write(input.path().join("bad.png"), &png).unwrap();
        fs::write(input.path().join("bad.json"), serde_json::to_vec(&bad).unwrap()).unwrap();
        fs::write(input.path().join("lonely.png"), &png).unwrap();
        let report = curate_dir(input.path(), out.path(), &FitConfig::default()).unwrap();
        assert_eq!((report.succeeded, report.failed), (1, 1));
        assert_eq!(report.scenes[0].name, "bad");
        assert!(out.path().join("good.json").is_file());
        assert!(!out.path().join("bad.json").exists());
        assert!(out.path().join(REPORT_FILE).is_file());
    }
}
