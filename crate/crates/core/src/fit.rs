//! 2D/3D layout fitting: box-to-rectangle projection, mean IoU, camera pose
//! recovery by minimizing `1 - mIoU`, and lifting annotated rectangles back
//! to 3D boxes using their average depth.

use std::f64::consts::FRAC_PI_2;

use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nelder_mead::{self, NelderMeadOptions};
use crate::raster::DepthMap;
use crate::scene::{normalize_yaw, Camera, ObjectId, OrientedBox};

/// Corners closer than this (camera-space z, meters) are not projected.
pub const MIN_PROJECTION_DEPTH: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("rectangle lists differ in length: {pred} predicted vs {gt} ground truth")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("no objects to fit")]
    Empty,
    #[error("degenerate rect")]
    DegenerateRect,
    #[error("no depth samples inside rect")]
    NoDepth,
}

/// Axis-aligned rectangle in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect2D {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Rect2D { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn iou(&self, other: &Rect2D) -> f64 {
        let iw = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let ih = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            (inter / union).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    fn clip(&self, width: f64, height: f64) -> Rect2D {
        Rect2D {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }
}

/// Axis-aligned hull of the box's projected corners, clipped to the image.
/// Corners with camera-space z at or below [`MIN_PROJECTION_DEPTH`] are
/// skipped; `None` when no corner survives.
pub fn project_box_rect(camera: &Camera, bx: &OrientedBox) -> Option<Rect2D> {
    let basis = camera.basis();
    let mut hull: Option<Rect2D> = None;
    for corner in bx.corners() {
        let c = camera.to_camera_with(&basis, &corner);
        if c.z <= MIN_PROJECTION_DEPTH {
            continue;
        }
        let (u, v) = camera.project_camera_point(&c);
        hull = Some(match hull {
            None => Rect2D::new(u, v, u, v),
            Some(r) => Rect2D::new(r.x_min.min(u), r.y_min.min(v), r.x_max.max(u), r.y_max.max(v)),
        });
    }
    hull.map(|r| r.clip(camera.width as f64, camera.height as f64))
}

/// Mean of per-pair IoU; a missing projection scores zero. Empty input is 0.
pub fn mean_iou(pred: &[Option<Rect2D>], gt: &[Rect2D]) -> Result<f64, FitError> {
    if pred.len() != gt.len() {
        return Err(FitError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if gt.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| p.map_or(0.0, |p| p.iou(g)))
        .sum();
    Ok(sum / gt.len() as f64)
}

/// `1 - mIoU` of the boxes seen from `camera` against `gt`.
pub fn layout_loss(camera: &Camera, boxes: &[OrientedBox], gt: &[Rect2D]) -> f64 {
    let pred: Vec<Option<Rect2D>> = boxes.iter().map(|b| project_box_rect(camera, b)).collect();
    1.0 - mean_iou(&pred, gt).expect("aligned lists")
}

#[derive(Clone, Debug)]
pub struct FitConfig {
    pub restarts: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Initial simplex edge for x, y, z (meters) and yaw, pitch (radians).
    pub initial_step: [f64; 5],
    /// Uniform jitter half-width applied to position / angles between restarts.
    pub jitter_position: f64,
    pub jitter_angle: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            restarts: 5,
            tolerance: 1e-4,
            max_iterations: 500,
            initial_step: [0.1, 0.1, 0.1, 0.05, 0.05],
            jitter_position: 0.2,
            jitter_angle: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub camera: Camera,
    pub final_loss: f64,
    pub iterations: usize,
    pub restarts_used: usize,
}

fn pose_params(c: &Camera) -> [f64; 5] {
    [c.position.x, c.position.y, c.position.z, c.yaw, c.pitch]
}

fn with_pose(template: &Camera, p: &[f64]) -> Camera {
    Camera {
        position: Point3::new(p[0], p[1], p[2]),
        yaw: p[3],
        pitch: p[4],
        ..template.clone()
    }
}

/// Fits the five pose parameters (position, yaw, pitch) of `init` so the
/// projected boxes match `gt`. Intrinsics stay fixed.
///
/// The first restart starts at `init`; later ones start from a jittered copy
/// of the best pose found so far. Stops early on a perfect fit.
pub fn fit_camera(
    boxes: &[OrientedBox],
    gt: &[Rect2D],
    init: &Camera,
    config: &FitConfig,
) -> Result<FitResult, FitError> {
    if boxes.is_empty() {
        return Err(FitError::Empty);
    }
    if boxes.len() != gt.len() {
        return Err(FitError::LengthMismatch {
            pred: boxes.len(),
            gt: gt.len(),
        });
    }
    let loss = |p: &[f64]| -> f64 {
        if !(p[4] > -FRAC_PI_2 && p[4] < FRAC_PI_2) {
            return 1.0;
        }
        layout_loss(&with_pose(init, p), boxes, gt)
    };
    let opts = NelderMeadOptions {
        tolerance: config.tolerance,
        max_iterations: config.max_iterations,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut best_x = pose_params(init).to_vec();
    let mut best_loss = loss(&best_x);
    let mut iterations = 0;
    let mut restarts_used = 0;
    for restart in 0..config.restarts.max(1) {
        if best_loss <= 0.0 {
            break;
        }
        let start: Vec<f64> = if restart == 0 {
            best_x.clone()
        } else {
            best_x
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let w = if i < 3 { config.jitter_position } else { config.jitter_angle };
                    v + rng.gen_range(-w..=w)
                })
                .collect()
        };
        let m = nelder_mead::minimize(loss, &start, &config.initial_step, &opts);
        iterations += m.iterations;
        restarts_used += 1;
        // strict improvement keeps the earliest restart on ties
        if m.value < best_loss {
            best_loss = m.value;
            best_x = m.x;
        }
    }
    Ok(FitResult {
        camera: with_pose(init, &best_x),
        final_loss: best_loss,
        iterations,
        restarts_used,
    })
}

/// Where the lifted box sits relative to the measured average depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LiftAnchor {
    /// The box face nearest the camera lies at the average depth and the
    /// box extends away from the camera, aligned with the camera heading.
    /// Lateral extents are solved so the projected hull of the box is the
    /// source rectangle. Depth maps measure visible surfaces, so the near
    /// face is where the samples come from.
    NearFace,
    /// The box center lies at the average depth, sizes are the rectangle
    /// backprojected at that depth, yaw is zero.
    Center,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftConfig {
    pub anchor: LiftAnchor,
    /// Extent along the view axis as a multiple of `(width + height) / 2`.
    pub depth_extent_scale: f64,
}

impl Default for LiftConfig {
    fn default() -> Self {
        LiftConfig {
            anchor: LiftAnchor::NearFace,
            depth_extent_scale: 1.0,
        }
    }
}

/// Lifts an annotated rectangle to a box using the mean of the non-far
/// depth samples whose pixel centers fall inside the rectangle.
pub fn lift_box(
    id: impl Into<ObjectId>,
    rect: &Rect2D,
    depth: &DepthMap,
    camera: &Camera,
    config: &LiftConfig,
) -> Result<OrientedBox, FitError> {
    let clipped = rect.clip(depth.width as f64, depth.height as f64);
    if rect.area() <= 0.0 || clipped.area() <= 0.0 || !rect.x_min.is_finite() || !rect.y_min.is_finite() {
        return Err(FitError::DegenerateRect);
    }
    let x0 = (clipped.x_min - 0.5).ceil().max(0.0) as usize;
    let y0 = (clipped.y_min - 0.5).ceil().max(0.0) as usize;
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in y0..depth.height {
        if y as f64 + 0.5 > clipped.y_max {
            break;
        }
        for x in x0..depth.width {
            if x as f64 + 0.5 > clipped.x_max {
                break;
            }
            if depth.is_hit(x, y) {
                sum += depth.get(x, y);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(FitError::NoDepth);
    }
    let d = sum / n as f64;
    if config.anchor == LiftAnchor::NearFace {
        return Ok(near_face_box(id.into(), rect, d, camera, config.depth_extent_scale));
    }
    let k = &camera.intrinsics;
    let width = rect.width() * d / k.fx;
    let height = rect.height() * d / k.fy;
    let extent = config.depth_extent_scale * (width + height) / 2.0;
    let (u, v) = rect.center();
    Ok(OrientedBox {
        id: id.into(),
        center: camera.backproject(u, v, d),
        size: nalgebra::Vector3::new(width, height, extent),
        yaw: 0.0,
    })
}

/// Camera-aligned box with its near face at depth `d` whose projected hull
/// is `rect`, with extent `scale * (width + height) / 2` along the view.
///
/// An off-axis box also shows a side face, so along each image axis the
/// rectangle edge toward the optical axis comes from the back face and the
/// other edge from the near face. Exact for a level camera; with pitch the
/// vertical sides of the box are only approximately aligned.
fn near_face_box(id: ObjectId, rect: &Rect2D, d: f64, camera: &Camera, scale: f64) -> OrientedBox {
    let k = &camera.intrinsics;
    // normalized image-plane extents with +y up
    let (x0, x1) = ((rect.x_min - k.cx) / k.fx, (rect.x_max - k.cx) / k.fx);
    let (y0, y1) = (-(rect.y_max - k.cy) / k.fy, -(rect.y_min - k.cy) / k.fy);
    // change of the lateral span per meter of extent; zero across the axis
    let shrink = |lo: f64, hi: f64| hi.min(0.0) - lo.max(0.0);
    let (kx, ky) = (shrink(x0, x1), shrink(y0, y1));
    let (sx, sy) = ((x1 - x0) * d, (y1 - y0) * d);
    let mut extent = scale * (sx + sy) / 2.0 / (1.0 - scale * (kx + ky) / 2.0);
    // far off axis a deep box cannot fit the rect; keep half of each span
    for (span, k) in [(sx, kx), (sy, ky)] {
        if k < 0.0 {
            extent = extent.min(0.5 * span / -k);
        }
    }
    let low = |a: f64| if a < 0.0 { a * d } else { a * (d + extent) };
    let high = |b: f64| if b > 0.0 { b * d } else { b * (d + extent) };
    let (xa, xb, ya, yb) = (low(x0), high(x1), low(y0), high(y1));
    let b = camera.basis();
    let center = camera.position + b.right * ((xa + xb) / 2.0) + b.up * ((ya + yb) / 2.0) + b.forward * (d + extent / 2.0);
    OrientedBox {
        id,
        center,
        size: nalgebra::Vector3::new(xb - xa, yb - ya, extent),
        yaw: normalize_yaw(camera.yaw),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{render_depth, FAR_DEPTH};
    use crate::scene::Scene;

    fn cam256() -> Camera {
        Camera::looking([0.0; 3], 0.0, 0.0, 256, 256)
    }

    #[test]
    fn zero_size_box_projects_to_principal_point() {
        let bx = OrientedBox::new("p", [0.0, 0.0, 5.0], [0.0; 3], 0.0);
        let r = project_box_rect(&cam256(), &bx).unwrap();
        assert_eq!(r, Rect2D::new(128.0, 128.0, 128.0, 128.0));
    }

    #[test]
    fn box_behind_camera_has_no_projection() {
        let bx = OrientedBox::new("p", [0.0, 0.0, -5.0], [1.0; 3], 0.0);
        assert_eq!(project_box_rect(&cam256(), &bx), None);
    }

    #[test]
    fn unit_box_hull_matches_corner_projection() {
        let bx = OrientedBox::new("p", [0.0, 0.0, 5.0], [1.0; 3], 0.0);
        let r = project_box_rect(&cam256(), &bx).unwrap();
        // nearest face at z = 4.5: 128 -/+ 256 * 0.5 / 4.5
        assert!((r.x_min - 99.555_555).abs() < 1e-2);
        assert!((r.x_max - 156.444_444).abs() < 1e-2);
        assert!((r.y_min - 99.555_555).abs() < 1e-2);
        assert!((r.y_max - 156.444_444).abs() < 1e-2);
    }

    #[test]
    fn iou_cases() {
        let a = Rect2D::new(0.0, 0.0, 2.0, 2.0);
        let b = Rect2D::new(1.0, 0.0, 3.0, 2.0);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mean_iou(&[Some(a), Some(b)], &[a, b]).unwrap(), 1.0);
        let far = Rect2D::new(10.0, 10.0, 11.0, 11.0);
        assert_eq!(mean_iou(&[Some(a)], &[far]).unwrap(), 0.0);
        assert_eq!(mean_iou(&[None], &[a]).unwrap(), 0.0);
        assert_eq!(mean_iou(&[], &[]).unwrap(), 0.0);
        assert_eq!(
            mean_iou(&[Some(a)], &[a, b]),
            Err(FitError::LengthMismatch { pred: 1, gt: 2 })
        );
    }

    #[test]
    fn iou_against_fine_grid_count() {
        // 1000 samples per unit along each axis
        let a = Rect2D::new(0.0, 0.0, 2.0, 2.0);
        let b = Rect2D::new(1.0, 0.0, 3.0, 2.0);
        let n = 1000;
        let (mut inter, mut union) = (0u64, 0u64);
        for i in 0..3 * n {
            for j in 0..2 * n {
                let x = (i as f64 + 0.5) / n as f64;
                let y = (j as f64 + 0.5) / n as f64;
                let ia = x >= a.x_min && x < a.x_max && y >= a.y_min && y < a.y_max;
                let ib = x >= b.x_min && x < b.x_max && y >= b.y_min && y < b.y_max;
                inter += (ia && ib) as u64;
                union += (ia || ib) as u64;
            }
        }
        let counted = inter as f64 / union as f64;
        assert!((a.iou(&b) - counted).abs() < 1e-3);
    }

    fn three_boxes() -> Vec<OrientedBox> {
        vec![
            OrientedBox::new("a", [-1.2, -0.3, 5.0], [0.8, 1.0, 0.8], 0.2),
            OrientedBox::new("b", [0.9, 0.2, 6.5], [1.0, 1.6, 0.6], -0.4),
            OrientedBox::new("c", [0.1, -0.8, 4.0], [0.6, 0.4, 0.5], 0.0),
        ]
    }

    #[test]
    fn fit_from_exact_camera_is_zero_loss() {
        let cam = Camera::looking([0.1, 0.4, -0.3], 0.05, -0.08, 256, 256);
        let boxes = three_boxes();
        let gt: Vec<Rect2D> = boxes.iter().map(|b| project_box_rect(&cam, b).unwrap()).collect();
        let r = fit_camera(&boxes, &gt, &cam, &FitConfig::default()).unwrap();
        assert_eq!(r.final_loss, 0.0);
        let drift: f64 = pose_params(&r.camera)
            .iter()
            .zip(pose_params(&cam))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(drift <= 1e-4);
    }

    #[test]
    fn fit_recovers_perturbed_camera() {
        let truth = Camera::looking([0.1, 0.4, -0.3], 0.05, -0.08, 256, 256);
        let boxes = three_boxes();
        let gt: Vec<Rect2D> = boxes.iter().map(|b| project_box_rect(&truth, b).unwrap()).collect();
        let mut init = truth.clone();
        init.position.x += 0.2;
        init.yaw += 0.05;
        let init_loss = layout_loss(&init, &boxes, &gt);
        let r = fit_camera(&boxes, &gt, &init, &FitConfig::default()).unwrap();
        assert!(r.final_loss < 0.05, "{r:?}");
        assert!(r.final_loss <= init_loss);
        assert!((r.final_loss - layout_loss(&r.camera, &boxes, &gt)).abs() < 1e-12);
    }

    #[test]
    fn fit_rejects_empty() {
        assert_eq!(fit_camera(&[], &[], &cam256(), &FitConfig::default()), Err(FitError::Empty));
    }

    #[test]
    fn lift_full_image_uniform_depth() {
        let cam = cam256();
        let depth = DepthMap::filled(256, 256, 4.0);
        let rect = Rect2D::new(0.0, 0.0, 256.0, 256.0);
        let centered = LiftConfig { anchor: LiftAnchor::Center, ..LiftConfig::default() };
        let b = lift_box("x", &rect, &depth, &cam, &centered).unwrap();
        assert!(b.center.x.abs() < 1e-12 && b.center.y.abs() < 1e-12);
        assert!((b.center.z - 4.0).abs() < 1e-12);
        assert!((b.size.x - 4.0).abs() < 1e-12);

        let b = lift_box("x", &rect, &depth, &cam, &LiftConfig::default()).unwrap();
        assert!(b.center.x.abs() < 1e-12 && b.center.y.abs() < 1e-12);
        assert!((b.center.z - b.size.z / 2.0 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn lift_recovers_rendered_box() {
        let cam = cam256();
        let truth = OrientedBox::new("t", [0.4, -0.2, 6.0], [1.0, 0.8, 0.9], 0.0);
        let scene = Scene::new(cam.clone(), "bg").with_object(truth.clone(), "thing");
        let depth = render_depth(&scene);
        let rect = project_box_rect(&cam, &truth).unwrap();
        let front = truth.center.z - truth.size.z / 2.0;

        for anchor in [LiftAnchor::Center, LiftAnchor::NearFace] {
            let cfg = LiftConfig { anchor, ..LiftConfig::default() };
            let b = lift_box("t", &rect, &depth, &cam, &cfg).unwrap();
            let near_face = match anchor {
                LiftAnchor::Center => b.center.z,
                LiftAnchor::NearFace => b.center.z - b.size.z / 2.0,
            };
            assert!((near_face - front).abs() <= 0.05 * front);
            assert!((b.center.x - truth.center.x).abs() <= 0.05 * front);
            assert!((b.center.y - truth.center.y).abs() <= 0.05 * front);
            assert!((b.size.x - truth.size.x).abs() <= 0.05 * truth.size.x, "{b:?}");
            assert!((b.size.y - truth.size.y).abs() <= 0.05 * truth.size.y, "{b:?}");
        }
    }

    #[test]
    fn near_face_lift_reprojects_off_axis_boxes() {
        let cam = cam256();
        // corner, edge and straddling placements, all showing side faces
        for center in [[1.5, 1.2, 5.0], [-2.0, 0.1, 7.0], [0.2, -1.6, 4.0]] {
            let truth = OrientedBox::new("t", center, [1.0, 0.7, 1.3], 0.0);
            let scene = Scene::new(cam.clone(), "bg").with_object(truth.clone(), "thing");
            let rect = project_box_rect(&cam, &truth).unwrap();
            let b = lift_box("t", &rect, &render_depth(&scene), &cam, &LiftConfig::default()).unwrap();
            let back = project_box_rect(&cam, &b).unwrap();
            assert!(back.iou(&rect) > 0.999, "{center:?}: {back:?} vs {rect:?}");
        }
    }

    #[test]
    fn near_face_lift_follows_camera_heading() {
        let cam = Camera::looking([0.5, 0.0, -1.0], 0.6, 0.0, 128, 128);
        let depth = DepthMap::filled(128, 128, 5.0);
        let rect = Rect2D::new(40.0, 50.0, 70.0, 90.0);
        let b = lift_box("h", &rect, &depth, &cam, &LiftConfig::default()).unwrap();
        assert_eq!(b.yaw, 0.6);
        let back = project_box_rect(&cam, &b).unwrap();
        assert!(back.iou(&rect) > 0.999, "{back:?}");
    }

    #[test]
    fn lift_errors() {
        let cam = cam256();
        let depth = DepthMap::filled(256, 256, FAR_DEPTH);
        assert_eq!(
            lift_box("z", &Rect2D::new(10.0, 10.0, 10.0, 40.0), &depth, &cam, &LiftConfig::default()),
            Err(FitError::DegenerateRect)
        );
        assert_eq!(
            lift_box("z", &Rect2D::new(300.0, 10.0, 320.0, 40.0), &depth, &cam, &LiftConfig::default()),
            Err(FitError::DegenerateRect)
        );
        assert_eq!(
            lift_box("z", &Rect2D::new(10.0, 10.0, 50.0, 40.0), &depth, &cam, &LiftConfig::default()),
            Err(FitError::NoDepth)
        );
    }
}
