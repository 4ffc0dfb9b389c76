//! Brute-force ray caster: every ray is intersected with all six face
//! planes of every box, with no slab test and no shared helpers.

use layoutdiff_core::raster::FAR_DEPTH;
use layoutdiff_core::scene::{Camera, OrientedBox, Scene};

type V = [f64; 3];

fn dot(a: V, b: V) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: V, b: V) -> V {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn axpy(s: f64, a: V, b: V) -> V {
    [s * a[0] + b[0], s * a[1] + b[1], s * a[2] + b[2]]
}

fn cross(a: V, b: V) -> V {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Right, up and forward unit vectors. Yaw turns about +Y, positive pitch
/// looks up.
pub fn camera_frame(camera: &Camera) -> [V; 3] {
    let (sy, cy) = camera.yaw.sin_cos();
    let (sp, cp) = camera.pitch.sin_cos();
    let forward = [sy * cp, sp, cy * cp];
    let up = [-sy * sp, cp, -cy * sp];
    [cross(forward, up), up, forward]
}

/// Direction through pixel center `(x, y)` with unit forward component, so
/// the ray parameter is camera depth.
pub fn pixel_direction(camera: &Camera, frame: &[V; 3], x: usize, y: usize) -> V {
    let k = &camera.intrinsics;
    let a = (x as f64 + 0.5 - k.cx) / k.fx;
    let b = -(y as f64 + 0.5 - k.cy) / k.fy;
    axpy(a, frame[0], axpy(b, frame[1], frame[2]))
}

fn box_axes(b: &OrientedBox) -> [V; 3] {
    let (s, c) = b.yaw.sin_cos();
    [[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]]
}

/// Nearest positive face hit. A viewer strictly inside the box sees none
/// of it.
pub fn face_hit(origin: V, dir: V, b: &OrientedBox) -> Option<f64> {
    let axes = box_axes(b);
    let h = [b.size.x / 2.0, b.size.y / 2.0, b.size.z / 2.0];
    let rel = sub(origin, [b.center.x, b.center.y, b.center.z]);
    if (0..3).all(|k| dot(rel, axes[k]).abs() < h[k]) {
        return None;
    }
    let mut best: Option<f64> = None;
    for k in 0..3 {
        let denom = dot(axes[k], dir);
        if denom == 0.0 {
            continue;
        }
        for side in [-1.0, 1.0] {
            let t = (side * h[k] - dot(rel, axes[k])) / denom;
            // also drops NaN
            if t.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                continue;
            }
            let q = axpy(t, dir, rel);
            let on_face = (0..3)
                .filter(|j| *j != k)
                .all(|j| dot(q, axes[j]).abs() <= h[j] * (1.0 + 1e-12) + 1e-12);
            if on_face && best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        }
    }
    best
}

/// Per-pixel labels (0 background, object index + 1) and depths.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u16>,
    pub depth: Vec<f64>,
}

pub fn trace(scene: &Scene) -> Trace {
    let cam = &scene.camera;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let frame = camera_frame(cam);
    let origin = [cam.position.x, cam.position.y, cam.position.z];
    let mut labels = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let dir = pixel_direction(cam, &frame, x, y);
            let mut best: Option<(usize, f64)> = None;
            for (i, obj) in scene.objects.iter().enumerate() {
                if let Some(t) = face_hit(origin, dir, &obj.bbox) {
                    // ties keep the earlier object
                    if best.is_none_or(|(_, bt)| t < bt) {
                        best = Some((i, t));
                    }
                }
            }
            match best {
                Some((i, t)) => {
                    labels.push(i as u16 + 1);
                    depth.push(t.min(FAR_DEPTH));
                }
                None => {
                    labels.push(0);
                    depth.push(FAR_DEPTH);
                }
            }
        }
    }
    Trace {
        width: w,
        height: h,
        labels,
        depth,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use layoutdiff_core::scene::OrientedBox;

    fn cam() -> Camera {
        Camera::looking([0.0; 3], 0.0, 0.0, 32, 32)
    }

    #[test]
    fn facing_box_depth_is_its_near_face() {
        let s = Scene::new(cam(), "bg").with_object(OrientedBox::new("a", [0.0, 0.0, 5.0], [2.0; 3], 0.0), "a");
        let t = trace(&s);
        let c = 16 * 32 + 16;
        assert_eq!(t.labels[c], 1);
        assert!((t.depth[c] - 4.0).abs() < 1e-12);
        assert_eq!((t.labels[0], t.depth[0]), (0, FAR_DEPTH));
    }

    #[test]
    fn viewer_inside_a_box_sees_past_it() {
        let s = Scene::new(cam(), "bg")
            .with_object(OrientedBox::new("room", [0.0; 3], [3.0; 3], 0.7), "a")
            .with_object(OrientedBox::new("far", [0.0, 0.0, 6.0], [1.0; 3], 0.0), "b");
        let t = trace(&s);
        assert_eq!(t.labels[16 * 32 + 16], 2);
        assert!(!t.labels.contains(&1));
    }

    #[test]
    fn yawed_box_hits_its_corner_edge_first() {
        // a cube turned 45 degrees shows its vertical edge at the center ray
        let b = OrientedBox::new("a", [0.0, 0.0, 5.0], [2.0; 3], std::f64::consts::FRAC_PI_4);
        let t = face_hit([0.0; 3], [0.0, 0.0, 1.0], &b).unwrap();
        assert!((t - (5.0 - 2f64.sqrt())).abs() < 1e-9);
    }

    #[test]
    fn frame_is_orthonormal_with_right_as_forward_cross_up() {
        let c = Camera::looking([0.0; 3], 0.4, -0.3, 8, 8);
        let [r, u, f] = camera_frame(&c);
        for (a, b) in [(r, u), (u, f), (r, f)] {
            assert!(dot(a, b).abs() < 1e-12);
        }
        for v in [r, u, f] {
            assert!((dot(v, v) - 1.0).abs() < 1e-12);
        }
        // world -X is image right when looking down +Z
        assert!((dot(cross(f, u), r) - 1.0).abs() < 1e-12);
        let [r0, _, _] = camera_frame(&Camera::looking([0.0; 3], 0.0, 0.0, 8, 8));
        assert_eq!(r0, [-1.0, 0.0, 0.0]);
    }
}
