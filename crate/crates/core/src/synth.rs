//! Seeded scene generators for tests, benchmarks and curation fixtures.

use std::f64::consts::PI;

use rand::Rng;

use crate::fit::{project_box_rect, Rect2D};
use crate::scene::{Camera, OrientedBox, Scene};

const ADJECTIVES: [&str; 8] = ["red", "wooden", "small", "striped", "green", "old", "shiny", "soft"];
const NOUNS: [&str; 8] = ["chair", "lamp", "cat", "table", "plant", "vase", "sofa", "clock"];

/// A distinct prompt for every index below 64, then suffixed variants.
pub fn prompt_for(i: usize) -> String {
    let base = format!("a {} {}", ADJECTIVES[i % 8], NOUNS[(i / 8) % 8]);
    if i < 64 {
        base
    } else {
        format!("{base} number {i}")
    }
}

/// A box whose center is the back-projection of a random pixel at a random
/// depth in `[2, 10)`, with sizes in `[0.3, 2)` and yaw in `[-pi, pi)`.
pub fn random_box<R: Rng>(rng: &mut R, camera: &Camera, id: String) -> OrientedBox {
    let u = rng.gen_range(0.0..camera.width as f64);
    let v = rng.gen_range(0.0..camera.height as f64);
    let d = rng.gen_range(2.0..10.0);
    let c = camera.backproject(u, v, d);
    let size = [
        rng.gen_range(0.3..2.0),
        rng.gen_range(0.3..2.0),
        rng.gen_range(0.3..2.0),
    ];
    OrientedBox::new(id, [c.x, c.y, c.z], size, rng.gen_range(-PI..PI))
}

/// Camera near the origin with a mild random heading and tilt.
pub fn random_camera<R: Rng>(rng: &mut R, width: u32, height: u32) -> Camera {
    Camera::looking(
        [rng.gen_range(-1.0..1.0), rng.gen_range(0.0..1.5), rng.gen_range(-1.0..1.0)],
        rng.gen_range(-0.4..0.4),
        rng.gen_range(-0.25..0.25),
        width,
        height,
    )
}

pub fn random_scene<R: Rng>(rng: &mut R, boxes: usize, width: u32, height: u32) -> Scene {
    let camera = random_camera(rng, width, height);
    let mut scene = Scene::new(camera, "an empty room");
    for i in 0..boxes {
        let b = random_box(rng, &scene.camera, format!("obj{i}"));
        scene = scene.with_object(b, prompt_for(i));
    }
    scene
}

/// `n` unit-ish boxes on a fronto-parallel grid 5 m in front of a camera at
/// the origin, spaced so they never overlap in the image.
pub fn grid_scene(n: usize, resolution: u32) -> Scene {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols).max(1);
    let span = 4.0;
    let cell = span / cols.max(rows) as f64;
    let size = cell * 0.6;
    let mut scene = Scene::new(Camera::looking([0.0, 0.0, 0.0], 0.0, 0.0, resolution, resolution), "an empty room");
    for i in 0..n {
        let (r, c) = (i / cols, i % cols);
        // world -X is image right at yaw 0
        let x = span / 2.0 - cell * (c as f64 + 0.5);
        let y = span / 2.0 - cell * (r as f64 + 0.5);
        let b = OrientedBox::new(format!("obj{i}"), [x, y, 5.0], [size, size, size], 0.0);
        scene = scene.with_object(b, prompt_for(i));
    }
    scene
}

/// A camera-fitting problem with a known answer.
#[derive(Clone, Debug)]
pub struct FitCase {
    pub truth: Camera,
    pub init: Camera,
    pub boxes: Vec<OrientedBox>,
    pub rects: Vec<Rect2D>,
}

/// Boxes placed in front of a random camera, their projected rectangles, and
/// an initial guess perturbed by up to `dpos` meters and `dang` radians.
pub fn fit_case<R: Rng>(rng: &mut R, boxes: usize, resolution: u32, dpos: f64, dang: f64) -> FitCase {
    let truth = random_camera(rng, resolution, resolution);
    let mut placed = Vec::new();
    let mut rects = Vec::new();
    while placed.len() < boxes {
        // keep boxes well inside the frame so the fit is well posed
        let u = rng.gen_range(0.2..0.8) * resolution as f64;
        let v = rng.gen_range(0.2..0.8) * resolution as f64;
        let d = rng.gen_range(4.0..9.0);
        let c = truth.backproject(u, v, d);
        let s = [rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5)];
        let b = OrientedBox::new(format!("obj{}", placed.len()), [c.x, c.y, c.z], s, rng.gen_range(-PI..PI));
        if let Some(r) = project_box_rect(&truth, &b) {
            placed.push(b);
            rects.push(r);
        }
    }
    let mut init = truth.clone();
    init.position.x += rng.gen_range(-dpos..=dpos);
    init.position.y += rng.gen_range(-dpos..=dpos);
    init.position.z += rng.gen_range(-dpos..=dpos);
    init.yaw += rng.gen_range(-dang..=dang);
    init.pitch += rng.gen_range(-dang..=dang);
    FitCase {
        truth,
        init,
        boxes: placed,
        rects,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::render_masks;
    use crate::scene::validate_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prompts_are_distinct() {
        let set: std::collections::HashSet<String> = (0..200).map(prompt_for).collect();
        assert_eq!(set.len(), 200);
    }

    #[test]
    fn random_scenes_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 0..6 {
            assert!(validate_scene(&random_scene(&mut rng, n, 64, 64)).is_empty());
        }
    }

    #[test]
    fn grid_objects_are_all_visible() {
        for n in [1, 2, 4, 8, 9] {
            let s = grid_scene(n, 64);
            assert!(validate_scene(&s).is_empty());
            let m = render_masks(&s);
            for obj in &s.objects {
                assert!(m.object_mask(obj.id()).unwrap().count() > 0, "n={n} {}", obj.id());
            }
        }
    }
}
