//! Per-pixel ray casting of box layouts into the two control signals: a
//! camera-space depth map and an occlusion-aware object mask partition.

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::scene::{ObjectId, OrientedBox, Scene};

/// Depth written for pixels whose ray hits nothing, in meters.
pub const FAR_DEPTH: f64 = 100.0;

#[derive(Debug, Error, PartialEq)]
pub enum RasterError {
    #[error("downsample factor {factor} does not divide {width}x{height}")]
    NonDivisibleFactor { factor: usize, width: usize, height: usize },
}

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Point3<f64>,
    pub direction: Vector3<f64>,
    /// Unit axis along which `z_depth` is measured.
    pub view_axis: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Point3<f64>, direction: Vector3<f64>) -> Self {
        Ray {
            origin,
            direction,
            view_axis: direction.normalize(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    /// Ray parameter of the entry point; zero when the origin is inside.
    pub t_entry: f64,
    /// Distance of the entry point along the ray's view axis.
    pub z_depth: f64,
}

/// Slab test in the box's yaw-aligned frame.
pub fn ray_box_intersect(ray: &Ray, bx: &OrientedBox) -> Option<RayHit> {
    let o = bx.to_local(&ray.origin);
    let d = bx.dir_to_local(&ray.direction);
    let h = bx.half_extents();

    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for axis in 0..3 {
        if d[axis] == 0.0 {
            if o[axis].abs() > h[axis] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[axis];
        let mut t0 = (-h[axis] - o[axis]) * inv;
        let mut t1 = (h[axis] - o[axis]) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
    }
    if t_far < t_near || t_far < 0.0 {
        return None;
    }
    let t_entry = t_near.max(0.0);
    Some(RayHit {
        t_entry,
        z_depth: t_entry * ray.direction.dot(&ray.view_axis),
    })
}

/// Camera ray through the center of pixel `(x, y)`. The direction is scaled
/// so that the ray parameter equals camera-space depth.
pub fn pixel_ray(scene: &Scene, basis: &crate::scene::CameraBasis, x: usize, y: usize) -> Ray {
    let cam = &scene.camera;
    Ray {
        origin: cam.position,
        direction: cam.ray_direction(basis, x as f64 + 0.5, y as f64 + 0.5),
        view_axis: basis.forward,
    }
}

/// Nearest hit along `ray` over `boxes`, as (index, depth). Hits at depth
/// zero or less are clipped; equal depths resolve to the lower index.
pub fn nearest_hit<'a>(ray: &Ray, boxes: impl IntoIterator<Item = &'a OrientedBox>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, bx) in boxes.into_iter().enumerate() {
        if let Some(hit) = ray_box_intersect(ray, bx) {
            if hit.z_depth > 0.0 && best.is_none_or(|(_, z)| hit.z_depth < z) {
                best = Some((i, hit.z_depth));
            }
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub far: f64,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        DepthMap {
            width,
            height,
            far: FAR_DEPTH,
            values: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn is_hit(&self, x: usize, y: usize) -> bool {
        self.get(x, y) < self.far
    }

    /// Smallest depth over hit pixels.
    pub fn near(&self) -> Option<f64> {
        self.values
            .iter()
            .copied()
            .filter(|z| *z < self.far)
            .min_by(f64::total_cmp)
    }
}

/// A binary grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn union(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a || b)
    }

    pub fn intersect(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a && !b)
    }

    pub fn complement(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    fn zip(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        assert_eq!((self.width, self.height), (other.width, other.height));
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| f(*a, *b)).collect(),
        }
    }
}

pub const BACKGROUND_LABEL: u16 = 0;

/// Occlusion-aware partition of the image plane: each pixel carries exactly
/// one label, `0` for background or `k` for the k-th object in scene order.
///
/// `depth` holds the winning surface depth per pixel (far for background)
/// and is used to break ties when downsampling.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub width: usize,
    pub height: usize,
    pub ids: Vec<ObjectId>,
    pub labels: Vec<u16>,
    pub depth: Vec<f64>,
}

impl MaskSet {
    pub fn label_of(&self, id: &ObjectId) -> Option<u16> {
        self.ids.iter().position(|i| i == id).map(|p| p as u16 + 1)
    }

    pub fn label_mask(&self, label: u16) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self.labels.iter().map(|l| *l == label).collect(),
        }
    }

    pub fn object_mask(&self, id: &ObjectId) -> Option<Mask> {
        self.label_of(id).map(|l| self.label_mask(l))
    }

    pub fn background_mask(&self) -> Mask {
        self.label_mask(BACKGROUND_LABEL)
    }

    /// Object masks in scene order followed by the background mask.
    pub fn all_masks(&self) -> Vec<Mask> {
        let mut out: Vec<Mask> = (1..=self.ids.len() as u16).map(|l| self.label_mask(l)).collect();
        out.push(self.background_mask());
        out
    }
}

/// Depth map and mask partition from a single ray-casting pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub depth: DepthMap,
    pub masks: MaskSet,
}

pub fn render(scene: &Scene) -> Rendered {
    let width = scene.camera.width as usize;
    let height = scene.camera.height as usize;
    let basis = scene.camera.basis();
    let boxes: Vec<&OrientedBox> = scene.boxes().collect();

    let per_pixel: Vec<(u16, f64)> = (0..width * height)
        .into_par_iter()
        .map(|i| {
            let ray = pixel_ray(scene, &basis, i % width, i / width);
            match nearest_hit(&ray, boxes.iter().copied()) {
                Some((k, z)) => (k as u16 + 1, z.min(FAR_DEPTH)),
                None => (BACKGROUND_LABEL, FAR_DEPTH),
            }
        })
        .collect();

    let (labels, values): (Vec<u16>, Vec<f64>) = per_pixel.into_iter().unzip();
    Rendered {
        depth: DepthMap {
            width,
            height,
            far: FAR_DEPTH,
            values: values.clone(),
        },
        masks: MaskSet {
            width,
            height,
            ids: scene.objects.iter().map(|o| o.id().clone()).collect(),
            labels,
            depth: values,
        },
    }
}

pub fn render_depth(scene: &Scene) -> DepthMap {
    render(scene).depth
}

pub fn render_masks(scene: &Scene) -> MaskSet {
    render(scene).masks
}

/// Majority-vote reduction of a mask partition by `factor` in each axis.
///
/// Ties go to the candidate with the smaller mean depth inside the cell;
/// background loses every tie against an object, and remaining ties go to
/// the earlier object.
pub fn downsample_masks(masks: &MaskSet, factor: usize) -> Result<MaskSet, RasterError> {
    if factor == 0 || !masks.width.is_multiple_of(factor) || !masks.height.is_multiple_of(factor) {
        return Err(RasterError::NonDivisibleFactor {
            factor,
            width: masks.width,
            height: masks.height,
        });
    }
    let cw = masks.width / factor;
    let ch = masks.height / factor;
    let mut labels = Vec::with_capacity(cw * ch);
    let mut depth = Vec::with_capacity(cw * ch);
    // (label, count, depth sum)
    let mut tally: Vec<(u16, usize, f64)> = Vec::new();

    for cy in 0..ch {
        for cx in 0..cw {
            tally.clear();
            for y in cy * factor..(cy + 1) * factor {
                for x in cx * factor..(cx + 1) * factor {
                    let i = y * masks.width + x;
                    let label = masks.labels[i];
                    match tally.iter_mut().find(|t| t.0 == label) {
                        Some(t) => {
                            t.1 += 1;
                            t.2 += masks.depth[i];
                        }
                        None => tally.push((label, 1, masks.depth[i])),
                    }
                }
            }
            let (label, count, sum) = tally
                .iter()
                .copied()
                .reduce(|best, cand| if beats(cand, best) { cand } else { best })
                .expect("cell has pixels");
            labels.push(label);
            depth.push(sum / count as f64);
        }
    }
    Ok(MaskSet {
        width: cw,
        height: ch,
        ids: masks.ids.clone(),
        labels,
        depth,
    })
}

fn beats(cand: (u16, usize, f64), best: (u16, usize, f64)) -> bool {
    if cand.1 != best.1 {
        return cand.1 > best.1;
    }
    match (cand.0 == BACKGROUND_LABEL, best.0 == BACKGROUND_LABEL) {
        (true, false) => return false,
        (false, true) => return true,
        _ => {}
    }
    let (cm, bm) = (cand.2 / cand.1 as f64, best.2 / best.1 as f64);
    if cm != bm {
        return cm < bm;
    }
    cand.0 < best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Camera;

    fn cam() -> Camera {
        Camera::looking([0.0; 3], 0.0, 0.0, 64, 64)
    }

    #[test]
    fn axis_ray_hits_front_face() {
        let ray = Ray::new(Point3::origin(), Vector3::z());
        let bx = OrientedBox::new("a", [0.0, 0.0, 5.0], [1.0; 3], 0.0);
        let hit = ray_box_intersect(&ray, &bx).unwrap();
        assert_eq!(hit.t_entry, 4.5);
        assert_eq!(hit.z_depth, 4.5);
    }

    #[test]
    fn disjoint_box_is_missed() {
        let ray = Ray::new(Point3::origin(), Vector3::z());
        let bx = OrientedBox::new("a", [10.0, 0.0, 5.0], [1.0; 3], 0.0);
        assert_eq!(ray_box_intersect(&ray, &bx), None);
    }

    #[test]
    fn origin_inside_box_enters_at_zero() {
        let ray = Ray::new(Point3::new(0.1, 0.0, 5.0), Vector3::new(0.3, 0.2, 1.0));
        let bx = OrientedBox::new("a", [0.0, 0.0, 5.0], [1.0; 3], 0.4);
        assert_eq!(ray_box_intersect(&ray, &bx).unwrap().t_entry, 0.0);
    }

    #[test]
    fn box_behind_ray_is_missed() {
        let ray = Ray::new(Point3::origin(), Vector3::z());
        let bx = OrientedBox::new("a", [0.0, 0.0, -5.0], [1.0; 3], 0.0);
        assert_eq!(ray_box_intersect(&ray, &bx), None);
    }

    #[test]
    fn rotated_box_matches_ray_march() {
        let bx = OrientedBox::new("a", [0.2, -0.1, 5.0], [1.0, 0.8, 1.5], std::f64::consts::FRAC_PI_4);
        let origin = Point3::new(-0.3, 0.2, 0.0);
        let dir = Vector3::new(0.1, -0.05, 1.0).normalize();
        let hit = ray_box_intersect(&Ray::new(origin, dir), &bx).unwrap();

        let inside = |p: &Point3<f64>| {
            let l = bx.to_local(p);
            let h = bx.half_extents();
            l.x.abs() <= h.x && l.y.abs() <= h.y && l.z.abs() <= h.z
        };
        let step = 1e-4;
        let mut t = 0.0;
        while !inside(&(origin + dir * t)) {
            t += step;
            assert!(t < 20.0, "march missed");
        }
        let p_hit = origin + dir * hit.t_entry;
        let p_march = origin + dir * t;
        assert!((p_hit - p_march).norm() < 1e-3);
    }

    #[test]
    fn empty_scene_is_all_far_and_background() {
        let s = Scene::new(cam(), "bg");
        let r = render(&s);
        assert!(r.depth.values.iter().all(|z| *z == FAR_DEPTH));
        assert_eq!(r.masks.background_mask().count(), 64 * 64);
    }

    #[test]
    fn fronto_parallel_face_is_constant_depth() {
        let s = Scene::new(cam(), "bg").with_object(OrientedBox::new("a", [0.0, 0.0, 5.0], [1.0; 3], 0.0), "box");
        let d = render_depth(&s);
        let covered: Vec<f64> = d.values.iter().copied().filter(|z| *z < FAR_DEPTH).collect();
        assert!(!covered.is_empty());
        assert!(covered.iter().all(|z| *z == 4.5));
    }

    #[test]
    fn single_box_mask_is_its_hit_set() {
        let s = Scene::new(cam(), "bg").with_object(OrientedBox::new("a", [0.3, 0.1, 4.0], [1.0, 1.5, 0.7], 0.6), "box");
        let m = render_masks(&s);
        let basis = s.camera.basis();
        let obj = m.object_mask(&"a".into()).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let hit = ray_box_intersect(&pixel_ray(&s, &basis, x, y), &s.objects[0].bbox).is_some();
                assert_eq!(obj.get(x, y), hit);
                assert_eq!(m.background_mask().get(x, y), !hit);
            }
        }
    }

    #[test]
    fn equal_depth_tie_goes_to_earlier_object() {
        let s = Scene::new(cam(), "bg")
            .with_object(OrientedBox::new("a", [0.0, 0.0, 5.0], [1.0; 3], 0.0), "first")
            .with_object(OrientedBox::new("b", [0.0, 0.0, 5.0], [2.0, 0.5, 1.0], 0.0), "second");
        let m = render_masks(&s);
        let c = 32 * 64 + 32;
        assert_eq!(m.labels[c], 1);
    }

    fn partition_from(labels: Vec<u16>, w: usize, n: usize) -> MaskSet {
        let depth = labels.iter().map(|l| if *l == 0 { FAR_DEPTH } else { *l as f64 }).collect();
        MaskSet {
            width: w,
            height: labels.len() / w,
            ids: (0..n).map(|i| ObjectId(format!("o{i}"))).collect(),
            labels,
            depth,
        }
    }

    #[test]
    fn downsample_constant_background() {
        let m = partition_from(vec![0; 64 * 64], 64, 0);
        let d = downsample_masks(&m, 8).unwrap();
        assert_eq!((d.width, d.height), (8, 8));
        assert!(d.labels.iter().all(|l| *l == 0));
    }

    #[test]
    fn downsample_aligned_block() {
        let mut labels = vec![0; 64 * 64];
        for y in 16..24 {
            for x in 40..48 {
                labels[y * 64 + x] = 1;
            }
        }
        let d = downsample_masks(&partition_from(labels, 64, 1), 8).unwrap();
        let ones: Vec<usize> = (0..64).filter(|i| d.labels[*i] == 1).collect();
        assert_eq!(ones, vec![2 * 8 + 5]);
    }

    #[test]
    fn downsample_ties() {
        // half background, half object: object wins
        let labels = vec![0, 1, 0, 1];
        let d = downsample_masks(&partition_from(labels, 2, 1), 2).unwrap();
        assert_eq!(d.labels, vec![1]);
        // two objects tied: smaller mean depth wins (label 2 sits nearer here)
        let mut m = partition_from(vec![1, 2, 1, 2], 2, 2);
        m.depth = vec![5.0, 3.0, 5.0, 3.0];
        assert_eq!(downsample_masks(&m, 2).unwrap().labels, vec![2]);
        // equal depth: earlier object
        m.depth = vec![4.0; 4];
        assert_eq!(downsample_masks(&m, 2).unwrap().labels, vec![1]);
    }

    #[test]
    fn downsample_rejects_non_divisible() {
        let m = partition_from(vec![0; 10 * 10], 10, 0);
        assert_eq!(
            downsample_masks(&m, 3),
            Err(RasterError::NonDivisibleFactor { factor: 3, width: 10, height: 10 })
        );
    }
}
