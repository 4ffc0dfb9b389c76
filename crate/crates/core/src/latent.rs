//! Latent tensors and the two mask compositing rules: multi-path blending
//! (`z = sum_i pred_i * M_i`) and inpainting (`z = M * pred + (1 - M) * z_img`).
//!
//! Masks are binary, so both rules reduce to exact per-cell selection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::raster::Mask;

#[derive(Debug, Error, PartialEq)]
pub enum LatentError {
    #[error("shape mismatch: expected {expected:?}, got {found:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("mask is {found:?}, latent grid is {expected:?}")]
    MaskShape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("masks do not partition the grid: cell ({x}, {y}) is covered {count} times")]
    NotAPartition { x: usize, y: usize, count: usize },
    #[error("nothing to blend")]
    Empty,
    #[error("bad latent snapshot: {0}")]
    Snapshot(String),
}

/// `channels x height x width` grid of 32-bit values in C order.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl LatentTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        LatentTensor {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    /// Seeded standard-normal noise.
    pub fn noise(channels: usize, height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..channels * height * width)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        LatentTensor {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[c * self.plane() + y * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let p = self.plane();
        self.data[c * p + y * self.width + x] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_shape(&self, other: &LatentTensor) -> Result<(), LatentError> {
        if self.shape() != other.shape() {
            return Err(LatentError::ShapeMismatch {
                expected: self.shape(),
                found: other.shape(),
            });
        }
        Ok(())
    }

    fn check_mask(&self, m: &Mask) -> Result<(), LatentError> {
        if (m.height, m.width) != (self.height, self.width) {
            return Err(LatentError::MaskShape {
                expected: (self.height, self.width),
                found: (m.height, m.width),
            });
        }
        Ok(())
    }

    pub fn le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(shape: (usize, usize, usize), bytes: &[u8]) -> Result<Self, LatentError> {
        let (c, h, w) = shape;
        if bytes.len() != c * h * w * 4 {
            return Err(LatentError::Snapshot(format!(
                "payload is {} bytes, shape {shape:?} needs {}",
                bytes.len(),
                c * h * w * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(LatentTensor {
            channels: c,
            height: h,
            width: w,
            data,
        })
    }

    /// Hex SHA-256 of shape and payload.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in [self.channels, self.height, self.width] {
            h.update((d as u32).to_le_bytes());
        }
        h.update(self.le_bytes());
        hex::encode(h.finalize())
    }

    /// Per-channel mean over the cells selected by `mask`.
    pub fn masked_channel_means(&self, mask: &Mask) -> Option<Vec<f64>> {
        let n = mask.count();
        if n == 0 {
            return None;
        }
        let plane = self.plane();
        Some(
            (0..self.channels)
                .map(|c| {
                    let s: f64 = mask
                        .bits
                        .iter()
                        .enumerate()
                        .filter(|(_, b)| **b)
                        .map(|(i, _)| self.data[c * plane + i] as f64)
                        .sum();
                    s / n as f64
                })
                .collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"LTNT";
const SNAPSHOT_VERSION: u32 = 1;

/// Debug snapshot: magic `LTNT`, version, then channels/height/width as
/// little-endian u32, then the little-endian f32 payload.
pub fn write_snapshot(t: &LatentTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + t.byte_len());
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    for d in [t.channels, t.height, t.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&t.le_bytes());
    out
}

pub fn read_snapshot(bytes: &[u8]) -> Result<LatentTensor, LatentError> {
    if bytes.len() < 20 || &bytes[..4] != SNAPSHOT_MAGIC {
        return Err(LatentError::Snapshot("missing LTNT header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if word(4) != SNAPSHOT_VERSION as usize {
        return Err(LatentError::Snapshot(format!("unsupported version {}", word(4))));
    }
    LatentTensor::from_le_bytes((word(8), word(12), word(16)), &bytes[20..])
}

/// Composes path predictions by their masks. The masks must partition the
/// latent grid; each output cell is copied from exactly one prediction.
pub fn blend_latents(predictions: &[(&LatentTensor, &Mask)]) -> Result<LatentTensor, LatentError> {
    let (first, _) = predictions.first().ok_or(LatentError::Empty)?;
    for (pred, mask) in predictions {
        first.check_shape(pred)?;
        first.check_mask(mask)?;
    }
    let plane = first.plane();
    let mut owner = vec![usize::MAX; plane];
    for (k, (_, mask)) in predictions.iter().enumerate() {
        for (i, bit) in mask.bits.iter().enumerate() {
            if *bit {
                if owner[i] != usize::MAX {
                    return Err(not_partition(first, i, 2));
                }
                owner[i] = k;
            }
        }
    }
    if let Some(i) = owner.iter().position(|o| *o == usize::MAX) {
        return Err(not_partition(first, i, 0));
    }

    let mut out = LatentTensor::zeros(first.channels, first.height, first.width);
    for c in 0..first.channels {
        let base = c * plane;
        for (i, k) in owner.iter().enumerate() {
            out.data[base + i] = predictions[*k].0.data[base + i];
        }
    }
    Ok(out)
}

fn not_partition(t: &LatentTensor, i: usize, count: usize) -> LatentError {
    LatentError::NotAPartition {
        x: i % t.width,
        y: i / t.width,
        count,
    }
}

/// Keeps `z_img` outside `m_obj` and takes `prediction` inside it.
pub fn inpaint_blend(prediction: &LatentTensor, m_obj: &Mask, z_img: &LatentTensor) -> Result<LatentTensor, LatentError> {
    prediction.check_shape(z_img)?;
    prediction.check_mask(m_obj)?;
    let plane = prediction.plane();
    let mut out = z_img.clone();
    for c in 0..prediction.channels {
        let base = c * plane;
        for (i, bit) in m_obj.bits.iter().enumerate() {
            if *bit {
                out.data[base + i] = prediction.data[base + i];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize, offset: f32) -> LatentTensor {
        let mut t = LatentTensor::zeros(c, h, w);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = i as f32 * 0.5 + offset;
        }
        t
    }

    #[test]
    fn single_full_mask_is_identity() {
        let p = ramp(4, 3, 5, -1.0);
        let out = blend_latents(&[(&p, &Mask::full(5, 3))]).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn complementary_halves() {
        let (a, b) = (ramp(2, 4, 4, 0.0), ramp(2, 4, 4, 100.0));
        let mut left = Mask::empty(4, 4);
        for y in 0..4 {
            for x in 0..2 {
                left.bits[y * 4 + x] = true;
            }
        }
        let right = left.complement();
        let out = blend_latents(&[(&a, &left), (&b, &right)]).unwrap();
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let src = if x < 2 { &a } else { &b };
                    assert_eq!(out.get(c, y, x).to_bits(), src.get(c, y, x).to_bits());
                }
            }
        }
    }

    #[test]
    fn blend_rejects_overlap_gap_and_shape() {
        let a = ramp(1, 2, 2, 0.0);
        let full = Mask::full(2, 2);
        assert!(matches!(
            blend_latents(&[(&a, &full), (&a, &full)]),
            Err(LatentError::NotAPartition { count: 2, .. })
        ));
        assert!(matches!(
            blend_latents(&[(&a, &Mask::empty(2, 2))]),
            Err(LatentError::NotAPartition { count: 0, .. })
        ));
        let b = ramp(2, 2, 2, 0.0);
        assert!(matches!(
            blend_latents(&[(&a, &full), (&b, &Mask::empty(2, 2))]),
            Err(LatentError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            blend_latents(&[(&a, &Mask::full(3, 2))]),
            Err(LatentError::MaskShape { .. })
        ));
        assert_eq!(blend_latents(&[]), Err(LatentError::Empty));
    }

    #[test]
    fn inpaint_extremes() {
        let (pred, img) = (ramp(3, 4, 4, 1.0), ramp(3, 4, 4, -7.0));
        assert_eq!(inpaint_blend(&pred, &Mask::empty(4, 4), &img).unwrap(), img);
        assert_eq!(inpaint_blend(&pred, &Mask::full(4, 4), &img).unwrap(), pred);
        assert!(matches!(
            inpaint_blend(&pred, &Mask::full(4, 4), &ramp(2, 4, 4, 0.0)),
            Err(LatentError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn snapshot_round_trip_and_header_checks() {
        let t = LatentTensor::noise(4, 3, 2, 9);
        assert_eq!(read_snapshot(&write_snapshot(&t)).unwrap(), t);
        let mut bad = write_snapshot(&t);
        bad[0] = b'X';
        assert!(read_snapshot(&bad).is_err());
        let short = write_snapshot(&t);
        assert!(read_snapshot(&short[..short.len() - 1]).is_err());
    }

    #[test]
    fn noise_is_seeded() {
        assert_eq!(LatentTensor::noise(4, 8, 8, 3), LatentTensor::noise(4, 8, 8, 3));
        assert_ne!(LatentTensor::noise(4, 8, 8, 3), LatentTensor::noise(4, 8, 8, 4));
    }
}
