//! Cell-by-cell selection semantics for latent composition.

use layoutdiff_core::latent::LatentTensor;
use layoutdiff_core::raster::Mask;

/// Number of grid cells not covered by exactly one mask.
pub fn partition_violations(masks: &[Mask]) -> usize {
    let Some(first) = masks.first() else {
        return 0;
    };
    (0..first.bits.len())
        .filter(|i| masks.iter().filter(|m| m.bits[*i]).count() != 1)
        .count()
}

/// Each output cell copied from the one prediction whose mask owns it, or
/// `None` when the masks do not partition the grid.
pub fn blend(predictions: &[(&LatentTensor, &Mask)]) -> Option<LatentTensor> {
    let (first, _) = predictions.first()?;
    let mut out = LatentTensor::zeros(first.channels, first.height, first.width);
    for y in 0..first.height {
        for x in 0..first.width {
            let owners: Vec<&LatentTensor> = predictions.iter().filter(|(_, m)| m.get(x, y)).map(|(p, _)| *p).collect();
            let [owner] = owners.as_slice() else {
                return None;
            };
            for c in 0..first.channels {
                out.set(c, y, x, owner.get(c, y, x));
            }
        }
    }
    Some(out)
}

/// `prediction` inside `mask`, `z_img` elsewhere.
pub fn inpaint(prediction: &LatentTensor, mask: &Mask, z_img: &LatentTensor) -> LatentTensor {
    let mut out = LatentTensor::zeros(z_img.channels, z_img.height, z_img.width);
    for y in 0..z_img.height {
        for x in 0..z_img.width {
            let src = if mask.get(x, y) { prediction } else { z_img };
            for c in 0..z_img.channels {
                out.set(c, y, x, src.get(c, y, x));
            }
        }
    }
    out
}
