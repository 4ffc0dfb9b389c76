//! Closed-form fixed points of the toy denoiser.

use layoutdiff_core::latent::LatentTensor;
use layoutdiff_core::raster::Mask;
use layoutdiff_core::toy::{prompt_base, DEPTH_WEIGHT, REFERENCE_MIX};

/// Value a cell converges to for `prompt` at channel `c`, given the cell's
/// mean normalized control depth and an optional identity signature.
pub fn limit(prompt: &str, c: usize, channels: usize, control_mean: f64, signature: Option<&[f64]>) -> f64 {
    let own = prompt_base(prompt, channels)[c] + DEPTH_WEIGHT * control_mean;
    match signature {
        Some(sig) => (1.0 - REFERENCE_MIX) * own + REFERENCE_MIX * sig[c],
        None => own,
    }
}

/// Per-channel mean of `z` over the cells of `mask`.
pub fn region_means(z: &LatentTensor, mask: &Mask) -> Option<Vec<f64>> {
    let cells: Vec<(usize, usize)> = (0..z.height)
        .flat_map(|y| (0..z.width).map(move |x| (x, y)))
        .filter(|(x, y)| mask.get(*x, *y))
        .collect();
    if cells.is_empty() {
        return None;
    }
    Some(
        (0..z.channels)
            .map(|c| cells.iter().map(|(x, y)| z.get(c, *y, *x) as f64).sum::<f64>() / cells.len() as f64)
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signature_mixes_half_and_half() {
        let plain = limit("a cat", 1, 4, 0.3, None);
        let sig = [0.0, 2.0, 0.0, 0.0];
        let mixed = limit("a cat", 1, 4, 0.3, Some(&sig));
        assert!((mixed - (0.5 * plain + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn region_means_skip_unmasked_cells() {
        let mut z = LatentTensor::zeros(1, 1, 3);
        z.data = vec![1.0, 2.0, 10.0];
        let mut m = Mask::empty(3, 1);
        m.bits[0] = true;
        m.bits[1] = true;
        assert_eq!(region_means(&z, &m).unwrap(), vec![1.5]);
        assert!(region_means(&z, &Mask::empty(3, 1)).is_none());
    }
}
