//! PNG interchange for control signals.
//!
//! Depth is stored as 16-bit grayscale inverse depth:
//! `code = round(65535 * (1/z - 1/far) / (1/near - 1/far))`, where `near` is
//! the smallest depth in the map and misses encode as 0. `near` and `far` are
//! written as `tEXt` chunks so the mapping can be inverted.

use std::io::Cursor;

use thiserror::Error;

use crate::raster::{DepthMap, MaskSet};

pub const NEAR_KEY: &str = "layout-depth-near";
pub const FAR_KEY: &str = "layout-depth-far";
pub const MAPPING_KEY: &str = "layout-depth-mapping";
const MAPPING_TEXT: &str = "code = round(65535 * (1/z - 1/far) / (1/near - 1/far)); 0 = no hit";

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("png encoding failed: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("png decoding failed: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("not a layout depth image: {0}")]
    Format(String),
    #[error("mask export supports at most 255 objects, got {0}")]
    TooManyObjects(usize),
}

/// Quantized inverse-depth codes, exactly what a depth PNG carries.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthCodes {
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub codes: Vec<u16>,
}

impl DepthCodes {
    pub fn from_depth(depth: &DepthMap) -> Self {
        let far = depth.far;
        let near = depth.near().unwrap_or(far);
        let inv_far = 1.0 / far;
        let span = 1.0 / near - inv_far;
        let codes = depth
            .values
            .iter()
            .map(|&z| {
                if z >= far {
                    0
                } else if span <= 0.0 {
                    u16::MAX
                } else {
                    (65535.0 * (1.0 / z - inv_far) / span).round().clamp(0.0, 65535.0) as u16
                }
            })
            .collect();
        DepthCodes {
            width: depth.width,
            height: depth.height,
            near,
            far,
            codes,
        }
    }

    /// Inverts the quantization. Re-encoding the result reproduces the codes.
    pub fn to_depth_map(&self) -> DepthMap {
        let inv_far = 1.0 / self.far;
        let span = 1.0 / self.near - inv_far;
        let values = self
            .codes
            .iter()
            .map(|&c| match c {
                0 => self.far,
                u16::MAX => self.near,
                c => 1.0 / (c as f64 / 65535.0 * span + inv_far),
            })
            .collect();
        DepthMap {
            width: self.width,
            height: self.height,
            far: self.far,
            values,
        }
    }

    /// Codes scaled to [0, 1].
    pub fn normalized(&self, x: usize, y: usize) -> f64 {
        self.codes[y * self.width + x] as f64 / 65535.0
    }
}

pub fn export_depth(depth: &DepthMap) -> Result<Vec<u8>, ExportError> {
    encode_depth_codes(&DepthCodes::from_depth(depth))
}

pub fn encode_depth_codes(codes: &DepthCodes) -> Result<Vec<u8>, ExportError> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, codes.width as u32, codes.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        enc.add_text_chunk(NEAR_KEY.into(), format!("{:?}", codes.near))?;
        enc.add_text_chunk(FAR_KEY.into(), format!("{:?}", codes.far))?;
        enc.add_text_chunk(MAPPING_KEY.into(), MAPPING_TEXT.into())?;
        let mut writer = enc.write_header()?;
        let data: Vec<u8> = codes.codes.iter().flat_map(|c| c.to_be_bytes()).collect();
        writer.write_image_data(&data)?;
        writer.finish()?;
    }
    Ok(buf)
}

pub fn decode_depth_png(bytes: &[u8]) -> Result<DepthCodes, ExportError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(ExportError::Format(format!(
            "expected 16-bit grayscale, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let text_value = |key: &str| -> Result<f64, ExportError> {
        info.uncompressed_latin1_text
            .iter()
            .find(|t| t.keyword == key)
            .ok_or_else(|| ExportError::Format(format!("missing {key} text chunk")))?
            .text
            .parse()
            .map_err(|e| ExportError::Format(format!("bad {key}: {e}")))
    };
    let near = text_value(NEAR_KEY)?;
    let far = text_value(FAR_KEY)?;
    let (width, height) = (info.width as usize, info.height as usize);

    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf)?;
    let codes = buf[..frame.buffer_size()]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    Ok(DepthCodes {
        width,
        height,
        near,
        far,
        codes,
    })
}

fn palette_color(index: usize) -> [u8; 3] {
    if index == 0 {
        return [0, 0, 0];
    }
    // golden-ratio hue walk, fixed saturation/value
    let h = (index as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let f = h.fract();
    let (v, p, q, t) = (230.0, 60.0, 230.0 - 170.0 * f, 60.0 + 170.0 * f);
    let rgb = match h as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    };
    rgb.map(|c: f64| c.round() as u8)
}

/// 8-bit indexed PNG of the mask partition: index 0 is background and index
/// k is the k-th object in scene order.
pub fn export_masks(masks: &MaskSet) -> Result<Vec<u8>, ExportError> {
    if masks.ids.len() > 255 {
        return Err(ExportError::TooManyObjects(masks.ids.len()));
    }
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, masks.width as u32, masks.height as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette((0..=masks.ids.len()).flat_map(palette_color).collect::<Vec<u8>>());
        let mut writer = enc.write_header()?;
        let data: Vec<u8> = masks.labels.iter().map(|l| *l as u8).collect();
        writer.write_image_data(&data)?;
        writer.finish()?;
    }
    Ok(buf)
}

/// Reads back the label indices of an indexed mask PNG.
pub fn decode_mask_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), ExportError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let (w, h) = (reader.info().width as usize, reader.info().height as usize);
    if reader.info().color_type != png::ColorType::Indexed {
        return Err(ExportError::Format("expected an indexed image".into()));
    }
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf)?;
    buf.truncate(frame.buffer_size());
    Ok((w, h, buf))
}

/// 8-bit RGB PNG.
pub fn encode_rgb(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>, ExportError> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(rgb)?;
        writer.finish()?;
    }
    Ok(buf)
}

pub fn decode_rgb(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), ExportError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let (w, h) = (reader.info().width as usize, reader.info().height as usize);
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf)?;
    buf.truncate(frame.buffer_size());
    Ok((w, h, buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::FAR_DEPTH;

    #[test]
    fn all_far_exports_zero() {
        let d = DepthMap::filled(16, 8, FAR_DEPTH);
        let codes = decode_depth_png(&export_depth(&d).unwrap()).unwrap();
        assert!(codes.codes.iter().all(|c| *c == 0));
        assert_eq!((codes.width, codes.height), (16, 8));
    }

    #[test]
    fn constant_near_exports_max() {
        let d = DepthMap::filled(8, 8, 3.25);
        let codes = decode_depth_png(&export_depth(&d).unwrap()).unwrap();
        assert!(codes.codes.iter().all(|c| *c == 65535));
        assert_eq!(codes.near, 3.25);
        assert_eq!(codes.far, FAR_DEPTH);
    }

    #[test]
    fn mixed_map_matches_formula() {
        let mut d = DepthMap::filled(4, 4, FAR_DEPTH);
        let zs = [2.0, 2.5, 7.0, 13.3, 42.0, 99.9, 4.4];
        for (i, z) in zs.iter().enumerate() {
            d.values[i * 2] = *z;
        }
        let codes = decode_depth_png(&export_depth(&d).unwrap()).unwrap();
        let (near, far) = (2.0_f64, 100.0_f64);
        for (i, z) in d.values.iter().enumerate() {
            let expect = if *z >= far {
                0
            } else {
                (65535.0 * (1.0 / z - 1.0 / far) / (1.0 / near - 1.0 / far)).round() as u16
            };
            assert_eq!(codes.codes[i], expect, "pixel {i} z={z}");
        }
    }

    #[test]
    fn mask_png_keeps_labels() {
        let m = MaskSet {
            width: 3,
            height: 2,
            ids: vec!["a".into(), "b".into()],
            labels: vec![0, 1, 2, 2, 1, 0],
            depth: vec![FAR_DEPTH; 6],
        };
        let (w, h, data) = decode_mask_png(&export_masks(&m).unwrap()).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(data, vec![0, 1, 2, 2, 1, 0]);
    }

    #[test]
    fn not_a_depth_png() {
        let rgb = encode_rgb(2, 2, &[0; 12]).unwrap();
        assert!(matches!(decode_depth_png(&rgb), Err(ExportError::Format(_))));
    }
}
