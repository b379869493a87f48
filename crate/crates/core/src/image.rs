//! 8-bit PNG encoding of images, RF images and score heatmaps.

use crate::error::{Error, Result};

/// Quantizes `[0, 1]` to a byte, rounding to nearest.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Interleaves a planar `3×h×w` array into RGB bytes.
pub fn planar_to_rgb8(planar: &[f64], h: usize, w: usize) -> Vec<u8> {
    let plane = h * w;
    let mut out = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(to_u8(planar[c * plane + i]));
        }
    }
    out
}

/// White-to-red ramp scaled by the grid maximum (all white when the grid is
/// all zero).
pub fn heatmap_rgb8(scores: &[f64]) -> Vec<u8> {
    let max = scores.iter().copied().fold(0.0f64, f64::max);
    let mut out = Vec::with_capacity(3 * scores.len());
    for &s in scores {
        let v = if max > 0.0 { s / max } else { 0.0 };
        let fade = to_u8(1.0 - v);
        out.extend_from_slice(&[255, fade, fade]);
    }
    out
}

pub fn encode_png(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::InvalidInput("RGB buffer does not match the image size".into()));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        writer.write_image_data(rgb).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

/// PNG of a planar `3×h×w` image with values in `[0, 1]`.
pub fn planar_png(planar: &[f64], h: usize, w: usize) -> Result<Vec<u8>> {
    encode_png(w, h, &planar_to_rgb8(planar, h, w))
}
