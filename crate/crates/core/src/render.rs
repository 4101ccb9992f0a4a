//! PNG encoding of planes and error maps.

use crate::error::{Error, Result};
use crate::kspace::FrequencyMask;
use crate::tensor::{Plane, Real};

fn encode(w: usize, h: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer.write_image_data(data).map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit grayscale PNG of `p`, mapping `[lo, hi]` to `[0, 255]`.
pub fn gray_png<T: Real>(p: &Plane<T>, lo: f64, hi: f64) -> Result<Vec<u8>> {
    if !(hi > lo) {
        return Err(Error::InvalidArgument(format!("empty display range [{lo}, {hi}]")));
    }
    let bytes: Vec<u8> = p.data.iter().map(|v| to_byte((v.as_f64() - lo) / (hi - lo))).collect();
    encode(p.w, p.h, png::ColorType::Grayscale, &bytes)
}

/// Decodes an 8-bit grayscale or RGB PNG to `[0, 1]` (RGB is averaged).
pub fn decode_gray_png(bytes: &[u8]) -> Result<Plane<f64>> {
    let dec = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| Error::Png("image too large".into()))?
    ];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let ch = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::Png(format!("unsupported color type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = info.line_size;
    Ok(Plane::from_fn(h, w, |i, j| {
        let px = &buf[i * stride + j * ch..];
        let n = ch.min(3);
        px[..n].iter().map(|&b| b as f64).sum::<f64>() / (255.0 * n as f64)
    }))
}

/// Piecewise-linear "inferno"-like colormap on `[0, 1]`.
pub fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 0.016],
        [0.341, 0.063, 0.431],
        [0.736, 0.216, 0.329],
        [0.976, 0.557, 0.035],
        [0.988, 1.0, 0.643],
    ];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let c = |k: usize| to_byte(STOPS[i][k] * (1.0 - f) + STOPS[i + 1][k] * f);
    [c(0), c(1), c(2)]
}

/// `|sr - hr|` and the value the top of the colormap stands for.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMap {
    pub values: Plane<f64>,
    /// Max absolute difference.
    pub max: f64,
}

pub fn error_map<T: Real>(sr: &Plane<T>, hr: &Plane<T>) -> Result<ErrorMap> {
    if sr.dims() != hr.dims() {
        return Err(Error::Dims(format!(
            "error map inputs differ: {:?} vs {:?}",
            sr.dims(),
            hr.dims()
        )));
    }
    let values = Plane {
        h: sr.h,
        w: sr.w,
        data: sr
            .data
            .iter()
            .zip(&hr.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .collect(),
    };
    let max = values.data.iter().fold(0.0f64, |m, &v| m.max(v));
    Ok(ErrorMap { values, max })
}

impl ErrorMap {
    /// RGB PNG with values scaled by `vmax` (the map's own max if `None`).
    pub fn to_png(&self, vmax: Option<f64>) -> Result<Vec<u8>> {
        let top = vmax.unwrap_or(self.max);
        let scale = if top > 0.0 { 1.0 / top } else { 0.0 };
        let mut bytes = Vec::with_capacity(self.values.data.len() * 3);
        for &v in &self.values.data {
            bytes.extend_from_slice(&colormap(v * scale));
        }
        encode(self.values.w, self.values.h, png::ColorType::Rgb, &bytes)
    }
}

/// Pass band white, stop band black.
pub fn mask_png(mask: &FrequencyMask) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = mask.values.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
    encode(mask.w, mask.h, png::ColorType::Grayscale, &bytes)
}
