use jpeg_encoder::{ColorType, Encoder, SamplingFactor};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn codec_err(msg: impl ToString) -> Error {
    Error::Image {
        path: "<memory>".into(),
        message: msg.to_string(),
    }
}

/// Encodes every batch item as baseline JPEG (4:2:0 chroma subsampling for
/// colour images) at `quality` and decodes it back. Values are rounded and
/// clamped to 8 bits before encoding.
pub fn jpeg_roundtrip<T: Real>(img: &Tensor<T>, quality: u8) -> Result<Tensor<T>> {
    let (n, c, h, w) = img.try_dims4()?;
    if c != 1 && c != 3 {
        return Err(Error::shape(format!("jpeg needs 1 or 3 channels, got {c}")));
    }
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::shape(format!("{h}x{w} exceeds jpeg limits")));
    }
    let mut out = Tensor::zeros(img.shape());
    for b in 0..n {
        let item = img.item(b);
        let mut raw = vec![0u8; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                raw[p * c + ch] = to_u8(item[ch * h * w + p].as_f64());
            }
        }
        let buf = encode(&raw, w, h, c, quality)?;
        let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg).map_err(codec_err)?;
        let pixels: Vec<u8> = if c == 1 {
            decoded.to_luma8().into_raw()
        } else {
            decoded.to_rgb8().into_raw()
        };
        let dst = out.item_mut(b);
        for ch in 0..c {
            for p in 0..h * w {
                dst[ch * h * w + p] = T::lit(pixels[p * c + ch] as f64);
            }
        }
    }
    Ok(out)
}

/// Baseline JPEG bytes for interleaved 8-bit samples (4:2:0 for colour).
pub(crate) fn encode(raw: &[u8], w: usize, h: usize, channels: usize, quality: u8) -> Result<Vec<u8>> {
    let color = if channels == 1 { ColorType::Luma } else { ColorType::Rgb };
    let mut buf = Vec::new();
    let mut enc = Encoder::new(&mut buf, quality);
    enc.set_sampling_factor(SamplingFactor::F_2_2);
    enc.encode(raw, w as u16, h as u16, color).map_err(codec_err)?;
    Ok(buf)
}

/// Round half away from zero, then clamp to `[0, 255]`.
pub(crate) fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_convention() {
        assert_eq!(to_u8(2.5), 3);
        assert_eq!(to_u8(-3.0), 0);
        assert_eq!(to_u8(300.0), 255);
        assert_eq!(to_u8(127.49), 127);
    }

    #[test]
    fn roundtrip_preserves_shape_and_flat_regions() {
        let img = Tensor::<f32>::full(&[2, 3, 24, 40], 100.0);
        let out = jpeg_roundtrip(&img, 90).unwrap();
        assert_eq!(out.shape(), img.shape());
        assert!(out.data().iter().all(|v| (v - 100.0).abs() <= 2.0));
    }
}
