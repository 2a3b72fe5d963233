//! Reading and writing 8-bit RGB files as `[1, 3, h, w]` tensors on the
//! `[0, 255]` scale.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub fn read_rgb<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    let mut t = Tensor::zeros(&[1, 3, h, w]);
    let dst = t.data_mut();
    for p in 0..h * w {
        for c in 0..3 {
            dst[c * h * w + p] = T::lit(raw[p * 3 + c] as f64);
        }
    }
    Ok(t)
}

/// Quantises batch item 0 (round half away from zero, clamp) and writes it.
/// The format follows the file extension (PNG or JPEG at quality 95).
pub fn write_rgb<T: Real>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let (_, c, h, w) = img.try_dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("expected an RGB image, got {c} channels")));
    }
    let item = img.item(0);
    let mut raw = vec![0u8; 3 * h * w];
    for p in 0..h * w {
        for ch in 0..3 {
            raw[p * 3 + ch] = crate::degradation::jpeg::to_u8(item[ch * h * w + p].as_f64());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let is_jpeg = matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("jpg" | "jpeg")
    );
    if is_jpeg {
        crate::degradation::jpeg::encode(&raw, w, h, 3, 95)
            .and_then(|bytes| std::fs::write(path, bytes).map_err(|e| Error::io(path, e)))
    } else {
        image::RgbImage::from_raw(w as u32, h as u32, raw)
            .expect("buffer sized for image")
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }
}

/// `[0, 255] -> [0, 1]`.
pub fn to_unit<T: Real>(img: &Tensor<T>) -> Tensor<T> {
    img.scale(T::one() / T::lit(255.0))
}

/// `[0, 1] -> [0, 255]`.
pub fn from_unit<T: Real>(img: &Tensor<T>) -> Tensor<T> {
    img.scale(T::lit(255.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_lossless_for_integers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Tensor::<f32>::from_fn(&[1, 3, 5, 7], |i| ((i * 37) % 256) as f32);
        write_rgb(&path, &img).unwrap();
        assert_eq!(read_rgb::<f32>(&path).unwrap(), img);
    }

    #[test]
    fn unreadable_file_is_an_image_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not a png").unwrap();
        assert!(matches!(read_rgb::<f32>(&path), Err(Error::Image { .. })));
    }
}
