use std::path::Path;

use image::imageops::{self, FilterType};
use image::RgbImage;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_IMAGE_SIZE: usize = 112;

/// Largest magnitude a preprocessed pixel can take: `127.5 / 128`.
pub const PIXEL_BOUND: f32 = 0.996_093_75;

pub fn decode(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::DecodeError {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

#[inline]
pub fn normalize_pixel(v: f32) -> f32 {
    (v - 127.5) / 128.0
}

/// Resizes to `size`×`size` (bilinear) if needed and maps each byte through
/// [`normalize_pixel`] into a channel-first `(3, size, size)` tensor.
pub fn preprocess(image: &RgbImage, size: usize) -> Result<Tensor<f32>> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 || size == 0 {
        return Err(Error::BadDimensions(format!(
            "{w}x{h} image to {size}x{size}"
        )));
    }
    let side =
        u32::try_from(size).map_err(|_| Error::BadDimensions(format!("target size {size}")))?;
    let resized;
    let img = if (w, h) == (side, side) {
        image
    } else {
        resized = imageops::resize(image, side, side, FilterType::Triangle);
        &resized
    };
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = normalize_pixel(f32::from(px[c]));
        }
    }
    Tensor::new(vec![3, size, size], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn pixel_mapping() {
        assert_eq!(normalize_pixel(127.5), 0.0);
        assert_eq!(normalize_pixel(255.0), PIXEL_BOUND);
        assert_eq!(normalize_pixel(0.0), -PIXEL_BOUND);
    }

    #[test]
    fn channel_first_layout_and_resize() {
        let mut img = RgbImage::from_pixel(2, 2, Rgb([0, 255, 128]));
        img.put_pixel(1, 0, Rgb([255, 0, 0]));
        let t = preprocess(&img, 2).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert_eq!(
            &t.data()[..4],
            &[-PIXEL_BOUND, PIXEL_BOUND, -PIXEL_BOUND, -PIXEL_BOUND]
        );
        assert_eq!(t.data()[4], PIXEL_BOUND);
        let big = preprocess(
            &RgbImage::from_pixel(40, 30, Rgb([255, 0, 9])),
            DEFAULT_IMAGE_SIZE,
        )
        .unwrap();
        assert_eq!(big.shape(), &[3, 112, 112]);
        assert!(big.data().iter().all(|v| v.abs() <= PIXEL_BOUND));
        assert!(big.data()[..112 * 112].iter().all(|&v| v == PIXEL_BOUND));
    }

    #[test]
    fn errors() {
        assert!(matches!(
            preprocess(&RgbImage::new(0, 5), 4),
            Err(Error::BadDimensions(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        std::fs::write(&p, b"not an image").unwrap();
        assert!(matches!(decode(&p), Err(Error::DecodeError { .. })));
    }
}
