//! Image preprocessing shared by training, evaluation, and the service.
//!
//! Every image entering the pipeline is flattened onto white, padded to a
//! centered square, resized to the working resolution, and replicated to
//! three channels. Tensors are channels-last `(B, H, W, 3)` in `[-1, 1]`.

use std::io::Cursor;
use std::path::Path;

use candle_core::{Device, Tensor};
use image::imageops::{self, FilterType};
use image::{DynamicImage, GrayImage, ImageFormat, Rgb, RgbImage};

use crate::error::{Error, Result};

pub fn decode_image(bytes: &[u8]) -> Result<DynamicImage> {
    Ok(image::load_from_memory(bytes)?)
}

pub fn load_image(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io_at(path, e))?;
    decode_image(&bytes)
}

pub fn encode_png(img: &DynamicImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Composites transparent pixels onto white and drops color: sketches are
/// black strokes on white, renders are gray shading on white.
pub fn flatten_to_gray(img: &DynamicImage) -> GrayImage {
    let rgba = img.to_rgba8();
    let mut out = GrayImage::new(rgba.width(), rgba.height());
    for (x, y, p) in rgba.enumerate_pixels() {
        let [r, g, b, a] = p.0.map(f32::from);
        let luma = 0.299 * r + 0.587 * g + 0.114 * b;
        let a = a / 255.0;
        let v = luma * a + 255.0 * (1.0 - a);
        out.put_pixel(x, y, image::Luma([v.round().clamp(0.0, 255.0) as u8]));
    }
    out
}

/// The pinned preprocessing contract: white background, centered square pad,
/// resize to `size`, three identical channels.
pub fn preprocess(img: &DynamicImage, size: u32) -> Result<RgbImage> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::BadImageSize {
            width: img.width() as usize,
            height: img.height() as usize,
            reason: "empty image".into(),
        });
    }
    let gray = flatten_to_gray(img);
    let side = gray.width().max(gray.height());
    let mut square = GrayImage::from_pixel(side, side, image::Luma([255]));
    imageops::overlay(
        &mut square,
        &gray,
        ((side - gray.width()) / 2) as i64,
        ((side - gray.height()) / 2) as i64,
    );
    let resized = if side == size {
        square
    } else {
        imageops::resize(&square, size, size, FilterType::Triangle)
    };
    let mut rgb = RgbImage::new(size, size);
    for (x, y, p) in resized.enumerate_pixels() {
        rgb.put_pixel(x, y, Rgb([p.0[0]; 3]));
    }
    Ok(rgb)
}

pub fn check_latent_size(width: usize, height: usize, multiple: usize) -> Result<()> {
    if width == 0 || height == 0 || width % multiple != 0 || height % multiple != 0 {
        return Err(Error::BadImageSize {
            width,
            height,
            reason: format!("dimensions must be positive multiples of {multiple}"),
        });
    }
    Ok(())
}

/// Stacks equally sized images into `(B, H, W, 3)` with values mapped to `[-1, 1]`.
pub fn images_to_tensor(images: &[RgbImage]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("no images to stack".into()))?;
    let (w, h) = first.dimensions();
    let mut data = Vec::with_capacity(images.len() * (w * h * 3) as usize);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(Error::BadImageSize {
                width: img.width() as usize,
                height: img.height() as usize,
                reason: format!("batch expects {w}x{h}"),
            });
        }
        data.extend(img.as_raw().iter().map(|&v| v as f32 / 127.5 - 1.0));
    }
    Ok(Tensor::from_vec(
        data,
        (images.len(), h as usize, w as usize, 3),
        &Device::Cpu,
    )?)
}

/// Ink intensity in `[0, 1]` (0 = white) of a `size`x`size` thumbnail.
pub fn ink_thumbnail(img: &RgbImage, size: u32) -> Vec<f32> {
    let gray = DynamicImage::ImageRgb8(img.clone()).to_luma8();
    let small = if gray.dimensions() == (size, size) {
        gray
    } else {
        imageops::resize(&gray, size, size, FilterType::Triangle)
    };
    small.as_raw().iter().map(|&v| 1.0 - v as f32 / 255.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgba, RgbaImage};

    #[test]
    fn transparent_strokes_land_on_white() {
        let mut img = RgbaImage::from_pixel(4, 2, Rgba([0, 0, 0, 0]));
        img.put_pixel(1, 1, Rgba([0, 0, 0, 255]));
        let out = preprocess(&DynamicImage::ImageRgba8(img), 4).unwrap();
        assert_eq!(out.dimensions(), (4, 4));
        // padded by one row above, so the stroke lands at (1, 2)
        assert_eq!(out.get_pixel(1, 2).0, [0, 0, 0]);
        assert_eq!(out.get_pixel(0, 0).0, [255, 255, 255]);
    }

    #[test]
    fn tensor_range_and_layout() {
        let mut img = RgbImage::from_pixel(8, 8, Rgb([255, 255, 255]));
        img.put_pixel(2, 1, Rgb([0, 0, 0]));
        let t = images_to_tensor(&[img]).unwrap();
        assert_eq!(t.dims(), &[1, 8, 8, 3]);
        let v = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v[(8 + 2) * 3], -1.0);
        assert_eq!(v[0], 1.0);
    }

    #[test]
    fn size_check() {
        assert!(check_latent_size(64, 64, 8).is_ok());
        assert!(matches!(check_latent_size(60, 64, 8), Err(Error::BadImageSize { .. })));
    }

    #[test]
    fn png_round_trip() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(3, 5, Rgb([9, 9, 9])));
        let back = decode_image(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
        assert!(decode_image(b"not an image").is_err());
    }
}
