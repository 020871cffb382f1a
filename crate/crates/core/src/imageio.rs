//! PNG conversion for `[3, H, W]` images and `[H, W]` masks.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn image_to_rgb(x: &Tensor) -> Result<RgbImage> {
    let (h, w) = match *x.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(Error::shape("image_to_rgb", format!("{s:?}"))),
    };
    let d = x.data();
    let plane = h * w;
    Ok(RgbImage::from_fn(w as u32, h as u32, |px, py| {
        let i = py as usize * w + px as usize;
        image::Rgb([to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])])
    }))
}

pub fn rgb_to_image(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (px, py, p) in img.enumerate_pixels() {
        let i = py as usize * w + px as usize;
        for c in 0..3 {
            data[c * plane + i] = p.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("shape from image dims")
}

pub fn encode_png(x: &Tensor) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    image_to_rgb(x)?.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    Ok(rgb_to_image(&img.to_rgb8()))
}

pub fn save_png(path: impl AsRef<Path>, x: &Tensor) -> Result<()> {
    std::fs::write(path, encode_png(x)?)?;
    Ok(())
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode_png(&std::fs::read(path)?)
}

/// `[H, W]` mask to an 8-bit grayscale PNG (0 or 255).
pub fn encode_mask_png(mask: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *mask.shape() {
        [h, w] => (h, w),
        ref s => return Err(Error::shape("encode_mask_png", format!("{s:?}"))),
    };
    let d = mask.data();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if d[y as usize * w + x as usize] >= 0.5 { 255 } else { 0 }])
    });
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Decodes a mask PNG; pixels at or above half intensity become 1.
pub fn decode_mask_png(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[h, w], data)
}

pub fn load_mask_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode_mask_png(&std::fs::read(path)?)
}

/// Rounds an image to the 8-bit grid a PNG round trip would produce.
pub fn quantize_to_u8_grid(x: &Tensor) -> Tensor {
    x.map(|v| to_u8(v) as f64 / 255.0)
}
