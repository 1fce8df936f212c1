//! PNG and PPM reading and writing. Pixel values are stored in `[0, 1]`;
//! writers clamp and round to the output bit depth.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::sampler::{FlatImage, Image, OcclusionMask};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Reads PNG (8 or 16 bit) or PNM. Gray images give one channel, anything
/// else three (alpha is dropped).
pub fn read_image(path: &Path) -> Result<Image> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = !img.color().has_color();
    let wide = img.color().bytes_per_pixel() / img.color().channel_count() > 1;
    let (channels, data): (usize, Vec<f64>) = match (gray, wide) {
        (true, false) => (
            1,
            img.to_luma8()
                .into_raw()
                .into_iter()
                .map(|v| v as f64 / 255.0)
                .collect(),
        ),
        (true, true) => (
            1,
            img.to_luma16()
                .into_raw()
                .into_iter()
                .map(|v| v as f64 / 65535.0)
                .collect(),
        ),
        (false, false) => (
            3,
            img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        ),
        (false, true) => (
            3,
            img.to_rgb16()
                .into_raw()
                .into_iter()
                .map(|v| v as f64 / 65535.0)
                .collect(),
        ),
    };
    Image::new(h, w, channels, data)
}

fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit PNG, gray for one channel, RGB for three.
pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let (w, h) = (image.width() as u32, image.height() as u32);
    let raw: Vec<u8> = image.data().iter().map(|v| quantize8(*v)).collect();
    let dynamic = match image.channels() {
        1 => DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, raw).expect("buffer size")),
        3 => DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, raw).expect("buffer size")),
        c => return Err(Error::invalid(format!("cannot write a {c}-channel image as PNG"))),
    };
    let mut out = Cursor::new(Vec::new());
    dynamic
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| image_err(path, e))?;
    write_atomic(path, &out.into_inner())
}

/// Binary PPM (P6); gray images are replicated into three channels.
pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let c = image.channels();
    if c != 1 && c != 3 {
        return Err(Error::invalid(format!("cannot write a {c}-channel image as PPM")));
    }
    let raw: Vec<u8> = image
        .data()
        .chunks(c)
        .flat_map(|px| {
            let rgb = if c == 1 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
            rgb.map(quantize8)
        })
        .collect();
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(
            &raw,
            image.width() as u32,
            image.height() as u32,
            ExtendedColorType::Rgb8,
        )
        .map_err(|e| image_err(path, e))?;
    write_atomic(path, &out)
}

/// 16-bit gray PNG of `values` (row-major `height x width`) mapped linearly
/// from `[lo, hi]` onto the full range.
pub fn write_png16_gray(path: &Path, values: &[f64], height: usize, width: usize, lo: f64, hi: f64) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::invalid("value buffer does not match the image size"));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let raw: Vec<u16> = values
        .iter()
        .map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img =
        image::ImageBuffer::<image::Luma<u16>, _>::from_raw(width as u32, height as u32, raw).expect("buffer size");
    let mut out = Cursor::new(Vec::new());
    DynamicImage::ImageLuma16(img)
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| image_err(path, e))?;
    write_atomic(path, &out.into_inner())
}

/// 1-bit gray PNG over the `height x width` grid; white is visible.
pub fn write_mask_png(path: &Path, mask: &OcclusionMask, height: usize, width: usize) -> Result<()> {
    if mask.len() != height * width {
        return Err(Error::invalid("mask does not match the grid size"));
    }
    let stride = width.div_ceil(8);
    let mut packed = vec![0u8; stride * height];
    for (i, &bit) in mask.bits().iter().enumerate() {
        if bit {
            let (r, c) = (i / width, i % width);
            packed[r * stride + c / 8] |= 0x80 >> (c % 8);
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
        writer.write_image_data(&packed).map_err(|e| image_err(path, e))?;
        writer.finish().map_err(|e| image_err(path, e))?;
    }
    write_atomic(path, &out)
}

/// Reads a mask PNG of any gray depth; pixels above half intensity are visible.
pub fn read_mask_png(path: &Path) -> Result<(OcclusionMask, usize, usize)> {
    let img = read_image(path)?;
    let gray = if img.channels() == 1 { img } else { img.to_gray() };
    let bits = gray.data().iter().map(|v| *v > 0.5).collect();
    Ok((OcclusionMask::new(bits), gray.height(), gray.width()))
}

/// Views a flat image over its `height x width` output grid.
pub fn flat_to_image(flat: &FlatImage, height: usize, width: usize) -> Result<Image> {
    if flat.num_points() != height * width {
        return Err(Error::invalid(format!(
            "{} grid values cannot fill a {height}x{width} image",
            flat.num_points()
        )));
    }
    Image::new(height, width, flat.channels(), flat.values().to_vec())
}

pub fn image_to_flat(image: &Image) -> FlatImage {
    FlatImage::new(image.height() * image.width(), image.channels(), image.data().to_vec()).expect("sizes agree")
}
