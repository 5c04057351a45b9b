//! Image payload compression: 16-bit millimetre PNG for depth, JPEG for colour.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::camera::{ColorImage, DepthImage};

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("image encode failed: {0}")]
    Encode(String),
    #[error("image decode failed: {0}")]
    Decode(String),
    #[error("decoded image is {got_w}x{got_h}, header says {want_w}x{want_h}")]
    Size {
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
}

pub const DEFAULT_JPEG_QUALITY: u8 = 90;

pub fn encode_depth_png(depth: &DepthImage) -> Result<Vec<u8>, CodecError> {
    let mm = depth.to_millimetres();
    let bytes: Vec<u8> = mm.iter().flat_map(|v| v.to_ne_bytes()).collect();
    let mut out = Vec::new();
    PngEncoder::new_with_quality(&mut out, CompressionType::Default, FilterType::Adaptive)
        .write_image(
            &bytes,
            depth.width as u32,
            depth.height as u32,
            ExtendedColorType::L16,
        )
        .map_err(|e| CodecError::Encode(e.to_string()))?;
    Ok(out)
}

/// Raw millimetre values of a depth PNG.
pub fn decode_depth_png_mm(bytes: &[u8]) -> Result<(u32, u32, Vec<u16>), CodecError> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| CodecError::Decode(e.to_string()))?
        .into_luma16();
    let (w, h) = img.dimensions();
    Ok((w, h, img.into_raw()))
}

pub fn decode_depth_png(bytes: &[u8]) -> Result<DepthImage, CodecError> {
    let (w, h, mm) = decode_depth_png_mm(bytes)?;
    Ok(DepthImage::from_millimetres(w as usize, h as usize, &mm))
}

pub fn encode_color_jpeg(color: &ColorImage, quality: u8) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::new();
    JpegEncoder::new_with_quality(&mut out, quality.clamp(1, 100))
        .write_image(
            &color.as_bytes(),
            color.width as u32,
            color.height as u32,
            ExtendedColorType::Rgb8,
        )
        .map_err(|e| CodecError::Encode(e.to_string()))?;
    Ok(out)
}

pub fn decode_color_jpeg(bytes: &[u8]) -> Result<ColorImage, CodecError> {
    let img = image::ImageReader::with_format(Cursor::new(bytes), ImageFormat::Jpeg)
        .decode()
        .map_err(|e| CodecError::Decode(e.to_string()))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    ColorImage::from_bytes(w as usize, h as usize, img.as_raw())
        .map_err(|e| CodecError::Decode(e.to_string()))
}
