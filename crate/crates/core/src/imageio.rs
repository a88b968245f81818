//! PNG/GIF conversion between `[0, 1]` float frames and 8-bit files.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame as GifFrame, ImageFormat, RgbImage, RgbaImage};
use ndarray::{Array3, ArrayView3};

pub type ImageResult<T> = Result<T, image::ImageError>;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_rgb_image(frame: ArrayView3<'_, f32>) -> RgbImage {
    let (h, w, _) = frame.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([
            to_u8(frame[[y, x, 0]]),
            to_u8(frame[[y, x, 1]]),
            to_u8(frame[[y, x, 2]]),
        ])
    })
}

pub fn from_rgb_image(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

pub fn encode_png(frame: ArrayView3<'_, f32>) -> ImageResult<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    to_rgb_image(frame).write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> ImageResult<Array3<f32>> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
    Ok(from_rgb_image(&img))
}

pub fn write_png(path: &Path, frame: ArrayView3<'_, f32>) -> ImageResult<()> {
    let bytes = encode_png(frame)?;
    fs::write(path, bytes).map_err(image::ImageError::IoError)
}

pub fn read_png(path: &Path) -> ImageResult<Array3<f32>> {
    let bytes = fs::read(path).map_err(image::ImageError::IoError)?;
    decode_png(&bytes)
}

/// Looping animated GIF, `delay_ms` per frame.
pub fn write_gif(path: &Path, frames: &[Array3<f32>], delay_ms: u32) -> ImageResult<()> {
    let file = fs::File::create(path).map_err(image::ImageError::IoError)?;
    let mut enc = GifEncoder::new(file);
    enc.set_repeat(Repeat::Infinite)?;
    for f in frames {
        let rgb = to_rgb_image(f.view());
        let rgba = RgbaImage::from_fn(rgb.width(), rgb.height(), |x, y| {
            let p = rgb.get_pixel(x, y);
            image::Rgba([p[0], p[1], p[2], 255])
        });
        enc.encode_frame(GifFrame::from_parts(
            rgba,
            0,
            0,
            Delay::from_numer_denom_ms(delay_ms, 1),
        ))?;
    }
    Ok(())
}
