use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{contract, Error, Result};
use crate::nncore::Tensor;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn decode_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn save(path: &Path, write: impl FnOnce(&mut Vec<u8>) -> image::ImageResult<()>) -> Result<()> {
    ensure_parent(path)?;
    let mut bytes = Vec::new();
    write(&mut bytes).map_err(|e| decode_err(path, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn png_writer(img_bytes: &mut Vec<u8>) -> image::codecs::png::PngEncoder<&mut Vec<u8>> {
    image::codecs::png::PngEncoder::new(img_bytes)
}

/// Writes an `h x w x 3` image in [0, 1] as 8-bit RGB PNG.
pub fn save_rgb(path: &Path, img: &Tensor) -> Result<()> {
    let s = img.shape();
    contract!(s.len() == 3 && s[2] == 3, "save_rgb expects h x w x 3, got {s:?}");
    let buf: RgbImage = ImageBuffer::from_fn(s[1] as u32, s[0] as u32, |x, y| {
        let i = (y as usize * s[1] + x as usize) * 3;
        let d = img.data();
        Rgb([to_u8(d[i]), to_u8(d[i + 1]), to_u8(d[i + 2])])
    });
    save(path, |b| buf.write_with_encoder(png_writer(b)))
}

/// Writes an `h x w` (or `h x w x 1`) map in [0, 1] as 8-bit grayscale PNG.
pub fn save_gray(path: &Path, map: &Tensor) -> Result<()> {
    let s = map.shape();
    contract!(
        s.len() == 2 || (s.len() == 3 && s[2] == 1),
        "save_gray expects h x w, got {s:?}"
    );
    let buf: GrayImage = ImageBuffer::from_fn(s[1] as u32, s[0] as u32, |x, y| {
        Luma([to_u8(map.data()[y as usize * s[1] + x as usize])])
    });
    save(path, |b| buf.write_with_encoder(png_writer(b)))
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| decode_err(path, e))
}

pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

pub fn load_gray(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize], data)
}

/// Loads a mask and rounds it to {0, 1}.
pub fn load_binary(path: &Path) -> Result<Tensor> {
    Ok(load_gray(path)?.map(|v| (v >= 0.5) as u8 as f64))
}
