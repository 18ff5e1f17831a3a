//! Image representation and IO.
//!
//! Images are `(height, width, 3)` arrays of `f32` in `[0, 1]`. Files on disk
//! are lossless 8-bit RGB PNG; decoding and re-encoding round-trips exactly.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::Array3;

use crate::error::{Error, Result};

pub type Image = Array3<f32>;

/// (height, width) of an image array.
pub fn hw(img: &Image) -> (usize, usize) {
    let s = img.shape();
    (s[0], s[1])
}

pub fn from_rgb8(buf: &RgbImage) -> Image {
    let (w, h) = buf.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, px) in buf.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = f32::from(px.0[c]) / 255.0;
        }
    }
    out
}

pub fn to_rgb8(img: &Image) -> RgbImage {
    let (h, w) = hw(img);
    let mut buf: RgbImage = ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                quantize(img[[y, x, 0]]),
                quantize(img[[y, x, 1]]),
                quantize(img[[y, x, 2]]),
            ];
            buf.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    buf
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .into_rgb8();
    Ok(from_rgb8(&img))
}

/// Load a PNG as raw interleaved RGB bytes plus (height, width). The compact
/// form used for in-memory dataset caches; 4x smaller than float images.
pub fn load_png_rgb8(path: &Path) -> Result<(Vec<u8>, (usize, usize))> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .into_rgb8();
    let (w, h) = img.dimensions();
    Ok((img.into_raw(), (h as usize, w as usize)))
}

/// Decode raw interleaved RGB bytes (as from [`load_png_rgb8`]) into [0,1] floats.
pub fn rgb8_to_image(bytes: &[u8], h: usize, w: usize) -> Image {
    debug_assert_eq!(bytes.len(), h * w * 3);
    let floats: Vec<f32> = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
    Array3::from_shape_vec((h, w, 3), floats).expect("byte length checked above")
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    to_rgb8(img).save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Exact pixel copy of the window at (x, y) with the given extent.
pub fn crop(img: &Image, x: usize, y: usize, width: usize, height: usize) -> Result<Image> {
    let (h, w) = hw(img);
    if x + width > w || y + height > h {
        return Err(Error::Geometry(format!(
            "crop ({x},{y},{width},{height}) exceeds frame {w}x{h}"
        )));
    }
    Ok(img
        .slice(ndarray::s![y..y + height, x..x + width, ..])
        .to_owned())
}

/// Tile images into a grid with `cols` columns, gray padding between tiles.
pub fn contact_sheet(tiles: &[Image], cols: usize) -> Result<Image> {
    if tiles.is_empty() || cols == 0 {
        return Err(Error::Config("contact sheet needs tiles and cols >= 1".into()));
    }
    let (th, tw) = hw(&tiles[0]);
    if tiles.iter().any(|t| hw(t) != (th, tw)) {
        return Err(Error::Geometry("contact sheet tiles must share dimensions".into()));
    }
    let rows = tiles.len().div_ceil(cols);
    let pad = 4usize;
    let height = rows * th + (rows + 1) * pad;
    let width = cols * tw + (cols + 1) * pad;
    let mut sheet = Array3::from_elem((height, width, 3), 0.5f32);
    for (i, tile) in tiles.iter().enumerate() {
        let r = i / cols;
        let c = i % cols;
        let y0 = pad + r * (th + pad);
        let x0 = pad + c * (tw + pad);
        sheet
            .slice_mut(ndarray::s![y0..y0 + th, x0..x0 + tw, ..])
            .assign(tile);
    }
    Ok(sheet)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_round_trip_is_exact() {
        let mut buf: RgbImage = ImageBuffer::new(5, 4);
        for (i, px) in buf.pixels_mut().enumerate() {
            *px = Rgb([(i * 13 % 256) as u8, (i * 7 % 256) as u8, (i * 3 % 256) as u8]);
        }
        let arr = from_rgb8(&buf);
        assert_eq!(to_rgb8(&arr), buf);
    }

    #[test]
    fn crop_rejects_out_of_bounds() {
        let img = Array3::zeros((10, 10, 3));
        assert!(crop(&img, 5, 5, 6, 3).is_err());
        assert!(crop(&img, 0, 0, 10, 10).is_ok());
    }

    #[test]
    fn png_round_trip(){
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let mut img = Array3::zeros((8, 9, 3));
        for y in 0..8 {
            for x in 0..9 {
                img[[y, x, 0]] = (y as f32) / 7.0;
                img[[y, x, 1]] = (x as f32) / 8.0;
                img[[y, x, 2]] = 0.25;
            }
        }
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(to_rgb8(&back), to_rgb8(&img));
    }
}
