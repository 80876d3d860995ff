//! 8-bit PNG images (RGB guidance) and label maps (grayscale).

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

fn encode(path: &Path, data: &[u8], h: usize, w: usize, color: png::ColorType) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::format("png", e.to_string());
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(data).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Writes interleaved 8-bit RGB.
pub fn write_rgb(path: impl AsRef<Path>, rgb: &[u8], h: usize, w: usize) -> Result<()> {
    if rgb.len() != h * w * 3 {
        return Err(Error::shape("write_rgb", h * w * 3, rgb.len()));
    }
    encode(path.as_ref(), rgb, h, w, png::ColorType::Rgb)
}

pub fn write_gray(path: impl AsRef<Path>, values: &[u8], h: usize, w: usize) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::shape("write_gray", h * w, values.len()));
    }
    encode(path.as_ref(), values, h, w, png::ColorType::Grayscale)
}

/// Decodes an 8-bit PNG into `(samples, h, w, channels)`; palette images
/// are expanded.
pub fn read_png(path: impl AsRef<Path>) -> Result<(Vec<u8>, usize, usize, usize)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND);
    let png_err = |e: png::DecodingError| Error::format("png", format!("{}: {e}", path.display()));
    let mut reader = dec.read_info().map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::format("png", "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format("png", format!("{}: only 8-bit images are supported", path.display())));
    }
    buf.truncate(info.buffer_size());
    Ok((buf, info.height as usize, info.width as usize, info.color_type.samples()))
}

pub fn read_rgb(path: impl AsRef<Path>) -> Result<(Vec<u8>, usize, usize)> {
    let (buf, h, w, c) = read_png(&path)?;
    match c {
        3 => Ok((buf, h, w)),
        4 => Ok((buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(), h, w)),
        1 => Ok((buf.iter().flat_map(|&g| [g, g, g]).collect(), h, w)),
        _ => Err(Error::format("png", format!("{}: unsupported channel count {c}", path.as_ref().display()))),
    }
}

pub fn read_gray(path: impl AsRef<Path>) -> Result<(Vec<u8>, usize, usize)> {
    let (buf, h, w, c) = read_png(&path)?;
    if c != 1 {
        return Err(Error::format(
            "png",
            format!("{}: expected a grayscale label map, got {c} channels", path.as_ref().display()),
        ));
    }
    Ok((buf, h, w))
}
