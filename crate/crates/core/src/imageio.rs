//! 8-bit PNG serialization of canvases.
//!
//! Quantization happens here and nowhere else: the optimizer state stays in
//! `f64` and is rounded to the nearest 8-bit level only when written.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::canvas::PixelCanvas;
use crate::error::{Error, Result};

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Interleaved 8-bit samples, channel-last.
pub fn to_interleaved_u8(canvas: &PixelCanvas) -> Vec<u8> {
    let (c, h, w) = canvas.shape();
    let mut out = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(quantize(canvas.get(ch, y, x)));
            }
        }
    }
    out
}

fn color_type(channels: usize) -> Result<png::ColorType> {
    match channels {
        1 => Ok(png::ColorType::Grayscale),
        3 => Ok(png::ColorType::Rgb),
        c => Err(Error::Shape(format!(
            "PNG output needs 1 or 3 channels, got {c}"
        ))),
    }
}

pub fn png_bytes(canvas: &PixelCanvas) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, canvas.width() as u32, canvas.height() as u32);
        enc.set_color(color_type(canvas.channels())?);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&to_interleaved_u8(canvas))?;
    }
    Ok(buf)
}

pub fn write_png(path: &Path, canvas: &PixelCanvas) -> Result<()> {
    let bytes = png_bytes(canvas)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit grayscale, RGB or RGBA PNG as a 3-channel canvas in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<PixelCanvas> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![
        0u8;
        reader
            .output_buffer_size()
            .ok_or_else(|| Error::Shape("PNG too large".into()))?
    ];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::Shape(format!(
                "unsupported PNG color type {other:?}"
            )))
        }
    };
    let mut canvas = PixelCanvas::filled(3, h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let px = &buf[(y * w + x) * stride..];
            for c in 0..3 {
                let sample = if stride >= 3 { px[c] } else { px[0] };
                canvas.set(c, y, x, f64::from(sample) / 255.0);
            }
        }
    }
    Ok(canvas)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to `path` through a buffered file handle.
pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
