//! Binary PGM (P5) and PNG reading and writing.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use super::GrayImage;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

fn quantize(v: f32, max: f32) -> u32 {
    (v.clamp(0.0, 1.0) * max).round() as u32
}

/// Encodes pixels (clamped to [0,1]) as a P5 PGM.
pub fn encode_pgm(img: &GrayImage, depth: BitDepth) -> Vec<u8> {
    let maxval: u32 = match depth {
        BitDepth::Eight => 255,
        BitDepth::Sixteen => 65535,
    };
    let mut out = format!("P5\n{} {}\n{}\n", img.width(), img.height(), maxval).into_bytes();
    for &v in img.pixels() {
        let q = quantize(v, maxval as f32);
        match depth {
            BitDepth::Eight => out.push(q as u8),
            BitDepth::Sixteen => out.extend_from_slice(&(q as u16).to_be_bytes()),
        }
    }
    out
}

pub fn decode_pgm(bytes: &[u8], context: &str) -> Result<GrayImage> {
    let bad = |why: &str| Error::parse(context, why.to_string());
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if tokens[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| bad(&format!("invalid {what}")))
    };
    let (w, h, maxval) = (
        num(tokens[1], "width")?,
        num(tokens[2], "height")?,
        num(tokens[3], "maxval")?,
    );
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("invalid dimensions or maxval"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = w * h * bps;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| bad("truncated raster"))?;
    let m = maxval as f32;
    let pixels = if bps == 1 {
        raster.iter().map(|&b| (b as f32 / m).min(1.0)).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f32 / m).min(1.0))
            .collect()
    };
    GrayImage::new(h, w, pixels)
}

pub fn write_pgm(path: &Path, img: &GrayImage, depth: BitDepth) -> Result<()> {
    fs::write(path, encode_pgm(img, depth)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, &path.display().to_string())
}

fn png_encoder<'a>(
    path: &Path,
    w: usize,
    h: usize,
    color: png::ColorType,
    depth: png::BitDepth,
) -> Result<png::Writer<BufWriter<fs::File>>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    enc.write_header()
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))
}

pub fn write_png_gray(path: &Path, img: &GrayImage) -> Result<()> {
    let data: Vec<u8> = img
        .pixels()
        .iter()
        .map(|&v| quantize(v, 255.0) as u8)
        .collect();
    let mut w = png_encoder(
        path,
        img.width(),
        img.height(),
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
    )?;
    w.write_image_data(&data)
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))
}

/// Writes interleaved 8-bit RGB.
pub fn write_png_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3, "rgb buffer size");
    let mut w = png_encoder(
        path,
        width,
        height,
        png::ColorType::Rgb,
        png::BitDepth::Eight,
    )?;
    w.write_image_data(rgb)
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))
}

/// Reads an 8- or 16-bit grayscale PNG (RGB is converted by channel mean).
pub fn read_png_gray(path: &Path) -> Result<GrayImage> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let perr = |e: png::DecodingError| Error::Png(format!("{}: {e}", path.display()));
    let mut reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(perr)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(perr)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Png(format!(
                "{}: palette images unsupported",
                path.display()
            )))
        }
    };
    let samples: Vec<f32> = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 65535.0)
            .collect(),
        png::BitDepth::Eight => buf[..info.buffer_size()]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect(),
        d => {
            return Err(Error::Png(format!(
                "{}: unsupported bit depth {d:?}",
                path.display()
            )))
        }
    };
    let color = channels.min(3);
    let pixels = samples
        .chunks_exact(channels)
        .map(|px| {
            if color == 3 {
                (px[0] + px[1] + px[2]) / 3.0
            } else {
                px[0]
            }
        })
        .collect();
    GrayImage::new(h, w, pixels)
}

/// Reads `.pgm` or `.png` by extension.
pub fn read_image(path: &Path) -> Result<GrayImage> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => read_png_gray(path),
        _ => read_pgm(path),
    }
}
