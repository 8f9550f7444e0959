//! 8-bit RGB PNG decoding and encoding for 3×H×W unit-range tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use anyhow::{bail, Context, Result};
use ccsbesr_core::Tensor;

/// Decodes a PNG into a 3×H×W tensor in [0, 1]. Grayscale is replicated to
/// three channels, alpha is dropped, and 16-bit samples are reduced to 8 bits.
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).with_context(|| format!("{}: cannot open", path.display()))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .with_context(|| format!("{}: not a decodable PNG", path.display()))?;
    let mut buf = vec![0; reader.output_buffer_size().context("image too large")?];
    let info = reader
        .next_frame(&mut buf)
        .with_context(|| format!("{}: corrupt image data", path.display()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => bail!("{}: unsupported color type {:?}", path.display(), other),
    };
    if info.bit_depth != png::BitDepth::Eight {
        bail!("{}: unsupported bit depth {:?}", path.display(), info.bit_depth);
    }
    let px = &buf[..info.buffer_size()];
    let stride = info.line_size;
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        let row = &px[y * stride..];
        for x in 0..w {
            for c in 0..3 {
                let src = if channels < 3 { 0 } else { c };
                data[(c * h + y) * w + x] = row[x * channels + src] as f32 / 255.0;
            }
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

/// Round-half-up quantization of a unit-range value to 8 bits.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

pub fn write_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        bail!("{}: expected 3 channels, got {}", path.display(), c);
    }
    let d = img.data();
    let mut px = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                px.push(quantize(d[(ch * h + y) * w + x]));
            }
        }
    }
    let file = File::create(path).with_context(|| format!("{}: cannot create", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().with_context(|| format!("{}: cannot write", path.display()))?;
    writer
        .write_image_data(&px)
        .with_context(|| format!("{}: cannot write", path.display()))?;
    writer.finish().with_context(|| format!("{}: cannot write", path.display()))?;
    Ok(())
}

/// Snaps every value onto the 8-bit grid.
pub fn quantized(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| quantize(v) as f32 / 255.0)
}
