//! PNG and binary PPM (P6) image files as `1×3×H×W` tensors in `[0, 1]`.
//!
//! Pixel values are taken as linear; no colour management is applied.
//! Grey images are replicated to three channels and alpha is dropped.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Depth {
    Eight,
    Sixteen,
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let magic = reader.fill_buf().map_err(|e| Error::io(path, e))?;
    let result = if magic.starts_with(b"\x89PNG") {
        decode_png(reader)
    } else if magic.starts_with(b"P6") {
        decode_ppm(reader)
    } else {
        Err(Error::Format("not a PNG or binary PPM (P6) file".into()))
    };
    result.map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Writes PNG or PPM depending on the extension (`.ppm` → P6, else PNG).
/// Values are clamped to `[0, 1]` and rounded.
pub fn save_image(image: &Tensor<f32>, path: impl AsRef<Path>, depth: Depth) -> Result<()> {
    let path = path.as_ref();
    let (n, c, h, w) = image.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::dim(format!(
            "save_image needs 1×3×H×W, got {:?}",
            image.shape()
        )));
    }
    let max = match depth {
        Depth::Eight => 255.0,
        Depth::Sixteen => 65535.0,
    };
    let plane = h * w;
    let mut samples = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            samples.push((image.data()[ch * plane + p].clamp(0.0, 1.0) * max).round() as u16);
        }
    }
    let bytes: Vec<u8> = match depth {
        Depth::Eight => samples.iter().map(|&v| v as u8).collect(),
        Depth::Sixteen => samples.iter().flat_map(|v| v.to_be_bytes()).collect(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let is_ppm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        write!(out, "P6\n{w} {h}\n{}\n", max as u32).map_err(|e| Error::io(path, e))?;
        out.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    } else {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(match depth {
            Depth::Eight => png::BitDepth::Eight,
            Depth::Sixteen => png::BitDepth::Sixteen,
        });
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(format!("PNG encode: {e}")))?;
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Format(format!("PNG encode: {e}")))?;
        writer
            .finish()
            .map_err(|e| Error::Format(format!("PNG encode: {e}")))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn decode_png<R: BufRead + std::io::Seek>(reader: R) -> Result<Tensor<f32>> {
    let mut dec = png::Decoder::new(reader);
    dec.set_transformations(png::Transformations::EXPAND);
    let mut r = dec
        .read_info()
        .map_err(|e| Error::Format(format!("PNG decode: {e}")))?;
    let size = r
        .output_buffer_size()
        .ok_or_else(|| Error::Format("PNG too large".into()))?;
    let mut buf = vec![0; size];
    let info = r
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("PNG decode: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Format("unexpanded palette image".into())),
    };
    let samples: Vec<f32> = match info.bit_depth {
        png::BitDepth::Eight => buf[..info.buffer_size()]
            .iter()
            .map(|&v| v as f32 / 255.0)
            .collect(),
        png::BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 65535.0)
            .collect(),
        d => return Err(Error::Format(format!("unsupported PNG bit depth {d:?}"))),
    };
    interleaved_to_planar(&samples, w, h, channels)
}

fn decode_ppm<R: BufRead>(mut reader: R) -> Result<Tensor<f32>> {
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        let token = ppm_token(&mut reader)?;
        fields.push(token);
    }
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Format(format!("bad PPM {what} `{s}`")))
    };
    if fields[0] != "P6" {
        return Err(Error::Format("only binary PPM (P6) is supported".into()));
    }
    let (w, h, max) = (
        parse(&fields[1], "width")?,
        parse(&fields[2], "height")?,
        parse(&fields[3], "maxval")?,
    );
    if w == 0 || h == 0 || max == 0 || max > 65535 {
        return Err(Error::Format(format!("bad PPM header {w}×{h} max {max}")));
    }
    let wide = max > 255;
    let mut raw = vec![0u8; w * h * 3 * if wide { 2 } else { 1 }];
    reader
        .read_exact(&mut raw)
        .map_err(|_| Error::Format("truncated PPM pixel data".into()))?;
    let scale = 1.0 / max as f32;
    let samples: Vec<f32> = if wide {
        raw.chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 * scale)
            .collect()
    } else {
        raw.iter().map(|&v| v as f32 * scale).collect()
    };
    interleaved_to_planar(&samples, w, h, 3)
}

/// Next whitespace-delimited header token, skipping `#` comments. Consumes
/// exactly one whitespace byte after the token.
fn ppm_token<R: BufRead>(reader: &mut R) -> Result<String> {
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        reader
            .read_exact(&mut byte)
            .map_err(|_| Error::Format("truncated PPM header".into()))?;
        match byte[0] {
            b'#' if token.is_empty() => {
                let mut skip = Vec::new();
                reader
                    .read_until(b'\n', &mut skip)
                    .map_err(|_| Error::Format("truncated PPM header".into()))?;
            }
            b if b.is_ascii_whitespace() => {
                if !token.is_empty() {
                    break;
                }
            }
            b => token.push(b),
        }
    }
    String::from_utf8(token).map_err(|_| Error::Format("PPM header is not ASCII".into()))
}

fn interleaved_to_planar(
    samples: &[f32],
    w: usize,
    h: usize,
    channels: usize,
) -> Result<Tensor<f32>> {
    let plane = w * h;
    if samples.len() < plane * channels {
        return Err(Error::Format(
            "pixel data shorter than header implies".into(),
        ));
    }
    let mut out = vec![0.0; 3 * plane];
    for p in 0..plane {
        let px = &samples[p * channels..(p + 1) * channels];
        for ch in 0..3 {
            out[ch * plane + p] = if channels < 3 { px[0] } else { px[ch] };
        }
    }
    Tensor::from_vec(&[1, 3, h, w], out)
}
