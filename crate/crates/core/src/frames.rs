//! 8-bit frame I/O: PNG (gray, RGB, with or without alpha) and binary PPM.
//!
//! Frames load as (1, c, h, w) tensors in [0, 1]; writing quantizes with
//! `round(255·v)` after clamping, so 8-bit images round-trip exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Shape};

fn invalid(path: &Path, m: impl std::fmt::Display) -> Error {
    Error::Invalid(format!("{}: {m}", path.display()))
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn planar(bytes: &[u8], c_in: usize, c_out: usize, h: usize, w: usize) -> DenseTensor {
    DenseTensor::from_fn(Shape::new(1, c_out, h, w), |_, c, y, x| bytes[(y * w + x) * c_in + c] as f32 / 255.0)
}

fn interleaved(t: &DenseTensor) -> Result<(Vec<u8>, usize)> {
    let s = t.shape();
    if s.n != 1 || !(s.c == 1 || s.c == 3) {
        return Err(Error::Shape(format!("frames are (1, 1|3, h, w), got {s}")));
    }
    let mut out = Vec::with_capacity(s.len());
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..s.c {
                out.push(quantize(t.at(0, c, y, x)));
            }
        }
    }
    Ok((out, s.c))
}

pub fn read_png(path: &Path) -> Result<DenseTensor> {
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut r = dec.read_info().map_err(|e| invalid(path, e))?;
    let mut buf = vec![0; r.output_buffer_size().ok_or_else(|| invalid(path, "image too large"))?];
    let info = r.next_frame(&mut buf).map_err(|e| invalid(path, e))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let (c_in, c_out) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(invalid(path, "unexpanded palette")),
    };
    Ok(planar(&buf[..info.buffer_size()], c_in, c_out, h, w))
}

pub fn write_png(path: &Path, t: &DenseTensor) -> Result<()> {
    let (bytes, c) = interleaved(t)?;
    let s = t.shape();
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), s.w as u32, s.h as u32);
    enc.set_color(if c == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
    enc.set_depth(png::BitDepth::Eight);
    let mut wr = enc.write_header().map_err(|e| invalid(path, e))?;
    wr.write_image_data(&bytes).map_err(|e| invalid(path, e))?;
    wr.finish().map_err(|e| invalid(path, e))
}

fn ppm_token(b: &[u8], at: &mut usize) -> Option<usize> {
    loop {
        while *at < b.len() && b[*at].is_ascii_whitespace() {
            *at += 1;
        }
        if *at < b.len() && b[*at] == b'#' {
            while *at < b.len() && b[*at] != b'\n' {
                *at += 1;
            }
        } else {
            break;
        }
    }
    let start = *at;
    while *at < b.len() && b[*at].is_ascii_digit() {
        *at += 1;
    }
    std::str::from_utf8(&b[start..*at]).ok()?.parse().ok()
}

/// Binary `P6` with maxval 255.
pub fn read_ppm(path: &Path) -> Result<DenseTensor> {
    let mut b = Vec::new();
    File::open(path)?.read_to_end(&mut b)?;
    if !b.starts_with(b"P6") {
        return Err(invalid(path, "not a binary PPM"));
    }
    let mut at = 2;
    let w = ppm_token(&b, &mut at).ok_or_else(|| invalid(path, "bad width"))?;
    let h = ppm_token(&b, &mut at).ok_or_else(|| invalid(path, "bad height"))?;
    let max = ppm_token(&b, &mut at).ok_or_else(|| invalid(path, "bad maxval"))?;
    if max != 255 {
        return Err(invalid(path, format!("maxval {max}, only 255 is supported")));
    }
    let data = b.get(at + 1..at + 1 + 3 * w * h).ok_or_else(|| invalid(path, "truncated pixel data"))?;
    Ok(planar(data, 3, 3, h, w))
}

pub fn write_ppm(path: &Path, t: &DenseTensor) -> Result<()> {
    let (bytes, c) = interleaved(t)?;
    if c != 3 {
        return Err(Error::Shape("PPM frames are RGB".into()));
    }
    let s = t.shape();
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P6\n{} {}\n255\n", s.w, s.h)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

/// Reads a `.png` or `.ppm` frame.
pub fn read_frame(path: &Path) -> Result<DenseTensor> {
    match extension(path).as_str() {
        "png" => read_png(path),
        "ppm" => read_ppm(path),
        e => Err(invalid(path, format!("unsupported frame format `{e}`"))),
    }
}

pub fn write_frame(path: &Path, t: &DenseTensor) -> Result<()> {
    match extension(path).as_str() {
        "png" => write_png(path, t),
        "ppm" => write_ppm(path, t),
        e => Err(invalid(path, format!("unsupported frame format `{e}`"))),
    }
}

/// `.png`/`.ppm` files of a directory in name order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && matches!(extension(p).as_str(), "png" | "ppm"))
        .collect();
    v.sort();
    Ok(v)
}

/// Loads a directory of equally sized frames as an (n, 3, h, w) clip.
pub fn read_clip(dir: &Path) -> Result<DenseTensor> {
    let paths = list_frames(dir)?;
    if paths.is_empty() {
        return Err(invalid(dir, "no frames"));
    }
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let f = read_frame(p)?;
        let f = if f.shape().c == 1 { DenseTensor::concat_channels(&[&f, &f, &f])? } else { f };
        if let Some(first) = frames.first() {
            if DenseTensor::shape(first) != f.shape() {
                return Err(invalid(p, format!("size {} differs from the first frame", f.shape())));
            }
        }
        frames.push(f);
    }
    DenseTensor::concat_batch(&frames.iter().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize) -> DenseTensor {
        DenseTensor::from_fn(Shape::new(1, c, 5, 7), |_, c, y, x| ((c * 35 + y * 7 + x) * 3 % 256) as f32 / 255.0)
    }

    #[test]
    fn png_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (name, c) in [("a.png", 1), ("b.png", 3), ("c.ppm", 3)] {
            let p = dir.path().join(name);
            let t = ramp(c);
            write_frame(&p, &t).unwrap();
            assert_eq!(read_frame(&p).unwrap(), t, "{name}");
        }
        assert!(write_ppm(&dir.path().join("d.ppm"), &ramp(1)).is_err());
        assert_eq!(list_frames(dir.path()).unwrap().len(), 3);
    }

    #[test]
    fn ppm_comments_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        std::fs::write(&p, b"P6\n# c\n1 1\n255\n\x00\x80\xff").unwrap();
        let t = read_ppm(&p).unwrap();
        assert_eq!(t.data(), &[0.0, 128.0 / 255.0, 1.0]);
        std::fs::write(&p, b"P6\n2 2\n255\n\x00").unwrap();
        assert!(read_ppm(&p).is_err());
    }
}
