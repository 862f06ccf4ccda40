//! File formats: 8-bit sRGB PNG, little-endian PFM and ASCII OBJ.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Channel value to an 8-bit code: clamp to `[0, 1]`, then round.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an RGB image; values are taken as already sRGB-encoded.
pub fn write_png(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let mut enc = png::Encoder::new(create(path)?, img.width() as u32, img.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_source_srgb(png::SrgbRenderingIntent::Perceptual);
    let bytes: Vec<u8> = img.data().iter().map(|v| quantize(*v)).collect();
    let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    w.write_image_data(&bytes).map_err(|e| Error::Png(e.to_string()))?;
    w.finish().map_err(|e| Error::Png(e.to_string()))
}

/// Reads an 8-bit RGB or RGBA PNG (alpha dropped) into `[0, 1]` values.
pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut reader = png::Decoder::new(file).read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!("{}: only 8-bit images are supported", path.display())));
    }
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        c => return Err(Error::Png(format!("{}: unsupported colour type {c:?}", path.display()))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            data.extend(row[x * stride..x * stride + 3].iter().map(|b| *b as f64 / 255.0));
        }
    }
    Image::new(w, h, data)
}

/// Writes a 1- or 3-channel float map as little-endian PFM. `data` is
/// row-major from the top row; PFM stores rows bottom-up.
pub fn write_pfm(path: impl AsRef<Path>, width: usize, height: usize, channels: usize, data: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let tag = match channels {
        1 => "Pf",
        3 => "PF",
        _ => return Err(Error::invalid(format!("PFM supports 1 or 3 channels, got {channels}"))),
    };
    if data.len() != width * height * channels {
        return Err(Error::Shape(format!("PFM {width}×{height}×{channels} needs {} values", width * height * channels)));
    }
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    write!(w, "{tag}\n{width} {height}\n-1.0\n").map_err(io)?;
    for y in (0..height).rev() {
        for v in &data[y * width * channels..(y + 1) * width * channels] {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn write_image_pfm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    write_pfm(path, img.width(), img.height(), 3, img.data())
}

/// Reads a PFM of either byte order: `(width, height, channels, data)`,
/// rows top-down.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<f64>)> {
    let path = path.as_ref();
    let bad = |m: &str| Error::invalid(format!("{}: {m}", path.display()));
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut header = Vec::new();
    for _ in 0..3 {
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        header.push(line.trim().to_string());
    }
    let channels = match header[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err(bad("not a PFM file")),
    };
    let mut dims = header[1].split_whitespace().map(|t| t.parse::<usize>());
    let (width, height) = match (dims.next(), dims.next()) {
        (Some(Ok(w)), Some(Ok(h))) => (w, h),
        _ => return Err(bad("bad dimensions")),
    };
    let scale: f64 = header[2].parse().map_err(|_| bad("bad scale"))?;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    let n = width * height * channels;
    if raw.len() < n * 4 {
        return Err(bad("truncated pixel data"));
    }
    let vals: Vec<f64> = raw[..n * 4]
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            (if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
        })
        .collect();
    let mut data = Vec::with_capacity(n);
    for y in (0..height).rev() {
        data.extend_from_slice(&vals[y * width * channels..(y + 1) * width * channels]);
    }
    Ok((width, height, channels, data))
}

/// ASCII OBJ with 1-based face indices.
pub fn write_obj(path: impl AsRef<Path>, vertices: &[[f64; 3]], faces: &[[usize; 3]]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    for v in vertices {
        writeln!(w, "v {} {} {}", v[0], v[1], v[2]).map_err(io)?;
    }
    for f in faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Parses `v` and `f` records of an OBJ file (triangles only).
pub fn read_obj(path: impl AsRef<Path>) -> Result<(Vec<[f64; 3]>, Vec<[usize; 3]>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |l: &str| Error::invalid(format!("{}: bad OBJ line `{l}`", path.display()));
    let (mut vs, mut fs) = (Vec::new(), Vec::new());
    for line in text.lines() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let p: Vec<f64> = it.map(|t| t.parse().map_err(|_| bad(line))).collect::<Result<_>>()?;
                vs.push([p[0], p[1], p[2]]);
            }
            Some("f") => {
                let p: Vec<usize> = it
                    .map(|t| t.split('/').next().unwrap_or("").parse::<usize>().map_err(|_| bad(line)))
                    .collect::<Result<_>>()?;
                if p.len() != 3 || p.contains(&0) {
                    return Err(bad(line));
                }
                fs.push([p[0] - 1, p[1] - 1, p[2] - 1]);
            }
            _ => {}
        }
    }
    Ok((vs, fs))
}
