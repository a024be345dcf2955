//! Image inputs (binary PGM or raw float grids) and label-map outputs.

use anyhow::{bail, ensure, Context, Result};

/// Magic of a raw float grid: `"MUFG" | H: u32 | W: u32 | dtype: u32`,
/// then `H·W` little-endian values. dtype 0 is f32, 1 is f64.
pub const RAW_IMAGE_MAGIC: &[u8; 4] = b"MUFG";
/// Magic of a raw label file: `"MULB" | H: u32 | W: u32 | classes: u32`,
/// then `H·W` bytes.
pub const RAW_LABEL_MAGIC: &[u8; 4] = b"MULB";

#[derive(Clone, Debug, PartialEq)]
pub struct Grayscale {
    pub height: usize,
    pub width: usize,
    /// Row-major intensities.
    pub pixels: Vec<f64>,
}

fn u32_at(bytes: &[u8], at: usize) -> usize {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize
}

/// Parses a binary PGM; intensities are scaled by `1 / maxval`.
pub fn parse_pgm(bytes: &[u8]) -> Result<Grayscale> {
    ensure!(bytes.starts_with(b"P5"), "not a binary PGM (P5)");
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        ensure!(pos > start, "malformed PGM header");
        *field = std::str::from_utf8(&bytes[start..pos])?.parse()?;
    }
    ensure!(pos < bytes.len() && bytes[pos].is_ascii_whitespace(), "malformed PGM header");
    pos += 1;
    let [width, height, maxval] = fields;
    ensure!((1..=65535).contains(&maxval), "PGM maxval {maxval} out of range");
    let wide = maxval > 255;
    let need = width * height * if wide { 2 } else { 1 };
    ensure!(bytes.len() - pos >= need, "PGM pixel data truncated");
    let raw = &bytes[pos..pos + need];
    let pixels = if wide {
        raw.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64).collect()
    } else {
        raw.iter().map(|&v| v as f64 / maxval as f64).collect()
    };
    Ok(Grayscale { height, width, pixels })
}

pub fn parse_raw(bytes: &[u8]) -> Result<Grayscale> {
    ensure!(bytes.len() >= 16 && &bytes[..4] == RAW_IMAGE_MAGIC, "not a raw float grid");
    let (height, width, dtype) = (u32_at(bytes, 4), u32_at(bytes, 8), u32_at(bytes, 12));
    let body = &bytes[16..];
    let pixels: Vec<f64> = match dtype {
        0 => {
            ensure!(body.len() == 4 * height * width, "raw grid size does not match {height}x{width} f32");
            body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect()
        }
        1 => {
            ensure!(body.len() == 8 * height * width, "raw grid size does not match {height}x{width} f64");
            body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect()
        }
        other => bail!("unknown raw dtype {other}"),
    };
    ensure!(pixels.iter().all(|v| v.is_finite()), "raw grid holds non-finite values");
    Ok(Grayscale { height, width, pixels })
}

/// Dispatches on the leading magic bytes.
pub fn read_image(path: &std::path::Path) -> Result<Grayscale> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(b"P5") {
        parse_pgm(&bytes)
    } else if bytes.starts_with(RAW_IMAGE_MAGIC) {
        parse_raw(&bytes)
    } else {
        bail!("{}: unrecognised image format (expected P5 PGM or raw grid)", path.display())
    }
    .with_context(|| format!("parsing {}", path.display()))
}

#[cfg(test)]
pub fn encode_raw_f64(img: &Grayscale) -> Vec<u8> {
    let mut out = RAW_IMAGE_MAGIC.to_vec();
    for v in [img.height, img.width, 1] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &img.pixels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Labels spread over `0..=255` so classes are visibly distinct.
pub fn encode_label_pgm(labels: &[u8], height: usize, width: usize, num_classes: usize) -> Vec<u8> {
    let step = 255 / (num_classes - 1).max(1);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(labels.iter().map(|&l| (l as usize * step).min(255) as u8));
    out
}

pub fn encode_label_raw(labels: &[u8], height: usize, width: usize, num_classes: usize) -> Vec<u8> {
    let mut out = RAW_LABEL_MAGIC.to_vec();
    for v in [height, width, num_classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(labels);
    out
}
