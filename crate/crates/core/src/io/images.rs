//! Image, depth-map and label-map files.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scale field written into PFM headers; negative means little-endian.
pub const PFM_HEADER_SCALE: f64 = -1.0;

/// Reads a PNG or PNM file as a `[3, H, W]` tensor in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(&[c, y as usize, x as usize], p[c] as f64 / 255.0);
        }
    }
    Ok(t)
}

fn to_rgb8(image: &Tensor) -> Result<RgbImage> {
    let s = image.shape();
    if s.len() != 3 || (s[0] != 1 && s[0] != 3) {
        return Err(Error::shape(s, "image must be [1|3, H, W]"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            let v = image.get(&[ch.min(c - 1), y as usize, x as usize]);
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    }))
}

/// Writes a `[1|3, H, W]` tensor in `[0, 1]` as 8-bit PNG (values are clamped).
pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    to_rgb8(image)?.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

/// Writes a `[1|3, H, W]` tensor as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let img = to_rgb8(image)?;
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.as_raw());
    std::fs::write(path, out)?;
    Ok(())
}

/// Encodes a `[1, H, W]` or `[H, W]` map as single-channel little-endian PFM.
pub fn encode_pfm(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match map.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(Error::shape(s, "PFM map must be [1, H, W] or [H, W]")),
    };
    let mut out = format!("Pf\n{w} {h}\n{PFM_HEADER_SCALE:.1}\n").into_bytes();
    // rows are stored bottom to top
    for y in (0..h).rev() {
        for &v in &map.data()[y * w..(y + 1) * w] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a single-channel PFM into `[1, H, W]`.
pub fn decode_pfm(bytes: &[u8]) -> Result<Tensor> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PFM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("PFM header is not ASCII".into()))?);
    }
    pos += 1; // single whitespace byte after the scale
    if fields[0] != "Pf" {
        return Err(Error::Format(format!("expected single-channel PFM, got {:?}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PFM dimension {s:?}")));
    let (w, h) = (parse(fields[1])?, parse(fields[2])?);
    let scale: f64 = fields[3].parse().map_err(|_| Error::Format(format!("bad PFM scale {:?}", fields[3])))?;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != w * h * 4 {
        return Err(Error::Format(format!("PFM body has {} bytes, expected {}", body.len(), w * h * 4)));
    }
    let read = |c: &[u8]| {
        let b: [u8; 4] = c.try_into().expect("4 bytes");
        if scale < 0.0 {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    let mut t = Tensor::zeros(&[1, h, w]);
    for (row, chunk) in body.chunks_exact(w.max(1) * 4).enumerate().take(h) {
        let y = h - 1 - row;
        for (x, c) in chunk.chunks_exact(4).enumerate() {
            t.set(&[0, y, x], read(c) as f64);
        }
    }
    Ok(t)
}

pub fn write_pfm(path: &Path, map: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pfm(map)?)?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<Tensor> {
    decode_pfm(&std::fs::read(path)?)
}

/// Writes class ids as an 8-bit grayscale PNG or PGM (chosen by extension).
pub fn write_labels(path: &Path, labels: &[u8], height: usize, width: usize) -> Result<()> {
    if labels.len() != height * width {
        return Err(Error::dim("write_labels", &[labels.len()], &[height, width]));
    }
    let img = GrayImage::from_raw(width as u32, height as u32, labels.to_vec())
        .ok_or_else(|| Error::Format("label buffer size mismatch".into()))?;
    let format = ImageFormat::from_path(path).unwrap_or(ImageFormat::Png);
    let mut buf = Cursor::new(Vec::new());
    DynamicImage::ImageLuma8(img).write_to(&mut buf, format)?;
    std::fs::write(path, buf.into_inner())?;
    Ok(())
}

/// Reads an 8-bit label map, returning `(labels, height, width)`.
pub fn read_labels(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path)?;
    if !matches!(img, DynamicImage::ImageLuma8(_)) {
        return Err(Error::Format(format!("{} is not an 8-bit grayscale label map", path.display())));
    }
    let g = img.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    Ok((g.into_raw(), h, w))
}
