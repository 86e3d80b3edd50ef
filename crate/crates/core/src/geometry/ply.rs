use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::camera::CameraIntrinsics;
use super::depth::DepthMap;
use super::warp::backproject;

const HEADER_PROPS: &str = "property double x\nproperty double y\nproperty double z\n\
property uchar red\nproperty uchar green\nproperty uchar blue\n";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlyVertex {
    pub position: [f64; 3],
    pub color: [u8; 3],
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One coloured vertex per valid pixel in camera coordinates, as ASCII PLY.
/// `image` is `[C, H, W]` in `[0, 1]` with one or three channels.
pub fn export_point_cloud(depth: &DepthMap, image: &Tensor, k: &CameraIntrinsics) -> Result<Vec<u8>> {
    let (h, w) = (depth.height(), depth.width());
    let c = match *image.shape() {
        [c @ (1 | 3), ih, iw] if ih == h && iw == w => c,
        _ => return Err(Error::dim("export_point_cloud", depth.values.shape(), image.shape())),
    };
    let mut body = String::new();
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !depth.is_valid(y, x) {
                continue;
            }
            let p = backproject(k, x as f64, y as f64, depth.at(y, x));
            let px = |ch: usize| to_u8(image.data()[(ch.min(c - 1) * h + y) * w + x]);
            let _ = writeln!(body, "{} {} {} {} {} {}", p[0], p[1], p[2], px(0), px(1), px(2));
            count += 1;
        }
    }
    let mut out = format!("ply\nformat ascii 1.0\nelement vertex {count}\n{HEADER_PROPS}end_header\n");
    out.push_str(&body);
    Ok(out.into_bytes())
}

pub fn write_point_cloud(path: &Path, depth: &DepthMap, image: &Tensor, k: &CameraIntrinsics) -> Result<usize> {
    let bytes = export_point_cloud(depth, image, k)?;
    std::fs::write(path, bytes)?;
    Ok(depth.valid_count())
}

/// Parses the ASCII layout written by [`export_point_cloud`].
pub fn read_ply(bytes: &[u8]) -> Result<Vec<PlyVertex>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Format(format!("ply is not UTF-8: {e}")))?;
    let (header, body) = text
        .split_once("end_header\n")
        .ok_or_else(|| Error::Format("ply header has no end_header".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") || lines.next() != Some("format ascii 1.0") {
        return Err(Error::Format("expected ASCII ply magic".into()));
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("element vertex "))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Format("missing vertex element".into()))?;
    let props: String = lines.map(|l| format!("{l}\n")).collect();
    if props != HEADER_PROPS {
        return Err(Error::Format("unexpected ply properties".into()));
    }
    let vertices = body
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Format(format!("malformed vertex on line {}", i + 1));
            if f.len() != 6 {
                return Err(bad());
            }
            let pos = |j: usize| f[j].parse::<f64>().map_err(|_| bad());
            let col = |j: usize| f[j].parse::<u8>().map_err(|_| bad());
            Ok(PlyVertex {
                position: [pos(0)?, pos(1)?, pos(2)?],
                color: [col(3)?, col(4)?, col(5)?],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if vertices.len() != count {
        return Err(Error::Format(format!(
            "header declares {count} vertices, body has {}",
            vertices.len()
        )));
    }
    Ok(vertices)
}
