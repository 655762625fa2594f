//! File formats: PNG images, the variance raster, ASCII PLY and manifests.
//!
//! Variance raster layout (all integers little-endian):
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `VRST`               |
//! | 4      | 4    | u32 version (1)            |
//! | 8      | 1    | endianness tag `L`         |
//! | 9      | 3    | zero padding               |
//! | 12     | 4    | u32 width                  |
//! | 16     | 4    | u32 height                 |
//! | 20     | 4·wh | f32 values, row-major      |

use crate::error::{Error, Result};
use crate::geom::Vec3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

pub const RASTER_MAGIC: &[u8; 4] = b"VRST";
pub const RASTER_VERSION: u32 = 1;
pub const RASTER_HEADER_LEN: usize = 20;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png(width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut w = enc.write_header()?;
        w.write_image_data(data)?;
        w.finish()?;
    }
    Ok(out)
}

fn check_len(len: usize, width: usize, height: usize) -> Result<()> {
    if len != width * height {
        return Err(Error::DimensionMismatch(format!(
            "{len} pixels for a {width}x{height} image"
        )));
    }
    Ok(())
}

/// 8-bit RGB PNG from colors in [0, 1].
pub fn rgb_png(colors: &[Vec3], width: usize, height: usize) -> Result<Vec<u8>> {
    check_len(colors.len(), width, height)?;
    let data: Vec<u8> = colors
        .iter()
        .flat_map(|c| [to_u8(c.x), to_u8(c.y), to_u8(c.z)])
        .collect();
    encode_png(width, height, png::ColorType::Rgb, png::BitDepth::Eight, &data)
}

/// 8-bit grayscale PNG from values in [0, 1].
pub fn gray_png(values: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    check_len(values.len(), width, height)?;
    let data: Vec<u8> = values.iter().map(|v| to_u8(*v)).collect();
    encode_png(width, height, png::ColorType::Grayscale, png::BitDepth::Eight, &data)
}

/// Meters to the 16-bit millimeter encoding (0 = no return).
pub fn depth_to_mm(z: f64) -> u16 {
    if z > 0.0 {
        (z * 1000.0).round().clamp(0.0, 65535.0) as u16
    } else {
        0
    }
}

/// 16-bit grayscale PNG holding depth in millimeters.
pub fn depth_png(depth: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    check_len(depth.len(), width, height)?;
    let data: Vec<u8> = depth.iter().flat_map(|z| depth_to_mm(*z).to_be_bytes()).collect();
    encode_png(width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &data)
}

pub fn encode_variance_raster(values: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    check_len(values.len(), width, height)?;
    let mut out = Vec::with_capacity(RASTER_HEADER_LEN + 4 * values.len());
    out.extend_from_slice(RASTER_MAGIC);
    out.extend_from_slice(&RASTER_VERSION.to_le_bytes());
    out.extend_from_slice(&[b'L', 0, 0, 0]);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Returns (width, height, values).
pub fn decode_variance_raster(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let bad = |m: &str| Error::DimensionMismatch(format!("variance raster: {m}"));
    if bytes.len() < RASTER_HEADER_LEN || &bytes[..4] != RASTER_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    if u32_at(4) != RASTER_VERSION || bytes[8] != b'L' {
        return Err(bad("unsupported version or endianness"));
    }
    let (w, h) = (u32_at(12) as usize, u32_at(16) as usize);
    let body = &bytes[RASTER_HEADER_LEN..];
    if body.len() != 4 * w * h {
        return Err(bad("truncated body"));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((w, h, values))
}

fn ply_header(out: &mut String, vertices: usize) {
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {vertices}");
    out.push_str("property float x\nproperty float y\nproperty float z\n");
}

fn ply_vertices(out: &mut String, points: &[Vec3]) {
    for p in points {
        let _ = writeln!(out, "{:.6} {:.6} {:.6}", p.x, p.y, p.z);
    }
}

/// ASCII PLY point cloud.
pub fn ply_points(points: &[Vec3]) -> String {
    let mut out = String::new();
    ply_header(&mut out, points.len());
    out.push_str("end_header\n");
    ply_vertices(&mut out, points);
    out
}

/// ASCII PLY polyline: vertices plus consecutive edges.
pub fn ply_polyline(points: &[Vec3]) -> String {
    let mut out = String::new();
    let edges = points.len().saturating_sub(1);
    ply_header(&mut out, points.len());
    let _ = writeln!(out, "element edge {edges}");
    out.push_str("property int vertex1\nproperty int vertex2\nend_header\n");
    ply_vertices(&mut out, points);
    for i in 0..edges {
        let _ = writeln!(out, "{} {}", i, i + 1);
    }
    out
}

/// Parses the vertex block of an ASCII PLY written by this module.
pub fn parse_ply_vertices(text: &str) -> Result<Vec<Vec3>> {
    let bad = || Error::DimensionMismatch("malformed ply".into());
    let mut lines = text.lines();
    let mut count = None;
    for line in lines.by_ref() {
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = Some(n.trim().parse::<usize>().map_err(|_| bad())?);
        }
        if line == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(bad)?;
    lines
        .take(count)
        .map(|l| {
            let v: Vec<f64> = l
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            match v.as_slice() {
                [x, y, z] => Ok(Vec3::new(*x, *y, *z)),
                _ => Err(bad()),
            }
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the export directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Writes `bytes` under `dir/name`, creating parents, and records its hash.
pub fn write_artifact(dir: &Path, name: &str, bytes: &[u8]) -> Result<ManifestEntry> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(ManifestEntry {
        path: name.to_string(),
        bytes: bytes.len() as u64,
        sha256: sha256_hex(bytes),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decode(bytes: &[u8]) -> (png::OutputInfo, Vec<u8>) {
        let mut r = png::Decoder::new(std::io::Cursor::new(bytes)).read_info().unwrap();
        let mut buf = vec![0; r.output_buffer_size().unwrap()];
        let info = r.next_frame(&mut buf).unwrap();
        buf.truncate(info.buffer_size());
        (info, buf)
    }

    #[test]
    fn rgb_png_round_trip() {
        let c = vec![Vec3::new(0.0, 0.5, 1.0), Vec3::new(2.0, -1.0, 0.25)];
        let (info, data) = decode(&rgb_png(&c, 2, 1).unwrap());
        assert_eq!((info.width, info.height), (2, 1));
        assert_eq!(data, vec![0, 128, 255, 255, 0, 64]);
        assert!(rgb_png(&c, 3, 1).is_err());
    }

    #[test]
    fn depth_png_is_big_endian_millimeters() {
        let (info, data) = decode(&depth_png(&[1.2346, 0.0, 70.0], 3, 1).unwrap());
        assert_eq!(info.bit_depth, png::BitDepth::Sixteen);
        assert_eq!(data, vec![0x04, 0xD3, 0, 0, 0xFF, 0xFF]);
    }

    #[test]
    fn raster_layout() {
        let b = encode_variance_raster(&[1.0, 0.5], 2, 1).unwrap();
        assert_eq!(&b[..12], b"VRST\x01\x00\x00\x00L\x00\x00\x00");
        assert_eq!(&b[12..20], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
        assert_eq!(decode_variance_raster(&b).unwrap(), (2, 1, vec![1.0, 0.5]));
        assert!(decode_variance_raster(&b[..22]).is_err());
    }

    #[test]
    fn ply_round_trip() {
        let pts = vec![Vec3::new(1.0, -2.0, 0.5), Vec3::new(0.125, 0.0, 3.0)];
        assert_eq!(parse_ply_vertices(&ply_points(&pts)).unwrap(), pts);
        let line = ply_polyline(&pts);
        assert!(line.contains("element edge 1\n"));
        assert!(line.ends_with("0 1\n"));
        assert_eq!(parse_ply_vertices(&line).unwrap(), pts);
    }

    #[test]
    fn sha_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
