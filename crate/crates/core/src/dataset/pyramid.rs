//! Binary multi-level feature container.
//!
//! Layout, all integers little-endian 32-bit:
//! `"SAPF" | level_count | { C, H, W, C*H*W f32 values (channel-major,
//! row-major within a channel) } per level`.

use std::fs;
use std::path::Path;

use crate::dataset::Plane;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SAPF";

/// Multi-scale feature planes, highest resolution first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Plane>,
}

pub fn write_feature_pyramid(path: &Path, pyramid: &FeaturePyramid) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(pyramid.levels.len() as u32).to_le_bytes());
    for level in &pyramid.levels {
        out.extend_from_slice(&(level.channels as u32).to_le_bytes());
        out.extend_from_slice(&(level.height as u32).to_le_bytes());
        out.extend_from_slice(&(level.width as u32).to_le_bytes());
        for v in &level.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_feature_pyramid(path: &Path) -> Result<FeaturePyramid> {
    let bytes = fs::read(path)?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(Error::format(
                "sapf",
                format!("truncated: wanted {} bytes at offset {}", n, cursor),
            ));
        }
        let slice = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(slice)
    };
    let read_u32 = |cursor: &mut usize| -> Result<u32> {
        let b = take(cursor, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };

    if take(&mut cursor, 4)? != MAGIC {
        return Err(Error::format("sapf", "bad magic".to_string()));
    }
    let n_levels = read_u32(&mut cursor)? as usize;
    let mut levels = Vec::with_capacity(n_levels);
    let mut prev_size = usize::MAX;
    for li in 0..n_levels {
        let c = read_u32(&mut cursor)? as usize;
        let h = read_u32(&mut cursor)? as usize;
        let w = read_u32(&mut cursor)? as usize;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::format("sapf", format!("level {li} has zero dimension")));
        }
        let count = c * h * w;
        let payload = take(&mut cursor, count * 4)?;
        let mut plane = Plane::zeros(c, h, w);
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("sapf level {li} element {i}")));
            }
            plane.data[i] = v;
        }
        if h * w > prev_size {
            return Err(Error::format(
                "sapf",
                format!("level {li} larger than the previous level"),
            ));
        }
        prev_size = h * w;
        levels.push(plane);
    }
    Ok(FeaturePyramid { levels })
}
