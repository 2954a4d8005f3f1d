//! Minimal binary PNM (P5 grayscale / P6 RGB) reader and writer, used for
//! image planes and inspection dumps. Values map linearly to [0, 1].

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::dataset::Plane;
use crate::error::{Error, Result};

fn parse_header(bytes: &[u8]) -> Result<(u8, usize, usize, usize, usize)> {
    if bytes.len() < 2 || bytes[0] != b'P' || (bytes[1] != b'5' && bytes[1] != b'6') {
        return Err(Error::format("pnm", "expected P5 or P6 magic".to_string()));
    }
    let kind = bytes[1];
    let mut fields = Vec::new();
    let mut pos = 2;
    while fields.len() < 3 && pos < bytes.len() {
        // skip whitespace and comments
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("pnm", "truncated header".to_string()));
        }
        let text = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::format("pnm", "bad header".to_string()))?;
        fields.push(
            text.parse::<usize>()
                .map_err(|_| Error::format("pnm", "bad header number".to_string()))?,
        );
    }
    if fields.len() != 3 {
        return Err(Error::format("pnm", "incomplete header".to_string()));
    }
    // single whitespace byte after maxval
    pos += 1;
    Ok((kind, fields[0], fields[1], fields[2], pos))
}

/// Read a P5 or P6 file into a 1- or 3-channel plane in [0, 1].
pub fn read_pnm(path: &Path) -> Result<Plane> {
    let bytes = fs::read(path)?;
    let (kind, width, height, maxval, offset) = parse_header(&bytes)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format("pnm", format!("unsupported maxval {maxval}")));
    }
    let channels = if kind == b'5' { 1 } else { 3 };
    let needed = width * height * channels;
    let payload = &bytes[offset..];
    if payload.len() < needed {
        return Err(Error::format(
            "pnm",
            format!("payload {} bytes, expected {}", payload.len(), needed),
        ));
    }
    let mut plane = Plane::zeros(channels, height, width);
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let v = payload[(y * width + x) * channels + c] as f64 / maxval as f64;
                plane.set(c, y, x, v);
            }
        }
    }
    Ok(plane)
}

/// Write a single-channel plane (values clamped to [0, 1]) as binary P5.
pub fn write_pgm(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    assert_eq!(values.len(), width * height);
    let mut out = Vec::with_capacity(values.len() + 32);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}

/// Write a 3-channel plane as binary P6.
pub fn write_ppm(path: &Path, plane: &Plane) -> Result<()> {
    if plane.channels != 3 {
        return Err(Error::Dimension(format!("write_ppm needs 3 channels, got {}", plane.channels)));
    }
    let mut out = Vec::with_capacity(plane.width * plane.height * 3 + 32);
    write!(out, "P6\n{} {}\n255\n", plane.width, plane.height)?;
    for y in 0..plane.height {
        for x in 0..plane.width {
            for c in 0..3 {
                out.push((plane.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let mut plane = Plane::zeros(3, 2, 3);
        for c in 0..3 {
            for y in 0..2 {
                for x in 0..3 {
                    plane.set(c, y, x, ((c + y + x) as f64 * 17.0 / 255.0).min(1.0));
                }
            }
        }
        write_ppm(&path, &plane).unwrap();
        let back = read_pnm(&path).unwrap();
        assert_eq!(back.channels, 3);
        assert_eq!(back.width, 3);
        for (a, b) in plane.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1.0 / 254.0);
        }
    }

    #[test]
    fn pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let values = vec![0.0, 0.25, 0.5, 1.0];
        write_pgm(&path, &values, 2, 2).unwrap();
        let back = read_pnm(&path).unwrap();
        assert_eq!(back.channels, 1);
        for (a, b) in values.iter().zip(&back.data) {
            assert!((a - b).abs() < 1.0 / 254.0);
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        fs::write(&path, b"P5\n4 4\n255\nxy").unwrap();
        assert!(read_pnm(&path).is_err());
    }
}
