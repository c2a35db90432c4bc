//! Depth-map file formats: grayscale PFM (portable float map) and a plain
//! CSV grid.
//!
//! PFM stores 32-bit floats, so saving quantizes the in-memory f64 grid; a
//! file round-trips losslessly after that first quantization. The CSV grid
//! keeps full f64 precision. Invalid pixels are written as NaN in both
//! formats, and non-positive finite values are treated as invalid on read.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::depth_denoise::DepthMap;
use crate::error::{Error, Result};

fn parse_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{}: {}", path.display(), msg))
}

/// Write a depth map as little-endian grayscale PFM (scale -1.0, rows
/// bottom-up).
pub fn write_pfm(map: &DepthMap, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "Pf\n{} {}\n-1.0\n", map.width(), map.height())?;
    for y in (0..map.height()).rev() {
        for x in 0..map.width() {
            w.write_all(&(map.get(x, y) as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a grayscale PFM depth map. Only the little-endian (negative scale)
/// variant is accepted.
pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let mut r = BufReader::new(File::open(path)?);

    let mut header = [String::new(), String::new(), String::new()];
    for slot in header.iter_mut() {
        // PFM header lines are newline-terminated ASCII.
        let mut line = Vec::new();
        loop {
            let mut byte = [0u8; 1];
            r.read_exact(&mut byte)
                .map_err(|_| parse_err(path, "truncated PFM header"))?;
            if byte[0] == b'\n' {
                break;
            }
            line.push(byte[0]);
        }
        *slot = String::from_utf8(line).map_err(|_| parse_err(path, "non-ASCII PFM header"))?;
    }
    if header[0].trim() != "Pf" {
        return Err(parse_err(
            path,
            format!("expected grayscale PFM magic `Pf`, found `{}`", header[0]),
        ));
    }
    let mut dims = header[1].split_whitespace();
    let width: usize = dims
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_err(path, "missing or invalid width"))?;
    let height: usize = dims
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_err(path, "missing or invalid height"))?;
    if width == 0 || height == 0 {
        return Err(parse_err(path, "zero-sized PFM image"));
    }
    let scale: f64 = header[2]
        .trim()
        .parse()
        .map_err(|_| parse_err(path, "invalid scale line"))?;
    if scale >= 0.0 {
        return Err(parse_err(path, "big-endian PFM is not supported"));
    }

    let mut bytes = vec![0u8; width * height * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| parse_err(path, "truncated PFM payload"))?;
    let mut map = DepthMap::new(width, height);
    for y_file in 0..height {
        let y = height - 1 - y_file;
        for x in 0..width {
            let off = (y_file * width + x) * 4;
            let v = f32::from_le_bytes([
                bytes[off],
                bytes[off + 1],
                bytes[off + 2],
                bytes[off + 3],
            ]) as f64;
            map.set(x, y, if v > 0.0 { v } else { f64::NAN });
        }
    }
    Ok(map)
}

/// Write a depth map as `height` lines of `width` comma-separated floats.
pub fn write_csv_grid(map: &DepthMap, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for y in 0..map.height() {
        for x in 0..map.width() {
            if x > 0 {
                write!(w, ",")?;
            }
            write!(w, "{}", map.get(x, y))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a CSV depth grid. All lines must have the same number of fields.
pub fn read_csv_grid(path: &Path) -> Result<DepthMap> {
    let r = BufReader::new(File::open(path)?);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line_no, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (field_no, tok) in line.split(',').enumerate() {
            let v: f64 = tok.trim().parse().map_err(|_| {
                parse_err(
                    path,
                    format!("line {}, field {}: invalid float `{tok}`", line_no + 1, field_no + 1),
                )
            })?;
            row.push(if v > 0.0 { v } else { f64::NAN });
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_err(
                    path,
                    format!("line {}: ragged row width", line_no + 1),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(path, "empty CSV depth grid"));
    }
    let (height, width) = (rows.len(), rows[0].len());
    let mut map = DepthMap::new(width, height);
    for (y, row) in rows.iter().enumerate() {
        for (x, &v) in row.iter().enumerate() {
            map.set(x, y, v);
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_map() -> DepthMap {
        let mut m = DepthMap::new(5, 3);
        for y in 0..3 {
            for x in 0..5 {
                m.set(x, y, 100.0 + (y * 5 + x) as f64 * 0.25);
            }
        }
        m.set(2, 1, f64::NAN);
        m
    }

    #[test]
    fn pfm_round_trip_after_quantization() {
        let dir = std::env::temp_dir().join("tofcal_pfm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("map.pfm");
        let original = sample_map();
        write_pfm(&original, &path).unwrap();
        let loaded = read_pfm(&path).unwrap();
        // First write quantizes to f32; from then on the cycle is exact.
        write_pfm(&loaded, &path).unwrap();
        let again = read_pfm(&path).unwrap();
        assert_eq!(loaded.width(), 5);
        assert_eq!(loaded.height(), 3);
        for y in 0..3 {
            for x in 0..5 {
                let a = loaded.get(x, y);
                let b = again.get(x, y);
                assert!(a.is_nan() == b.is_nan());
                if !a.is_nan() {
                    assert_eq!(a, b);
                    assert!((a - original.get(x, y)).abs() < 1e-4);
                }
            }
        }
        assert!(loaded.get(2, 1).is_nan());
    }

    #[test]
    fn csv_round_trip_exact() {
        let dir = std::env::temp_dir().join("tofcal_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("map.csv");
        let original = sample_map();
        write_csv_grid(&original, &path).unwrap();
        let loaded = read_csv_grid(&path).unwrap();
        for y in 0..3 {
            for x in 0..5 {
                let (a, b) = (original.get(x, y), loaded.get(x, y));
                assert!(a.is_nan() == b.is_nan());
                if !a.is_nan() {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = std::env::temp_dir().join("tofcal_pfm_bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.pfm");
        std::fs::write(&path, b"PF\n2 2\n-1.0\n0000000000000000").unwrap();
        assert!(matches!(read_pfm(&path), Err(Error::Parse(_))));
    }
}
