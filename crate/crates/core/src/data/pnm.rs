//! Binary PGM (`P5`) and PPM (`P6`) with maxval 255.

use std::fs;
use std::path::Path;

use super::{DispMap, Grid, Image, Mask};
use crate::error::{Error, Result};

fn bad(reason: impl Into<String>) -> Error {
    Error::format("PNM", reason)
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pnm(grid: &Grid<u8>) -> Result<Vec<u8>> {
    let magic = match grid.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(bad(format!("cannot store {c} channels"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", grid.width, grid.height).into_bytes();
    out.extend_from_slice(&grid.data);
    Ok(out)
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Grid<u8>> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos || pos >= bytes.len() {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    pos += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(format!("unsupported magic {other:?}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad header field {s:?}")));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad(format!("only maxval 255 is supported, got {maxval}")));
    }
    let payload = &bytes[pos..];
    if payload.len() != width * height * channels {
        return Err(bad(format!(
            "expected {} payload bytes, found {}",
            width * height * channels,
            payload.len()
        )));
    }
    Grid::from_vec(height, width, channels, payload.to_vec())
}

fn write(path: &Path, grid: &Grid<u8>) -> Result<()> {
    fs::write(path, encode_pnm(grid)?).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Grid<u8>> {
    decode_pnm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    write(path, &image.map(quantize))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let g = read(path)?;
    if g.channels != 3 {
        return Err(bad(format!("{} is not a PPM", path.display())));
    }
    Ok(g.map(|v| v as f32 / 255.0))
}

/// Occluded = 255.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write(path, &mask.map(|v| if v != 0 { 255 } else { 0 }))
}

/// Any value above 127 is set.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let g = read(path)?;
    if g.channels != 1 {
        return Err(bad(format!("{} is not a PGM", path.display())));
    }
    Ok(g.map(|v| u8::from(v > 127)))
}

/// Gray levels of a map, min-max normalized unless `range` is given.
pub fn normalize_map(map: &DispMap, range: Option<(f32, f32)>) -> Grid<u8> {
    let (lo, hi) = range.unwrap_or_else(|| {
        map.data
            .iter()
            .filter(|v| v.is_finite())
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    });
    let span = hi - lo;
    map.map(|v| {
        if span > 0.0 && v.is_finite() {
            quantize((v - lo) / span)
        } else {
            0
        }
    })
}

pub fn write_map_pgm(path: &Path, map: &DispMap, range: Option<(f32, f32)>) -> Result<()> {
    write(path, &normalize_map(map, range))
}

/// False-colour rendering of a map (blue = low, red = high).
pub fn colorize_map(map: &DispMap, range: Option<(f32, f32)>) -> Image {
    let gray = normalize_map(map, range);
    Image::from_fn(map.height, map.width, 3, |y, x, c| {
        let t = gray.get(y, x, 0) as f32 / 255.0;
        match c {
            0 => (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0),
            1 => (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0),
            _ => (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0),
        }
    })
}
