//! Single-channel Portable Float Map (`Pf`).
//!
//! Header `Pf\n<W> <H>\n<scale>\n`; a negative scale means a little-endian
//! payload. Rows are stored bottom to top.

use std::fs;
use std::path::Path;

use super::DispMap;
use crate::error::{Error, Result};

fn bad(reason: impl Into<String>) -> Error {
    Error::format("PFM", reason)
}

pub fn encode_pfm(map: &DispMap) -> Result<Vec<u8>> {
    if map.channels != 1 {
        return Err(bad(format!("expected one channel, got {}", map.channels)));
    }
    let mut out = format!("Pf\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    out.reserve(map.data.len() * 4);
    for y in (0..map.height).rev() {
        for x in 0..map.width {
            out.extend_from_slice(&map.get(y, x, 0).to_le_bytes());
        }
    }
    Ok(out)
}

/// Next whitespace-delimited header token; consumes exactly one trailing
/// whitespace byte.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos || *pos >= bytes.len() {
        return Err(bad("truncated header"));
    }
    let tok = std::str::from_utf8(&bytes[start..*pos]).map_err(|_| bad("header is not ASCII"))?;
    *pos += 1;
    Ok(tok)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<DispMap> {
    let mut pos = 0;
    match token(bytes, &mut pos)? {
        "Pf" => {}
        "PF" => return Err(bad("three-channel PF files are not supported")),
        other => return Err(bad(format!("bad magic {other:?}"))),
    }
    let dim = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad dimension {s:?}")));
    let width = dim(token(bytes, &mut pos)?)?;
    let height = dim(token(bytes, &mut pos)?)?;
    let scale: f64 = token(bytes, &mut pos)?
        .parse()
        .map_err(|_| bad("bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad("scale must be finite and non-zero"));
    }
    let little = scale < 0.0;
    let payload = &bytes[pos..];
    let n = width * height;
    if payload.len() != n * 4 {
        return Err(bad(format!("expected {} payload bytes, found {}", n * 4, payload.len())));
    }
    let mut map = DispMap::filled(height, width, 1, 0.0);
    for (i, c) in payload.chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        map.set(height - 1 - i / width, i % width, 0, v);
    }
    Ok(map)
}

pub fn write_pfm(path: &Path, map: &DispMap) -> Result<()> {
    fs::write(path, encode_pfm(map)?).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<DispMap> {
    decode_pfm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
