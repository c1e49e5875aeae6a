//! Single-channel little-endian PFM, rows stored top to bottom.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FloatMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub fn encode_pfm(map: &FloatMap) -> Result<Vec<u8>> {
    if map.data.len() != map.height * map.width {
        return Err(Error::shape(format!(
            "{}×{} map holds {} values",
            map.height,
            map.width,
            map.data.len()
        )));
    }
    if let Some(i) = map.data.iter().position(|v| v.is_nan()) {
        return Err(Error::invalid(format!("NaN at index {i} cannot be written to PFM")));
    }
    let mut out = format!("Pf\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    out.reserve(4 * map.data.len());
    for v in &map.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Reads one whitespace-delimited header token starting at `*pos`.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<(&'a str, usize)> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Parse {
            offset: start,
            message: "unexpected end of PFM header".into(),
        });
    }
    let s = std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::Parse {
        offset: start,
        message: "non-ASCII PFM header".into(),
    })?;
    Ok((s, start))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<FloatMap> {
    let mut pos = 0;
    let (magic, at) = token(bytes, &mut pos)?;
    match magic {
        "Pf" => {}
        "PF" => {
            return Err(Error::Parse {
                offset: at,
                message: "three-channel PFM (PF) is not supported; expected Pf".into(),
            })
        }
        other => {
            return Err(Error::Parse {
                offset: at,
                message: format!("bad PFM magic `{other}`"),
            })
        }
    }
    let dim = |name: &str, pos: &mut usize| -> Result<usize> {
        let (t, at) = token(bytes, pos)?;
        t.parse::<usize>().map_err(|_| Error::Parse {
            offset: at,
            message: format!("bad PFM {name} `{t}`"),
        })
    };
    let width = dim("width", &mut pos)?;
    let height = dim("height", &mut pos)?;
    let (t, at) = token(bytes, &mut pos)?;
    let scale: f64 = t.parse().map_err(|_| Error::Parse {
        offset: at,
        message: format!("bad PFM scale `{t}`"),
    })?;
    if !(scale < 0.0) {
        return Err(Error::Parse {
            offset: at,
            message: format!("PFM scale {scale} marks big-endian data; only little-endian (negative scale) is supported"),
        });
    }
    // exactly one whitespace byte separates the header from the data
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Parse {
            offset: pos,
            message: "missing newline after PFM header".into(),
        });
    }
    pos += 1;
    let n = width * height;
    let body = &bytes[pos..];
    if body.len() != 4 * n {
        return Err(Error::Parse {
            offset: pos,
            message: format!("PFM body has {} bytes, expected {}", body.len(), 4 * n),
        });
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(FloatMap { height, width, data })
}

pub fn write_pfm(path: &Path, map: &FloatMap) -> Result<()> {
    fs::write(path, encode_pfm(map)?)?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<FloatMap> {
    decode_pfm(&fs::read(path)?)
}
