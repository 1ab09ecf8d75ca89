//! Plain (ASCII) PGM images for policy maps.
//!
//! A map pixel holds the *bit-width* the policy selected there (0 for the
//! "transmit nothing" entry), with `maxval` the pool's top bit-width. That
//! keeps the files lossless and trivially greppable; any image viewer still
//! opens them, just rather dark.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::policy::IndexMap;

/// Render a grayscale image as plain PGM (magic `P2`).
///
/// `values` is row-major, `height * width` long, each entry in `0..=maxval`.
pub fn to_pgm_string(height: usize, width: usize, maxval: u16, values: &[u16]) -> Result<String> {
    if maxval == 0 {
        return Err(Error::InvalidParams("PGM maxval must be at least 1".into()));
    }
    if values.len() != height * width || height == 0 || width == 0 {
        return Err(Error::InvalidParams(format!(
            "PGM dimensions {height}x{width} do not match {} values",
            values.len()
        )));
    }
    if let Some(v) = values.iter().find(|&&v| v > maxval) {
        return Err(Error::InvalidParams(format!(
            "PGM value {v} exceeds maxval {maxval}"
        )));
    }
    let mut out = String::new();
    let _ = writeln!(out, "P2");
    let _ = writeln!(out, "{width} {height}");
    let _ = writeln!(out, "{maxval}");
    for row in values.chunks(width) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    Ok(out)
}

/// Write a policy map as a PGM file: each pixel is the bit-width selected
/// there, looked up through the pool's bit-width list; maxval is the pool's
/// top bit-width.
pub fn write_bits_map(path: &Path, map: &IndexMap, pool_bits: &[u8]) -> Result<()> {
    let top = *pool_bits.last().ok_or_else(|| {
        Error::InvalidParams("bit-width map needs a non-empty pool".into())
    })?;
    let values = map
        .values()
        .iter()
        .map(|&idx| {
            pool_bits
                .get((idx - 1) as usize)
                .map(|&b| b as u16)
                .ok_or_else(|| {
                    Error::Policy(format!(
                        "map index {idx} outside the {}-entry pool",
                        pool_bits.len()
                    ))
                })
        })
        .collect::<Result<Vec<u16>>>()?;
    let text = to_pgm_string(map.height(), map.width(), top as u16, &values)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parse a plain PGM produced by [`to_pgm_string`] (used by tests and the
/// policy-map round trip). Comments are tolerated after the magic line.
pub fn parse_pgm(text: &str) -> Result<(usize, usize, u16, Vec<u16>)> {
    let mut tokens = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .flat_map(|l| l.split_whitespace());
    let magic = tokens.next().ok_or_else(|| Error::Parse("empty PGM".into()))?;
    if magic != "P2" {
        return Err(Error::Parse(format!("expected plain PGM magic P2, got {magic:?}")));
    }
    let mut next_int = |what: &str| -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| Error::Parse(format!("PGM truncated before {what}")))?
            .parse::<usize>()
            .map_err(|_| Error::Parse(format!("PGM {what} is not an integer")))
    };
    let width = next_int("width")?;
    let height = next_int("height")?;
    let maxval = next_int("maxval")? as u16;
    let mut values = Vec::with_capacity(height * width);
    for i in 0..height * width {
        values.push(next_int(&format!("pixel {i}"))? as u16);
    }
    if tokens.next().is_some() {
        return Err(Error::Parse("PGM has trailing data".into()));
    }
    Ok((height, width, maxval, values))
}
