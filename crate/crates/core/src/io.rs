//! Binary image formats for maps and visualizations.
//!
//! Label maps are binary PGM (`P5`), 8-bit when every value fits and 16-bit
//! big-endian otherwise. The map kind and ignore value travel in a header
//! comment (`# dense-ntp kind=semantic ignore=255`) and in a sidecar
//! text file next to the image (`map.pgm.hdr`), so a map reads back
//! unchanged. RGB images are binary PPM (`P6`). Soft maps are a text header
//! line followed by raw big-endian `f32` values, channel-major.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::decode::{RgbImage, SoftMap};
use crate::error::{Error, Result};
use crate::targets::{DenseMap, MapKind};

pub fn encode_pgm(map: &DenseMap) -> Vec<u8> {
    let wide = map.values.iter().any(|&v| v > 255);
    let maxval = if wide { 65535 } else { 255 };
    let mut out = format!(
        "P5\n# dense-ntp kind={} ignore={}\n{} {}\n{}\n",
        map.kind.as_str(),
        map.ignore_value,
        map.width,
        map.height,
        maxval
    )
    .into_bytes();
    for &v in &map.values {
        if wide {
            out.extend_from_slice(&(v.min(65535) as u16).to_be_bytes());
        } else {
            out.push(v as u8);
        }
    }
    out
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Reads whitespace-separated header fields, collecting `#` comments.
fn header_fields<R: BufRead>(r: &mut R, n: usize, comments: &mut Vec<String>) -> Result<Vec<String>> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut byte = [0u8; 1];
    while fields.len() < n {
        if r.read(&mut byte)? == 0 {
            return Err(format_err("truncated header"));
        }
        match byte[0] {
            b'#' if cur.is_empty() => {
                let mut line = String::new();
                r.read_line(&mut line)?;
                comments.push(line.trim().to_string());
            }
            b if b.is_ascii_whitespace() => {
                if !cur.is_empty() {
                    fields.push(std::mem::take(&mut cur));
                }
            }
            b => cur.push(b as char),
        }
    }
    Ok(fields)
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse().map_err(|_| format_err(format!("bad header number {s:?}")))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<DenseMap> {
    let mut r = BufReader::new(bytes);
    let mut comments = Vec::new();
    let f = header_fields(&mut r, 4, &mut comments)?;
    if f[0] != "P5" {
        return Err(format_err(format!("expected P5, found {}", f[0])));
    }
    let (w, h, maxval) = (parse_usize(&f[1])?, parse_usize(&f[2])?, parse_usize(&f[3])?);
    let mut kind = MapKind::Semantic;
    let mut ignore = None;
    for c in &comments {
        for kv in c.split_whitespace() {
            match kv.split_once('=') {
                Some(("kind", "depth_bins")) => kind = MapKind::DepthBins,
                Some(("kind", "semantic")) => kind = MapKind::Semantic,
                Some(("ignore", v)) => ignore = v.parse().ok(),
                _ => {}
            }
        }
    }
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    let values: Vec<u32> = if maxval > 255 {
        if raw.len() != w * h * 2 {
            return Err(format_err("pixel data length mismatch"));
        }
        raw.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as u32).collect()
    } else {
        if raw.len() != w * h {
            return Err(format_err("pixel data length mismatch"));
        }
        raw.into_iter().map(u32::from).collect()
    };
    DenseMap::with_ignore(w, h, values, kind, ignore.unwrap_or(kind.default_ignore()))
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut r = BufReader::new(bytes);
    let f = header_fields(&mut r, 4, &mut Vec::new())?;
    if f[0] != "P6" || f[3] != "255" {
        return Err(format_err("expected an 8-bit P6 image"));
    }
    let (width, height) = (parse_usize(&f[1])?, parse_usize(&f[2])?);
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() != width * height * 3 {
        return Err(format_err("pixel data length mismatch"));
    }
    Ok(RgbImage { width, height, data })
}

pub fn encode_soft_map(map: &SoftMap) -> Vec<u8> {
    let mut out = format!(
        "DNTPSOFT width={} height={} channels={} temperature={} dtype=f32be\n",
        map.width, map.height, map.channels, map.temperature
    )
    .into_bytes();
    for v in &map.data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn decode_soft_map(bytes: &[u8]) -> Result<SoftMap> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_err("missing soft map header"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| format_err("header is not UTF-8"))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("DNTPSOFT") {
        return Err(format_err("not a soft map"));
    }
    let (mut w, mut h, mut c, mut t) = (None, None, None, None);
    for kv in parts {
        match kv.split_once('=') {
            Some(("width", v)) => w = v.parse().ok(),
            Some(("height", v)) => h = v.parse().ok(),
            Some(("channels", v)) => c = v.parse().ok(),
            Some(("temperature", v)) => t = v.parse().ok(),
            _ => {}
        }
    }
    let (Some(width), Some(height), Some(channels), Some(temperature)) = (w, h, c, t) else {
        return Err(format_err("incomplete soft map header"));
    };
    let body = &bytes[nl + 1..];
    if body.len() != width * height * channels * 4 {
        return Err(format_err("soft map data length mismatch"));
    }
    let data = body.chunks(4).map(|b| f32::from_be_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok(SoftMap {
        width,
        height,
        channels,
        temperature,
        data,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::File::create(path)?.write_all(bytes)?;
    Ok(())
}

/// `<path>.hdr`
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hdr");
    s.into()
}

/// Writes the PGM and its sidecar header.
pub fn write_pgm(path: &Path, map: &DenseMap) -> Result<()> {
    write_file(path, &encode_pgm(map))?;
    let header = format!("kind={}\nignore={}\n", map.kind.as_str(), map.ignore_value);
    write_file(&sidecar_path(path), header.as_bytes())
}

/// Reads a PGM; a sidecar header, when present, overrides the embedded one.
pub fn read_pgm(path: &Path) -> Result<DenseMap> {
    let map = decode_pgm(&std::fs::read(path)?)?;
    let Ok(header) = std::fs::read_to_string(sidecar_path(path)) else {
        return Ok(map);
    };
    let (mut kind, mut ignore) = (map.kind, map.ignore_value);
    for line in header.lines() {
        match line.trim().split_once('=') {
            Some(("kind", "semantic")) => kind = MapKind::Semantic,
            Some(("kind", "depth_bins")) => kind = MapKind::DepthBins,
            Some(("ignore", v)) => {
                ignore = v.parse().map_err(|_| format_err(format!("bad ignore value {v:?} in sidecar")))?
            }
            Some((k, _)) => return Err(format_err(format!("unknown sidecar key {k:?}"))),
            None if line.trim().is_empty() => {}
            None => return Err(format_err(format!("bad sidecar line {line:?}"))),
        }
    }
    DenseMap::with_ignore(map.width, map.height, map.values, kind, ignore)
}
