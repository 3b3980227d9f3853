use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::io::{write_atomic, Reader};
use crate::streamline::{Streamline, Tractogram, UNLABELED};

const MAGIC: &[u8; 4] = b"TRGM";
const VERSION: u32 = 1;
const TEXT_HEADER: &str = "TRGM v1 N=";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TractogramFormat {
    Binary,
    Text,
}

impl TractogramFormat {
    /// `.txt` selects the text format, anything else the binary one.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("txt") => TractogramFormat::Text,
            _ => TractogramFormat::Binary,
        }
    }
}

pub fn load_tractogram(path: &Path, format: TractogramFormat) -> Result<Tractogram> {
    let bytes = fs::read(path)?;
    match format {
        TractogramFormat::Binary => decode_binary(&bytes),
        TractogramFormat::Text => {
            let text = std::str::from_utf8(&bytes).map_err(|e| {
                Error::parse(e.valid_up_to() as u64, "text tractogram is not UTF-8")
            })?;
            decode_text(text)
        }
    }
}

pub fn save_tractogram(t: &Tractogram, path: &Path, format: TractogramFormat) -> Result<()> {
    let bytes = match format {
        TractogramFormat::Binary => encode_binary(t),
        TractogramFormat::Text => encode_text(t).into_bytes(),
    };
    write_atomic(path, &bytes)?;
    Ok(())
}

/// Encodes to the little-endian binary layout. Coordinates are stored as
/// `f32`.
pub fn encode_binary(t: &Tractogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + t.len() * 8 + t.total_points() * 12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.len() as u32).to_le_bytes());
    let p = t.points_per_streamline().unwrap_or(0) as u32;
    out.extend_from_slice(&p.to_le_bytes());
    for s in t.streamlines() {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(&s.label().unwrap_or(UNLABELED).to_le_bytes());
        for q in s.points() {
            for v in q.to_array() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_binary(bytes: &[u8]) -> Result<Tractogram> {
    let mut rd = Reader::new(bytes);
    let magic = rd.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::parse(0, format!("bad magic {magic:?}")));
    }
    let version_at = rd.offset();
    let version = rd.u32("version")?;
    if version != VERSION {
        return Err(Error::parse(
            version_at,
            format!("unsupported version {version}"),
        ));
    }
    let n_at = rd.offset();
    let n = rd.u32("streamline count")? as usize;
    if n == 0 {
        return Err(Error::Validation(
            "tractogram file contains no streamlines".to_string(),
        ));
    }
    let fixed_p = rd.u32("points per streamline")? as usize;
    // each streamline needs at least its 8-byte header
    if n > rd.remaining() / 8 {
        return Err(Error::parse(
            n_at,
            format!("streamline count {n} exceeds file size"),
        ));
    }
    let mut streamlines = Vec::with_capacity(n);
    for i in 0..n {
        let count_at = rd.offset();
        let count = rd.u32("point count")? as usize;
        if fixed_p != 0 && count != fixed_p {
            return Err(Error::parse(
                count_at,
                format!("streamline {i} has {count} points, header says {fixed_p}"),
            ));
        }
        if count > rd.remaining() / 12 + 1 {
            return Err(Error::parse(
                count_at,
                format!("point count {count} of streamline {i} exceeds file size"),
            ));
        }
        let label = rd.u32("bundle label")?;
        let label = (label != UNLABELED).then_some(label);
        let mut pts = Vec::with_capacity(count);
        for _ in 0..count {
            let r = rd.f32("coordinate")?;
            let a = rd.f32("coordinate")?;
            let s = rd.f32("coordinate")?;
            pts.push(Point3::new(r as f64, a as f64, s as f64));
        }
        let s = Streamline::new(pts, label).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("streamline {i}: {m}")),
            Error::Degenerate(m) => Error::Degenerate(format!("streamline {i}: {m}")),
            other => other,
        })?;
        streamlines.push(s);
    }
    rd.expect_end()?;
    Tractogram::new(streamlines)
}

pub fn encode_text(t: &Tractogram) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{TEXT_HEADER}{}", t.len());
    for s in t.streamlines() {
        if let Some(l) = s.label() {
            let _ = write!(out, "{l}");
        }
        out.push(';');
        for (i, q) in s.points().iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{},{},{}", q.r, q.a, q.s);
        }
        out.push('\n');
    }
    out
}

pub fn decode_text(text: &str) -> Result<Tractogram> {
    let mut offset = 0u64;
    let mut lines = text.split_inclusive('\n');
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(0, "empty file"))?;
    let n: usize = header
        .trim_end()
        .strip_prefix(TEXT_HEADER)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::parse(0, format!("bad header {:?}", header.trim_end())))?;
    offset += header.len() as u64;
    if n == 0 {
        return Err(Error::Validation(
            "tractogram file contains no streamlines".to_string(),
        ));
    }

    let mut streamlines = Vec::with_capacity(n);
    for line in lines {
        let line_at = offset;
        offset += line.len() as u64;
        let body = line.trim_end();
        if body.is_empty() {
            continue;
        }
        let (label, coords) = body
            .split_once(';')
            .ok_or_else(|| Error::parse(line_at, "missing ';' after label"))?;
        let label = match label.trim() {
            "" => None,
            l => Some(
                l.parse::<u32>()
                    .map_err(|_| Error::parse(line_at, format!("bad label {l:?}")))?,
            ),
        };
        let mut pts = Vec::new();
        for tok in coords.split_whitespace() {
            let mut it = tok.split(',').map(str::parse::<f64>);
            match (it.next(), it.next(), it.next(), it.next()) {
                (Some(Ok(r)), Some(Ok(a)), Some(Ok(s)), None) => pts.push(Point3::new(r, a, s)),
                _ => return Err(Error::parse(line_at, format!("bad point {tok:?}"))),
            }
        }
        streamlines.push(Streamline::new(pts, label)?);
    }
    if streamlines.len() != n {
        return Err(Error::parse(
            offset,
            format!("header announces {n} streamlines, found {}", streamlines.len()),
        ));
    }
    Tractogram::new(streamlines)
}
