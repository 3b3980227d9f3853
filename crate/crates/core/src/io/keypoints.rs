use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::io::write_atomic;

/// Writes keypoints as CSV with header `k,r,a,s`.
pub fn write_keypoints_csv(path: &Path, keypoints: &[Point3]) -> Result<()> {
    let mut out = String::from("k,r,a,s\n");
    for (k, p) in keypoints.iter().enumerate() {
        let _ = writeln!(out, "{k},{},{},{}", p.r, p.a, p.s);
    }
    write_atomic(path, out.as_bytes())?;
    Ok(())
}

pub fn read_keypoints_csv(path: &Path) -> Result<Vec<Point3>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("k,r,a,s") {
        return Err(Error::parse(0, "expected header k,r,a,s"));
    }
    let mut out = Vec::new();
    let mut offset = "k,r,a,s\n".len() as u64;
    for line in lines {
        let fields: Vec<&str> = line.trim().split(',').collect();
        let parsed: Option<(usize, [f64; 3])> = (|| {
            if fields.len() != 4 {
                return None;
            }
            Some((
                fields[0].parse().ok()?,
                [
                    fields[1].parse().ok()?,
                    fields[2].parse().ok()?,
                    fields[3].parse().ok()?,
                ],
            ))
        })();
        match parsed {
            Some((k, xyz)) if k == out.len() => out.push(Point3::from_array(xyz)),
            _ => return Err(Error::parse(offset, format!("bad keypoint row {line:?}"))),
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}
