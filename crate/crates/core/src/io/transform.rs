use std::fs;
use std::path::Path;

use nalgebra::Matrix3x4;

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::io::{write_atomic, Reader};
use crate::tps::TpsTransform;

const MAGIC: &[u8; 4] = b"TPSW";
const VERSION: u32 = 1;

/// Layout: magic `TPSW`, u32 version, u32 K, f64 lambda, K x 3 control
/// points, 3 x 4 affine block (row-major), K x 3 warp weights. All
/// little-endian, floats as f64.
pub fn encode_transform(t: &TpsTransform) -> Vec<u8> {
    let k = t.num_control_points();
    let mut out = Vec::with_capacity(20 + 8 * (6 * k + 12));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&t.lambda().to_le_bytes());
    for p in t.control_points() {
        for v in p.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for d in 0..3 {
        for c in 0..4 {
            out.extend_from_slice(&t.affine()[(d, c)].to_le_bytes());
        }
    }
    for w in t.weights() {
        for v in w {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_transform(bytes: &[u8]) -> Result<TpsTransform> {
    let mut rd = Reader::new(bytes);
    if rd.bytes(4, "magic")? != MAGIC {
        return Err(Error::parse(0, "bad transform magic"));
    }
    let version = rd.u32("version")?;
    if version != VERSION {
        return Err(Error::parse(4, format!("unsupported version {version}")));
    }
    let k_at = rd.offset();
    let k = rd.u32("control point count")? as usize;
    if k > rd.remaining() / 48 {
        return Err(Error::parse(k_at, format!("control point count {k} exceeds file size")));
    }
    let lambda = rd.f64("lambda")?;
    let mut control = Vec::with_capacity(k);
    for _ in 0..k {
        control.push(Point3::new(
            rd.f64("control point")?,
            rd.f64("control point")?,
            rd.f64("control point")?,
        ));
    }
    let mut affine = Matrix3x4::zeros();
    for d in 0..3 {
        for c in 0..4 {
            affine[(d, c)] = rd.f64("affine block")?;
        }
    }
    let mut weights = Vec::with_capacity(k);
    for _ in 0..k {
        weights.push([rd.f64("weight")?, rd.f64("weight")?, rd.f64("weight")?]);
    }
    rd.expect_end()?;
    TpsTransform::from_parts(control, affine, weights, lambda)
}

pub fn save_transform(t: &TpsTransform, path: &Path) -> Result<()> {
    write_atomic(path, &encode_transform(t))?;
    Ok(())
}

pub fn load_transform(path: &Path) -> Result<TpsTransform> {
    decode_transform(&fs::read(path)?)
}
