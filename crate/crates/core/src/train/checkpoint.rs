//! Checkpoint container.
//!
//! Layout (little-endian): magic `SRCK`, u32 version, u32 config length,
//! UTF-8 TOML config echo, u64 next epoch, u64 iteration, u64 optimizer
//! step, f64 optimizer learning rate, u32 array count, then per array:
//! u32 name length, name, u32 rank, u64 dims (rows, cols), rows x cols f64
//! row-major. Arrays are the model tensors followed by `adam.m/<name>` and
//! `adam.v/<name>` for each of them.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::io::{write_atomic, Reader};
use crate::net::ModelParams;
use crate::train::adam::AdamState;
use crate::train::config::TrainConfig;

const MAGIC: &[u8; 4] = b"SRCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub optimizer: AdamState,
    /// Next epoch to run.
    pub epoch: u64,
    pub iteration: u64,
}

fn put_array(out: &mut Vec<u8>, name: &str, m: &DMatrix<f64>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = ck.config.to_toml_string();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&ck.epoch.to_le_bytes());
    out.extend_from_slice(&ck.iteration.to_le_bytes());
    out.extend_from_slice(&ck.optimizer.step.to_le_bytes());
    out.extend_from_slice(&ck.optimizer.lr.to_le_bytes());
    let tensors = ck.params.tensors();
    out.extend_from_slice(&((tensors.len() * 3) as u32).to_le_bytes());
    for (name, t) in &tensors {
        put_array(&mut out, name, t);
    }
    for (prefix, moments) in [("adam.m/", &ck.optimizer.first), ("adam.v/", &ck.optimizer.second)] {
        for ((name, _), m) in tensors.iter().zip(moments.iter()) {
            put_array(&mut out, &format!("{prefix}{name}"), m);
        }
    }
    out
}

fn get_array(rd: &mut Reader, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let at = rd.offset();
    let len = rd.u32("array name length")? as usize;
    let got = rd.bytes(len, "array name")?;
    if got != name.as_bytes() {
        return Err(Error::parse(
            at,
            format!("expected array {name}, found {:?}", String::from_utf8_lossy(got)),
        ));
    }
    let rank_at = rd.offset();
    if rd.u32("array rank")? != 2 {
        return Err(Error::parse(rank_at, format!("array {name} must have rank 2")));
    }
    let dims_at = rd.offset();
    let (r, c) = (rd.u64("array dims")? as usize, rd.u64("array dims")? as usize);
    if (r, c) != (rows, cols) {
        return Err(Error::parse(
            dims_at,
            format!("array {name} has shape ({r}, {c}), expected ({rows}, {cols})"),
        ));
    }
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rd.f64("array data")?;
        }
    }
    Ok(m)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut rd = Reader::new(bytes);
    if rd.bytes(4, "magic")? != MAGIC {
        return Err(Error::parse(0, "not a checkpoint (bad magic)"));
    }
    let version = rd.u32("version")?;
    if version != VERSION {
        return Err(Error::parse(4, format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = rd.u32("config length")? as usize;
    let cfg_at = rd.offset();
    let cfg_text = std::str::from_utf8(rd.bytes(cfg_len, "config")?)
        .map_err(|_| Error::parse(cfg_at, "config echo is not UTF-8"))?;
    let config = TrainConfig::from_toml_str(cfg_text)
        .map_err(|e| Error::parse(cfg_at, format!("config echo: {e}")))?;
    let epoch = rd.u64("epoch")?;
    let iteration = rd.u64("iteration")?;
    let step = rd.u64("optimizer step")?;
    let lr = rd.f64("optimizer learning rate")?;

    let mut params = ModelParams::zeros(config.model);
    let shapes: Vec<(String, (usize, usize))> = params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape()))
        .collect();
    let count_at = rd.offset();
    let count = rd.u32("array count")? as usize;
    if count != shapes.len() * 3 {
        return Err(Error::parse(
            count_at,
            format!("{count} arrays, expected {}", shapes.len() * 3),
        ));
    }
    for (slot, (name, (r, c))) in params.tensors_mut().into_iter().zip(&shapes) {
        *slot = get_array(&mut rd, name, *r, *c)?;
    }
    let mut first = Vec::with_capacity(shapes.len());
    for (name, (r, c)) in &shapes {
        first.push(get_array(&mut rd, &format!("adam.m/{name}"), *r, *c)?);
    }
    let mut second = Vec::with_capacity(shapes.len());
    for (name, (r, c)) in &shapes {
        second.push(get_array(&mut rd, &format!("adam.v/{name}"), *r, *c)?);
    }
    rd.expect_end()?;
    params.validate()?;
    Ok(Checkpoint {
        config,
        params,
        optimizer: AdamState {
            first,
            second,
            step,
            lr,
        },
        epoch,
        iteration,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
