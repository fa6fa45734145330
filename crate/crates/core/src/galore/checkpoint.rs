//! Binary checkpoint of one projected parameter's optimizer state.
//!
//! Layout (little-endian, floats as IEEE-754 bit patterns):
//!
//! ```text
//! magic      8 bytes  "LGRDCKPT"
//! version    u32
//! cfg_hash   32 bytes SHA-256 of the config block
//! cfg_len    u32, then the config block
//! name       u32 length + UTF-8
//! shape      u64 m, u64 n
//! side       u8
//! step       u64
//! basis      u8 flag; if 1: matrix, side u8, birth u64, method u8, deficient u8
//! moment1    matrix
//! moment2    matrix
//! refreshes  u64 count + u64 each
//! ```
//!
//! A matrix is `u64 rows, u64 cols` followed by `rows·cols` f64 values.

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use super::adamw::AdamParams;
use super::state::{GaloreConfig, GaloreParamState, OperatorRedraw, ProjectionMethod};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::sketch::Mixing;
use crate::subspace::{BasisMethod, ProjectionBasis, Side, Truncation};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LGRDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn matrix(&mut self, m: &DenseMatrix) {
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        for &x in m.as_slice() {
            self.f64(x);
        }
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("size overflows usize".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            t => Err(bad_tag("bool", t)),
        }
    }
    fn matrix(&mut self) -> Result<DenseMatrix> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let len = rows
            .checked_mul(cols)
            .filter(|l| {
                l.checked_mul(8)
                    .is_some_and(|b| b <= self.buf.len() - self.pos)
            })
            .ok_or_else(|| {
                Error::Format(format!("matrix {rows}x{cols} exceeds checkpoint size"))
            })?;
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        DenseMatrix::new(rows, cols, data)
            .map_err(|e| Error::Format(format!("bad matrix in checkpoint: {e}")))
    }
}

fn bad_tag(what: &str, t: u8) -> Error {
    Error::Format(format!("unknown {what} tag {t}"))
}

fn side_tag(s: Side) -> u8 {
    match s {
        Side::Left => 0,
        Side::Right => 1,
    }
}

fn side_from(t: u8) -> Result<Side> {
    match t {
        0 => Ok(Side::Left),
        1 => Ok(Side::Right),
        _ => Err(bad_tag("side", t)),
    }
}

fn method_tag(m: BasisMethod) -> u8 {
    match m {
        BasisMethod::ExactSvd => 0,
        BasisMethod::Srft => 1,
        BasisMethod::Gaussian => 2,
    }
}

fn method_from(t: u8) -> Result<BasisMethod> {
    match t {
        0 => Ok(BasisMethod::ExactSvd),
        1 => Ok(BasisMethod::Srft),
        2 => Ok(BasisMethod::Gaussian),
        _ => Err(bad_tag("basis method", t)),
    }
}

fn encode_config(c: &GaloreConfig, a: &AdamParams) -> Vec<u8> {
    let mut e = Enc(Vec::with_capacity(96));
    e.u64(c.rank as u64);
    e.u64(c.refresh_interval);
    e.f64(c.scale);
    e.u8(match c.method {
        ProjectionMethod::ExactSvd => 0,
        ProjectionMethod::Srft => 1,
    });
    e.u64(c.oversample as u64);
    e.u8(match c.mixing {
        Mixing::UnitaryDct => 0,
        Mixing::ComplexDft => 1,
    });
    e.u8(match c.truncation {
        Truncation::Leading => 0,
        Truncation::Dominant => 1,
    });
    e.u8(c.reset_moments_on_refresh as u8);
    e.u8(match c.redraw {
        OperatorRedraw::PerRefresh => 0,
        OperatorRedraw::Fixed => 1,
    });
    e.u8(c.side.map_or(0, |s| side_tag(s) + 1));
    e.u64(c.seed);
    e.f64(a.beta1);
    e.f64(a.beta2);
    e.f64(a.eps);
    e.0
}

fn decode_config(bytes: &[u8]) -> Result<(GaloreConfig, AdamParams)> {
    let mut d = Dec { buf: bytes, pos: 0 };
    let cfg = GaloreConfig {
        rank: d.usize()?,
        refresh_interval: d.u64()?,
        scale: d.f64()?,
        method: match d.u8()? {
            0 => ProjectionMethod::ExactSvd,
            1 => ProjectionMethod::Srft,
            t => return Err(bad_tag("projection method", t)),
        },
        oversample: d.usize()?,
        mixing: match d.u8()? {
            0 => Mixing::UnitaryDct,
            1 => Mixing::ComplexDft,
            t => return Err(bad_tag("mixing", t)),
        },
        truncation: match d.u8()? {
            0 => Truncation::Leading,
            1 => Truncation::Dominant,
            t => return Err(bad_tag("truncation", t)),
        },
        reset_moments_on_refresh: d.bool()?,
        redraw: match d.u8()? {
            0 => OperatorRedraw::PerRefresh,
            1 => OperatorRedraw::Fixed,
            t => return Err(bad_tag("redraw", t)),
        },
        side: match d.u8()? {
            0 => None,
            t => Some(side_from(t - 1)?),
        },
        seed: d.u64()?,
    };
    let adam = AdamParams {
        beta1: d.f64()?,
        beta2: d.f64()?,
        eps: d.f64()?,
    };
    if d.pos != bytes.len() {
        return Err(Error::Format("trailing bytes in config block".into()));
    }
    Ok((cfg, adam))
}

/// SHA-256 of the encoded config; identifies the optimizer settings.
pub fn config_hash(cfg: &GaloreConfig, adam: &AdamParams) -> [u8; 32] {
    Sha256::digest(encode_config(cfg, adam)).into()
}

/// Serialize a parameter's state into the checkpoint layout.
pub fn encode_checkpoint(state: &GaloreParamState) -> Vec<u8> {
    let cfg = encode_config(&state.config, &state.adam);
    let mut e = Enc(Vec::new());
    e.bytes(CHECKPOINT_MAGIC);
    e.u32(CHECKPOINT_VERSION);
    e.bytes(&Sha256::digest(&cfg));
    e.u32(cfg.len() as u32);
    e.bytes(&cfg);
    e.u32(state.name.len() as u32);
    e.bytes(state.name.as_bytes());
    e.u64(state.shape.0 as u64);
    e.u64(state.shape.1 as u64);
    e.u8(side_tag(state.side));
    e.u64(state.step);
    match &state.basis {
        None => e.u8(0),
        Some(b) => {
            e.u8(1);
            e.matrix(b.matrix());
            e.u8(side_tag(b.side()));
            e.u64(b.birth_step());
            e.u8(method_tag(b.method()));
            e.u8(b.is_rank_deficient() as u8);
        }
    }
    e.matrix(&state.moment1);
    e.matrix(&state.moment2);
    e.u64(state.refresh_steps.len() as u64);
    for &s in &state.refresh_steps {
        e.u64(s);
    }
    e.0
}

/// Parse and validate a checkpoint produced by [`encode_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8]) -> Result<GaloreParamState> {
    let mut d = Dec { buf: bytes, pos: 0 };
    if d.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = d.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let stored_hash = d.take(32)?;
    let cfg_len = d.u32()? as usize;
    let cfg_bytes = d.take(cfg_len)?;
    if Sha256::digest(cfg_bytes).as_slice() != stored_hash {
        return Err(Error::Format("config hash mismatch".into()));
    }
    let (config, adam) = decode_config(cfg_bytes)?;
    let name_len = d.u32()? as usize;
    let name = String::from_utf8(d.take(name_len)?.to_vec())
        .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
    let shape = (d.usize()?, d.usize()?);
    let side = side_from(d.u8()?)?;
    let step = d.u64()?;
    let basis = if d.bool()? {
        let m = d.matrix()?;
        let bside = side_from(d.u8()?)?;
        let birth = d.u64()?;
        let method = method_from(d.u8()?)?;
        let deficient = d.bool()?;
        Some(ProjectionBasis::from_parts(m, bside, method, deficient).with_birth_step(birth))
    } else {
        None
    };
    let moment1 = d.matrix()?;
    let moment2 = d.matrix()?;
    let count = d.usize()?;
    if count.saturating_mul(8) > bytes.len() - d.pos {
        return Err(Error::Format("refresh list exceeds checkpoint size".into()));
    }
    let refresh_steps = (0..count).map(|_| d.u64()).collect::<Result<Vec<_>>>()?;
    if d.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }

    let mut state = GaloreParamState::new(name, shape, config, adam)?;
    if state.side != side
        || state.moment1.shape() != moment1.shape()
        || moment1.shape() != moment2.shape()
    {
        return Err(Error::Format(
            "checkpoint state disagrees with its config".into(),
        ));
    }
    if let Some(b) = &basis {
        let (m, n) = shape;
        if b.side() != side || b.ambient_dim() != side.ambient_dim(m, n) || b.rank() != config.rank
        {
            return Err(Error::Format(
                "checkpoint basis disagrees with its config".into(),
            ));
        }
    }
    state.basis = basis;
    state.moment1 = moment1;
    state.moment2 = moment2;
    state.step = step;
    state.refresh_steps = refresh_steps;
    Ok(state)
}

pub fn write_checkpoint<W: Write>(state: &GaloreParamState, mut w: W) -> Result<()> {
    w.write_all(&encode_checkpoint(state))?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<GaloreParamState> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode_checkpoint(&buf)
}
