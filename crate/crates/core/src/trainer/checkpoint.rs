//! TPL1 checkpoint container. All integers and floats are little-endian.
//!
//! ```text
//! "TPL1"
//! u32 C, u32 R_coarse, u32 R_resid, u32 d_w, u32 dtype (1 = f32, 2 = f64)
//! coarse planes xy, yz, zx          C·R_coarse² values each, row-major
//! decoder: u32 layers, then per layer u32 fan_in, u32 fan_out,
//!          weight (fan_in × fan_out), bias (fan_out)
//! w                                 d_w values
//! sections: [u8; 4] tag, u64 payload bytes, payload
//!   "SR3D" u32 blocks, then per block three conv records (xy, yz, zx)
//!   "AW3D" three conv records
//! conv record: u32 C_out, u32 C_in, u8 demodulate, f64 eps,
//!              kernel (C_out × C_in × 3 × 3), affine_w (d_w × C_in), affine_b (C_in)
//! ```
//!
//! "SR3D" is required; unknown sections are skipped.

use std::path::Path;

use crate::aware3d::{Aware3dParams, ModConvParams};
use crate::autodiff::Tensor;
use crate::decoder::{DecoderParams, Linear};
use crate::error::{Error, Result};
use crate::triplane::{StyleCode, SuperRes3d, TriPlane};

use super::StudentField;

pub const MAGIC: &[u8; 4] = b"TPL1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u32 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            _ => Err(Error::Checkpoint(format!("unknown dtype code {c}"))),
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            _ => Err(Error::Config(format!("dtype must be f32 or f64, got `{s}`"))),
        }
    }
}

struct Writer {
    buf: Vec<u8>,
    dtype: Dtype,
}

impl Writer {
    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn values(&mut self, t: &Tensor) {
        for v in t.data() {
            match self.dtype {
                Dtype::F32 => self.buf.extend_from_slice(&(*v as f32).to_le_bytes()),
                Dtype::F64 => self.buf.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }

    fn conv(&mut self, c: &ModConvParams) {
        self.u32(c.c_out());
        self.u32(c.c_in());
        self.buf.push(c.demodulate as u8);
        self.buf.extend_from_slice(&c.eps.to_le_bytes());
        self.values(&c.kernel);
        self.values(&c.affine_w);
        self.values(&c.affine_b);
    }

    fn section(&mut self, tag: &[u8; 4], body: impl FnOnce(&mut Writer)) {
        let mut inner = Writer { buf: Vec::new(), dtype: self.dtype };
        body(&mut inner);
        self.buf.extend_from_slice(tag);
        self.buf.extend_from_slice(&(inner.buf.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(&inner.buf);
    }
}

/// Serializes `student` to bytes.
pub fn encode(student: &StudentField, dtype: Dtype) -> Vec<u8> {
    let mut w = Writer { buf: MAGIC.to_vec(), dtype };
    let d_w = student.w.dim();
    for v in [student.channels(), student.coarse_res(), student.residual_res(), d_w] {
        w.u32(v);
    }
    w.u32(dtype.code() as usize);
    for p in student.coarse.planes() {
        w.values(p);
    }
    w.u32(student.decoder.layers.len());
    for l in &student.decoder.layers {
        w.u32(l.fan_in());
        w.u32(l.fan_out());
        w.values(&l.weight);
        w.values(&l.bias);
    }
    w.values(&student.w.0);
    w.section(b"SR3D", |s| {
        s.u32(student.sr.blocks.len());
        for block in &student.sr.blocks {
            block.iter().for_each(|c| s.conv(c));
        }
    });
    if let Some(a) = &student.aware {
        w.section(b"AW3D", |s| a.convs.iter().for_each(|c| s.conv(c)));
    }
    w.buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    dtype: Dtype,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let width = match self.dtype {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        };
        let raw = self.take(n.checked_mul(width).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(width)
            .map(|b| match self.dtype {
                Dtype::F32 => f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
                Dtype::F64 => f64::from_le_bytes(b.try_into().expect("8 bytes")),
            })
            .collect();
        Tensor::new(shape, data)
    }

    fn conv(&mut self, d_w: usize) -> Result<ModConvParams> {
        let c_out = self.u32()?;
        let c_in = self.u32()?;
        let demodulate = match self.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Checkpoint(format!("bad demodulation flag {b}"))),
        };
        let eps = self.f64()?;
        Ok(ModConvParams {
            kernel: self.tensor(vec![c_out, c_in, 3, 3])?,
            affine_w: self.tensor(vec![d_w, c_in])?,
            affine_b: self.tensor(vec![c_in])?,
            demodulate,
            eps,
        })
    }
}

/// Parses a checkpoint; the returned dtype is the storage precision.
pub fn decode_bytes(buf: &[u8]) -> Result<(StudentField, Dtype)> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(Error::Checkpoint("missing TPL1 magic".into()));
    }
    let mut r = Reader { buf, pos: 4, dtype: Dtype::F64 };
    let (c, rc, rr, d_w) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    r.dtype = Dtype::from_code(r.u32()? as u32)?;
    if c == 0 || rc == 0 || d_w == 0 || rr % rc != 0 {
        return Err(Error::Checkpoint(format!("bad header C={c} R_coarse={rc} R_resid={rr} d_w={d_w}")));
    }
    let planes = [r.tensor(vec![c, rc, rc])?, r.tensor(vec![c, rc, rc])?, r.tensor(vec![c, rc, rc])?];
    let coarse = TriPlane::new(planes)?;
    let n_layers = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        let (fi, fo) = (r.u32()?, r.u32()?);
        layers.push(Linear { weight: r.tensor(vec![fi, fo])?, bias: r.tensor(vec![fo])? });
    }
    let decoder = DecoderParams::from_layers(layers).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let w = StyleCode(r.tensor(vec![d_w])?);
    let (mut sr, mut aware) = (None, None);
    while r.pos < buf.len() {
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let len = r.u64()?;
        let end = r.pos.checked_add(len).filter(|&e| e <= buf.len()).ok_or_else(|| Error::Checkpoint("truncated section".into()))?;
        match &tag {
            b"SR3D" => {
                let n = r.u32()?;
                let mut blocks = Vec::with_capacity(n.min(16));
                for _ in 0..n {
                    blocks.push([r.conv(d_w)?, r.conv(d_w)?, r.conv(d_w)?]);
                }
                sr = Some(SuperRes3d { blocks });
            }
            b"AW3D" => aware = Some(Aware3dParams { convs: [r.conv(d_w)?, r.conv(d_w)?, r.conv(d_w)?] }),
            _ => {}
        }
        if r.pos != end && matches!(&tag, b"SR3D" | b"AW3D") {
            return Err(Error::Checkpoint(format!("section {} has {} stray bytes", String::from_utf8_lossy(&tag), end - r.pos)));
        }
        r.pos = end;
    }
    let sr = sr.ok_or_else(|| Error::Checkpoint("missing SR3D section".into()))?;
    let student = StudentField { coarse, sr, aware, decoder, w };
    if student.residual_res() != rr {
        return Err(Error::Checkpoint(format!("header R_resid {rr} disagrees with {} SR3D blocks", student.sr.blocks.len())));
    }
    student.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((student, r.dtype))
}

pub fn write_checkpoint(path: &Path, student: &StudentField, dtype: Dtype) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode(student, dtype)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(StudentField, Dtype)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bytes(&buf)
}
