//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "AGSP" | version u16 | arch-JSON length u32 | arch JSON bytes
//! tensor count u32 | per tensor:
//!   name length u16 | name UTF-8 | dtype u8 (1 = f32, 2 = f64)
//!   ndim u8 | dims u32 × ndim | raw values
//! ```
//!
//! Training math is `f64`; checkpoints default to storing `f64` so a reloaded
//! model reproduces its source bit for bit (resume and eval depend on that).
//! `f32` storage is offered where a half-size artifact matters more than
//! bit-exactness.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ArchDescriptor, Params, SegModel};

const MAGIC: &[u8; 4] = b"AGSP";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }
}

pub fn save(model: &SegModel, path: &Path, dtype: Dtype) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let arch_json =
        serde_json::to_vec(model.arch()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_all(&(arch_json.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&arch_json).map_err(io_err)?;

    let tensors = model.params.named();
    w.write_all(&(tensors.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    for (name, data, shape) in tensors {
        w.write_all(&(name.len() as u16).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        w.write_all(&[dtype.tag()]).map_err(io_err)?;
        w.write_all(&[shape.len() as u8]).map_err(io_err)?;
        for d in &shape {
            w.write_all(&(*d as u32).to_le_bytes()).map_err(io_err)?;
        }
        match dtype {
            Dtype::F64 => {
                for v in data {
                    w.write_all(&v.to_le_bytes()).map_err(io_err)?;
                }
            }
            Dtype::F32 => {
                for v in data {
                    w.write_all(&(*v as f32).to_le_bytes()).map_err(io_err)?;
                }
            }
        }
    }
    w.flush().map_err(io_err)
}

struct Reader<'a> {
    inner: BufReader<File>,
    path: &'a Path,
}

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Checkpoint(format!("{}: truncated checkpoint", self.path.display()))
            } else {
                Error::io(self.path, e)
            }
        })?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.bytes(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load(path: &Path) -> Result<SegModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path,
    };

    if r.bytes(4)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic, not a checkpoint file",
            path.display()
        )));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let arch_len = r.u32()? as usize;
    if arch_len > 1 << 20 {
        return Err(Error::Checkpoint(format!(
            "{}: implausible arch descriptor size {arch_len}",
            path.display()
        )));
    }
    let arch: ArchDescriptor = serde_json::from_slice(&r.bytes(arch_len)?)
        .map_err(|e| Error::Checkpoint(format!("{}: bad arch descriptor: {e}", path.display())))?;
    arch.validate()?;

    let count = r.u32()? as usize;
    let mut tensors: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?)
            .map_err(|_| Error::Checkpoint(format!("{}: non-UTF-8 tensor name", path.display())))?;
        let dtype = r.u8()?;
        let ndim = r.u8()? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!(
                "{}: tensor '{name}' has {ndim} dimensions",
                path.display()
            )));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > 1 << 28 {
            return Err(Error::Checkpoint(format!(
                "{}: tensor '{name}' has implausible element count {numel}",
                path.display()
            )));
        }
        let data = match dtype {
            1 => r
                .bytes(numel * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect(),
            2 => r
                .bytes(numel * 8)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            other => {
                return Err(Error::Checkpoint(format!(
                    "{}: tensor '{name}' has unknown dtype tag {other}",
                    path.display()
                )));
            }
        };
        if tensors.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Checkpoint(format!(
                "{}: duplicate tensor '{name}'",
                path.display()
            )));
        }
    }

    let mut params = Params::zeros(&arch);
    let expected: Vec<(String, Vec<usize>)> = params
        .named()
        .into_iter()
        .map(|(n, _, s)| (n, s))
        .collect();
    let mut fills: Vec<Vec<f64>> = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let (got_shape, data) = tensors.remove(name).ok_or_else(|| {
            Error::Checkpoint(format!("{}: missing tensor '{name}'", path.display()))
        })?;
        if got_shape != *shape {
            return Err(Error::Checkpoint(format!(
                "{}: tensor '{name}' has shape {got_shape:?}, arch expects {shape:?}",
                path.display()
            )));
        }
        fills.push(data);
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!(
            "{}: unknown tensor '{name}'",
            path.display()
        )));
    }
    for (slot, data) in params.flat_mut().into_iter().zip(&fills) {
        slot.copy_from_slice(data);
    }
    SegModel::from_parts(arch, params)
}

/// Load and require a specific architecture — the guard that turns "3-channel
/// checkpoint into a 4-channel run" into a clear error instead of a shape
/// panic later.
pub fn load_expecting(path: &Path, expected: &ArchDescriptor) -> Result<SegModel> {
    let model = load(path)?;
    if model.arch() != expected {
        return Err(Error::Checkpoint(format!(
            "{}: arch mismatch: checkpoint holds {:?}, run expects {:?}",
            path.display(),
            model.arch(),
            expected
        )));
    }
    Ok(model)
}
