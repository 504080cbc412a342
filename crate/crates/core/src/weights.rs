//! Weights file: a manifest of (name, dtype, shape) followed by one EVT1 blob per entry.
//!
//! ```text
//! "EVTW" | u32 count | count x (u16 name_len, name, u8 dtype, u8 ndim, ndim x u32)
//!        | count x EVT1 blob, in manifest order
//! ```
//! All integers are little-endian.

use evit_tensor::io::{self, DynTensor, IoError};
use evit_tensor::{DType, Element};

use crate::model::{BuildOptions, Model};
use crate::spec::ModelSpec;
use crate::{ModelError, Result};

pub const MAGIC: &[u8; 4] = b"EVTW";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
}

fn format_err(offset: usize, detail: impl Into<String>) -> ModelError {
    ModelError::Io(IoError::Format {
        offset,
        detail: detail.into(),
    })
}

pub fn encode_weights(entries: &[(String, DynTensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(entries.len()).map_err(|_| ModelError::Param("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| ModelError::Param(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dtype().code());
        out.push(t.dims().len() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, t) in entries {
        out.extend_from_slice(&match t {
            DynTensor::F32(t) => io::encode(t)?,
            DynTensor::F64(t) => io::encode(t)?,
        });
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + n {
            return Err(format_err(
                self.bytes.len(),
                format!("truncated {what}: need {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a weights file into named tensors, checking every blob against its manifest entry.
pub fn decode_weights(bytes: &[u8]) -> Result<Vec<(ManifestEntry, DynTensor)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(format_err(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let count = c.u32("entry count")? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = c.pos;
        let len = c.u16("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| format_err(at + 2, "name is not UTF-8"))?
            .to_string();
        let dt_at = c.pos;
        let code = c.u8("dtype")?;
        let dtype = DType::from_code(code).ok_or_else(|| format_err(dt_at, format!("unknown dtype code {code}")))?;
        let ndim = c.u8("rank")? as usize;
        let dims = (0..ndim)
            .map(|_| c.u32("extent").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        manifest.push(ManifestEntry { name, dtype, dims });
    }
    let mut out = Vec::with_capacity(manifest.len());
    for entry in manifest {
        let at = c.pos;
        let (t, used) = io::decode_prefix(&bytes[at..]).map_err(|e| match e {
            IoError::Format { offset, detail } => format_err(at + offset, detail),
            other => other.into(),
        })?;
        if t.dtype() != entry.dtype || t.dims() != entry.dims.as_slice() {
            return Err(format_err(
                at,
                format!(
                    "blob for {} is {} {:?}, manifest says {} {:?}",
                    entry.name,
                    t.dtype(),
                    t.dims(),
                    entry.dtype,
                    entry.dims
                ),
            ));
        }
        c.pos += used;
        out.push((entry, t));
    }
    if c.pos != bytes.len() {
        return Err(format_err(c.pos, format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(out)
}

impl<E: Element> Model<E> {
    /// Every store entry, running statistics included, in registry order.
    pub fn save_weights(&self) -> Result<Vec<u8>> {
        let entries: Vec<(String, DynTensor)> = self
            .params()
            .iter()
            .map(|(_, n, p)| (n.to_string(), DynTensor::from(p.tensor.clone())))
            .collect();
        encode_weights(&entries)
    }

    /// Rebuilds a model from a weights file. The file may hold either the
    /// plain or the BN-folded parameter set; tensors are cast to `E`.
    pub fn load_weights(spec: &ModelSpec, options: BuildOptions, bytes: &[u8]) -> Result<Self> {
        let entries = decode_weights(bytes)?;
        let mut model = Model::<E>::build_with(spec, options, 0)?;
        let names = |m: &Model<E>| m.params().iter().map(|(_, n, _)| n.to_string()).collect::<Vec<_>>();
        let file_names: Vec<&str> = entries.iter().map(|(e, _)| e.name.as_str()).collect();
        if names(&model) != file_names {
            let folded = model.fold_bn()?;
            if names(&folded) != file_names {
                let expected = names(&model);
                let missing = expected.iter().find(|n| !file_names.contains(&n.as_str()));
                let unexpected = file_names.iter().find(|n| !expected.iter().any(|e| e == *n));
                return Err(ModelError::Structure(format!(
                    "weights do not match this spec ({} entries in file, {} expected; first missing {:?}, first unexpected {:?})",
                    file_names.len(),
                    expected.len(),
                    missing,
                    unexpected
                )));
            }
            model = folded;
        }
        for (entry, t) in entries {
            model.params_mut().set_by_name(&entry.name, t.into_element())?;
        }
        Ok(model)
    }
}
