//! `LMCK` container: magic, version, config JSON, named tensors, CRC32.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::ndtensor::{DType, Element, Tensor};
use crate::train::AdamW;

pub const MAGIC: &[u8; 4] = b"LMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl RawTensor {
    pub fn from_tensor<T: Element>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size());
        t.data().iter().for_each(|v| v.write_le(&mut bytes));
        RawTensor {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    /// Decodes, converting through `f64` when widths differ.
    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match self.dtype {
            d if d == T::DTYPE => self.bytes.chunks(d.size()).map(T::read_le).collect(),
            DType::F32 => self.bytes.chunks(4).map(|b| T::from_f64(f32::read_le(b) as f64)).collect(),
            DType::F64 => self.bytes.chunks(8).map(|b| T::from_f64(f64::read_le(b))).collect(),
        };
        Tensor::new(self.shape.clone(), data)
    }
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<RawTensor>,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ck.config.len() as u32).to_le_bytes());
    out.extend_from_slice(ck.config.as_bytes());
    out.extend_from_slice(&(ck.tensors.len() as u32).to_le_bytes());
    for t in &ck.tensors {
        let name = t.name.as_bytes();
        if name.len() > u16::MAX as usize || t.shape.len() > u8::MAX as usize {
            return Err(Error::Checkpoint(format!("tensor `{}` cannot be encoded", t.name)));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(t.dtype.code());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dim {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&t.bytes);
    }
    let crc = crc32fast::hash(&out[4..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn utf8(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an LMCK checkpoint".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let actual = crc32fast::hash(&body[4..]);
    if actual != stored {
        return Err(Error::Checkpoint(format!(
            "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let n = r.u32()? as usize;
    let config = r.utf8(n)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = r.utf8(n)?;
        let code = r.u8()?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` has unknown dtype {code}")))?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(dtype.size(), |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
        let bytes = r.take(len)?.to_vec();
        tensors.push(RawTensor {
            name,
            dtype,
            shape,
            bytes,
        });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(Checkpoint { config, tensors })
}

/// Saves parameters and, optionally, AdamW moments as `opt/` tensors.
pub fn save_checkpoint<T: Element>(model: &Model<T>, opt: Option<&AdamW<T>>, path: &Path) -> Result<()> {
    let mut tensors: Vec<RawTensor> = model.store.iter().map(|(n, t)| RawTensor::from_tensor(n, t)).collect();
    if let Some(o) = opt {
        tensors.push(RawTensor::from_tensor("opt/step", &Tensor::<f64>::from_f64(vec![1], &[o.step as f64])?));
        for (i, (name, _)) in model.store.iter().enumerate() {
            tensors.push(RawTensor::from_tensor(format!("opt/m/{name}"), &o.m[i]));
            tensors.push(RawTensor::from_tensor(format!("opt/v/{name}"), &o.v[i]));
        }
    }
    let config = serde_json::to_string(&model.cfg)?;
    super::write_atomic(path, &encode_checkpoint(&Checkpoint { config, tensors })?)
}

/// AdamW state read back from a checkpoint, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptMoments<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> OptMoments<T> {
    pub fn restore(self, opt: &mut AdamW<T>) -> Result<()> {
        if self.m.len() != opt.m.len() {
            return Err(Error::Checkpoint("optimizer state does not match the parameter set".into()));
        }
        opt.step = self.step;
        opt.m = self.m;
        opt.v = self.v;
        Ok(())
    }
}

/// Rebuilds the model from its embedded config and fills every parameter by
/// name; missing or unexpected names are errors.
pub fn load_checkpoint<T: Element>(path: &Path) -> Result<(Model<T>, Option<OptMoments<T>>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let ck = decode_checkpoint(&bytes)?;
    let cfg: ModelConfig = serde_json::from_str(&ck.config)?;
    let mut model = Model::<T>::build(&cfg, 0)?;
    let (opt_t, params): (Vec<&RawTensor>, Vec<&RawTensor>) = ck.tensors.iter().partition(|t| t.name.starts_with("opt/"));
    let expected: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
    let missing: Vec<&str> = expected
        .iter()
        .filter(|n| !params.iter().any(|t| &t.name == *n))
        .map(String::as_str)
        .collect();
    let extra: Vec<&str> = params
        .iter()
        .filter(|t| !expected.contains(&t.name))
        .map(|t| t.name.as_str())
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Checkpoint(format!(
            "tensor names differ from the model: missing [{}], unexpected [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    for t in params {
        let id = model.store.find(&t.name).expect("checked above");
        let value = t.to_tensor::<T>()?;
        if value.shape() != model.store.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has shape {:?}, model expects {:?}",
                t.name,
                value.shape(),
                model.store.get(id).shape()
            )));
        }
        model.store.get_mut(id).data_mut().copy_from_slice(value.data());
    }
    if opt_t.is_empty() {
        return Ok((model, None));
    }
    let find = |name: &str| {
        opt_t
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("optimizer tensor `{name}` is missing")))
    };
    let step = find("opt/step")?.to_tensor::<f64>()?.data()[0] as u64;
    let mut m = Vec::with_capacity(expected.len());
    let mut v = Vec::with_capacity(expected.len());
    for name in &expected {
        m.push(find(&format!("opt/m/{name}"))?.to_tensor()?);
        v.push(find(&format!("opt/v/{name}"))?.to_tensor()?);
    }
    if opt_t.len() != 1 + 2 * expected.len() {
        return Err(Error::Checkpoint("unexpected optimizer tensors".into()));
    }
    Ok((model, Some(OptMoments { step, m, v })))
}
