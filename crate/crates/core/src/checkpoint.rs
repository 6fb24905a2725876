//! Self-describing binary checkpoint: embedded config text, training step
//! counter, and the named parameter tensors with shape headers,
//! little-endian f32 payloads. Save -> load -> forward is bit-identical.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::config::{model_from_kv, model_to_kv, parse_kv_text, render_kv};
use crate::error::{Error, Result};
use crate::model::{build, Model};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config_text = render_kv(&model_to_kv(&model.config));
    buf.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_text.as_bytes());
    buf.extend_from_slice(&model.step.to_le_bytes());
    buf.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, name, tensor) in model.store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(r.err("bad magic, expected MMCK".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| r.err("config text is not utf-8".into()))?;
    let config = model_from_kv(&parse_kv_text(config_text)?)?;
    let step = r.u64()?;
    let count = r.u32()? as usize;

    let mut model = build::<f32>(&config)?;
    if count != model.store.len() {
        return Err(r.err(format!(
            "checkpoint has {count} tensors, architecture expects {}",
            model.store.len()
        )));
    }
    for id in model.store.ids().collect::<Vec<_>>() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.err("tensor name is not utf-8".into()))?
            .to_string();
        if name != model.store.name(id) {
            return Err(r.err(format!(
                "tensor {} named '{name}', architecture expects '{}'",
                id.index(),
                model.store.name(id)
            )));
        }
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        if shape != model.store.value(id).shape() {
            return Err(r.err(format!(
                "tensor '{name}' has shape {shape:?}, architecture expects {:?}",
                model.store.value(id).shape()
            )));
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        model.store.set(id, Tensor::new(shape, data)?)?;
    }
    if r.remaining() != 0 {
        return Err(r.err(format!("{} trailing bytes", r.remaining())));
    }
    model.step = step;
    Ok(model)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(format!(
                "truncated at offset {} (wanted {n} bytes of {})",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn err(&self, msg: String) -> Error {
        Error::Format(format!("{}: {msg}", self.path.display()))
    }
}
