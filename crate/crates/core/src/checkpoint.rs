//! Portable binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CVMT" | version: u32 | blob_len: u32 | blob (key = value text)
//! count: u32 | count x (name_len: u32 | name | rank: u32 | rank x u64 | f32 data)
//! ```
//!
//! The blob carries the model configuration, the vocabulary hash and any
//! training state the caller adds.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::{ConvMath, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CVMT";
pub const VERSION: u32 = 1;

/// A loaded checkpoint: the model plus every blob entry.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ConvMath<f32>,
    pub meta: KeyValues,
}

impl Checkpoint {
    pub fn vocab_hash(&self) -> Option<&str> {
        self.meta.get("vocab.hash")
    }
}

pub fn to_bytes(model: &ConvMath<f32>, extra: &KeyValues) -> Vec<u8> {
    let mut meta = extra.clone();
    model.config().to_kv(&mut meta);
    let blob = meta.to_string().into_bytes();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(&blob);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params().iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes through a temporary file and a rename, so an interrupted save
/// never clobbers the previous checkpoint.
pub fn save(path: &Path, model: &ConvMath<f32>, extra: &KeyValues) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&to_bytes(model, extra)).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let blob_len = r.u32()? as usize;
    let blob =
        std::str::from_utf8(r.take(blob_len)?).map_err(|_| Error::Checkpoint("config blob is not UTF-8".into()))?;
    let meta = KeyValues::parse(blob)?;
    let mut problems = Vec::new();
    let config = ModelConfig::from_kv(&meta, 0, &mut problems);
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut model = ConvMath::<f32>::new(config, 0)?;
    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "{count} parameter records, the configured model has {}",
            model.params().len()
        )));
    }
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let param = model
            .params_mut()
            .by_name_mut(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
        if param.value.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {shape:?}, the model expects {:?}",
                param.value.shape()
            )));
        }
        param.value = Tensor::new(&shape, data)?.with_requires_grad(true);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { model, meta })
}
