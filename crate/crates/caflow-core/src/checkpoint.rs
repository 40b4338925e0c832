//! Byte-stable checkpoint container: a JSON manifest plus named parameter
//! arrays (little-endian f32), holding both raw and EMA weights.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{CoreError, Result};
use crate::sampling::SamplerState;
use crate::tensor::{ParamSet, Tensor};
use crate::training::TrainConfig;

const MAGIC: &[u8; 8] = b"CAFWCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Serialized ChaCha stream position so a run's RNG state is recorded.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos_lo: u64,
    pub word_pos_hi: u64,
}

impl RngState {
    pub fn capture(rng: &rand_chacha::ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            word_pos_lo: pos as u64,
            word_pos_hi: (pos >> 64) as u64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub step: u64,
    pub epoch: u64,
    pub sampler: SamplerState,
    pub rng_data: RngState,
    pub rng_sampler: RngState,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub raw: ParamSet<f32>,
    pub ema: ParamSet<f32>,
}

fn write_params(buf: &mut Vec<u8>, tag: u8, params: &ParamSet<f32>) {
    buf.push(tag);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(u8::from(p.trainable));
        buf.push(p.tensor.shape().len() as u8);
        for &d in p.tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(CoreError::Checkpoint("truncated file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_params(r: &mut Reader, expect_tag: u8) -> Result<ParamSet<f32>> {
    let tag = r.u8()?;
    if tag != expect_tag {
        return Err(CoreError::Checkpoint(format!("expected section {expect_tag}, got {tag}")));
    }
    let count = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| CoreError::Checkpoint(e.to_string()))?;
        let trainable = r.u8()? != 0;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(n * 4)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, data).map_err(|e| CoreError::Checkpoint(e.to_string()))?, trainable);
    }
    Ok(params)
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let manifest = serde_json::to_vec(&ckpt.manifest).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
    buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest);
    write_params(&mut buf, 0, &ckpt.raw);
    write_params(&mut buf, 1, &ckpt.ema);
    Ok(buf)
}

pub fn from_bytes(data: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { data, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CoreError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CoreError::Checkpoint(format!("unsupported format version {version}")));
    }
    let mlen = r.u64()? as usize;
    let manifest: CheckpointManifest =
        serde_json::from_slice(r.take(mlen)?).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
    let raw = read_params(&mut r, 0)?;
    let ema = read_params(&mut r, 1)?;
    Ok(Checkpoint { manifest, raw, ema })
}

/// Atomic save: write to a temp sibling, then rename into place.
pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let data = std::fs::read(path)?;
    from_bytes(&data)
}
