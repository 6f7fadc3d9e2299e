//! The `TSE1` tensor container.
//!
//! Layout, all integers little-endian: magic `TSE1`, `u32` tensor count, then
//! per tensor a `u16` name length, the UTF-8 name, a `u8` rank, `rank` `u32`
//! dims and the `f32` data.

use std::io::Write;
use std::path::Path;

use super::config::{Heads, ModelConfig, OutCaOrder};
use super::params::ParameterStore;
use crate::error::{Error, Result};
use crate::signal::StftConfig;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TSE1";

/// Name of the tensor holding the model configuration.
pub const CONFIG_TENSOR: &str = "meta.config";

/// Ordered named tensors, read from or written to a `TSE1` file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name).ok_or_else(|| Error::CheckpointMismatch { name: name.into(), detail: "missing".into() })
    }

    /// Appends every entry of `store` under `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParameterStore) -> Result<()> {
        for (_, name, e) in store.iter() {
            self.push(format!("{prefix}{name}"), e.tensor.clone())?;
        }
        Ok(())
    }

    /// Overwrites every entry of `store` with the tensor stored under `prefix`.
    ///
    /// Names, order and shapes must agree exactly; the error names the first
    /// tensor that differs.
    pub fn restore_store(&self, prefix: &str, store: &mut ParameterStore) -> Result<()> {
        let saved: Vec<&(String, Tensor<f32>)> = self.entries.iter().filter(|(n, _)| n.starts_with(prefix)).collect();
        let ids: Vec<_> = store.iter().map(|(id, name, _)| (id, name.to_string())).collect();
        for (i, (id, name)) in ids.iter().enumerate() {
            let Some((saved_name, t)) = saved.get(i).map(|e| (&e.0[prefix.len()..], &e.1)) else {
                return Err(Error::CheckpointMismatch { name: name.clone(), detail: "missing from checkpoint".into() });
            };
            if saved_name != name {
                return Err(Error::CheckpointMismatch { name: name.clone(), detail: format!("checkpoint has `{saved_name}` in its place") });
            }
            if t.shape() != store.get(*id).shape() {
                return Err(Error::CheckpointMismatch {
                    name: name.clone(),
                    detail: format!("checkpoint shape {:?}, model expects {:?}", t.shape(), store.get(*id).shape()),
                });
            }
        }
        if let Some((n, _)) = saved.get(ids.len()) {
            return Err(Error::CheckpointMismatch { name: n[prefix.len()..].to_string(), detail: "not part of the model".into() });
        }
        for ((id, _), (_, t)) in ids.iter().zip(saved) {
            *store.get_mut(*id) = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let count = u32::try_from(self.entries.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: `{name}`")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank too high: `{name}`")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dim too large: `{name}`")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a TSE1 file".into()));
        }
        let count = r.u32()?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?.to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint(format!("`{name}` too large")))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            ck.push(name, Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ck)
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn set_model_config(&mut self, cfg: &ModelConfig) -> Result<()> {
        self.push(CONFIG_TENSOR, config_to_tensor(cfg))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        config_from_tensor(self.require(CONFIG_TENSOR)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

const CONFIG_FIELDS: usize = 17;

fn config_to_tensor(cfg: &ModelConfig) -> Tensor<f32> {
    let order = match cfg.out_ca_order {
        OutCaOrder::TimeFirst => 0,
        OutCaOrder::FreqFirst => 1,
    };
    let ints = [
        cfg.channels,
        cfg.kernel,
        cfg.tokens_t,
        cfg.tokens_f,
        cfg.blocks,
        cfg.decoder_blocks,
        cfg.heads.t_sa,
        cfg.heads.f_sa,
        cfg.heads.in_ca,
        cfg.heads.out_ca,
        cfg.ffn_hidden,
        cfg.posenc_channels,
        order,
        cfg.stft.frame_len,
        cfg.stft.hop,
        cfg.stft.fft_size,
    ];
    let mut data: Vec<f32> = ints.iter().map(|&v| v as f32).collect();
    data.push(cfg.input_power as f32);
    Tensor::new([CONFIG_FIELDS], data).expect("fixed length")
}

fn config_from_tensor(t: &Tensor<f32>) -> Result<ModelConfig> {
    if t.shape() != [CONFIG_FIELDS] {
        return Err(Error::CheckpointMismatch { name: CONFIG_TENSOR.into(), detail: format!("shape {:?}", t.shape()) });
    }
    let d = t.data();
    let u = |i: usize| d[i] as usize;
    let cfg = ModelConfig {
        channels: u(0),
        kernel: u(1),
        tokens_t: u(2),
        tokens_f: u(3),
        blocks: u(4),
        decoder_blocks: u(5),
        heads: Heads { t_sa: u(6), f_sa: u(7), in_ca: u(8), out_ca: u(9) },
        ffn_hidden: u(10),
        posenc_channels: u(11),
        out_ca_order: if u(12) == 0 { OutCaOrder::TimeFirst } else { OutCaOrder::FreqFirst },
        stft: StftConfig { frame_len: u(13), hop: u(14), fft_size: u(15) },
        // stored as f32; snap back to the decimal it was written from
        input_power: (d[16] as f64 * 1e6).round() / 1e6,
    };
    cfg.validate()?;
    Ok(cfg)
}
