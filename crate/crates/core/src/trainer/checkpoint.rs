//! Versioned binary checkpoints: config echo, parameter tensors, balancing bias.
//!
//! Layout (little endian): magic `MOEK`, `u32` version, `u32` config length,
//! config JSON, `u64` step, `u32` parameter count, then per parameter `u32`
//! name length, name, `u32` rank, `u64` dims, `f64` values; finally
//! `layers × experts` `f64` bias entries.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::moe::{MoeConfig, MoeModel};
use crate::numeric::{Rng, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MOEK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_bytes(model: &MoeModel, step: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config())?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(step as u64).to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for layer in &model.layers {
        for b in &layer.bias {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &MoeModel, step: usize, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_bytes(model, step)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(MoeModel, usize)> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let cfg: MoeConfig = serde_json::from_slice(r.take(len)?)?;
    let step = r.u64()? as usize;
    let mut model = MoeModel::new(cfg, &mut Rng::new(0))?;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(Error::format("checkpoint", format!("{count} parameters, expected {}", model.params.len())));
    }
    for p in model.params.iter_mut() {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        if name != p.name {
            return Err(Error::format("checkpoint", format!("parameter {name:?} where {:?} was expected", p.name)));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != p.value.shape() {
            return Err(Error::format("checkpoint", format!("{name} has shape {shape:?}")));
        }
        let data = (0..p.value.len()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        p.value = Tensor::new(shape, data)?;
    }
    for layer in &mut model.layers {
        for b in layer.bias.iter_mut() {
            *b = r.f64()?;
        }
    }
    if r.at != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    Ok((model, step))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(MoeModel, usize)> {
    checkpoint_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let cfg = MoeConfig { experts: 4, top_k: 2, layers: 2, hidden: 4, ffn: 4, vocab: 8, aux_loss_free: true, ..MoeConfig::default() };
        let mut model = MoeModel::new(cfg, &mut Rng::new(3)).unwrap();
        model.layers[1].bias = vec![0.5, -0.25, 0.0, -0.25];
        let bytes = checkpoint_bytes(&model, 17).unwrap();
        let (back, step) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(step, 17);
        assert_eq!(back, model);
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(checkpoint_from_bytes(&bad).is_err());
    }
}
