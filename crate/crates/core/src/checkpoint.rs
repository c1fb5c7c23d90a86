//! Binary checkpoints: configuration, parameters, batch-norm buffers and
//! optimizer velocity.
//!
//! Layout (little endian): magic `STCK`, `u16` version, `u64` step, `u32` length
//! and UTF-8 bytes of the configuration text, then three tensor sections
//! (parameters, buffers, velocity). A section is a `u32` count followed by, per
//! tensor, a `u32` name length, the name, a `u32` rank, `u64` extents and the
//! values as `f64`.

use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::TensorStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"STCK";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: TrainConfig,
    pub params: TensorStore,
    pub buffers: TensorStore,
    pub velocity: TensorStore,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&u32::try_from(v).expect("fits u32").to_le_bytes());
}

fn put_store(buf: &mut Vec<u8>, store: &TensorStore) {
    put_u32(buf, store.len());
    for (name, t) in store.iter() {
        put_u32(buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u32(buf, t.ndim());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() < n {
            return Err("truncated checkpoint".into());
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn store(&mut self) -> std::result::Result<TensorStore, String> {
        let mut store = TensorStore::new();
        for _ in 0..self.u32()? {
            let len = self.u32()?;
            let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| "tensor name is not UTF-8")?;
            let rank = self.u32()?;
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let count: usize = shape.iter().product();
            let data = self
                .take(count.checked_mul(8).ok_or("tensor too large")?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
            if store.slot(&name).is_some() {
                return Err(format!("duplicate tensor {name}"));
            }
            store.insert(name, t);
        }
        Ok(store)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        let text = self.config.to_text();
        put_u32(&mut buf, text.len());
        buf.extend_from_slice(text.as_bytes());
        put_store(&mut buf, &self.params);
        put_store(&mut buf, &self.buffers);
        put_store(&mut buf, &self.velocity);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes };
        if r.take(4)? != MAGIC {
            return Err("not a checkpoint".into());
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let step = r.u64()?;
        let len = r.u32()?;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| "configuration is not UTF-8")?;
        let config = TrainConfig::from_text(text).map_err(|e| e.to_string())?;
        let params = r.store()?;
        let buffers = r.store()?;
        let velocity = r.store()?;
        if !r.bytes.is_empty() {
            return Err("trailing bytes".into());
        }
        Ok(Self {
            step,
            config,
            params,
            buffers,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|detail| Error::Format {
            path: path.to_path_buf(),
            detail,
        })
    }

    /// Rebuilds the model described by the stored configuration and loads the
    /// stored tensors into it.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.model_config(), self.config.seed)?;
        fill(&mut model.params, &self.params, "parameter")?;
        fill(&mut model.buffers, &self.buffers, "buffer")?;
        Ok(model)
    }
}

fn fill(target: &mut TensorStore, source: &TensorStore, what: &str) -> Result<()> {
    if target.len() != source.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} {what} tensors, model expects {}",
            source.len(),
            target.len()
        )));
    }
    for (name, t) in source.iter() {
        target.assign(name, t.clone())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::zero_velocity;
    use crate::rng::SeededRng;

    fn small_config() -> TrainConfig {
        TrainConfig {
            frame_height: 16,
            frame_width: 16,
            encoder_channels: vec![3],
            n_frames: 3,
            hidden: 4,
            energy_width: 4,
            mask_width1: 4,
            mask_width2: 3,
            ..TrainConfig::default()
        }
    }

    fn checkpoint() -> Checkpoint {
        let config = small_config();
        let model = Model::new(config.model_config(), config.seed).unwrap();
        let mut velocity = zero_velocity(&model.params);
        let mut rng = SeededRng::new(3);
        for t in velocity.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.normal());
        }
        Checkpoint {
            step: 17,
            config,
            params: model.params,
            buffers: model.buffers,
            velocity,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ck"), dir.path().join("b.ck"));
        let ck = checkpoint();
        ck.save(&a).unwrap();
        let loaded = Checkpoint::load(&a).unwrap();
        assert_eq!(loaded, ck);
        loaded.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn restored_model_predicts_identically() {
        let ck = checkpoint();
        let model = ck.model().unwrap();
        let restored = Checkpoint::from_bytes(&ck.to_bytes()).unwrap().model().unwrap();
        let mut rng = SeededRng::new(5);
        let frames = Tensor::from_fn(&[3, 1, 16, 16], |_| rng.uniform());
        assert_eq!(model.predict(&frames).unwrap(), restored.predict(&frames).unwrap());
    }

    #[test]
    fn mismatched_config_is_config_error() {
        let mut ck = checkpoint();
        ck.config.hidden = 5;
        assert!(matches!(ck.model(), Err(Error::Config(_))));
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        let bytes = checkpoint().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"XXXX").is_err());
    }
}
