//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! "FLOWCKPT"  u32 version  [32]u8 config digest  u32 record count
//! per record: u32 name length, name bytes, u32 rank, rank × u32 extents,
//!             extents-product × f64
//! [32]u8 SHA-256 of every preceding byte
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::atomic_write;
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel, InvConvInit};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FLOWCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// SHA-256 of the architecture-defining fields and the input shape. The
/// weight-init seed is excluded: it does not change the parameter layout.
pub fn config_digest(config: &FlowConfig, input_shape: [usize; 3]) -> [u8; 32] {
    let canonical = format!(
        "levels={}\nsteps_per_level={}\nhidden={}\nheads={}\nsqueeze={}\nattention={}\ninvconv_init={}\ninput={}x{}x{}\n",
        config.levels,
        config.steps_per_level,
        config.hidden,
        config.heads,
        config.squeeze,
        config.attention.as_str(),
        match config.invconv_init {
            InvConvInit::Rotation => "rotation",
            InvConvInit::Identity => "identity",
        },
        input_shape[0],
        input_shape[1],
        input_shape[2],
    );
    Sha256::digest(canonical.as_bytes()).into()
}

fn push_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &FlowModel) -> Result<()> {
    if !model.is_initialized() {
        return Err(Error::Checkpoint("refusing to save a model whose ActNorm layers are uninitialized".into()));
    }
    let store = model.store();
    let mut buf = Vec::with_capacity(64 + store.numel() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&config_digest(model.config(), model.input_shape()));
    push_u32(&mut buf, store.len())?;
    for p in store.iter() {
        push_u32(&mut buf, p.name.len())?;
        buf.extend_from_slice(p.name.as_bytes());
        push_u32(&mut buf, p.value.rank())?;
        for &d in p.value.shape() {
            push_u32(&mut buf, d)?;
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum: [u8; 32] = Sha256::digest(&buf).into();
    buf.extend_from_slice(&sum);
    atomic_write(path, &buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Rebuilds a model for `config` and `input_shape` and fills it from `path`.
/// The file must carry a matching digest and exactly the model's parameter
/// names and shapes, in order.
pub fn load_checkpoint(path: &Path, config: &FlowConfig, input_shape: [usize; 3]) -> Result<FlowModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 + 4 + 32 + 4 + 32 {
        return Err(Error::Checkpoint(format!("{} is too short", path.display())));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(Error::Checkpoint(format!("{}: checksum mismatch", path.display())));
    }
    let mut cur = Cursor { bytes: body, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    if cur.take(32)? != config_digest(config, input_shape) {
        return Err(Error::Checkpoint(
            "checkpoint was written for a different flow configuration or input shape".into(),
        ));
    }
    let mut model = FlowModel::new(config.clone(), input_shape)?;
    let count = cur.u32()?;
    if count != model.store().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {count} parameters, model has {}",
            model.store().len()
        )));
    }
    for p in model.store_mut().iter_mut() {
        let name_len = cur.u32()?;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = cur.u32()?;
        let shape = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        if name != p.name || shape != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "expected {} {:?}, found {name} {shape:?}",
                p.name,
                p.value.shape()
            )));
        }
        let raw = cur.take(p.value.len() * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        p.value = Tensor::new(&shape, data)?;
    }
    if cur.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after the last record".into()));
    }
    model.mark_initialized();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn trained_like(seed: u64) -> FlowModel {
        let cfg = FlowConfig {
            levels: 2,
            steps_per_level: 2,
            hidden: 4,
            seed,
            ..FlowConfig::default()
        };
        let mut m = FlowModel::new(cfg, [4, 4, 1]).unwrap();
        let mut rng = SeededRng::new(seed);
        m.initialize(&Tensor::randn(&[16, 4, 4, 1], 1.0, &mut rng)).unwrap();
        m.store_mut().jitter(&mut rng, 0.05, |_| true);
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = trained_like(3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &m).unwrap();
        let back = load_checkpoint(&p, m.config(), m.input_shape()).unwrap();
        assert_eq!(back.store(), m.store());
        let x = Tensor::randn(&[5, 4, 4, 1], 1.0, &mut SeededRng::new(9));
        let (a, b) = (m.log_prob(&x).unwrap(), back.log_prob(&x).unwrap());
        assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn seed_does_not_affect_compatibility() {
        let m = trained_like(3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &m).unwrap();
        let other = FlowConfig { seed: 77, ..m.config().clone() };
        assert_eq!(load_checkpoint(&p, &other, m.input_shape()).unwrap().store(), m.store());
    }

    #[test]
    fn rejects_mismatch_and_corruption() {
        let m = trained_like(1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &m).unwrap();
        let wider = FlowConfig { hidden: 8, ..m.config().clone() };
        assert!(matches!(load_checkpoint(&p, &wider, m.input_shape()), Err(Error::Checkpoint(_))));
        assert!(load_checkpoint(&p, m.config(), [8, 8, 1]).is_err());

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[100] ^= 1;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p, m.config(), m.input_shape()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn uninitialized_model_is_not_saved() {
        let m = FlowModel::new(FlowConfig { levels: 1, hidden: 4, ..FlowConfig::default() }, [2, 2, 1]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(save_checkpoint(&dir.path().join("m.ckpt"), &m).is_err());
    }
}
