//! Binary checkpoint container:
//! `"SCCK"`, version `u16`, seed `u64`, step `u64`, a free-form UTF-8 tag and
//! the training config as JSON (each `u32` length + bytes), the parameters (`u32` count, then per tensor:
//! `u16` name length, name, `u8` kind, `u32` rank, `u64` dims, `f64` values),
//! and the optimizer state (`u64` step, `u32` slots per tensor, `f64` buffers
//! sized like their tensor). All integers and floats are little-endian.
//! Gradient buffers are not stored.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::ParamKind;
use crate::optim::{Optimizer, OptimizerState};
use crate::tensor::Tensor;
use crate::train::{Pretrainer, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCCK";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint(p: &Pretrainer, tag: &str, mut w: impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&p.seed.to_le_bytes())?;
    w.write_all(&p.step.to_le_bytes())?;
    w.write_all(&(tag.len() as u32).to_le_bytes())?;
    w.write_all(tag.as_bytes())?;
    let config = serde_json::to_vec(&p.config).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(&config)?;
    w.write_all(&(p.model.params.len() as u32).to_le_bytes())?;
    for param in p.model.params.iter() {
        let name = param.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[match param.kind {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
        }])?;
        let shape = param.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        write_f64s(&mut w, param.value.data())?;
    }
    let state = &p.optimizer.state;
    w.write_all(&state.step.to_le_bytes())?;
    let slots = p.optimizer.config.slots();
    w.write_all(&(slots as u32).to_le_bytes())?;
    for per_param in &state.slots {
        for buf in per_param {
            write_f64s(&mut w, buf)?;
        }
    }
    Ok(())
}

fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    w.write_all(&bytes)?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Format("checkpoint truncated".into()))?;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("length"))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

/// Rebuilds the run exactly as saved, with its tag. Parameter names, kinds
/// and shapes must match what the stored config builds.
pub fn read_checkpoint(r: impl Read) -> Result<(Pretrainer, String)> {
    let mut r = Reader { inner: r };
    if &r.array::<4>()? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let seed = r.u64()?;
    let step = r.u64()?;
    let len = r.u32()? as usize;
    let tag = String::from_utf8(r.bytes(len)?).map_err(|_| Error::Format("checkpoint tag is not UTF-8".into()))?;
    let len = r.u32()? as usize;
    let config: TrainConfig =
        serde_json::from_slice(&r.bytes(len)?).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut p = Pretrainer::new(config, seed)?;
    let count = r.u32()? as usize;
    if count != p.model.params.len() {
        return Err(Error::Format(format!("checkpoint has {count} tensors, model has {}", p.model.params.len())));
    }
    for param in p.model.params.iter_mut() {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let kind = match r.array::<1>()?[0] {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            k => return Err(Error::Format(format!("unknown tensor kind {k}"))),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if name != param.name || kind != param.kind || shape != param.value.shape() {
            return Err(Error::Format(format!("tensor `{name}` does not match model tensor `{}`", param.name)));
        }
        let n = shape.iter().product();
        param.value = Tensor::new(shape, r.f64s(n)?)?;
    }
    let opt_step = r.u64()?;
    let slots = r.u32()? as usize;
    let per_slot: Vec<usize> = p.model.params.iter().map(|q| q.value.len()).collect();
    let buffers = per_slot
        .iter()
        .map(|&n| (0..slots).map(|_| r.f64s(n)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let state = OptimizerState { step: opt_step, slots: buffers };
    p.optimizer = Optimizer::with_state(p.config.optimizer, state, &p.model.params)
        .map_err(|e| Error::Format(format!("checkpoint optimizer state: {e}")))?;
    p.step = step;
    if r.inner.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok((p, tag))
}
