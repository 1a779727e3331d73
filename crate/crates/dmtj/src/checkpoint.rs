//! Checkpoint file: magic, version, config JSON, step, RNG position,
//! optimizer step counts, then named tensors as little-endian f32, closed by
//! a CRC32 of everything before it.

use std::path::Path;

use dmtj_core::model::Model;
use dmtj_core::params::ParamSet;
use dmtj_core::{Rng, Tensor};
use rand::SeedableRng;

use crate::config::RunConfig;
use crate::corpus::{get_f32s, put_f32s, write_atomic};
use crate::error::{IoError, IoResult};
use crate::train::TrainState;

pub const MAGIC: &[u8; 8] = b"DMTJCKPT";
pub const VERSION: u32 = 1;

fn add<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, set: &'a ParamSet, values: Option<&'a [Tensor]>) {
    for (i, p) in set.iter().enumerate() {
        let t = values.map_or(&p.value, |v| &v[i]);
        out.push((format!("{prefix}/{}", p.name), t));
    }
}

fn tensors(state: &TrainState) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    let m = &state.model;
    add(&mut out, "context", &m.context, None);
    add(&mut out, "target", &m.target, None);
    add(&mut out, "predictor", &m.predictor_params, None);
    add(&mut out, "adam.context.m", &m.context, Some(&state.opt_context.first));
    add(&mut out, "adam.context.v", &m.context, Some(&state.opt_context.second));
    add(&mut out, "adam.predictor.m", &m.predictor_params, Some(&state.opt_predictor.first));
    add(&mut out, "adam.predictor.v", &m.predictor_params, Some(&state.opt_predictor.second));
    out
}

pub fn encode(state: &TrainState) -> IoResult<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(&state.config)?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.rng.get_seed());
    out.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    out.extend_from_slice(&state.opt_context.step.to_le_bytes());
    out.extend_from_slice(&state.opt_predictor.step.to_le_bytes());
    let named = tensors(state);
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        put_f32s(&mut out, t.data());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> IoResult<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or(IoError::Truncated {
            expected: (self.at + n) as u64,
            actual: self.bytes.len() as u64,
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> IoResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> IoResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> IoResult<TrainState> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(IoError::Truncated {
            expected: (MAGIC.len() + 8) as u64,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(IoError::Format("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let mut r = Reader { bytes: body, at: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(IoError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(IoError::Checksum { stored, computed });
    }
    let n = r.u32()? as usize;
    let config: RunConfig = serde_json::from_slice(r.take(n)?)?;
    let step = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    let mut rng = Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let ctx_step = r.u64()?;
    let pred_step = r.u64()?;

    let mut state = TrainState::new(config)?;
    state.step = step;
    state.rng = rng;
    state.opt_context.step = ctx_step;
    state.opt_predictor.step = pred_step;
    let mut loaded = std::collections::BTreeMap::new();
    for _ in 0..r.u32()? {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| IoError::Format("tensor name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<IoResult<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = get_f32s(r.take(numel * 4)?);
        loaded.insert(name, Tensor::new(shape, data)?);
    }
    if r.at != body.len() {
        return Err(IoError::SizeMismatch {
            expected: r.at as u64 + 4,
            actual: bytes.len() as u64,
        });
    }
    let expected: Vec<String> = tensors(&state).into_iter().map(|(n, _)| n).collect();
    if expected.len() != loaded.len() {
        return Err(IoError::Format(format!(
            "checkpoint holds {} tensors, the config needs {}",
            loaded.len(),
            expected.len()
        )));
    }
    let mut take = |name: &str, shape: &[usize]| -> IoResult<Tensor> {
        let t = loaded
            .remove(name)
            .ok_or_else(|| IoError::Format(format!("checkpoint is missing {name}")))?;
        if t.shape() != shape {
            return Err(IoError::Format(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    };
    let Model {
        context,
        target,
        predictor_params,
        ..
    } = &mut state.model;
    for (prefix, set) in [("context", context), ("target", target), ("predictor", predictor_params)] {
        for p in set.iter_mut() {
            p.value = take(&format!("{prefix}/{}", p.name), p.value.shape())?;
        }
    }
    for (prefix, set, opt) in [
        ("context", &state.model.context, &mut state.opt_context),
        ("predictor", &state.model.predictor_params, &mut state.opt_predictor),
    ] {
        for (i, p) in set.iter().enumerate() {
            opt.first[i] = take(&format!("adam.{prefix}.m/{}", p.name), p.value.shape())?;
            opt.second[i] = take(&format!("adam.{prefix}.v/{}", p.name), p.value.shape())?;
        }
    }
    Ok(state)
}

pub fn save(path: &Path, state: &TrainState) -> IoResult<()> {
    write_atomic(path, &encode(state)?)
}

pub fn load(path: &Path) -> IoResult<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn small_state() -> TrainState {
        let mut c = RunConfig::tiny();
        c.model.encoder.embed_dim = 16;
        c.model.encoder.depth = 1;
        c.model.predictor.embed_dim = 8;
        c.model.predictor.depth = 1;
        let mut s = TrainState::new(c).unwrap();
        s.step = 17;
        let _: u64 = s.rng.random();
        s.opt_context.step = 17;
        s.opt_context.first[0].data_mut()[0] = 0.25;
        s
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let s = small_state();
        let a = encode(&s).unwrap();
        let back = decode(&a).unwrap();
        assert_eq!(encode(&back).unwrap(), a);
        assert_eq!(back.step, 17);
        assert_eq!(back.rng, s.rng);
        assert_eq!(back.opt_context.first[0].data()[0], 0.25);
    }

    #[test]
    fn corruption_and_version_errors() {
        let a = encode(&small_state()).unwrap();
        let mut flipped = a.clone();
        let mid = a.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(decode(&flipped), Err(IoError::Checksum { .. })));
        let mut v = a.clone();
        v[8] = 9;
        let err = decode(&v).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
        assert!(decode(&a[..5]).is_err());
    }
}
