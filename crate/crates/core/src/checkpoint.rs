//! Binary training snapshots.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic    8 bytes  "MOSCKPT\0"
//! version  u32
//! meta_len u64, then meta_len bytes of JSON metadata
//! count    u32, then per tensor:
//!   name_len u32, name (UTF-8), len u64, len × f64
//! ```
//!
//! Values are stored as raw `f64` bits, so a save/load round trip is exact.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::mth::HeadKind;
use crate::sampler::FeedbackSet;
use crate::trainer::TrainState;

pub const MAGIC: &[u8; 8] = b"MOSCKPT\0";
pub const VERSION: u32 = 1;

const VELOCITY_PREFIX: &str = "velocity.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    kind: HeadKind,
    uml: bool,
    epoch: usize,
    step: usize,
    stitch_next: bool,
    feedback_weights: Vec<u32>,
    feedback_epoch: usize,
    /// Free-form caller data, e.g. the run manifest.
    extra: serde_json::Value,
}

fn tensors(state: &TrainState) -> Vec<(String, &[f64])> {
    let p = &state.model.params;
    let v = &state.model.velocity;
    let names = p.names();
    let mut out: Vec<(String, &[f64])> = names.iter().cloned().zip(p.tensors()).collect();
    out.extend(names.iter().map(|n| format!("{VELOCITY_PREFIX}{n}")).zip(v.tensors()));
    out
}

pub fn save<W: Write>(mut out: W, state: &TrainState, extra: &serde_json::Value) -> Result<()> {
    let meta = Meta {
        model: state.model.config.clone(),
        kind: state.model.kind,
        uml: state.model.params.uml.is_some(),
        epoch: state.epoch,
        step: state.step,
        stitch_next: state.stitch_next,
        feedback_weights: state.feedback.weights().to_vec(),
        feedback_epoch: state.feedback.epoch(),
        extra: extra.clone(),
    };
    let meta = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(meta.len() as u64).to_le_bytes())?;
    out.write_all(&meta)?;
    let ts = tensors(state);
    out.write_all(&(ts.len() as u32).to_le_bytes())?;
    for (name, data) in ts {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(data.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(data.len() * 8);
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_array<R: Read, const N: usize>(input: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    input
        .read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(input)?))
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(input)?))
}

fn read_bytes<R: Read>(input: &mut R, len: u64) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let got = input.take(len).read_to_end(&mut buf)?;
    if got as u64 != len {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    Ok(buf)
}

/// Loads a snapshot and the caller data stored with it.
pub fn load<R: Read>(mut input: R) -> Result<(TrainState, serde_json::Value)> {
    if &read_array::<_, 8>(&mut input)? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = read_u64(&mut input)?;
    let meta: Meta = serde_json::from_slice(&read_bytes(&mut input, meta_len)?)
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;

    let mut model = ModelState::zeros(&meta.model, meta.kind, meta.uml)?;
    let count = read_u32(&mut input)? as usize;
    let names = model.params.names();
    if count != 2 * names.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} tensors, the model needs {}",
            2 * names.len()
        )));
    }
    let mut loaded: Vec<(String, Vec<f64>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut input)?;
        let name = String::from_utf8(read_bytes(&mut input, u64::from(name_len))?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let len = read_u64(&mut input)?;
        let raw = read_bytes(&mut input, len.saturating_mul(8))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        loaded.push((name, data));
    }
    let (params, velocity) = loaded.split_at(names.len());
    for (targets, source, prefix) in [
        (model.params.tensors_mut(), params, ""),
        (model.velocity.tensors_mut(), velocity, VELOCITY_PREFIX),
    ] {
        for ((dst, name), (got_name, data)) in targets.into_iter().zip(&names).zip(source) {
            let want = format!("{prefix}{name}");
            if *got_name != want {
                return Err(Error::Format(format!("expected tensor {want}, found {got_name}")));
            }
            if dst.len() != data.len() {
                return Err(Error::Format(format!(
                    "tensor {want} has {} values, expected {}",
                    data.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(data);
        }
    }
    let state = TrainState {
        model,
        epoch: meta.epoch,
        step: meta.step,
        feedback: FeedbackSet::from_weights(meta.feedback_weights, meta.feedback_epoch)?,
        stitch_next: meta.stitch_next,
    };
    Ok((state, meta.extra))
}
