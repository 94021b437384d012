//! Model checkpoint files.
//!
//! Layout (little endian): magic `PCLM`, u16 version, a config block, u32
//! tensor count, then every stored tensor in declaration order as
//! `u8 rank, u32 dims.., values`. An optional trailing block tagged `PCTS`
//! carries opaque training state (optimizer moments, rng position).

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PCLM";
pub const STATE_MAGIC: &[u8; 4] = b"PCTS";
pub const VERSION: u16 = 1;

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_widths(out: &mut Vec<u8>, w: &[usize]) {
    out.write_u16::<LE>(w.len() as u16).unwrap();
    for &v in w {
        out.write_u32::<LE>(v as u32).unwrap();
    }
}

fn read_widths(r: &mut Cursor<&[u8]>) -> Result<Vec<usize>> {
    let n = r.read_u16::<LE>()? as usize;
    (0..n).map(|_| Ok(r.read_u32::<LE>()? as usize)).collect()
}

pub fn encode_config(cfg: &ModelConfig, dtype: DType, out: &mut Vec<u8>) {
    out.push(dtype as u8);
    write_widths(out, &cfg.encoder_widths);
    write_widths(out, &cfg.head_widths);
    out.write_u32::<LE>(cfg.d_z as u32).unwrap();
    match &cfg.seg_widths {
        Some(w) => {
            out.push(1);
            write_widths(out, w);
        }
        None => out.push(0),
    }
    out.push(cfg.normalize as u8);
    out.write_f64::<LE>(cfg.dropout).unwrap();
}

fn decode_config(r: &mut Cursor<&[u8]>) -> Result<(ModelConfig, DType)> {
    let tag = r.read_u8()?;
    let dtype = DType::from_tag(tag).ok_or_else(|| ck(format!("unknown dtype tag {tag}")))?;
    let encoder_widths = read_widths(r)?;
    let head_widths = read_widths(r)?;
    let d_z = r.read_u32::<LE>()? as usize;
    let seg_widths = match r.read_u8()? {
        0 => None,
        1 => Some(read_widths(r)?),
        other => return Err(ck(format!("bad segmentation flag {other}"))),
    };
    let normalize = r.read_u8()? != 0;
    let dropout = r.read_f64::<LE>()?;
    let cfg = ModelConfig {
        encoder_widths,
        head_widths,
        d_z,
        seg_widths,
        dropout,
        normalize,
    };
    cfg.validate().map_err(|e| ck(format!("stored config invalid: {e}")))?;
    Ok((cfg, dtype))
}

/// Serializes `model` and, if given, a training-state block.
pub fn encode_checkpoint<T: Scalar>(model: &Model<T>, state: Option<&[u8]>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u16::<LE>(VERSION).unwrap();
    encode_config(&model.config, T::DTYPE, &mut out);
    let entries = model.entries();
    out.write_u32::<LE>(entries.len() as u32).unwrap();
    for (_, _, t) in entries {
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.write_u32::<LE>(d as u32).unwrap();
        }
        for v in t.data() {
            v.to_le_bytes_vec(&mut out);
        }
    }
    if let Some(state) = state {
        out.extend_from_slice(STATE_MAGIC);
        out.write_u64::<LE>(state.len() as u64).unwrap();
        out.extend_from_slice(state);
    }
    out
}

/// Inverse of [`encode_checkpoint`]. The stored dtype must equal `T`.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(Model<T>, Option<Vec<u8>>)> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| ck("file too short"))?;
    if &magic != MAGIC {
        return Err(ck("not a model checkpoint (bad magic)"));
    }
    let version = r.read_u16::<LE>()?;
    if version != VERSION {
        return Err(ck(format!("unsupported version {version}")));
    }
    let (cfg, dtype) = decode_config(&mut r)?;
    if dtype != T::DTYPE {
        return Err(ck(format!("stored as {dtype:?}, requested {:?}", T::DTYPE)));
    }
    // structure comes from the config; values are overwritten below
    let mut model = Model::<T>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let count = r.read_u32::<LE>()? as usize;
    let mut entries = model.entries_mut();
    if count != entries.len() {
        return Err(ck(format!("{count} tensors stored, model has {}", entries.len())));
    }
    for (name, _, t) in entries.iter_mut() {
        let rank = r.read_u8()? as usize;
        let dims = (0..rank)
            .map(|_| Ok(r.read_u32::<LE>()? as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != t.shape() {
            return Err(ck(format!("{name}: stored shape {dims:?}, expected {:?}", t.shape())));
        }
        let width = dtype.size();
        let start = r.position() as usize;
        let end = start + t.numel() * width;
        let raw = bytes.get(start..end).ok_or_else(|| ck(format!("{name}: truncated")))?;
        for (v, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(width)) {
            *v = T::from_le_slice(chunk);
        }
        r.set_position(end as u64);
    }
    drop(entries);
    let pos = r.position() as usize;
    let state = if pos == bytes.len() {
        None
    } else {
        let mut tag = [0u8; 4];
        r.read_exact(&mut tag).map_err(|_| ck("trailing bytes after tensors"))?;
        if &tag != STATE_MAGIC {
            return Err(ck("trailing bytes after tensors"));
        }
        let len = r.read_u64::<LE>()? as usize;
        let start = r.position() as usize;
        let block = bytes
            .get(start..start + len)
            .ok_or_else(|| ck("training-state block truncated"))?;
        if start + len != bytes.len() {
            return Err(ck("trailing bytes after training state"));
        }
        Some(block.to_vec())
    };
    Ok((model, state))
}

/// Writes through a temporary file so a crash never leaves half a checkpoint.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, state: Option<&[u8]>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode_checkpoint(model, state))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, Option<Vec<u8>>)> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Io(io) => ck(format!("{}: truncated ({io})", path.display())),
        Error::Checkpoint(m) => ck(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Copies the encoder (and optionally the head hidden layers) of `src` into
/// `dst`. Widths must agree.
pub fn transfer_weights<T: Scalar>(src: &Model<T>, dst: &mut Model<T>, head_hidden: bool) -> Result<()> {
    if src.config.encoder_widths != dst.config.encoder_widths {
        return Err(ck(format!(
            "encoder widths {:?} do not match {:?}",
            src.config.encoder_widths, dst.config.encoder_widths
        )));
    }
    dst.encoder = src.encoder.clone();
    if head_hidden {
        let same = src.head.hidden.len() == dst.head.hidden.len()
            && src.head.hidden.iter().zip(&dst.head.hidden).all(|(a, b)| a.dims() == b.dims());
        if !same {
            return Err(ck(format!(
                "head widths {:?} do not match {:?}",
                src.config.head_widths, dst.config.head_widths
            )));
        }
        dst.head.hidden = src.head.hidden.clone();
    }
    Ok(())
}

/// Tensor values regardless of model structure, for tests and diagnostics.
pub fn tensors<T: Scalar>(model: &Model<T>) -> Vec<Tensor<T>> {
    model.entries().into_iter().map(|(_, _, t)| t.clone()).collect()
}
