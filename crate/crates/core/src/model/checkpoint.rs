//! Versioned binary checkpoints.
//!
//! Layout: magic `NPCKPT`, u32 version, u32 header length + JSON header
//! (config, vocabulary, tags, optimizer schedule position), u32 tensor count,
//! then per tensor: u32 name length, name, u32 rank, u32 dims, little-endian
//! f32 data. Mask rows are stored as tensors `mask.layer{l}` and optimizer
//! moments as `adam.m.*` / `adam.v.*`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::optim::{AdamWParams, LrSchedule, OptimizerState};
use super::params::{ParamSet, Tensor};
use super::{ModelConfig, PruneMask, TaggerModel};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"NPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
    tags: Vec<String>,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    schedule: LrSchedule,
    hyper: AdamWParams,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: impl Iterator<Item = f32>) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, shape.len() as u32);
    for &s in shape {
        put_u32(buf, s as u32);
    }
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub(crate) fn checkpoint_bytes(model: &TaggerModel<f32>, opt: Option<&OptimizerState<f32>>) -> Vec<u8> {
    let header = Header {
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        tags: model.tags.clone(),
        optimizer: opt.map(|o| OptimizerHeader {
            step: o.step,
            schedule: o.schedule,
            hyper: o.hyper,
        }),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(model.params.n_scalars() * 4 * 3 + header.len() + 64);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    put_u32(&mut buf, header.len() as u32);
    buf.extend_from_slice(&header);

    let n_mask = model.mask.n_layers_plus_1();
    let n_opt = opt.map_or(0, |o| o.m.tensors.len() * 2);
    put_u32(&mut buf, (model.params.tensors.len() + n_mask + n_opt) as u32);
    for t in &model.params.tensors {
        put_tensor(&mut buf, &t.name, &t.shape, t.data.iter().copied());
    }
    for (l, row) in model.mask.layers().iter().enumerate() {
        put_tensor(
            &mut buf,
            &format!("mask.layer{l}"),
            &[row.len()],
            row.iter().map(|&a| if a { 1.0 } else { 0.0 }),
        );
    }
    if let Some(o) = opt {
        for (prefix, set) in [("adam.m.", &o.m), ("adam.v.", &o.v)] {
            for t in &set.tensors {
                put_tensor(&mut buf, &format!("{prefix}{}", t.name), &t.shape, t.data.iter().copied());
            }
        }
    }
    buf
}

/// SHA-256 over the model part of a checkpoint (config, labels, parameters, mask).
pub fn model_fingerprint(model: &TaggerModel<f32>) -> [u8; 32] {
    Sha256::digest(checkpoint_bytes(model, None)).into()
}

/// Writes atomically (temporary file + rename); a failed write leaves no partial file.
pub fn save_checkpoint(
    model: &TaggerModel<f32>,
    opt: Option<&OptimizerState<f32>>,
    path: &Path,
) -> Result<()> {
    let bytes = checkpoint_bytes(model, opt);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp: PathBuf = {
        let mut s = path.as_os_str().to_owned();
        s.push(".partial");
        s.into()
    };
    let result = fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(&bytes)?;
            f.sync_all()
        })
        .and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corruption(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub(crate) fn parse_checkpoint(bytes: &[u8]) -> Result<(TaggerModel<f32>, Option<OptimizerState<f32>>)> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::Incompatible("bad magic bytes".into()));
    }
    let mut r = Reader {
        buf: bytes,
        pos: CHECKPOINT_MAGIC.len(),
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)?;
    header.config.validate()?;
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Corruption("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Corruption("trailing bytes after tensors".into()));
    }

    let expected = ParamSet::<f32>::shapes_for(&header.config);
    let mut it = tensors.into_iter();
    let mut params = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let t = it
            .next()
            .ok_or_else(|| Error::Corruption(format!("missing tensor {name}")))?;
        if &t.name != name || &t.shape != shape {
            return Err(Error::Incompatible(format!(
                "tensor {} {:?} where {name} {shape:?} expected",
                t.name, t.shape
            )));
        }
        params.push(t);
    }
    let mut mask_rows = Vec::new();
    for l in 0..=header.config.n_layers {
        let t = it
            .next()
            .ok_or_else(|| Error::Corruption(format!("missing mask layer {l}")))?;
        if t.name != format!("mask.layer{l}") || t.shape != [header.config.d_model] {
            return Err(Error::Incompatible(format!("unexpected mask tensor {}", t.name)));
        }
        mask_rows.push(t.data.iter().map(|&x| x != 0.0).collect());
    }
    let params = ParamSet::from_tensors(params);
    let opt = match header.optimizer {
        None => None,
        Some(oh) => {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (prefix, dst) in [("adam.m.", &mut m), ("adam.v.", &mut v)] {
                for p in &params.tensors {
                    let mut t = it
                        .next()
                        .ok_or_else(|| Error::Corruption(format!("missing {prefix}{}", p.name)))?;
                    if t.name != format!("{prefix}{}", p.name) || t.shape != p.shape {
                        return Err(Error::Incompatible(format!("unexpected tensor {}", t.name)));
                    }
                    t.name = p.name.clone();
                    dst.push(t);
                }
            }
            Some(OptimizerState {
                m: ParamSet::from_tensors(m),
                v: ParamSet::from_tensors(v),
                step: oh.step,
                schedule: oh.schedule,
                hyper: oh.hyper,
            })
        }
    };
    if it.next().is_some() {
        return Err(Error::Incompatible("unexpected extra tensors".into()));
    }
    let model = TaggerModel {
        config: header.config,
        params,
        mask: PruneMask::from_layers(mask_rows)?,
        vocab: header.vocab,
        tags: header.tags,
    };
    Ok((model, opt))
}

pub fn load_checkpoint(path: &Path) -> Result<(TaggerModel<f32>, Option<OptimizerState<f32>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}
