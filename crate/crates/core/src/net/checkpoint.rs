//! Versioned checkpoint container: config hash, epoch, seed, RNG state, all
//! named parameter tensors (float32), optimizer moments, and a SHA-256
//! content checksum. Write-then-read reproduces forward outputs bitwise.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::Result;

use super::{ParamStore, Subset};

const MAGIC: &[u8; 4] = b"LKCP";
const VERSION: u32 = 1;

/// Serializable ChaCha stream position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl Default for RngState {
    fn default() -> Self {
        RngState {
            seed: [0; 32],
            word_pos: 0,
            stream: 0,
        }
    }
}

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, ArrayD<f32>>,
    pub v: BTreeMap<String, ArrayD<f32>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub epoch: u32,
    pub seed: u64,
    pub rng: RngState,
    pub params: ParamStore<f32>,
    pub opt: Option<AdamState>,
}

fn fmt_err(field: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        container: "checkpoint",
        field,
        detail: detail.into(),
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &ArrayD<f32>) {
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn get_tensor(bytes: &[u8], off: &mut usize) -> Result<ArrayD<f32>> {
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(fmt_err("tensor", "truncated"));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let ndim = take(off, 1)?[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u32::from_le_bytes(take(off, 4)?.try_into().unwrap()) as usize);
    }
    let n: usize = shape.iter().product();
    let data = take(off, n * 4)?;
    let mut v = Vec::with_capacity(n);
    for chunk in data.chunks_exact(4) {
        v.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    ArrayD::from_shape_vec(IxDyn(&shape), v).map_err(|e| fmt_err("tensor", e.to_string()))
}

pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ck.config_hash.to_le_bytes());
    out.extend_from_slice(&ck.epoch.to_le_bytes());
    out.extend_from_slice(&ck.seed.to_le_bytes());
    out.extend_from_slice(&ck.rng.seed);
    out.extend_from_slice(&ck.rng.word_pos.to_le_bytes());
    out.extend_from_slice(&ck.rng.stream.to_le_bytes());

    out.extend_from_slice(&(ck.params.len() as u32).to_le_bytes());
    for (name, t) in ck.params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let subset = Subset::of_name(name);
        out.push(subset.tag());
        out.push(ck.params.is_frozen(subset) as u8);
        put_tensor(&mut out, t);
    }

    match &ck.opt {
        None => out.push(0),
        Some(opt) => {
            out.push(1);
            out.extend_from_slice(&opt.step.to_le_bytes());
            for (name, _) in ck.params.iter() {
                put_tensor(&mut out, &opt.m[name]);
                put_tensor(&mut out, &opt.v[name]);
            }
        }
    }

    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 32 {
        return Err(fmt_err("checksum", "file too short"));
    }
    let (payload, checksum) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(payload);
    if digest.as_slice() != checksum {
        return Err(Error::Checksum);
    }

    let mut off = 0usize;
    let take = |off: &mut usize, n: usize, field: &'static str| -> Result<&[u8]> {
        if *off + n > payload.len() {
            return Err(fmt_err(field, "truncated"));
        }
        let s = &payload[*off..*off + n];
        *off += n;
        Ok(s)
    };

    if take(&mut off, 4, "magic")? != MAGIC {
        return Err(fmt_err("magic", "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(take(&mut off, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(fmt_err("version", format!("unsupported version {version}")));
    }
    let config_hash = u64::from_le_bytes(take(&mut off, 8, "config_hash")?.try_into().unwrap());
    let epoch = u32::from_le_bytes(take(&mut off, 4, "epoch")?.try_into().unwrap());
    let seed = u64::from_le_bytes(take(&mut off, 8, "seed")?.try_into().unwrap());
    let mut rng = RngState::default();
    rng.seed.copy_from_slice(take(&mut off, 32, "rng")?);
    rng.word_pos = u128::from_le_bytes(take(&mut off, 16, "rng")?.try_into().unwrap());
    rng.stream = u64::from_le_bytes(take(&mut off, 8, "rng")?.try_into().unwrap());

    let n_params = u32::from_le_bytes(take(&mut off, 4, "n_params")?.try_into().unwrap()) as usize;
    let mut params = ParamStore::new();
    let mut frozen_subsets = Vec::new();
    let mut names = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = u16::from_le_bytes(take(&mut off, 2, "name")?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut off, name_len, "name")?.to_vec())
            .map_err(|_| fmt_err("name", "invalid utf-8"))?;
        let subset_tag = take(&mut off, 1, "subset")?[0];
        let subset = Subset::from_tag(subset_tag)
            .ok_or_else(|| fmt_err("subset", format!("unknown tag {subset_tag}")))?;
        if Subset::of_name(&name) != subset {
            return Err(fmt_err("subset", format!("tag disagrees with name `{name}`")));
        }
        let frozen = take(&mut off, 1, "frozen")?[0] != 0;
        if frozen {
            frozen_subsets.push(subset);
        }
        let t = get_tensor(payload, &mut off)?;
        params.insert(&name, t);
        names.push(name);
    }
    for s in frozen_subsets {
        params.set_frozen(s, true);
    }

    let opt = match take(&mut off, 1, "optimizer")?[0] {
        0 => None,
        1 => {
            let step = u64::from_le_bytes(take(&mut off, 8, "optimizer")?.try_into().unwrap());
            let mut m = BTreeMap::new();
            let mut v = BTreeMap::new();
            for name in &names {
                m.insert(name.clone(), get_tensor(payload, &mut off)?);
                v.insert(name.clone(), get_tensor(payload, &mut off)?);
            }
            Some(AdamState { step, m, v })
        }
        x => return Err(fmt_err("optimizer", format!("bad flag {x}"))),
    };

    Ok(Checkpoint {
        config_hash,
        epoch,
        seed,
        rng,
        params,
        opt,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(ck);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|_| Error::MissingStage {
            stage: "train",
            detail: format!("no checkpoint at {}", path.display()),
        })?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
