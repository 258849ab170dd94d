//! Training checkpoints.
//!
//! Layout: magic `NDPK`, u32 version, u32 header length, TOML header
//! (scalars, generator state, resolved config), u32 section count, then per
//! section a u16 name length, UTF-8 name, u8 rank, u32 dims and f64 payload,
//! all little-endian, followed by a CRC32 of everything before it.

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::Config;
use super::formats::{read_file, read_preamble, read_shape, seal, unseal, write_file, Reader};
use super::model::Model;
use crate::error::{Error, Result};
use crate::numeric::AdamState;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NDPK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything a training run needs to continue exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Completed episodes.
    pub episode: u64,
    pub rng: ChaCha8Rng,
    pub best_val: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    episode: u64,
    rng_seed: String,
    rng_stream: String,
    rng_word_pos: String,
    adam_step: u64,
    adam_lr: f64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    best_val: Option<f64>,
    config: Config,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(path: &Path, s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Format {
        path: path.to_path_buf(),
        reason: format!("bad generator seed `{s}`"),
    };
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

fn push_section(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let state = &ckpt.state;
    let header = Header {
        episode: state.episode,
        rng_seed: hex(&state.rng.get_seed()),
        rng_stream: state.rng.get_stream().to_string(),
        rng_word_pos: state.rng.get_word_pos().to_string(),
        adam_step: state.adam.step_count,
        adam_lr: state.adam.lr,
        adam_beta1: state.adam.beta1,
        adam_beta2: state.adam.beta2,
        adam_eps: state.adam.eps,
        best_val: state.best_val,
        config: ckpt.config.clone(),
    };
    let header = toml::to_string(&header).expect("header serializes");

    let mut sections = Vec::new();
    let mut count = 0u32;
    for (i, (name, t)) in state.model.named_params().into_iter().enumerate() {
        push_section(&mut sections, &format!("param/{name}"), t.shape(), t.data());
        let (m, v) = (&state.adam.m[i], &state.adam.v[i]);
        push_section(&mut sections, &format!("adam.m/{name}"), m.shape(), m.data());
        push_section(&mut sections, &format!("adam.v/{name}"), v.shape(), v.data());
        count += 3;
    }
    for (name, stats) in state.model.embedding.running_stats() {
        if let (Some(mean), Some(var)) = (&stats.mean, &stats.var) {
            push_section(&mut sections, &format!("running.mean/{name}"), &[mean.len()], mean);
            push_section(&mut sections, &format!("running.var/{name}"), &[var.len()], var);
            count += 2;
        }
    }

    let mut out = Vec::with_capacity(16 + header.len() + sections.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&sections);
    seal(out)
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let format_err = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let body = unseal(path, bytes)?;
    let mut r = Reader::new(path, body);
    read_preamble(&mut r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let header_len = r.u32()? as usize;
    let header_text = std::str::from_utf8(r.take(header_len)?).map_err(|_| format_err("header is not UTF-8".into()))?;
    let header: Header = toml::from_str(header_text).map_err(|e| format_err(format!("header: {}", e.message())))?;

    let mut sections = HashMap::new();
    for _ in 0..r.u32()? {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| format_err("section name is not UTF-8".into()))?;
        let shape = read_shape(&mut r)?;
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        sections.insert(name, Tensor::new(&shape, data)?);
    }
    r.finish()?;

    let take = |sections: &mut HashMap<String, Tensor>, key: String, like: &[usize]| -> Result<Tensor> {
        let t = sections
            .remove(&key)
            .ok_or_else(|| format_err(format!("missing section `{key}`")))?;
        if t.shape() != like {
            return Err(format_err(format!("section `{key}` has shape {:?}, expected {like:?}", t.shape())));
        }
        Ok(t)
    };

    let config = header.config;
    let mut model = Model::init(config.model, &mut <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
    let names: Vec<(String, Vec<usize>)> =
        model.named_params().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    let mut m = Vec::with_capacity(names.len());
    let mut v = Vec::with_capacity(names.len());
    for (p, (name, shape)) in model.params_mut().into_iter().zip(&names) {
        let loaded = take(&mut sections, format!("param/{name}"), shape)?;
        p.data_mut().copy_from_slice(loaded.data());
        p.grad = None;
        m.push(take(&mut sections, format!("adam.m/{name}"), shape)?);
        v.push(take(&mut sections, format!("adam.v/{name}"), shape)?);
    }
    for (name, stats) in model.embedding.running_stats_mut() {
        let key = format!("running.mean/{name}");
        if sections.contains_key(&key) {
            let mean = take(&mut sections, key, &[crate::frae::CHANNELS])?;
            let var = take(&mut sections, format!("running.var/{name}"), &[crate::frae::CHANNELS])?;
            stats.mean = Some(mean.into_data());
            stats.var = Some(var.into_data());
        }
    }
    if let Some(extra) = sections.keys().next() {
        return Err(format_err(format!("unexpected section `{extra}`")));
    }

    let parse_num = |what: &str, s: &str| -> Result<u128> {
        s.parse::<u128>().map_err(|_| format_err(format!("bad {what} `{s}`")))
    };
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(unhex(path, &header.rng_seed)?);
    rng.set_stream(parse_num("generator stream", &header.rng_stream)? as u64);
    rng.set_word_pos(parse_num("generator position", &header.rng_word_pos)?);

    let adam = AdamState {
        step_count: header.adam_step,
        lr: header.adam_lr,
        beta1: header.adam_beta1,
        beta2: header.adam_beta2,
        eps: header.adam_eps,
        m,
        v,
    };
    Ok(Checkpoint {
        config,
        state: TrainState {
            model,
            adam,
            episode: header.episode,
            rng,
            best_val: header.best_val,
        },
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_file(path, &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(path, &read_file(path)?)
}
