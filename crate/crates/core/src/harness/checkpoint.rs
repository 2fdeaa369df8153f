//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "RPVLCKPT"
//! version  u32      1
//! header   u32 length, then UTF-8 JSON (config echo, counters, RNG state, history)
//! count    u32      number of tensors
//! tensor   u32 name length, UTF-8 name, u32 rank, rank x u64 dims, f32 data
//! ```
//!
//! Model tensors carry their parameter names; optimiser moments are stored as
//! `adam.m/<name>` and `adam.v/<name>`.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rppgvl_tape::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::{EpochLog, Trainer};
use crate::encoders::Model;
use crate::synthgen::Dataset;
use crate::error::{Error, IoContext, Result};

const MAGIC: &[u8; 8] = b"RPVLCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex of the 32-byte seed.
    pub seed: String,
    pub stream: u64,
    /// Decimal string: the word position is a u128.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Invalid(format!("malformed RNG state {:?}", self.seed));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    /// The training config as TOML.
    pub config: String,
    pub epoch: usize,
    pub step: usize,
    pub optimizer_steps: u64,
    pub rng: RngState,
    pub history: Vec<EpochLog>,
}

/// A decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_trainer(tr: &Trainer) -> Checkpoint {
        let header = Header {
            config: tr.cfg.to_toml(),
            epoch: tr.epoch,
            step: tr.step,
            optimizer_steps: tr.opt.steps_taken(),
            rng: RngState::capture(&tr.rng),
            history: tr.history.clone(),
        };
        let mut tensors: Vec<(String, Tensor<f32>)> =
            tr.model.params.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        let (m, v) = tr.opt.moments();
        for (prefix, bufs) in [("adam.m/", m), ("adam.v/", v)] {
            for ((_, p), buf) in tr.model.params.iter().zip(bufs) {
                tensors.push((format!("{prefix}{}", p.name), Tensor::new(p.value.shape(), buf.clone())));
            }
        }
        Checkpoint { header, tensors }
    }

    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::from_toml(&self.header.config)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies named tensors into `store`; every parameter must be present with
    /// matching dims.
    pub fn load_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            let t = self.tensor(&name).ok_or_else(|| Error::Shape(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != store.value(id).shape() {
                return Err(Error::Shape(format!(
                    "tensor {name}: checkpoint dims {:?}, model dims {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Adam moments in parameter order, or `None` if the optimiser never stepped.
    pub fn moments(&self, store: &ParamStore<f32>) -> Result<Option<(Vec<Vec<f32>>, Vec<Vec<f32>>)>> {
        if self.header.optimizer_steps == 0 {
            return Ok(None);
        }
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (_, p) in store.iter() {
            for (prefix, out) in [("adam.m/", &mut m), ("adam.v/", &mut v)] {
                let name = format!("{prefix}{}", p.name);
                let t = self.tensor(&name).ok_or_else(|| Error::Shape(format!("checkpoint lacks tensor {name}")))?;
                if t.len() != p.value.len() {
                    return Err(Error::Shape(format!("tensor {name} has {} values, expected {}", t.len(), p.value.len())));
                }
                out.push(t.data().to_vec());
            }
        }
        Ok(Some((m, v)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(r.err("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| r.err(&format!("header: {e}")))?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| r.err("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| r.err("tensor too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Tensor::new(&dims, data)));
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after the last tensor"));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).at(path)?;
        f.write_all(&self.to_bytes()).at(path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).at(path)?.read_to_end(&mut bytes).at(path)?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Format { path: self.path.to_path_buf(), msg: format!("{msg} (at byte {})", self.pos) }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

impl Trainer {
    /// Rebuilds a trainer exactly as it was when `ckpt` was written.
    pub fn resume(ckpt: &Checkpoint, ds: &Dataset) -> Result<Trainer> {
        let mut tr = Trainer::new(ckpt.config()?, ds)?;
        ckpt.load_params(&mut tr.model.params)?;
        if let Some((m, v)) = ckpt.moments(&tr.model.params)? {
            tr.opt.restore(ckpt.header.optimizer_steps, m, v);
        }
        tr.rng = ckpt.header.rng.restore()?;
        tr.epoch = ckpt.header.epoch;
        tr.step = ckpt.header.step;
        tr.history = ckpt.header.history.clone();
        Ok(tr)
    }
}

/// The model stored in `ckpt`, built against `ds` for dimension checks.
pub fn load_model(ckpt: &Checkpoint, ds: &Dataset) -> Result<Model<f32>> {
    let mut tr = Trainer::new(ckpt.config()?, ds)?;
    ckpt.load_params(&mut tr.model.params)?;
    Ok(tr.model)
}
