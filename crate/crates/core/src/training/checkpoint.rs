//! Single-file checkpoint container.
//!
//! Layout: `SECOTCKP` magic, little-endian `u32` format version, `u64`
//! manifest length, the JSON manifest, the tensor payload, and a SHA-256
//! of every preceding byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use secotrans_tensor::{Float, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Adam, OptimizerConfig, TrainConfig};
use crate::error::{io_err, CheckpointError, Result};
use crate::networks::{DomainId, Model, NetworkParams, StyleCode};

pub const MAGIC: &[u8; 8] = b"SECOTCKP";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;
const CHECKSUM_LEN: usize = 32;

/// Position of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot carry 128 bits.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, CheckpointError> {
        let pos: u128 =
            self.word_pos.parse().map_err(|_| CheckpointError::Malformed(format!("word_pos {}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Everything needed to continue or reuse a run.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Float> {
    pub config: TrainConfig,
    pub step: u64,
    pub epoch: u64,
    pub model: Model<T>,
    pub opt_gen: Adam<T>,
    pub opt_disc: Adam<T>,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    t: u64,
    config: OptimizerConfig,
}

#[derive(Serialize, Deserialize)]
struct StyleEntry {
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    step: u64,
    epoch: u64,
    config: TrainConfig,
    config_digest: String,
    rng: RngState,
    style: BTreeMap<String, StyleEntry>,
    optimizers: BTreeMap<String, OptimizerEntry>,
    tensors: Vec<TensorEntry>,
}

impl<T: Float> Checkpoint<T> {
    pub fn digest(&self) -> String {
        self.config.digest()
    }

    /// Named tensors in container order.
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (_, set) in self.model.params.groups() {
            out.extend(set.iter().map(|(n, t)| (format!("param/{n}"), t)));
        }
        for (key, opt) in [("generator", &self.opt_gen), ("discriminator", &self.opt_disc)] {
            out.extend(opt.m.iter().enumerate().map(|(i, t)| (format!("adam/{key}/m/{i}"), t)));
            out.extend(opt.v.iter().enumerate().map(|(i, t)| (format!("adam/{key}/v/{i}"), t)));
        }
        out
    }

    fn style_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for d in [DomainId::A, DomainId::B] {
            let s = self.model.style(d);
            out.push((format!("style/{d}/gamma"), s.gamma_tensor()));
            out.push((format!("style/{d}/beta"), s.beta_tensor()));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let styles = self.style_tensors();
        let mut tensors: Vec<(String, &Tensor<T>)> = self.named_tensors();
        tensors.extend(styles.iter().map(|(n, t)| (n.clone(), t)));

        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(tensors.len());
        for (name, t) in &tensors {
            let offset = payload.len() as u64;
            for &v in t.data() {
                v.write_le(&mut payload);
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: T::DTYPE.to_string(),
                offset,
                length: payload.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            step: self.step,
            epoch: self.epoch,
            config: self.config.clone(),
            config_digest: self.digest(),
            rng: self.rng.clone(),
            style: [DomainId::A, DomainId::B]
                .into_iter()
                .map(|d| (d.to_string(), StyleEntry { seed: self.model.style(d).seed }))
                .collect(),
            optimizers: [("generator", &self.opt_gen), ("discriminator", &self.opt_disc)]
                .into_iter()
                .map(|(k, o)| (k.to_string(), OptimizerEntry { t: o.t, config: o.config.clone() }))
                .collect(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");

        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len() + CHECKSUM_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    /// Parses and verifies a container. The checksum is checked before anything is decoded.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
            return Err(CheckpointError::Checksum.into());
        }
        let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != sum {
            return Err(CheckpointError::Checksum.into());
        }
        if &body[..8] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version, expected: FORMAT_VERSION }.into());
        }
        let malformed = |m: String| CheckpointError::Malformed(m);
        let json_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let json = body.get(HEADER_LEN..HEADER_LEN + json_len).ok_or_else(|| malformed("manifest length".into()))?;
        let payload = &body[HEADER_LEN + json_len..];
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| malformed(format!("manifest: {e}")))?;

        let recomputed = manifest.config.digest();
        if recomputed != manifest.config_digest {
            return Err(CheckpointError::Digest { stored: manifest.config_digest, expected: recomputed }.into());
        }

        let mut tensors = BTreeMap::new();
        for e in &manifest.tensors {
            if e.dtype != T::DTYPE {
                return Err(CheckpointError::Dtype { found: e.dtype.clone(), expected: T::DTYPE }.into());
            }
            let n: usize = e.shape.iter().product();
            let (start, len) = (e.offset as usize, e.length as usize);
            if len != n * T::BYTES {
                return Err(malformed(format!("{}: length {len} does not match shape {:?}", e.name, e.shape)).into());
            }
            let raw = payload.get(start..start + len).ok_or_else(|| malformed(format!("{} out of bounds", e.name)))?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            tensors.insert(e.name.clone(), Tensor::from_vec(&e.shape, data));
        }
        let mut take = |name: String, shape: &[usize]| -> Result<Tensor<T>, CheckpointError> {
            let t = tensors.remove(&name).ok_or_else(|| malformed(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(malformed(format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };

        let config = manifest.config;
        let template = Model::<T>::new(config.network.clone(), config.seed)?;
        let mut params: NetworkParams<T> = template.params.clone();
        for set in [&mut params.encoder, &mut params.decoder, &mut params.disc_a, &mut params.disc_b] {
            let names = set.names().to_vec();
            for (name, slot) in names.iter().zip(set.tensors_mut()) {
                *slot = take(format!("param/{name}"), slot.shape())?;
            }
        }
        let c = config.network.bottleneck_channels();
        let mut style = |d: DomainId| -> Result<StyleCode<T>, CheckpointError> {
            let seed = manifest.style.get(&d.to_string()).ok_or_else(|| malformed(format!("style {d}")))?.seed;
            Ok(StyleCode {
                gamma: take(format!("style/{d}/gamma"), &[c])?.into_data(),
                beta: take(format!("style/{d}/beta"), &[c])?.into_data(),
                domain: d,
                seed,
            })
        };
        let (style_a, style_b) = (style(DomainId::A)?, style(DomainId::B)?);
        let model = Model::from_parts(config.network.clone(), params, style_a, style_b)?;

        let mut adam = |key: &str, shapes: Vec<Vec<usize>>| -> Result<Adam<T>, CheckpointError> {
            let entry = manifest.optimizers.get(key).ok_or_else(|| malformed(format!("optimizer {key}")))?;
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (i, s) in shapes.iter().enumerate() {
                m.push(take(format!("adam/{key}/m/{i}"), s)?);
                v.push(take(format!("adam/{key}/v/{i}"), s)?);
            }
            Ok(Adam { config: entry.config.clone(), t: entry.t, m, v })
        };
        let shapes = |sets: [&crate::networks::ParamSet<T>; 2]| {
            sets.iter().flat_map(|s| s.tensors().iter().map(|t| t.shape().to_vec())).collect::<Vec<_>>()
        };
        let opt_gen = adam("generator", shapes([&model.params.encoder, &model.params.decoder]))?;
        let opt_disc = adam("discriminator", shapes([&model.params.disc_a, &model.params.disc_b]))?;
        if let Some(extra) = tensors.keys().next() {
            return Err(malformed(format!("unexpected tensor {extra}")).into());
        }
        manifest.rng.restore()?;
        Ok(Checkpoint {
            config,
            step: manifest.step,
            epoch: manifest.epoch,
            model,
            opt_gen,
            opt_disc,
            rng: manifest.rng,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        fs::write(&tmp, self.to_bytes()).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }

    /// Refuses a checkpoint produced under a different configuration.
    pub fn check_digest(&self, expected: &str) -> Result<()> {
        let stored = self.digest();
        if stored != expected {
            return Err(CheckpointError::Digest { stored, expected: expected.to_string() }.into());
        }
        Ok(())
    }
}
