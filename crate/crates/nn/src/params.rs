use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use specret_core::rng::derive_named;
use specret_core::{Error, Result};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors. Initial values are a function of (seed, name) only.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    seed: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// U(−b, b) with b = √(3/fan_in), i.e. variance 1/fan_in.
    FanIn(usize),
    Normal(f64),
    Constant(f64),
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_named(self.seed, name));
        let n = rows * cols;
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::FanIn(fan_in) => {
                let b = (3.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-b..b)).collect()
            }
            Init::Normal(sd) => {
                let d = Normal::new(0.0, sd).expect("finite sdev");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        self.insert(name, Tensor::new(rows, cols, data))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Rounds every parameter to the nearest f32.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Copies values from `other` for every name both stores share with equal shapes.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for (i, name) in self.names.iter().enumerate() {
            if let Some(src) = other.by_name(name) {
                if src.shape() != self.tensors[i].shape() {
                    return Err(Error::Shape(format!(
                        "parameter {name}: {:?} vs {:?}",
                        src.shape(),
                        self.tensors[i].shape()
                    )));
                }
                self.tensors[i] = src.clone();
                n += 1;
            }
        }
        Ok(n)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: String,
    pub dtype: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// A parameter store plus a config echo.
///
/// On disk: magic, u32 manifest length, JSON manifest, then the f64 little-endian blob.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(kind: &str, config: serde_json::Value, params: ParamStore) -> Self {
        Self {
            kind: kind.into(),
            config,
            params,
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut offset = 0;
        let tensors = self
            .params
            .iter()
            .map(|(_, name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: [t.rows, t.cols],
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            kind: self.kind.clone(),
            dtype: "f64".into(),
            seed: self.params.seed(),
            config: self.config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        let mut blob = Vec::with_capacity(offset * 8);
        for (_, _, t) in self.params.iter() {
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&blob)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let mut json = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut json)?;
        let manifest: Manifest = serde_json::from_slice(&json)?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                manifest.version
            )));
        }
        if manifest.dtype != "f64" {
            return Err(Error::Format(format!(
                "unsupported checkpoint dtype {}",
                manifest.dtype
            )));
        }
        let mut blob = Vec::new();
        r.read_to_end(&mut blob)?;
        let mut params = ParamStore::new(manifest.seed);
        for e in &manifest.tensors {
            let n = e.shape[0] * e.shape[1];
            let start = e.offset * 8;
            let bytes = blob
                .get(start..start + n * 8)
                .ok_or_else(|| Error::Format(format!("checkpoint blob truncated at {}", e.name)))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(&e.name, Tensor::new(e.shape[0], e.shape[1], data));
        }
        Ok(Self {
            kind: manifest.kind,
            config: manifest.config,
            params,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }

    pub fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(self)
    }
}
