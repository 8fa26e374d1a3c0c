use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use specret_core::{Error, Result};
use specret_model::benchmark::BenchmarkConfig;
use specret_model::train::Precision;

/// Every command reads the same document; missing keys take their defaults, unknown keys are
/// rejected.
pub type RunConfig = BenchmarkConfig;

#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    /// Re-derives every stage seed from this master seed.
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub precision: Option<Precision>,
}

pub fn load_config(path: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = ov.seed {
        cfg = cfg.seeded(s);
    }
    if let Some(e) = ov.epochs {
        cfg.train.epochs = e;
    }
    if let Some(p) = ov.precision {
        cfg.train.precision = p;
    }
    Ok(cfg)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn hash_json(v: &impl Serialize) -> String {
    sha256_hex(&serde_json::to_vec(v).expect("config values serialize"))
}

/// Pipeline stages; an artifact records the hash of every config section its stage depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Aux,
    Train,
    Infer,
}

impl Stage {
    pub fn hash(self, cfg: &RunConfig) -> String {
        let data = serde_json::json!({ "synth": cfg.synth });
        let aux = serde_json::json!({ "data": data, "aux": cfg.aux, "seed": cfg.seed, "n_test_cubes": cfg.n_test_cubes });
        let train = serde_json::json!({
            "aux": aux,
            "train": cfg.train,
            "d_z": cfg.d_z,
            "estimate_set_size": cfg.estimate_set_size,
        });
        let v = match self {
            Stage::Data => data,
            Stage::Aux => aux,
            Stage::Train => train,
            Stage::Infer => serde_json::json!({ "train": train, "n_samples": cfg.n_samples }),
        };
        hash_json(&v)
    }

    pub fn command(self) -> &'static str {
        match self {
            Stage::Data => "synth",
            Stage::Aux => "train-aux",
            Stage::Train => "train",
            Stage::Infer => "infer",
        }
    }
}
