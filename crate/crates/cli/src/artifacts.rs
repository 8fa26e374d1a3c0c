//! Run-directory layout, JSON envelopes and checkpoint wrappers.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use specret_core::cube::HsiCube;
use specret_core::synth::{load_library, LibraryEntry, Scene, SceneSidecar};
use specret_core::{Error, Result, WavelengthGrid};
use specret_nn::{Checkpoint, ParamStore};

use crate::config::{sha256_hex, RunConfig, Stage};

pub const FORMAT_VERSION: u32 = 1;

pub const MANIFEST: &str = "manifest.json";
pub const LIBRARY: &str = "library.json";
pub const PROPNET: &str = "propnet.ckpt";
pub const BGNET: &str = "bgnet.ckpt";
pub const AUX_REPORT: &str = "aux_report.jsonl";
pub const CURVES: &str = "curves.json";

/// File names that differ between the conditioned model and the ablation.
pub fn variant_file(stem: &str, unconditioned: bool, ext: &str) -> String {
    if unconditioned {
        format!("{stem}-unconditioned.{ext}")
    } else {
        format!("{stem}.{ext}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope<T> {
    pub format_version: u32,
    pub kind: String,
    pub stage_hash: String,
    pub body: T,
}

/// Writes to a temporary sibling, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_envelope<T: Serialize>(
    path: &Path,
    kind: &str,
    stage_hash: String,
    body: &T,
) -> Result<()> {
    let env = Envelope {
        format_version: FORMAT_VERSION,
        kind: kind.into(),
        stage_hash,
        body,
    };
    let mut bytes = serde_json::to_vec_pretty(&env)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn missing(path: &Path, stage: Stage) -> Error {
    Error::Format(format!(
        "{} not found; run `specret {}` first",
        path.display(),
        stage.command()
    ))
}

/// Reads an envelope and checks its version, kind and producing-config hash.
pub fn read_envelope<T: DeserializeOwned>(
    path: &Path,
    kind: &str,
    stage: Stage,
    cfg: &RunConfig,
) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|_| missing(path, stage))?;
    let env: Envelope<T> = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if env.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{} has format version {}, this build reads {FORMAT_VERSION}",
            path.display(),
            env.format_version
        )));
    }
    if env.kind != kind {
        return Err(Error::Format(format!(
            "{} holds a {} artifact, expected {kind}",
            path.display(),
            env.kind
        )));
    }
    check_hash(path, &env.stage_hash, stage, cfg)?;
    Ok(env.body)
}

fn check_hash(path: &Path, found: &str, stage: Stage, cfg: &RunConfig) -> Result<()> {
    if found != stage.hash(cfg) {
        return Err(Error::Format(format!(
            "{} was produced by a different configuration; rerun `specret {}`",
            path.display(),
            stage.command()
        )));
    }
    Ok(())
}

/// Model checkpoint whose config echo carries the artifact version and stage hash.
pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    stage: Stage,
    cfg: &RunConfig,
    model_cfg: &impl Serialize,
    params: &ParamStore,
) -> Result<()> {
    let echo = serde_json::json!({
        "format_version": FORMAT_VERSION,
        "stage_hash": stage.hash(cfg),
        "model": model_cfg,
    });
    write_atomic(
        path,
        &Checkpoint::new(kind, echo, params.clone()).to_bytes(),
    )
}

pub fn load_checkpoint<M: DeserializeOwned>(
    path: &Path,
    kind: &str,
    stage: Stage,
    cfg: &RunConfig,
) -> Result<(M, ParamStore)> {
    if !path.exists() {
        return Err(missing(path, stage));
    }
    let ck = Checkpoint::load(path)?.expect_kind(kind)?;
    let version = ck.config.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Format(format!(
            "{} has artifact version {version:?}, expected {FORMAT_VERSION}",
            path.display()
        )));
    }
    let hash = ck
        .config
        .get("stage_hash")
        .and_then(|v| v.as_str())
        .unwrap_or_default();
    check_hash(path, hash, stage, cfg)?;
    let model = serde_json::from_value(ck.config["model"].clone())
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok((model, ck.params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub n_bands: usize,
    pub cubes: Vec<String>,
    pub files: Vec<FileEntry>,
}

pub fn cube_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("cubes").join(format!("{id}.hsic"))
}

pub fn sidecar_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("cubes").join(format!("{id}.json"))
}

pub fn file_entry(dir: &Path, path: &Path) -> Result<FileEntry> {
    let bytes = std::fs::read(path)?;
    let rel = path
        .strip_prefix(dir)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/");
    Ok(FileEntry {
        path: rel,
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

/// A dataset reloaded from a run directory.
pub struct StoredDataset {
    pub grid: WavelengthGrid,
    pub library: Vec<LibraryEntry>,
    pub scenes: Vec<Scene>,
}

/// Loads and verifies every file listed in the manifest.
pub fn load_dataset(dir: &Path, cfg: &RunConfig) -> Result<StoredDataset> {
    let manifest: DatasetManifest =
        read_envelope(&dir.join(MANIFEST), "dataset", Stage::Data, cfg)?;
    for f in &manifest.files {
        let got = file_entry(dir, &dir.join(&f.path))?;
        if got.sha256 != f.sha256 {
            return Err(Error::Format(format!(
                "{} does not match its manifest hash",
                f.path
            )));
        }
    }
    let (grid, library) = load_library(dir.join(LIBRARY))?;
    let scenes = manifest
        .cubes
        .iter()
        .map(|id| {
            let cube = HsiCube::load(cube_path(dir, id))?;
            let text = std::fs::read_to_string(sidecar_path(dir, id))?;
            let sidecar: SceneSidecar = serde_json::from_str(&text)?;
            Scene::from_parts(cube, sidecar, cfg.synth.outlier_fraction)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StoredDataset {
        grid,
        library,
        scenes,
    })
}
