//! Checkpoint directories: `model.bin` (parameter archive), `meta.json`
//! and `losses.csv`. Directories are assembled under a temporary name and
//! renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io, load, Error, Result};
use crate::params::{hex_digest, Archive};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MODEL_FILE: &str = "model.bin";
pub const META_FILE: &str = "meta.json";
pub const LOSSES_FILE: &str = "losses.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage2,
    Stage3,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stage2 => "stage2",
            Stage::Stage3 => "stage3",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub stage: Stage,
    /// SHA-256 of the compact JSON form of `config`.
    pub config_hash: String,
    pub config: serde_json::Value,
    /// Completed epochs.
    pub epoch: usize,
    pub finished: bool,
    /// SHA-256 of `model.bin`.
    pub model_sha256: String,
    pub history: Vec<EpochLog>,
    /// Free-form record of the surrounding experiment; not hashed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub archive: Archive,
}

pub fn config_hash(config: &serde_json::Value) -> String {
    hex_digest(serde_json::to_string(config).expect("JSON values always serialise").as_bytes())
}

pub fn losses_csv(history: &[EpochLog]) -> String {
    let cols: Vec<&String> = history.first().map(|h| h.losses.keys().collect()).unwrap_or_default();
    let mut out = String::from("epoch");
    for c in &cols {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for h in history {
        out.push_str(&h.epoch.to_string());
        for c in &cols {
            out.push(',');
            out.push_str(&h.losses.get(*c).map(|v| v.to_string()).unwrap_or_default());
        }
        out.push('\n');
    }
    out
}

impl Checkpoint {
    pub fn new(stage: Stage, config: serde_json::Value, epoch: usize, finished: bool, history: Vec<EpochLog>, archive: Archive) -> Self {
        let model_sha256 = archive.digest();
        Checkpoint {
            meta: CheckpointMeta {
                format_version: CHECKPOINT_FORMAT_VERSION,
                stage,
                config_hash: config_hash(&config),
                config,
                epoch,
                finished,
                model_sha256,
                history,
                experiment: None,
            },
            archive,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let name = dir
            .file_name()
            .ok_or_else(|| Error::Config(format!("{} is not a usable checkpoint path", dir.display())))?
            .to_string_lossy()
            .to_string();
        let parent = match dir.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| io(&parent, e))?;
        let tmp = parent.join(format!(".{name}.tmp"));
        let old = parent.join(format!(".{name}.old"));
        for p in [&tmp, &old] {
            if p.exists() {
                fs::remove_dir_all(p).map_err(|e| io(p, e))?;
            }
        }
        fs::create_dir(&tmp).map_err(|e| io(&tmp, e))?;
        let write = |file: &str, bytes: &[u8]| {
            let p = tmp.join(file);
            fs::write(&p, bytes).map_err(|e| io(&p, e))
        };
        write(MODEL_FILE, &self.archive.to_bytes())?;
        write(LOSSES_FILE, losses_csv(&self.meta.history).as_bytes())?;
        let mut meta = serde_json::to_string_pretty(&self.meta).expect("metadata serialises");
        meta.push('\n');
        write(META_FILE, meta.as_bytes())?;
        if dir.exists() {
            fs::rename(dir, &old).map_err(|e| io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| io(dir, e))?;
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| io(&old, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| load(&meta_path, e.to_string()))?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(load(&meta_path, format!("unsupported format version {}", meta.format_version)));
        }
        if config_hash(&meta.config) != meta.config_hash {
            return Err(load(&meta_path, "config hash does not match the embedded config"));
        }
        let model_path = dir.join(MODEL_FILE);
        let bytes = fs::read(&model_path).map_err(|e| io(&model_path, e))?;
        if hex_digest(&bytes) != meta.model_sha256 {
            return Err(load(&model_path, "parameter blob does not match its recorded digest"));
        }
        let archive = Archive::from_bytes(&bytes).map_err(|e| load(&model_path, e))?;
        Ok(Checkpoint { meta, archive })
    }

    pub fn expect_stage(&self, stage: Stage, path: &Path) -> Result<()> {
        if self.meta.stage == stage {
            Ok(())
        } else {
            Err(load(path, format!("expected a {} checkpoint, found {}", stage.as_str(), self.meta.stage.as_str())))
        }
    }

    pub fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.meta.config.clone())
            .map_err(|e| Error::State(format!("checkpoint config does not parse: {e}")))
    }
}
