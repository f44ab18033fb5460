//! Run manifests: everything needed to re-execute a command and check that
//! it reproduces the same bytes.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AblationKind {
    Lambda,
    Delta,
    Dpop,
}

impl AblationKind {
    pub fn csv_name(self) -> &'static str {
        match self {
            AblationKind::Lambda => "ablation_lambda.csv",
            AblationKind::Delta => "ablation_delta.csv",
            AblationKind::Dpop => "ablation_dpop.csv",
        }
    }
}

/// The command a manifest records. The output directory is the one holding
/// the manifest, so it is not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum RecordedCommand {
    GenData,
    Train { data_dir: PathBuf },
    Ablate { kind: AblationKind, data_dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub pretrain: u64,
    pub validator: u64,
    pub train: u64,
}

impl Seeds {
    pub fn of(cfg: &ExperimentConfig) -> Self {
        Seeds {
            data: cfg.data.seed,
            model: cfg.model.seed,
            pretrain: cfg.pretrain.seed,
            validator: cfg.validator.seed,
            train: cfg.train.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: RecordedCommand,
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    /// Absolute input paths with their digests at run time.
    pub inputs: Vec<FileDigest>,
    /// Output paths relative to the manifest's directory.
    pub outputs: Vec<FileDigest>,
    pub duration_secs: f64,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Digests of `names` inside `dir`, keyed by the relative name.
pub fn digest_outputs(dir: &Path, names: &[String]) -> Result<Vec<FileDigest>, CliError> {
    names
        .iter()
        .map(|n| {
            Ok(FileDigest {
                path: n.clone(),
                sha256: sha256_file(&dir.join(n))?,
            })
        })
        .collect()
}

pub fn digest_inputs(paths: &[PathBuf]) -> Result<Vec<FileDigest>, CliError> {
    paths
        .iter()
        .map(|p| {
            let abs = fs::canonicalize(p).map_err(|e| CliError::io(p, e))?;
            Ok(FileDigest {
                path: abs.display().to_string(),
                sha256: sha256_file(&abs)?,
            })
        })
        .collect()
}

impl RunManifest {
    /// Writes `manifest.json` into `dir` through a temporary file and a rename.
    pub fn write_atomic(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join(format!(".{MANIFEST_FILE}.tmp"));
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&tmp, text + "\n").map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}
