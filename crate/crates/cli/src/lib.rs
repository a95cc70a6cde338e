//! Config-driven runner for the potsys toolkit.

pub mod config;
pub mod run;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Shipped example configs, by scenario name.
pub const BUNDLED: [(&str, &str); 7] = [
    ("linear-confounded", include_str!("../configs/linear-confounded.json")),
    ("news-impact", include_str!("../configs/news-impact.json")),
    ("iv-encouragement", include_str!("../configs/iv-encouragement.json")),
    ("randtest-fisher", include_str!("../configs/randtest-fisher.json")),
    ("proxy-attenuation", include_str!("../configs/proxy-attenuation.json")),
    ("control-toy", include_str!("../configs/control-toy.json")),
    ("scalar-irf", include_str!("../configs/scalar-irf.json")),
];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Parse(_) => "parse",
            CliError::Validation(_) => "validation",
            CliError::Runtime(_) => "runtime",
        }
    }
}

impl From<potsys::Error> for CliError {
    fn from(e: potsys::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub task: String,
    #[serde(default)]
    pub name: Option<String>,
    pub wall_time_s: f64,
    pub outputs: Vec<OutputEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Subcommand the config was invoked through, if not `run`.
    pub expect_task: Option<String>,
}

pub struct RunOutcome {
    pub manifest: RunManifest,
    pub summary: Vec<String>,
    pub out_dir: PathBuf,
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Parses, validates and executes config text; relative paths in the
/// config resolve against `base`.
pub fn run_text(text: &str, base: &Path, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let start = Instant::now();
    let mut cfg = config::parse(text)?;
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(want) = &opts.expect_task {
        if cfg.task.name() != want {
            return Err(CliError::Validation(format!(
                "config task is '{}' but the subcommand is '{want}'",
                cfg.task.name()
            )));
        }
    }
    let out_dir = opts
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let mut hashed = cfg.clone();
    hashed.out_dir = None;
    let config_hash = sha256_hex(&serde_json::to_vec(&hashed).map_err(|e| CliError::Runtime(e.to_string()))?);

    let resolved = config::resolve(cfg, base)?;
    let result = run::execute(&resolved)?;

    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut outputs = Vec::with_capacity(result.files.len());
    for f in &result.files {
        let path = out_dir.join(&f.name);
        std::fs::write(&path, &f.bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        outputs.push(OutputEntry {
            file: f.name.clone(),
            sha256: sha256_hex(&f.bytes),
            bytes: f.bytes.len(),
        });
    }
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        version: VERSION.into(),
        config_hash,
        seed: resolved.config.seed,
        task: resolved.config.task.name().into(),
        name: resolved.config.name.clone(),
        wall_time_s: start.elapsed().as_secs_f64(),
        outputs,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
    bytes.push(b'\n');
    let path = out_dir.join("manifest.json");
    std::fs::write(&path, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(RunOutcome {
        manifest,
        summary: result.summary,
        out_dir,
    })
}

pub fn run_path(path: &Path, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Parse(format!("cannot read config {}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    run_text(&text, &base, opts)
}

/// Parses and validates a bundled config without running it.
pub fn check_bundled(name: &str) -> Result<config::Resolved, CliError> {
    let text = BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| CliError::Validation(format!("no bundled config '{name}'")))?;
    config::resolve(config::parse(text)?, Path::new("."))
}
