//! Output directory layout, config loading, locking and the manifest that
//! ties every artifact to one config hash.

use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use untwin_core::config::RunConfig;

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.json";
pub const HISTORY: &str = "history.bin";
pub const CHECKPOINTS: &str = "ckpt";
pub const PLAN: &str = "plan.json";
pub const MODEL: &str = "model.json";
pub const METRICS: &str = "metrics.csv";
pub const TIMING: &str = "timing.json";
pub const PROBE: &str = "probe.json";
pub const COMPARE: &str = "compare.csv";
pub const LOCK: &str = ".untwin.lock";

pub const OUT_ENV: &str = "UNTWIN_OUT";
pub const DEFAULT_OUT: &str = "untwin-out";

/// Parses a JSON config; unknown keys and type errors report their position.
pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    parse_config(&text, path)
}

pub fn parse_config(text: &str, path: &Path) -> CliResult<RunConfig> {
    serde_json::from_str(text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e
            .to_string()
            .split(" at line ")
            .next()
            .unwrap_or_default()
            .to_string(),
    })
}

/// `--out`, then `UNTWIN_OUT`, then the config's `output`, then the default.
pub fn resolve_out(
    flag: Option<&Path>,
    env: Option<String>,
    config_output: Option<&str>,
) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| env.filter(|v| !v.is_empty()).map(PathBuf::from))
        .or_else(|| config_output.map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        let path = dir.join(LOCK);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(CliError::io(&path))?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(CliError::state(format!(
                "{} is locked by another command (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::io(&path)(e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub rounds: u64,
    pub num_ndts: usize,
    pub checkpoint_count: usize,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let f = fs::File::create(path).map_err(CliError::io(path))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::io(path)(e.into()))?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(CliError::io(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let f = fs::File::open(path).map_err(CliError::io(path))?;
    serde_json::from_reader(BufReader::new(f))
        .map_err(|e| CliError::state(format!("{}: {e}", path.display())))
}

/// The manifest in `dir`, or a state error naming what to run first.
pub fn read_manifest(dir: &Path) -> CliResult<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(CliError::state(format!(
            "no twinning artifacts in {}; run `untwin twin` first",
            dir.display()
        )));
    }
    read_json(&path)
}

/// Refuses to mix artifacts of different configs in one directory.
pub fn check_hash(found: &str, expected: &str, what: &str) -> CliResult<()> {
    if found == expected {
        Ok(())
    } else {
        Err(CliError::state(format!(
            "{what} belongs to config {found}, not {expected}; use a separate --out for each config"
        )))
    }
}
