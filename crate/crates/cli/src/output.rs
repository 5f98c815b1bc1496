//! Atomic output files and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

/// Version of the CSV and JSON layouts written by this tool.
pub const OUTPUT_FORMAT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serializes into a buffer with `f` and writes it atomically.
pub fn write_with<F>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut Vec<u8>) -> heatwarn::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(heatwarn::Error::from)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config_sha256: String,
    formats: BTreeMap<&'static str, u32>,
    config: &'a RunConfig,
    /// Output files relative to the output directory, with their digests.
    files: BTreeMap<String, String>,
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<(), CliError> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != "manifest.json") {
            let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            out.insert(rel, sha256_hex(&fs::read(&path)?));
        }
    }
    Ok(())
}

/// Records the resolved config, its hash, the seed and a digest of every
/// output file.
pub fn write_manifest(out_dir: &Path, command: &str, config: &RunConfig) -> Result<(), CliError> {
    // the output location does not affect any output
    let config = &RunConfig {
        out: None,
        ..config.clone()
    };
    let canonical = serde_json::to_vec(config).map_err(heatwarn::Error::from)?;
    let mut files = BTreeMap::new();
    collect_files(out_dir, out_dir, &mut files)?;
    let formats = BTreeMap::from([
        ("checkpoint", heatwarn::forecaster::CHECKPOINT_FORMAT_VERSION),
        ("outputs", OUTPUT_FORMAT_VERSION),
    ]);
    let manifest = Manifest {
        tool: "heatwarn",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: config.seed,
        config_sha256: sha256_hex(&canonical),
        formats,
        config,
        files,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)
}
