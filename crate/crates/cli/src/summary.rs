use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Machine-readable record of one run, printed to stdout.
#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: Option<u64>,
    /// Input path to SHA-256 (directories hash their sorted file listing).
    pub inputs: BTreeMap<String, String>,
    pub config: Value,
    pub outputs: Vec<String>,
    pub result: Value,
}

impl RunSummary {
    pub fn new(command: &'static str) -> Self {
        Self {
            tool: "nodulekit",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: None,
            inputs: BTreeMap::new(),
            config: Value::Null,
            outputs: Vec::new(),
            result: Value::Null,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let digest = digest_path(path).map_err(|e| CliError::from(e).at(path))?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn digest_file(path: &Path) -> std::io::Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Sorted list of regular files below `dir`.
pub fn list_files(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    files.sort();
    Ok(files)
}

pub fn digest_path(path: &Path) -> std::io::Result<String> {
    if !path.is_dir() {
        return digest_file(path);
    }
    let mut listing = String::new();
    for f in list_files(path)? {
        let rel = f.strip_prefix(path).unwrap_or(&f);
        listing.push_str(&format!("{}\0{}\n", rel.display(), digest_file(&f)?));
    }
    Ok(sha256_hex(listing.as_bytes()))
}
