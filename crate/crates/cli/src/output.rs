//! Staged outputs: nothing touches the output directory until every file of
//! a run has been produced, and the manifest is renamed into place last.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mega_core::{MegaError, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.txt";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn io_err(path: &Path, source: std::io::Error) -> MegaError {
    MegaError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

/// Files of one run, held in memory until `commit`.
#[derive(Debug, Default)]
pub struct RunOutput {
    files: Vec<(String, Vec<u8>)>,
    /// Extra manifest lines, `key=value`.
    meta: Vec<(String, String)>,
}

impl RunOutput {
    pub fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        let name = name.into();
        debug_assert!(!self.files.iter().any(|(n, _)| *n == name));
        self.files.push((name, bytes.into()));
    }

    pub fn meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.push((key.into(), value.to_string()));
    }

    pub fn file_names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    /// Writes every file through a temporary in `dir` and renames it into
    /// place, then does the same for the manifest.
    pub fn commit(self, dir: &Path, header: &[(String, String)]) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut staged = Vec::new();
        for (name, bytes) in &self.files {
            staged.push((stage(dir, bytes)?, dir.join(name)));
        }
        let mut manifest = String::new();
        for (k, v) in header.iter().chain(&self.meta) {
            manifest.push_str(&format!("{k}={v}\n"));
        }
        for (name, bytes) in &self.files {
            manifest.push_str(&format!("output.{name}={}\n", sha256_hex(bytes)));
        }
        manifest.push_str(&format!("finished_unix={}\n", unix_now()));
        let manifest_tmp = stage(dir, manifest.as_bytes())?;

        let mut written = Vec::new();
        for (tmp, target) in staged {
            tmp.persist(&target).map_err(|e| io_err(&target, e.error))?;
            written.push(target);
        }
        let target = dir.join(MANIFEST);
        manifest_tmp.persist(&target).map_err(|e| io_err(&target, e.error))?;
        written.push(target);
        Ok(written)
    }
}

fn stage(dir: &Path, bytes: &[u8]) -> Result<tempfile::NamedTempFile> {
    let mut tmp = tempfile::Builder::new()
        .prefix(".mega-")
        .suffix(".tmp")
        .tempfile_in(dir)
        .map_err(|e| io_err(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(dir, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(dir, e))?;
    Ok(tmp)
}

/// Manifest lines parsed back into pairs.
pub fn read_manifest(dir: &Path) -> Result<Vec<(String, String)>> {
    let path = dir.join(MANIFEST);
    let text = String::from_utf8(read_file(&path)?)
        .map_err(|_| MegaError::Config(format!("{} is not UTF-8", path.display())))?;
    mega_core::config::parse_key_values(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_writes_files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = RunOutput::default();
        out.add("a.csv", b"x\n1\n".to_vec());
        out.meta("rows", 1);
        out.commit(dir.path(), &[("subcommand".into(), "test".into())]).unwrap();
        assert_eq!(fs::read(dir.path().join("a.csv")).unwrap(), b"x\n1\n");
        let m = read_manifest(dir.path()).unwrap();
        assert!(m.contains(&("subcommand".into(), "test".into())));
        assert!(m.contains(&("output.a.csv".into(), sha256_hex(b"x\n1\n"))));
        let leftovers = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".tmp"))
            .count();
        assert_eq!(leftovers, 0);
    }
}
