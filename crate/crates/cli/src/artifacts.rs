use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Files written by one command. Each file goes to a hidden temporary name
/// next to its target and is renamed into place by [`Outputs::commit`];
/// dropping an uncommitted batch deletes the temporaries, so a failed command
/// leaves no partial outputs behind.
#[derive(Debug, Default)]
pub struct Outputs {
    staged: Vec<(PathBuf, PathBuf)>,
    committed: bool,
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    fn temp_for(path: &Path) -> PathBuf {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        path.with_file_name(format!(".{name}.partial"))
    }

    /// Stages `path`, handing `fill` a buffered writer.
    pub fn write_with(
        &mut self,
        path: impl AsRef<Path>,
        fill: impl FnOnce(&mut BufWriter<File>) -> Result<()>,
    ) -> Result<()> {
        let path = path.as_ref().to_path_buf();
        let temp = Self::temp_for(&path);
        let file = File::create(&temp).with_context(|| format!("creating {}", path.display()))?;
        self.staged.push((temp, path.clone()));
        let mut w = BufWriter::new(file);
        fill(&mut w).with_context(|| format!("writing {}", path.display()))?;
        w.flush().with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn write_bytes(&mut self, path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
        self.write_with(path, |w| Ok(w.write_all(bytes)?))
    }

    /// Pretty JSON with a trailing newline.
    pub fn write_json<T: Serialize>(&mut self, path: impl AsRef<Path>, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(path, text.as_bytes())
    }

    pub fn targets(&self) -> Vec<PathBuf> {
        self.staged.iter().map(|(_, p)| p.clone()).collect()
    }

    pub fn commit(mut self) -> Result<Vec<PathBuf>> {
        for (temp, path) in &self.staged {
            fs::rename(temp, path).with_context(|| format!("moving {} into place", path.display()))?;
        }
        self.committed = true;
        Ok(self.targets())
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for (temp, _) in &self.staged {
                let _ = fs::remove_file(temp);
            }
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| Ok(FileDigest { path: p.display().to_string(), sha256: sha256_file(p)? }))
        .collect()
}

/// Provenance record of one command run. The only file carrying a
/// timestamp.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub unix_time: u64,
}

/// Writes `<reports>/manifests/<command>.json`.
pub fn write_manifest(
    reports: &Path,
    command: &str,
    config_json: &str,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<PathBuf> {
    let dir = reports.join("manifests");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let manifest = Manifest {
        command: command.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: sha256_hex(config_json.as_bytes()),
        config: serde_json::from_str(config_json)?,
        inputs: digests(inputs)?,
        outputs: digests(outputs)?,
        unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    let path = dir.join(format!("{command}.json"));
    let mut out = Outputs::new();
    out.write_json(&path, &manifest)?;
    out.commit()?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_outputs_leave_nothing() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut out = Outputs::new();
            out.write_bytes(dir.path().join("a.txt"), b"x").unwrap();
        }
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
        let mut out = Outputs::new();
        out.write_bytes(dir.path().join("a.txt"), b"x").unwrap();
        out.commit().unwrap();
        assert_eq!(fs::read(dir.path().join("a.txt")).unwrap(), b"x");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
