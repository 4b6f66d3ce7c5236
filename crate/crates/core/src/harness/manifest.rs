use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use super::HarnessError;

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(crate::cnn::hex_digest(&bytes))
}

/// `manifest.txt` in the work directory: one `<sha256>  <relative path>`
/// line per artifact, sorted by path (the format `sha256sum -c` reads).
/// Each command refreshes the entries for the files it wrote.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    root: PathBuf,
    entries: BTreeMap<String, String>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.txt";

    pub fn open(root: &Path) -> Result<Self, HarnessError> {
        let mut m = Manifest {
            root: root.to_path_buf(),
            entries: BTreeMap::new(),
        };
        let path = root.join(Self::FILE);
        if path.exists() {
            for line in fs::read_to_string(&path)?.lines() {
                let (hash, file) = line
                    .split_once("  ")
                    .ok_or_else(|| HarnessError::Data(format!("malformed manifest line `{line}`")))?;
                m.entries.insert(file.to_string(), hash.to_string());
            }
        }
        Ok(m)
    }

    pub fn record(&mut self, file: &Path) -> Result<(), HarnessError> {
        let rel = file.strip_prefix(&self.root).unwrap_or(file);
        let key = rel.to_string_lossy().into_owned();
        self.entries.insert(key, sha256_file(file)?);
        Ok(())
    }

    pub fn get(&self, rel: &str) -> Option<&str> {
        self.entries.get(rel).map(String::as_str)
    }

    pub fn save(&self) -> Result<PathBuf, HarnessError> {
        let text: String = self.entries.iter().map(|(f, h)| format!("{h}  {f}\n")).collect();
        let path = self.root.join(Self::FILE);
        fs::write(&path, text)?;
        Ok(path)
    }
}
