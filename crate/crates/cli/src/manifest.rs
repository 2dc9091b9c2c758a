//! Data manifests: `utt_id<TAB>wav_path<TAB>transcript` per line, UTF-8.
//! The transcript column may be omitted in decode-only lists. Relative wav
//! paths resolve against the manifest's own directory so corpora relocate
//! cleanly.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use asrlab::{Error, Result};

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub wav_path: PathBuf,
    /// Empty when the manifest has no transcript column.
    pub transcript: String,
}

pub fn read(path: &Path) -> Result<Vec<ManifestEntry>> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&fields.len()) || fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Config(format!(
                "{}:{}: expected utt_id<TAB>wav_path[<TAB>transcript]",
                path.display(),
                lineno + 1
            )));
        }
        if !seen.insert(fields[0].to_string()) {
            return Err(Error::Config(format!(
                "{}:{}: duplicate utterance id {}",
                path.display(),
                lineno + 1,
                fields[0]
            )));
        }
        let mut wav_path = PathBuf::from(fields[1]);
        if wav_path.is_relative() {
            if let Some(dir) = path.parent() {
                wav_path = dir.join(wav_path);
            }
        }
        entries.push(ManifestEntry {
            utt_id: fields[0].to_string(),
            wav_path,
            transcript: fields.get(2).copied().unwrap_or("").to_string(),
        });
    }
    Ok(entries)
}
