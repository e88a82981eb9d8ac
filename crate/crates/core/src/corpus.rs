//! Labels and the `path<TAB>label` manifest format shared by the generator,
//! the trainer and the command line.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    pub fn is_bonafide(self) -> bool {
        self == Label::Bonafide
    }

    pub fn from_bonafide(b: bool) -> Self {
        if b {
            Label::Bonafide
        } else {
            Label::Spoof
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bonafide" => Ok(Label::Bonafide),
            "spoof" => Ok(Label::Spoof),
            other => Err(Error::Format(format!("unknown label '{other}' (expected bonafide or spoof)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
}

impl ManifestEntry {
    /// File stem, used as the utterance id.
    pub fn utt_id(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.path.display().to_string())
    }
}

/// Parses a manifest. Relative paths are resolved against the manifest's
/// directory; blank lines are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(p), Some(l), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(Error::Format(format!(
                "{}:{}: expected 'path<TAB>label'",
                path.display(),
                n + 1
            )));
        };
        let label = l
            .trim()
            .parse()
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let p = PathBuf::from(p);
        out.push(ManifestEntry {
            path: if p.is_absolute() { p } else { base.join(p) },
            label,
        });
    }
    Ok(out)
}

/// Writes one `path<TAB>label` line per entry, paths as given.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!("{}\t{}\n", e.path.display(), e.label));
    }
    fs::write(path, text)?;
    Ok(())
}
