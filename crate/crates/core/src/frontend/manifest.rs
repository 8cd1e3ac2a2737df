//! Tab-separated utterance manifests:
//! `id <TAB> speaker_id <TAB> source_path <TAB> audio|feat <TAB> transcript`.
//! The transcript column may be empty or missing. Relative source paths are
//! resolved against the manifest's directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Audio,
    Feat,
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(SourceKind::Audio),
            "feat" => Ok(SourceKind::Feat),
            other => Err(Error::invalid(format!("unknown source kind {other:?}"))),
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceKind::Audio => "audio",
            SourceKind::Feat => "feat",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker: String,
    pub source: PathBuf,
    pub kind: SourceKind,
    pub transcript: String,
}

impl UtteranceRecord {
    pub fn has_transcript(&self) -> bool {
        !self.transcript.trim().is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<UtteranceRecord>) -> Self {
        Self { records, base_dir: PathBuf::new() }
    }

    pub fn parse(text: &str, base_dir: &Path, origin: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Format {
                path: format!("{origin}:{}", lineno + 1),
                msg,
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if !(4..=5).contains(&cols.len()) {
                return Err(bad(format!("expected 4 or 5 tab-separated columns, found {}", cols.len())));
            }
            if cols[0].is_empty() {
                return Err(bad("empty utterance id".into()));
            }
            records.push(UtteranceRecord {
                id: cols[0].to_string(),
                speaker: cols[1].to_string(),
                source: PathBuf::from(cols[2]),
                kind: cols[3].parse().map_err(|e: Error| bad(e.to_string()))?,
                transcript: cols.get(4).copied().unwrap_or("").to_string(),
            });
        }
        Ok(Self { records, base_dir: base_dir.to_path_buf() })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base, &path.display().to_string())
    }

    pub fn to_tsv(&self) -> String {
        self.records
            .iter()
            .map(|r| {
                format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    r.id,
                    r.speaker,
                    r.source.display(),
                    r.kind,
                    r.transcript
                )
            })
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn resolve(&self, rec: &UtteranceRecord) -> PathBuf {
        if rec.source.is_absolute() {
            rec.source.clone()
        } else {
            self.base_dir.join(&rec.source)
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
