//! Dataset manifest: CSV `path,label[,split]`, UTF-8, LF line endings.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    /// Relative to the manifest's directory.
    pub path: String,
    pub label: usize,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("manifest line {line}: {other:?}")),
    }
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Paths unique and, when given, labels below `num_classes`.
    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, r) in self.rows.iter().enumerate() {
            if !seen.insert(r.path.as_str()) {
                return Err(Error::Config(format!("manifest row {}: duplicate path {:?}", i + 1, r.path)));
            }
            if let Some(n) = num_classes {
                if r.label >= n {
                    return Err(Error::Config(format!(
                        "manifest row {}: label {} outside [0, {n})",
                        i + 1,
                        r.label
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let with_split = self.rows.iter().any(|r| r.split.is_some());
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let header: &[&str] = if with_split { &["path", "label", "split"] } else { &["path", "label"] };
        w.write_record(header).map_err(csv_err)?;
        for r in &self.rows {
            let label = r.label.to_string();
            let split = r.split.map(|s| s.to_string()).unwrap_or_default();
            if with_split {
                w.write_record([r.path.as_str(), &label, &split]).map_err(csv_err)?;
            } else {
                w.write_record([r.path.as_str(), &label]).map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output of UTF-8 input"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
        let header = rdr.headers().map_err(csv_err)?.clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols != ["path", "label"] && cols != ["path", "label", "split"] {
            return Err(Error::Config(format!("manifest header {cols:?}, expected path,label[,split]")));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            if rec.len() < 2 || rec.len() > 3 {
                return Err(Error::Config(format!("manifest line {line}: expected 2 or 3 fields")));
            }
            let label = rec[1]
                .parse()
                .map_err(|_| Error::Config(format!("manifest line {line}: bad label {:?}", &rec[1])))?;
            let split = match rec.get(2) {
                Some("") | None => None,
                Some(s) => Some(s.parse().map_err(|e: Error| Error::Config(format!("manifest line {line}: {e}")))?),
            };
            rows.push(ManifestRow {
                path: rec[0].to_string(),
                label,
                split,
            });
        }
        let m = Manifest { rows };
        m.validate(None)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}
