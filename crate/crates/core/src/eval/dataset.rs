use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Gold answer: one label or a label set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gold {
    One(String),
    Many(Vec<String>),
}

impl Gold {
    pub fn set(&self) -> BTreeSet<String> {
        match self {
            Gold::One(l) => BTreeSet::from([l.clone()]),
            Gold::Many(ls) => ls.iter().cloned().collect(),
        }
    }

    pub fn display(&self) -> String {
        match self {
            Gold::One(l) => l.clone(),
            Gold::Many(ls) => ls.join(", "),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub input: String,
    pub gold: Gold,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DatasetError {
    #[error("dataset file not found: {}", .0.display())]
    DatasetNotFound(PathBuf),
    #[error("cannot read {}: {msg}", path.display())]
    Io { path: PathBuf, msg: String },
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("duplicate example id `{0}`")]
    DuplicateId(String),
    #[error("example `{id}` has label `{label}` outside the label set")]
    UnknownLabel { id: String, label: String },
    #[error("split {0:?} is empty")]
    EmptySplit(Split),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(PathBuf),
    Many(Vec<PathBuf>),
}

fn paths<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<PathBuf>, D::Error> {
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(p) => vec![p],
        OneOrMany::Many(ps) => ps,
    })
}

/// Which JSONL files feed which split. Relative paths resolve against the
/// directory given to [`Dataset::load`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    #[serde(default, deserialize_with = "paths")]
    pub train: Vec<PathBuf>,
    #[serde(default, deserialize_with = "paths")]
    pub val: Vec<PathBuf>,
    #[serde(default, deserialize_with = "paths")]
    pub test: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<ExampleRecord>,
    pub val: Vec<ExampleRecord>,
    pub test: Vec<ExampleRecord>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: Value,
    input: String,
    label: Gold,
}

/// Reads `{"id", "input", "label"}` lines.
pub fn load_jsonl(path: &Path, split: Split) -> Result<Vec<ExampleRecord>, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::DatasetNotFound(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| DatasetError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let id = match raw.id {
            Value::String(s) => s,
            Value::Number(n) => n.to_string(),
            other => {
                return Err(DatasetError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("id must be a string or number, got {other}"),
                })
            }
        };
        out.push(ExampleRecord {
            id,
            input: raw.input,
            gold: raw.label,
            split,
        });
    }
    Ok(out)
}

impl Dataset {
    pub fn load(manifest: &SplitManifest, base: &Path, label_set: &[String]) -> Result<Dataset, DatasetError> {
        let mut ds = Dataset::default();
        for (split, files) in [(Split::Train, &manifest.train), (Split::Val, &manifest.val), (Split::Test, &manifest.test)] {
            for f in files {
                let path = if f.is_absolute() { f.clone() } else { base.join(f) };
                let records = load_jsonl(&path, split)?;
                ds.split_mut(split).extend(records);
            }
        }
        ds.check(label_set)?;
        Ok(ds)
    }

    pub fn from_records(records: Vec<ExampleRecord>) -> Dataset {
        let mut ds = Dataset::default();
        for r in records {
            ds.split_mut(r.split).push(r);
        }
        ds
    }

    pub fn split(&self, split: Split) -> &[ExampleRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<ExampleRecord> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    /// Ids unique across splits; gold labels drawn from `label_set`.
    pub fn check(&self, label_set: &[String]) -> Result<(), DatasetError> {
        let mut seen = HashSet::new();
        for r in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(r.id.as_str()) {
                return Err(DatasetError::DuplicateId(r.id.clone()));
            }
            if let Some(label) = r.gold.set().into_iter().find(|l| !label_set.contains(l)) {
                return Err(DatasetError::UnknownLabel { id: r.id.clone(), label });
            }
        }
        Ok(())
    }

    pub fn require(&self, split: Split) -> Result<&[ExampleRecord], DatasetError> {
        let s = self.split(split);
        if s.is_empty() {
            Err(DatasetError::EmptySplit(split))
        } else {
            Ok(s)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_and_checks() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train.jsonl"), "{\"id\": 1, \"input\": \"x\", \"label\": \"(A)\"}\n\n{\"id\": \"2\", \"input\": \"y\", \"label\": [\"(A)\", \"(B)\"]}\n").unwrap();
        fs::write(dir.path().join("val.jsonl"), "{\"id\": 1, \"input\": \"z\", \"label\": \"(B)\"}\n").unwrap();
        let labels = vec!["(A)".to_string(), "(B)".to_string()];
        let m: SplitManifest = toml::from_str("train = \"train.jsonl\"").unwrap();
        let ds = Dataset::load(&m, dir.path(), &labels).unwrap();
        assert_eq!(ds.train.len(), 2);
        assert_eq!(ds.train[1].gold.display(), "(A), (B)");
        let both: SplitManifest = toml::from_str("train = \"train.jsonl\"\nval = [\"val.jsonl\"]").unwrap();
        assert_eq!(Dataset::load(&both, dir.path(), &labels), Err(DatasetError::DuplicateId("1".into())));
        let missing: SplitManifest = toml::from_str("test = \"nope.jsonl\"").unwrap();
        assert!(matches!(Dataset::load(&missing, dir.path(), &labels), Err(DatasetError::DatasetNotFound(_))));
        assert!(matches!(
            Dataset::load(&m, dir.path(), &labels[..1]),
            Err(DatasetError::UnknownLabel { .. })
        ));
    }
}
