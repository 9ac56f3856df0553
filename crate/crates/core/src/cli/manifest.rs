//! JSON Lines clip manifests.
//!
//! An optional first line `{"class_list": [...]}` fixes the label order;
//! without it the built-in 17-class transportation list applies. Every
//! other line is `{"id": ..., "path": ..., "labels": [...]}`. Relative paths
//! resolve against the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class names of the 17-class warning/vehicle subset with their clip
/// counts, in table order (warning sounds, then vehicle sounds).
pub const DCASE17: [(&str, u64); 17] = [
    ("Car alarm", 273),
    ("Reversing beeps", 337),
    ("Air/Truck horn", 407),
    ("Train horn", 441),
    ("Ambulance siren", 624),
    ("Screaming", 744),
    ("Civil defense siren", 1_506),
    ("Police siren", 2_399),
    ("Fire engine siren", 2_399),
    ("Skateboard", 1_617),
    ("Bicycle", 2_020),
    ("Train", 2_301),
    ("Motorcycle", 3_291),
    ("Car passing by", 3_724),
    ("Bus", 3_745),
    ("Truck", 7_090),
    ("Car", 25_744),
];

pub fn dcase17_classes() -> Vec<String> {
    DCASE17.iter().map(|(n, _)| n.to_string()).collect()
}

pub fn dcase17_counts() -> Vec<u64> {
    DCASE17.iter().map(|&(_, c)| c).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub path: String,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    class_list: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub class_list: Vec<String>,
    pub records: Vec<ManifestRecord>,
    /// Directory relative record paths resolve against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(class_list: Vec<String>, records: Vec<ManifestRecord>) -> Result<Self> {
        let m = Self {
            class_list,
            records,
            base_dir: PathBuf::new(),
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let classes: HashSet<&str> = self.class_list.iter().map(String::as_str).collect();
        if classes.len() != self.class_list.len() {
            return Err(Error::InvalidConfig("class list contains duplicates".into()));
        }
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId {
                    id: r.id.clone(),
                    line: i + 1,
                });
            }
            if let Some(bad) = r.labels.iter().find(|l| !classes.contains(l.as_str())) {
                return Err(Error::UnknownLabel {
                    label: bad.clone(),
                    line: i + 1,
                });
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.class_list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Multi-hot labels in class-list order.
    pub fn label_vector(&self, record: &ManifestRecord) -> Vec<bool> {
        self.class_list
            .iter()
            .map(|c| record.labels.iter().any(|l| l == c))
            .collect()
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Parses manifest text. Line numbers in errors are 1-based.
    pub fn from_jsonl(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut class_list = None;
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        let mut first = true;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value =
                serde_json::from_str(line).map_err(|e| Error::MalformedLine {
                    line: line_no,
                    message: e.to_string(),
                })?;
            let malformed = |e: serde_json::Error| Error::MalformedLine {
                line: line_no,
                message: e.to_string(),
            };
            if value.get("class_list").is_some() {
                if !first {
                    return Err(Error::MalformedLine {
                        line: line_no,
                        message: "class_list header must be the first line".into(),
                    });
                }
                let header: Header = serde_json::from_value(value).map_err(malformed)?;
                class_list = Some(header.class_list);
            } else {
                let record: ManifestRecord = serde_json::from_value(value).map_err(malformed)?;
                let classes = class_list.get_or_insert_with(dcase17_classes);
                if !seen.insert(record.id.clone()) {
                    return Err(Error::DuplicateId {
                        id: record.id,
                        line: line_no,
                    });
                }
                if let Some(bad) = record.labels.iter().find(|l| !classes.contains(l)) {
                    return Err(Error::UnknownLabel {
                        label: bad.clone(),
                        line: line_no,
                    });
                }
                records.push(record);
            }
            first = false;
        }
        let m = Self {
            class_list: class_list.unwrap_or_else(dcase17_classes),
            records,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Serializes with an explicit class-list header.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&Header {
            class_list: self.class_list.clone(),
        })
        .expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

pub fn parse_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Manifest::from_jsonl(&text, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_matches_table() {
        assert_eq!(DCASE17.len(), 17);
        assert_eq!(DCASE17[0], ("Car alarm", 273));
        assert_eq!(DCASE17[16], ("Car", 25_744));
        let names = dcase17_classes();
        let unique: HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), 17);
    }

    #[test]
    fn default_class_list() {
        let m = Manifest::from_jsonl(
            r#"{"id":"a","path":"a.wav","labels":["Car","Bus"]}"#,
            "",
        )
        .unwrap();
        assert_eq!(m.class_list, dcase17_classes());
        let y = m.label_vector(&m.records[0]);
        assert_eq!(y.iter().filter(|&&b| b).count(), 2);
        assert!(y[16] && y[14]);
    }

    #[test]
    fn unknown_label_names_label_and_line() {
        let text = "{\"id\":\"a\",\"path\":\"a.wav\",\"labels\":[\"Car\"]}\n\
                    {\"id\":\"b\",\"path\":\"b.wav\",\"labels\":[\"Jetpack\"]}\n";
        match Manifest::from_jsonl(text, "") {
            Err(Error::UnknownLabel { label, line }) => {
                assert_eq!(label, "Jetpack");
                assert_eq!(line, 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_and_malformed() {
        let dup = "{\"id\":\"a\",\"path\":\"a.wav\",\"labels\":[]}\n{\"id\":\"a\",\"path\":\"b.wav\",\"labels\":[]}";
        assert!(matches!(
            Manifest::from_jsonl(dup, ""),
            Err(Error::DuplicateId { line: 2, .. })
        ));
        assert!(matches!(
            Manifest::from_jsonl("{\"id\": 3}", ""),
            Err(Error::MalformedLine { line: 1, .. })
        ));
        assert!(matches!(
            Manifest::from_jsonl("not json", ""),
            Err(Error::MalformedLine { line: 1, .. })
        ));
    }

    #[test]
    fn empty_file_is_valid() {
        let m = Manifest::from_jsonl("", "").unwrap();
        assert!(m.is_empty());
        assert_eq!(m.n_classes(), 17);
    }

    #[test]
    fn header_roundtrip() {
        let m = Manifest::new(
            vec!["x".into(), "y".into()],
            vec![ManifestRecord {
                id: "c1".into(),
                path: "w/c1.wav".into(),
                labels: vec!["y".into()],
            }],
        )
        .unwrap();
        let text = m.to_jsonl();
        let back = Manifest::from_jsonl(&text, "").unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_jsonl(), text);
        assert_eq!(back.resolve(&back.records[0]), PathBuf::from("w/c1.wav"));
    }
}
