//! JSON-lines dataset manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use emohead_core::metrics::{EMOTIONS, NUM_CLASSES};
use emohead_core::model::{Architecture, Utterance};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_file::read_tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    /// `[l, m, h]` upstream features, relative to the manifest's directory.
    pub feature_path: String,
    pub gender_id: u8,
    pub label_id: usize,
    /// Sentence embedding vector, relative to the manifest's directory.
    pub text_embedding_path: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Utterances per class in label order.
    pub histogram: [u64; NUM_CLASSES],
    /// Directory that relative paths resolve against.
    pub base_dir: PathBuf,
}

/// Parses and validates manifest text. Every bad line is reported.
pub fn parse_manifest(text: &str, base_dir: impl Into<PathBuf>) -> Result<Manifest> {
    let mut records = Vec::new();
    let mut problems = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ManifestRecord>(line) {
            Ok(r) => {
                if r.label_id >= NUM_CLASSES {
                    problems.push(format!("line {}: label_id {} is not in 0..{}", lineno, r.label_id, NUM_CLASSES));
                }
                if r.gender_id > 1 {
                    problems.push(format!("line {}: gender_id {} is not 0 or 1", lineno, r.gender_id));
                }
                records.push(r);
            }
            Err(e) => problems.push(format!("line {}: {}", lineno, e)),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Input(problems.join("; ")));
    }
    let mut histogram = [0u64; NUM_CLASSES];
    for r in &records {
        histogram[r.label_id] += 1;
    }
    Ok(Manifest { records, histogram, base_dir: base_dir.into() })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, base).map_err(|e| match e {
        Error::Input(m) => Error::Input(format!("{}: {}", path.display(), m)),
        other => other,
    })
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Json { path: path.into(), source: e })?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

impl Manifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    /// Reads every referenced tensor and checks it against `arch`.
    pub fn load_utterances(&self, arch: &Architecture) -> Result<Vec<Utterance>> {
        self.records
            .iter()
            .map(|r| {
                let features = read_tensor(self.resolve(&r.feature_path))?;
                let d = features.dims();
                if d.len() != 3 || d[0] != arch.num_layers || d[2] != arch.hidden || d[1] == 0 {
                    return Err(Error::Input(format!(
                        "{}: features have shape {:?}, expected [{}, m≥1, {}]",
                        r.id, d, arch.num_layers, arch.hidden
                    )));
                }
                let text = read_tensor(self.resolve(&r.text_embedding_path))?;
                if text.dims() != [arch.text_dim] {
                    return Err(Error::Input(format!(
                        "{}: text embedding has shape {:?}, expected [{}]",
                        r.id,
                        text.dims(),
                        arch.text_dim
                    )));
                }
                Ok(Utterance { id: r.id.clone(), features, gender: r.gender_id, text, label: r.label_id })
            })
            .collect()
    }

    pub fn describe_histogram(&self) -> String {
        EMOTIONS.iter().zip(self.histogram).map(|(n, c)| format!("{}={}", n, c)).collect::<Vec<_>>().join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, label: usize) -> String {
        format!(r#"{{"id":"{}","feature_path":"f.sert","gender_id":0,"label_id":{},"text_embedding_path":"t.sert"}}"#, id, label)
    }

    #[test]
    fn three_valid_lines() {
        let text = [line("a", 0), line("b", 3), line("c", 3)].join("\n");
        let m = parse_manifest(&text, ".").unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.histogram, [1, 0, 0, 2, 0, 0, 0, 0]);
    }

    #[test]
    fn bad_label_names_the_line() {
        let text = [line("a", 0), line("b", 9)].join("\n");
        let msg = parse_manifest(&text, ".").unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{}", msg);
        assert!(!msg.contains("line 1"));
    }

    #[test]
    fn bad_gender_and_unknown_field() {
        let text = [
            r#"{"id":"a","feature_path":"f","gender_id":2,"label_id":0,"text_embedding_path":"t"}"#.to_string(),
            r#"{"id":"b","feature_path":"f","gender_id":0,"label_id":0,"text_embedding_path":"t","x":1}"#.to_string(),
        ]
        .join("\n");
        let msg = parse_manifest(&text, ".").unwrap_err().to_string();
        assert!(msg.contains("line 1") && msg.contains("line 2"), "{}", msg);
    }

    #[test]
    fn empty_file_is_empty_manifest() {
        let m = parse_manifest("", ".").unwrap();
        assert!(m.records.is_empty());
        assert_eq!(m.histogram, [0; 8]);
    }
}
