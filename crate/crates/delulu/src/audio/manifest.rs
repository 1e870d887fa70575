//! JSON-lines dataset manifest: one record per utterance.

use crate::error::{DeluluError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub utt_id: String,
    pub speaker_id: String,
    pub path: String,
    pub duration_s: f64,
    pub gender: String,
    pub age_band: String,
    /// Extra task labels (e.g. speaker_count, distance) for profiling sets;
    /// absent on plain corpora.
    #[serde(flatten, skip_serializing_if = "BTreeMap::is_empty", default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            DeluluError::Data(format!("manifest line {}: {e}", i + 1))
        })?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(DeluluError::Data(format!("empty manifest: {}", path.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let recs = vec![ManifestRecord {
            utt_id: "spk000_utt000".into(),
            speaker_id: "spk000".into(),
            path: "wav/spk000_utt000.wav".into(),
            duration_s: 1.0,
            gender: "female".into(),
            age_band: "18-35".into(),
            extra: BTreeMap::new(),
        }];
        write_manifest(&recs, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), recs);
    }

    #[test]
    fn bad_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"utt_id\": }\n").unwrap();
        let err = read_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }
}
