//! Line-delimited JSON files for pools and datasets.
//!
//! Each line is one object:
//!
//! ```text
//! {"id":"s7-0","kind":"VQA","grid":{"h":32,"w":32,"rle":"40*0 6*13 ..."},
//!  "question":{"type":"count","shape":2},"prompt_text":"How many ...","truth":{"answer":"two"}}
//! ```
//!
//! `rle` is a space-separated list of `count*code` runs over the row-major
//! grid, where code 0 is empty and `1 + shape*4 + color` an object cell.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, Provenance, Question, Sample, Scene, TaskKind, Truth};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridRecord {
    h: usize,
    w: usize,
    rle: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    kind: TaskKind,
    grid: GridRecord,
    question: Question,
    prompt_text: String,
    truth: Truth,
}

const MAX_GRID_CELLS: usize = 1 << 16;

pub fn sample_to_line(s: &Sample) -> String {
    let rec = SampleRecord {
        id: s.id.clone(),
        kind: s.kind,
        grid: GridRecord {
            h: s.scene.height(),
            w: s.scene.width(),
            rle: s.scene.to_rle(),
        },
        question: s.question.clone(),
        prompt_text: s.prompt_text.clone(),
        truth: s.truth.clone(),
    };
    serde_json::to_string(&rec).expect("sample records always serialise")
}

/// Parses and verifies one record. Errors carry no position; callers add it.
pub fn sample_from_line(line: &str) -> std::result::Result<Sample, String> {
    let rec: SampleRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if rec.grid.h.saturating_mul(rec.grid.w) > MAX_GRID_CELLS {
        return Err("grid too large".into());
    }
    let scene = Scene::from_rle(rec.grid.h, rec.grid.w, &rec.grid.rle).map_err(|e| e.to_string())?;
    let sample = Sample {
        id: rec.id,
        kind: rec.kind,
        scene,
        question: rec.question,
        prompt_text: rec.prompt_text,
        truth: rec.truth,
    };
    sample.verify().map_err(|e| e.to_string())?;
    Ok(sample)
}

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut out = Vec::new();
    for s in samples {
        out.extend_from_slice(sample_to_line(s).as_bytes());
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s = sample_from_line(&line).map_err(|msg| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        })?;
        out.push(s);
    }
    Ok(out)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Identifier of an in-memory pool: hash of its serialised form.
pub fn pool_id(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(sample_to_line(s).as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Sidecar written next to every generated pool or dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub file: String,
    pub file_hash: String,
    pub records: usize,
    pub pool_seed: Option<u64>,
    pub pool_hash: Option<String>,
    pub provenance: Provenance,
}

pub fn manifest_path(data_path: &Path) -> std::path::PathBuf {
    let mut name = data_path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    data_path.with_file_name(name)
}

pub fn write_dataset(
    path: &Path,
    dataset: &Dataset,
    pool_seed: Option<u64>,
    pool_hash: Option<String>,
) -> Result<DatasetManifest> {
    write_samples(path, &dataset.samples)?;
    let manifest = DatasetManifest {
        file: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        file_hash: file_hash(path)?,
        records: dataset.samples.len(),
        pool_seed,
        pool_hash,
        provenance: dataset.provenance.clone(),
    };
    let mp = manifest_path(path);
    fs::write(&mp, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mp, e))?;
    Ok(manifest)
}

/// Loads a dataset and, when present, its manifest's provenance.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let samples = read_samples(path)?;
    let mp = manifest_path(path);
    let provenance = if mp.exists() {
        let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.provenance
    } else {
        Provenance::default()
    };
    Ok(Dataset {
        samples,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::render_pool;

    #[test]
    fn round_trip_pool() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pool.jsonl");
        let pool = render_pool(24, 8).unwrap();
        write_samples(&p, &pool).unwrap();
        assert_eq!(read_samples(&p).unwrap(), pool);
    }

    #[test]
    fn truncated_file_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pool.jsonl");
        let pool = render_pool(6, 8).unwrap();
        write_samples(&p, &pool).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let cut = text.len() - 40;
        fs::write(&p, &text[..cut]).unwrap();
        match read_samples(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn tampered_truth_is_rejected() {
        let pool = render_pool(3, 8).unwrap();
        let cls = pool.iter().find(|s| s.kind == TaskKind::Cls).unwrap();
        let line = sample_to_line(cls);
        let wrong = if cls.scene.scene_class_name() == "lake" {
            "forest"
        } else {
            "lake"
        };
        let bad = line.replace(cls.scene.scene_class_name(), wrong);
        assert!(sample_from_line(&bad).is_err());
    }
}
