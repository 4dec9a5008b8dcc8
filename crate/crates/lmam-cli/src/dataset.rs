//! Dataset files: one JSONL file per split (one dialogue per line) plus a
//! manifest describing the generator configuration. serde_json prints f64s
//! with round-trip-exact formatting, so regeneration under the same seed is
//! byte-identical and loading loses nothing.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lmam_core::matrix::Matrix;
use lmam_core::synth::{Dialogue, GeneratorSpec, ModalityFeatures};

use crate::error::CliError;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub d_t: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub generator: GeneratorSpec,
    pub seed: u64,
    pub splits: SplitCounts,
}

impl Manifest {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d_t, self.d_a, self.d_v)
    }
}

#[derive(Serialize, Deserialize)]
struct UtteranceRec {
    text: Vec<f64>,
    audio: Vec<f64>,
    video: Vec<f64>,
    label: usize,
}

#[derive(Serialize, Deserialize)]
struct DialogueRec {
    id: String,
    utterances: Vec<UtteranceRec>,
}

fn to_record(d: &Dialogue) -> DialogueRec {
    let f = &d.features;
    let utterances = (0..f.len())
        .map(|u| UtteranceRec {
            text: f.text.row(u).to_vec(),
            audio: f.audio.row(u).to_vec(),
            video: f.video.row(u).to_vec(),
            label: f.labels[u],
        })
        .collect();
    DialogueRec { id: d.id.clone(), utterances }
}

fn from_record(rec: DialogueRec) -> Result<Dialogue, CliError> {
    if rec.utterances.is_empty() {
        return Err(CliError::Usage(format!("dialogue {} has no utterances", rec.id)));
    }
    let rows = |pick: fn(&UtteranceRec) -> &Vec<f64>| -> Result<Matrix, CliError> {
        let grid: Vec<Vec<f64>> = rec.utterances.iter().map(|u| pick(u).clone()).collect();
        Matrix::from_rows(&grid).map_err(CliError::from)
    };
    let features = ModalityFeatures {
        text: rows(|u| &u.text)?,
        audio: rows(|u| &u.audio)?,
        video: rows(|u| &u.video)?,
        labels: rec.utterances.iter().map(|u| u.label).collect(),
    };
    Ok(Dialogue { id: rec.id, features })
}

pub fn write_split(path: &Path, dialogues: &[Dialogue]) -> Result<(), CliError> {
    let mut file = fs::File::create(path)?;
    for d in dialogues {
        let line = serde_json::to_string(&to_record(d))?;
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_split(path: &Path) -> Result<Vec<Dialogue>, CliError> {
    let file = fs::File::open(path).map_err(|e| {
        CliError::Usage(format!("cannot open split file {}: {e}", path.display()))
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DialogueRec = serde_json::from_str(&line).map_err(|e| {
            CliError::Usage(format!("{}:{}: bad dialogue record: {e}", path.display(), lineno + 1))
        })?;
        out.push(from_record(rec)?);
    }
    Ok(out)
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CliError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| {
        CliError::Usage(format!("missing dataset manifest {}: {e}", path.display()))
    })?;
    Ok(serde_json::from_str(&text)?)
}

pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<Dialogue>,
    pub val: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    let manifest = read_manifest(dir)?;
    Ok(Dataset {
        manifest,
        train: read_split(&dir.join("train.jsonl"))?,
        val: read_split(&dir.join("val.jsonl"))?,
        test: read_split(&dir.join("test.jsonl"))?,
    })
}

pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}
