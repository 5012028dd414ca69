//! Benchmark examples, seeded train/dev/test splits and accuracy.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read dataset {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate example id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: image {path} is not readable")]
    MissingImage { line: usize, path: PathBuf },
    #[error("{name} must lie strictly between 0 and 1 (got {value})")]
    FractionOutOfRange { name: &'static str, value: f64 },
    #[error("split {split} would be empty ({total} examples, sample_fraction {sample_fraction}, dev_fraction {dev_fraction})")]
    EmptySplit {
        split: &'static str,
        total: usize,
        sample_fraction: f64,
        dev_fraction: f64,
    },
    #[error("accuracy of an empty result set is undefined")]
    EmptyResults,
}

/// One benchmark item: question text, optional images and the reference answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub input_text: String,
    #[serde(default)]
    pub image_paths: Vec<PathBuf>,
    pub target: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    input: String,
    #[serde(default)]
    images: Vec<PathBuf>,
    target: String,
}

/// Loads a JSONL dataset. Relative image paths resolve against the dataset's directory.
pub fn load_dataset(path: &Path) -> Result<Vec<Example>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut examples = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
            line,
            message: e.to_string(),
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId { line, id: record.id });
        }
        let mut image_paths = Vec::with_capacity(record.images.len());
        for img in record.images {
            let resolved = if img.is_absolute() { img } else { base.join(img) };
            if fs::File::open(&resolved).is_err() {
                return Err(CorpusError::MissingImage {
                    line,
                    path: resolved,
                });
            }
            image_paths.push(resolved);
        }
        examples.push(Example {
            id: record.id,
            input_text: record.input,
            image_paths,
            target: record.target,
        });
    }
    Ok(examples)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub seed: u64,
}

impl DatasetSplits {
    pub fn by_name(&self, name: &str) -> Option<&[Example]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Draws a seeded subset of `round(N * sample_fraction)` examples, carves
/// `dev_fraction` of it into dev and the rest into train. Everything not
/// sampled is test, in source order.
pub fn sample_splits(
    examples: &[Example],
    sample_fraction: f64,
    dev_fraction: f64,
    seed: u64,
) -> Result<DatasetSplits, CorpusError> {
    for (name, value) in [("sample_fraction", sample_fraction), ("dev_fraction", dev_fraction)] {
        if !(value > 0.0 && value < 1.0) {
            return Err(CorpusError::FractionOutOfRange { name, value });
        }
    }
    let total = examples.len();
    let sampled = round_half_up(total as f64 * sample_fraction);
    let n_dev = round_half_up(sampled as f64 * dev_fraction);
    let n_train = sampled.saturating_sub(n_dev);
    let empty = |split| CorpusError::EmptySplit {
        split,
        total,
        sample_fraction,
        dev_fraction,
    };
    if n_dev == 0 {
        return Err(empty("dev"));
    }
    if n_train == 0 {
        return Err(empty("train"));
    }
    if sampled >= total {
        return Err(empty("test"));
    }

    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let chosen = &order[..sampled];
    let dev = chosen[..n_dev].iter().map(|&i| examples[i].clone()).collect();
    let train = chosen[n_dev..].iter().map(|&i| examples[i].clone()).collect();
    let mut in_sample = vec![false; total];
    for &i in chosen {
        in_sample[i] = true;
    }
    let test = examples
        .iter()
        .zip(&in_sample)
        .filter(|(_, s)| !**s)
        .map(|(e, _)| e.clone())
        .collect();
    Ok(DatasetSplits {
        train,
        dev,
        test,
        seed,
    })
}

/// A graded model answer for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub example_id: String,
    pub raw_output: String,
    pub grade: f64,
    pub correct: bool,
}

impl EvalResult {
    pub fn new(example_id: impl Into<String>, raw_output: impl Into<String>, grade: f64, threshold: f64) -> Self {
        Self {
            example_id: example_id.into(),
            raw_output: raw_output.into(),
            grade,
            correct: grade >= threshold,
        }
    }
}

/// Mean normalized grade in [0, 1].
pub fn accuracy(results: &[EvalResult]) -> Result<f64, CorpusError> {
    if results.is_empty() {
        return Err(CorpusError::EmptyResults);
    }
    let sum: f64 = results.iter().map(|r| r.grade).sum();
    Ok(sum / (100.0 * results.len() as f64))
}
