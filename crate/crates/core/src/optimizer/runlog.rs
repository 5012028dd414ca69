//! Line-delimited run events. Lines carry no timestamps so that two runs
//! with the same seed produce identical logs.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::CallCounts;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSnapshot {
    pub index: usize,
    pub fingerprint: String,
    pub preview: String,
    pub raw: f64,
    pub blended: f64,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum RunEvent {
    Start {
        iteration: u32,
        train: usize,
        dev: usize,
        test: usize,
    },
    Resume {
        iteration: u32,
    },
    TrainEval {
        iteration: u32,
        accuracy: f64,
        solved: usize,
        failing: usize,
        cached: bool,
    },
    Attribution {
        iteration: u32,
        errors: usize,
        units: Vec<UnitSnapshot>,
        actionable: Vec<usize>,
    },
    Pull {
        iteration: u32,
        arm: String,
        warm_start: bool,
        reward: f64,
        mean: f64,
        pulls: u32,
        eliminated: bool,
        error: Option<String>,
    },
    Accept {
        iteration: u32,
        arm: String,
        reward: f64,
        dev_score: f64,
    },
    Drift {
        iteration: u32,
        solved_prev: usize,
        newly_failed: usize,
        retention: f64,
        drift: f64,
    },
    Protective {
        iteration: u32,
        arm: Option<String>,
        drift: f64,
        consecutive: u32,
    },
    IterationEnd {
        iteration: u32,
        dev_acc: f64,
        reward: f64,
        drift: f64,
        calls: u64,
        best_dev_score: f64,
    },
    Stop {
        iteration: u32,
        reason: String,
        best_dev_score: f64,
        test_accuracy: f64,
        calls: CallCounts,
        total_calls: u64,
    },
    Error {
        iteration: u32,
        message: String,
    },
}

/// Collects event lines in memory and mirrors them to a file when opened
/// with [`RunLog::open`].
#[derive(Debug, Default)]
pub struct RunLog {
    lines: Vec<String>,
    file: Option<File>,
}

impl RunLog {
    pub fn memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            lines: Vec::new(),
            file: Some(file),
        })
    }

    pub fn record(&mut self, event: &RunEvent) {
        let line = serde_json::to_string(event).expect("run events serialize");
        if let Some(f) = &mut self.file {
            if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                log::warn!("run log write failed: {e}");
            }
        }
        self.lines.push(line);
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }
}

/// Parses a log file, stopping at the first unreadable line. The flag is
/// set when the file was truncated or contained garbage.
pub fn read_events(text: &str) -> (Vec<RunEvent>, bool) {
    let mut events = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str(line) {
            Ok(ev) => events.push(ev),
            Err(_) => return (events, true),
        }
    }
    let truncated = !text.is_empty() && !text.ends_with('\n');
    (events, truncated)
}
