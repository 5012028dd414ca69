//! Final run report and its per-iteration CSV.

use serde::{Deserialize, Serialize};

use crate::backends::CallCounts;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: u32,
    /// Dev accuracy of the current prompt after the iteration.
    pub dev_acc: f64,
    /// Reward of the kept edit, 0 when nothing was kept.
    pub reward: f64,
    pub drift: f64,
    /// Model calls made during the iteration. The last row also carries the
    /// final test evaluation.
    pub calls: u64,
    pub accepted_arm: Option<String>,
    pub protective: bool,
}

pub const CSV_HEADER: [&str; 5] = ["iteration", "dev_acc", "reward", "drift", "calls"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub stop_reason: String,
    pub iterations: u32,
    pub initial_prompt: String,
    pub best_prompt: String,
    pub best_dev_score: f64,
    pub test_accuracy: f64,
    pub global_drift: Option<f64>,
    pub min_retention: Option<f64>,
    pub calls: CallCounts,
    pub total_calls: u64,
    pub rows: Vec<IterationSummary>,
}

impl FinalReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory csv");
        for r in &self.rows {
            w.write_record([
                r.iteration.to_string(),
                r.dev_acc.to_string(),
                r.reward.to_string(),
                r.drift.to_string(),
                r.calls.to_string(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// `(iteration, dev_acc, reward, drift, calls)`.
pub type CsvRow = (u32, f64, f64, f64, u64);

/// Reads the rows written by [`FinalReport::to_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>, csv::Error> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    rd.deserialize().collect()
}
