//! Retention and drift over previously solved examples.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EvalResult;

#[derive(Debug, Error, PartialEq)]
pub enum DriftError {
    #[error("no result for previously solved example {0:?}")]
    MissingId(String),
    #[error("global drift of an empty history is undefined")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRecord {
    pub iteration: u32,
    pub solved_prev: usize,
    pub newly_failed: usize,
    pub retention: f64,
    pub drift: f64,
}

/// Compares `current` results against the ids solved at the previous
/// iteration. An empty previous set counts as full retention.
pub fn drift_metrics(
    iteration: u32,
    solved_prev: &BTreeSet<String>,
    current: &[EvalResult],
) -> Result<DriftRecord, DriftError> {
    let by_id: HashMap<&str, bool> = current.iter().map(|r| (r.example_id.as_str(), r.correct)).collect();
    let mut newly_failed = 0;
    for id in solved_prev {
        match by_id.get(id.as_str()) {
            Some(true) => {}
            Some(false) => newly_failed += 1,
            None => return Err(DriftError::MissingId(id.clone())),
        }
    }
    let retention = if solved_prev.is_empty() {
        1.0
    } else {
        (solved_prev.len() - newly_failed) as f64 / solved_prev.len() as f64
    };
    Ok(DriftRecord {
        iteration,
        solved_prev: solved_prev.len(),
        newly_failed,
        retention,
        drift: 1.0 - retention,
    })
}

pub fn global_drift(records: &[DriftRecord]) -> Result<f64, DriftError> {
    if records.is_empty() {
        return Err(DriftError::Empty);
    }
    Ok(records.iter().map(|r| r.drift).sum::<f64>() / records.len() as f64)
}

pub fn solved_ids(results: &[EvalResult]) -> BTreeSet<String> {
    results
        .iter()
        .filter(|r| r.correct)
        .map(|r| r.example_id.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn results(correct: &[(&str, bool)]) -> Vec<EvalResult> {
        correct
            .iter()
            .map(|(id, ok)| EvalResult::new(*id, "", if *ok { 100.0 } else { 0.0 }, 60.0))
            .collect()
    }

    fn ids(v: &[&str]) -> BTreeSet<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn one_of_four_regresses() {
        let cur = results(&[("1", true), ("2", true), ("3", false), ("4", true), ("5", false)]);
        let r = drift_metrics(2, &ids(&["1", "2", "3", "4"]), &cur).unwrap();
        assert_eq!((r.solved_prev, r.newly_failed), (4, 1));
        assert_eq!(r.retention, 0.75);
        assert_eq!(r.drift, 0.25);
    }

    #[test]
    fn no_regressions() {
        let cur = results(&[("1", true), ("2", true)]);
        let r = drift_metrics(1, &ids(&["1", "2"]), &cur).unwrap();
        assert_eq!((r.retention, r.drift), (1.0, 0.0));
    }

    #[test]
    fn empty_previous_set() {
        let r = drift_metrics(1, &BTreeSet::new(), &results(&[("1", false)])).unwrap();
        assert_eq!((r.retention, r.drift), (1.0, 0.0));
    }

    #[test]
    fn missing_id_is_named() {
        assert_eq!(
            drift_metrics(1, &ids(&["9"]), &results(&[("1", true)])),
            Err(DriftError::MissingId("9".into()))
        );
    }

    fn rec(drift: f64) -> DriftRecord {
        DriftRecord {
            iteration: 1,
            solved_prev: 0,
            newly_failed: 0,
            retention: 1.0 - drift,
            drift,
        }
    }

    #[test]
    fn global_drift_is_mean() {
        assert!((global_drift(&[rec(0.25), rec(0.0), rec(0.05)]).unwrap() - 0.10).abs() < 1e-12);
        assert_eq!(global_drift(&[rec(0.3)]).unwrap(), 0.3);
        assert_eq!(global_drift(&[rec(0.0), rec(0.0)]).unwrap(), 0.0);
        assert_eq!(global_drift(&[]), Err(DriftError::Empty));
    }
}
