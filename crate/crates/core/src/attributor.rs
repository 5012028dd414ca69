//! Per-unit blame from counterfactual occlusion, smoothed over iterations
//! and blended with a decayed record of how past edits to the unit paid off.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Example;
use crate::eval::Evaluator;
use crate::segmenter::{join_units, Fingerprint, Segmentation, MASK_TOKEN};

#[derive(Debug, Error, PartialEq)]
pub enum AttributionError {
    #[error("unit index {index} out of range for {len} units")]
    IndexOutOfRange { index: usize, len: usize },
}

/// The prompt with unit `k` replaced by the mask token.
pub fn occlude(segmentation: &Segmentation, k: usize) -> Result<String, AttributionError> {
    if k >= segmentation.len() {
        return Err(AttributionError::IndexOutOfRange {
            index: k,
            len: segmentation.len(),
        });
    }
    Ok(join_units(
        segmentation
            .units
            .iter()
            .map(|u| if u.index == k { MASK_TOKEN } else { u.text.as_str() }),
    ))
}

/// Result of one occlusion pass. Units whose batch failed twice are listed
/// in `missing` and carry no delta.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OcclusionDeltas {
    pub deltas: BTreeMap<usize, f64>,
    pub missing: BTreeSet<usize>,
}

impl OcclusionDeltas {
    pub fn by_fingerprint(&self, segmentation: &Segmentation) -> BTreeMap<Fingerprint, f64> {
        let mut out = BTreeMap::new();
        for (&k, &d) in &self.deltas {
            out.entry(segmentation.units[k].fingerprint.clone()).or_insert(d);
        }
        out
    }
}

/// Mean change in 0-1 loss over the failing examples when each unit is
/// masked. Every example in `errors` is assumed to fail under the full
/// prompt, so each delta lies in [-1, 0].
pub fn occlusion_deltas(segmentation: &Segmentation, errors: &[Example], evaluator: &Evaluator) -> OcclusionDeltas {
    let mut out = OcclusionDeltas::default();
    if errors.is_empty() {
        return out;
    }
    let prompts: Vec<String> = (0..segmentation.len())
        .map(|k| occlude(segmentation, k).expect("index in range"))
        .collect();

    let prompts = &prompts;
    let run = |units: &[usize]| {
        let jobs: Vec<(&str, &Example)> = units
            .iter()
            .flat_map(|&k| errors.iter().map(move |e| (prompts[k].as_str(), e)))
            .collect();
        let results = evaluator.evaluate_pairs(&jobs);
        units
            .iter()
            .zip(results.chunks(errors.len()))
            .map(|(&k, chunk)| {
                let fixed: Result<usize, _> = chunk.iter().try_fold(0usize, |acc, r| match r {
                    Ok(r) => Ok(acc + usize::from(r.correct)),
                    Err(e) => Err(e.clone()),
                });
                (k, fixed)
            })
            .collect::<Vec<_>>()
    };

    let all: Vec<usize> = (0..segmentation.len()).collect();
    let mut retry = Vec::new();
    for (k, fixed) in run(&all) {
        match fixed {
            Ok(n) => {
                out.deltas.insert(k, -(n as f64) / errors.len() as f64);
            }
            Err(e) => {
                log::warn!("occlusion batch for unit {k} failed ({e}), retrying");
                retry.push(k);
            }
        }
    }
    if !retry.is_empty() {
        for (k, fixed) in run(&retry) {
            match fixed {
                Ok(n) => {
                    out.deltas.insert(k, -(n as f64) / errors.len() as f64);
                }
                Err(e) => {
                    log::warn!("occlusion batch for unit {k} failed again ({e}); delta missing");
                    out.missing.insert(k);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: u32,
    pub delta: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UnitScore {
    pub raw: f64,
    pub blended: f64,
    pub history: Vec<HistoryEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionState {
    pub units: BTreeMap<Fingerprint, UnitScore>,
    /// Weight on the previous smoothed score.
    pub lambda: f64,
    /// Weight on current actionability versus the history term.
    pub alpha: f64,
    /// Per-iteration decay of history entries.
    pub gamma: f64,
}

impl AttributionState {
    pub fn new(lambda: f64, alpha: f64, gamma: f64) -> Self {
        Self {
            units: BTreeMap::new(),
            lambda,
            alpha,
            gamma,
        }
    }

    pub fn raw(&self, fp: &Fingerprint) -> f64 {
        self.units.get(fp).map_or(0.0, |u| u.raw)
    }

    pub fn history(&self, fp: &Fingerprint) -> &[HistoryEntry] {
        self.units.get(fp).map_or(&[], |u| u.history.as_slice())
    }

    /// Exponential smoothing `s <- lambda * s + (1 - lambda) * delta`, only
    /// for units that received a delta. New units start from 0.
    pub fn update_scores(&mut self, deltas: &BTreeMap<Fingerprint, f64>) {
        for (fp, &delta) in deltas {
            let entry = self.units.entry(fp.clone()).or_default();
            entry.raw = self.lambda * entry.raw + (1.0 - self.lambda) * delta;
        }
    }

    /// Blended actionability at iteration `t` without mutating state.
    pub fn blended_score(&self, fp: &Fingerprint, t: u32) -> f64 {
        let actionability = -self.raw(fp);
        let history = self.history(fp);
        if history.is_empty() {
            return actionability;
        }
        let decayed: f64 = history
            .iter()
            .map(|h| h.delta * self.gamma.powi((t - h.iteration) as i32))
            .sum::<f64>()
            / history.len() as f64;
        self.alpha * actionability + (1.0 - self.alpha) * decayed
    }

    /// Computes and stores blended scores for the given units.
    pub fn blend(&mut self, fingerprints: &[Fingerprint], t: u32) -> Vec<f64> {
        fingerprints
            .iter()
            .map(|fp| {
                let s = self.blended_score(fp, t);
                self.units.entry(fp.clone()).or_default().blended = s;
                s
            })
            .collect()
    }

    /// Appends a signed edit outcome to the unit's history.
    pub fn record_history(&mut self, fp: &Fingerprint, iteration: u32, delta: f64) {
        let history = &mut self.units.entry(fp.clone()).or_default().history;
        let at = history.partition_point(|h| h.iteration <= iteration);
        history.insert(at, HistoryEntry { iteration, delta });
    }

    /// Moves the edit history of a rewritten unit onto its new text.
    pub fn transfer_history(&mut self, from: &Fingerprint, to: &Fingerprint) {
        if from == to {
            return;
        }
        let moved = self.units.get(from).map(|u| u.history.clone()).unwrap_or_default();
        if moved.is_empty() {
            return;
        }
        let target = &mut self.units.entry(to.clone()).or_default().history;
        target.extend(moved);
        target.sort_by_key(|h| h.iteration);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredUnit {
    pub index: usize,
    pub fingerprint: Fingerprint,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionableSet {
    pub units: Vec<ScoredUnit>,
}

impl ActionableSet {
    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }
}

/// Top `m` units by score, ties broken by lower index.
pub fn select_actionable(scored: &[ScoredUnit], m: usize) -> ActionableSet {
    let mut ranked = scored.to_vec();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    ranked.truncate(m);
    ActionableSet { units: ranked }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{FnBackend, MockGrader, MockOracleSpec, MockTaskBackend};
    use crate::backends::{BackendError, ModelBackend};
    use crate::eval::EvalSettings;
    use crate::segmenter::{segment, SegmenterConfig, SemanticUnit, UnitKind};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn seg(texts: &[&str]) -> Segmentation {
        let units: Vec<SemanticUnit> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| SemanticUnit::new(i, *t, UnitKind::Sentence))
            .collect();
        Segmentation {
            source_prompt: join_units(texts.iter().copied()),
            units,
        }
    }

    fn fp(s: &str) -> Fingerprint {
        Fingerprint::of(s)
    }

    #[test]
    fn occlude_middle_unit() {
        assert_eq!(occlude(&seg(&["A.", "B.", "C."]), 1).unwrap(), "A.\n[…]\nC.");
    }

    #[test]
    fn occlude_only_unit() {
        assert_eq!(occlude(&seg(&["Only."]), 0).unwrap(), MASK_TOKEN);
    }

    #[test]
    fn occlude_out_of_range() {
        assert_eq!(
            occlude(&seg(&["A."]), 1),
            Err(AttributionError::IndexOutOfRange { index: 1, len: 1 })
        );
    }

    fn failing_examples(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                id: format!("f{i}"),
                input_text: format!("q{i}"),
                image_paths: vec![],
                target: format!("t{i}"),
            })
            .collect()
    }

    fn oracle(examples: &[Example], marker_for: impl Fn(usize) -> Option<&'static str>) -> MockTaskBackend {
        let mut spec = MockOracleSpec::default();
        for (i, e) in examples.iter().enumerate() {
            if let Some(m) = marker_for(i) {
                spec.fail_map.insert(e.id.clone(), [m.to_string()].into());
            }
        }
        MockTaskBackend::new(spec, examples)
    }

    #[test]
    fn planted_marker_gets_full_blame() {
        let errors = failing_examples(4);
        let task = oracle(&errors, |_| Some("UNIT_BAD"));
        let grader = MockGrader::new(100.0, 0.0);
        let ev = Evaluator::new(&task, &grader, EvalSettings::default());
        let s = seg(&["Solve the task.", "Ignore the question UNIT_BAD.", "Answer briefly."]);
        let d = occlusion_deltas(&s, &errors, &ev);
        assert_eq!(d.deltas[&1], -1.0);
        assert_eq!(d.deltas[&0], 0.0);
        assert_eq!(d.deltas[&2], 0.0);
        assert!(d.missing.is_empty());
    }

    #[test]
    fn half_fixed_gives_minus_half() {
        let errors = failing_examples(4);
        let task = oracle(&errors, |i| Some(if i < 2 { "MARK_A" } else { "MARK_B" }));
        let grader = MockGrader::new(100.0, 0.0);
        let ev = Evaluator::new(&task, &grader, EvalSettings::default());
        let s = seg(&["Rule MARK_A here.", "Rule MARK_B here."]);
        let d = occlusion_deltas(&s, &errors, &ev);
        assert_eq!(d.deltas[&0], -0.5);
        assert_eq!(d.deltas[&1], -0.5);
    }

    #[test]
    fn empty_errors_give_empty_map() {
        let task = oracle(&[], |_| None);
        let grader = MockGrader::new(100.0, 0.0);
        let ev = Evaluator::new(&task, &grader, EvalSettings::default());
        assert_eq!(occlusion_deltas(&seg(&["A."]), &[], &ev), OcclusionDeltas::default());
        assert_eq!(task.calls(), 0);
    }

    #[test]
    fn failed_batch_retried_once_then_missing() {
        let errors = failing_examples(2);
        let hits = AtomicUsize::new(0);
        let task = FnBackend::new("t", move |r| {
            if r.system_prompt.starts_with("[…]") {
                hits.fetch_add(1, Ordering::SeqCst);
                Err(BackendError::Other {
                    backend: "t".into(),
                    message: "down".into(),
                })
            } else {
                Ok("nope".into())
            }
        });
        let grader = MockGrader::new(100.0, 0.0);
        let ev = Evaluator::new(&task, &grader, EvalSettings::default());
        let d = occlusion_deltas(&seg(&["First rule.", "Second rule."]), &errors, &ev);
        assert_eq!(d.missing, BTreeSet::from([0]));
        assert_eq!(d.deltas.get(&1), Some(&0.0));
        // two examples, first attempt plus one retry
        assert_eq!(task.calls(), 4 + 2);
    }

    #[test]
    fn smoothing_arithmetic() {
        let f = fp("u");
        let mut st = AttributionState::new(0.5, 0.7, 0.9);
        st.units.entry(f.clone()).or_default().raw = -0.2;
        st.update_scores(&BTreeMap::from([(f.clone(), -0.5)]));
        assert!((st.raw(&f) + 0.35).abs() < 1e-15);

        let mut st0 = AttributionState::new(0.0, 0.7, 0.9);
        st0.units.entry(f.clone()).or_default().raw = -0.2;
        st0.update_scores(&BTreeMap::from([(f.clone(), -0.75)]));
        assert_eq!(st0.raw(&f), -0.75);

        let mut st1 = AttributionState::new(1.0, 0.7, 0.9);
        st1.units.entry(f.clone()).or_default().raw = -0.2;
        st1.update_scores(&BTreeMap::from([(f.clone(), -0.75)]));
        assert_eq!(st1.raw(&f), -0.2);
    }

    #[test]
    fn units_without_delta_untouched() {
        let (a, b) = (fp("a"), fp("b"));
        let mut st = AttributionState::new(0.5, 0.7, 0.9);
        st.update_scores(&BTreeMap::from([(a.clone(), -1.0), (b.clone(), -1.0)]));
        st.update_scores(&BTreeMap::from([(a.clone(), 0.0)]));
        assert_eq!(st.raw(&a), -0.25);
        assert_eq!(st.raw(&b), -0.5);
    }

    #[test]
    fn blend_worked_example() {
        let f = fp("u");
        let mut st = AttributionState::new(0.5, 0.7, 0.9);
        st.units.entry(f.clone()).or_default().raw = -0.35;
        st.record_history(&f, 2, 0.04);
        st.record_history(&f, 4, 0.02);
        let s = st.blend(std::slice::from_ref(&f), 5)[0];
        assert!((s - 0.252074).abs() < 1e-12, "{s}");
        assert_eq!(st.units[&f].blended, s);
    }

    #[test]
    fn blend_without_history_is_actionability() {
        let f = fp("u");
        let mut st = AttributionState::new(0.5, 0.7, 0.9);
        st.units.entry(f.clone()).or_default().raw = -0.35;
        assert_eq!(st.blended_score(&f, 3), 0.35);
    }

    #[test]
    fn blend_full_decay() {
        let f = fp("u");
        let mut st = AttributionState::new(0.5, 0.7, 1e-300);
        st.units.entry(f.clone()).or_default().raw = -0.35;
        st.record_history(&f, 1, 0.5);
        assert!((st.blended_score(&f, 4) - 0.7 * 0.35).abs() < 1e-15);
    }

    fn scored(scores: &[f64]) -> Vec<ScoredUnit> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| ScoredUnit {
                index: i,
                fingerprint: fp(&format!("u{i}")),
                score: s,
            })
            .collect()
    }

    #[test]
    fn top_m_with_index_tiebreak() {
        let set = select_actionable(&scored(&[0.1, 0.9, 0.5, 0.5, 0.0]), 4);
        let idx: Vec<usize> = set.units.iter().map(|u| u.index).collect();
        assert_eq!(idx, [1, 2, 3, 0]);
    }

    #[test]
    fn m_exceeding_k() {
        assert_eq!(select_actionable(&scored(&[0.3, 0.2]), 4).len(), 2);
    }

    #[test]
    fn all_zero_scores_pick_first_units() {
        let set = select_actionable(&scored(&[0.0; 6]), 4);
        let idx: Vec<usize> = set.units.iter().map(|u| u.index).collect();
        assert_eq!(idx, [0, 1, 2, 3]);
    }

    #[test]
    fn history_records() {
        let f = fp("u");
        let mut st = AttributionState::new(0.5, 0.7, 0.9);
        st.record_history(&f, 2, 0.04);
        assert_eq!(st.history(&f), [HistoryEntry { iteration: 2, delta: 0.04 }]);
        st.record_history(&f, 4, -0.01);
        st.record_history(&f, 3, 0.0);
        let its: Vec<u32> = st.history(&f).iter().map(|h| h.iteration).collect();
        assert_eq!(its, [2, 3, 4]);
        assert_eq!(st.history(&f)[2].delta, -0.01);
        assert!(st.history(&fp("other")).is_empty());
    }

    #[test]
    fn history_transfers_to_new_text() {
        let (old, new) = (fp("old"), fp("new"));
        let mut st = AttributionState::new(0.5, 0.7, 0.9);
        st.record_history(&old, 1, 0.1);
        st.transfer_history(&old, &new);
        assert_eq!(st.history(&new).len(), 1);
        assert_eq!(st.raw(&new), 0.0);
    }

    #[test]
    fn planted_unit_ranks_first_after_one_pass() {
        let errors = failing_examples(4);
        let task = oracle(&errors, |_| Some("UNIT_BAD"));
        let grader = MockGrader::new(100.0, 0.0);
        let ev = Evaluator::new(&task, &grader, EvalSettings::default());
        let s = segment(
            "Read the question carefully. Think about each option. Then answer with UNIT_BAD style. Keep the answer short.",
            &SegmenterConfig::default(),
            None,
        )
        .unwrap();
        let d = occlusion_deltas(&s, &errors, &ev);
        let mut st = AttributionState::new(0.5, 0.7, 0.9);
        st.update_scores(&d.by_fingerprint(&s));
        let fps: Vec<Fingerprint> = s.units.iter().map(|u| u.fingerprint.clone()).collect();
        let blended = st.blend(&fps, 1);
        let scored: Vec<ScoredUnit> = s
            .units
            .iter()
            .zip(blended)
            .map(|(u, score)| ScoredUnit {
                index: u.index,
                fingerprint: u.fingerprint.clone(),
                score,
            })
            .collect();
        let set = select_actionable(&scored, 4);
        assert!(s.units[set.units[0].index].text.contains("UNIT_BAD"));
    }
}
