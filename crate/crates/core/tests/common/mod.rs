#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use segopt_core::backends::mock::{MockGrader, MockOracleSpec, MockTaskBackend, ScriptedEdit, ScriptedEditor};
use segopt_core::backends::{Backends, ModelBackend};
use segopt_core::corpus::{DatasetSplits, Example};

pub const HARMFUL: &str = "Answer using Roman numerals only";
pub const HARMFUL_B: &str = "Never show any intermediate arithmetic";
pub const DRIFTER: &str = "Round every result to the nearest ten";

pub fn example(id: &str) -> Example {
    Example {
        id: id.to_string(),
        input_text: format!("Question {id}: how many apples remain?"),
        image_paths: Vec::new(),
        target: format!("answer-{id}"),
    }
}

fn split(prefix: &str, n: usize) -> Vec<Example> {
    (0..n).map(|i| example(&format!("{prefix}{i}"))).collect()
}

/// Offline world: examples, oracle and the three backends.
pub struct World {
    pub prompt: String,
    pub splits: DatasetSplits,
    pub task: MockTaskBackend,
    pub grader: MockGrader,
    pub optimizer: ScriptedEditor,
}

impl World {
    pub fn backends(&self) -> Backends<'_> {
        Backends {
            task: &self.task,
            grader: &self.grader,
            optimizer: &self.optimizer,
        }
    }

    pub fn total_calls(&self) -> u64 {
        self.task.calls() + self.grader.calls() + self.optimizer.calls()
    }
}

pub fn fail_map(entries: &[(&str, &[&str])]) -> BTreeMap<String, BTreeSet<String>> {
    entries
        .iter()
        .map(|(id, ms)| (id.to_string(), ms.iter().map(|m| m.to_string()).collect()))
        .collect()
}

pub fn build(prompt: &str, map: BTreeMap<String, BTreeSet<String>>, edits: Vec<ScriptedEdit>) -> World {
    build_with(prompt, map, edits, Vec::new())
}

pub fn build_with(
    prompt: &str,
    map: BTreeMap<String, BTreeSet<String>>,
    edits: Vec<ScriptedEdit>,
    helpful: Vec<String>,
) -> World {
    let splits = DatasetSplits {
        train: split("tr", 6),
        dev: split("dv", 5),
        test: split("te", 10),
        seed: 7,
    };
    let all: Vec<Example> = splits
        .train
        .iter()
        .chain(&splits.dev)
        .chain(&splits.test)
        .cloned()
        .collect();
    let spec = MockOracleSpec {
        harmful_markers: vec![HARMFUL.into(), HARMFUL_B.into(), DRIFTER.into()],
        helpful_markers: helpful,
        fail_map: map,
        ..Default::default()
    };
    World {
        prompt: prompt.to_string(),
        grader: MockGrader::from_spec(&spec),
        task: MockTaskBackend::new(spec, &all),
        optimizer: ScriptedEditor::new(edits),
        splits,
    }
}

pub fn base_prompt() -> String {
    [
        "You are a careful assistant for arithmetic word problems.",
        "Read each question and track every quantity it mentions.",
        &format!("{HARMFUL}, even for small counts."),
        "Give the final answer on its own line.",
    ]
    .join("\n")
}

/// One harmful unit hitting 3 of 5 dev examples: dev accuracy 0.4 before
/// deleting it and 1.0 after.
pub fn single_harmful() -> World {
    let m: &[&str] = &[HARMFUL];
    build(
        &base_prompt(),
        fail_map(&[
            ("tr0", m),
            ("tr2", m),
            ("tr4", m),
            ("dv0", m),
            ("dv1", m),
            ("dv2", m),
            ("te1", m),
            ("te3", m),
            ("te5", m),
            ("te7", m),
        ]),
        Vec::new(),
    )
}

/// Two harmful units with disjoint victims; removing both takes two
/// accepted edits.
pub fn two_harmful() -> World {
    let a: &[&str] = &[HARMFUL];
    let b: &[&str] = &[HARMFUL_B];
    let prompt = [
        "You are a careful assistant for arithmetic word problems.",
        &format!("{HARMFUL}, even for small counts."),
        "Read each question and track every quantity it mentions.",
        &format!("{HARMFUL_B} in the reply."),
        "Give the final answer on its own line.",
    ]
    .join("\n");
    build(
        &prompt,
        fail_map(&[
            ("tr0", a),
            ("tr1", a),
            ("tr2", b),
            ("dv0", a),
            ("dv1", a),
            ("dv2", b),
            ("te0", a),
            ("te1", b),
            ("te2", a),
        ]),
        Vec::new(),
    )
}

/// A scripted replacement of the harmful unit fixes dev but breaks train
/// examples that were already solved, which must trigger a rollback.
pub fn drifting_replace() -> World {
    let m: &[&str] = &[HARMFUL];
    let d: &[&str] = &[DRIFTER];
    build(
        &base_prompt(),
        fail_map(&[("tr0", m), ("dv0", m), ("dv1", m), ("tr3", d), ("tr4", d), ("tr5", d), ("te0", m)]),
        vec![ScriptedEdit {
            unit_contains: HARMFUL.into(),
            operator: segopt_core::selector::EditOperator::Replace,
            text: format!("{DRIFTER} before answering."),
        }],
    )
}

pub const KEEPER: &str = "even for small counts";

/// Every edit that removes the harmful marker also removes a marker that
/// three solved train examples depend on, so each accepted edit drifts.
pub fn always_drifting() -> World {
    let m: &[&str] = &[HARMFUL];
    let k: &[&str] = &[KEEPER];
    let plain = "State the answer as a plain number.".to_string();
    let edit = |operator| ScriptedEdit {
        unit_contains: HARMFUL.into(),
        operator,
        text: plain.clone(),
    };
    use segopt_core::selector::EditOperator;
    build_with(
        &base_prompt(),
        fail_map(&[("tr0", m), ("dv0", m), ("dv1", m), ("tr3", k), ("tr4", k), ("tr5", k), ("te0", m)]),
        vec![edit(EditOperator::Replace), edit(EditOperator::Refine)],
        vec![KEEPER.into()],
    )
}
