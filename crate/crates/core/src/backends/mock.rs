//! Deterministic offline backends.
//!
//! The mock oracle answers an example correctly unless the current prompt
//! trips one of the markers listed for it in `fail_map`, which makes the
//! effect of removing or editing any prompt unit computable by hand.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{parse_grader_prompt, BackendError, CallCounter, ModelBackend, ModelRequest};
use crate::corpus::Example;
use crate::optimizer::meta::{parse_edit_request, EditRequestView};
use crate::selector::EditOperator;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockOracleSpec {
    /// Markers that break an example when present in the prompt.
    pub harmful_markers: Vec<String>,
    /// Markers that break an example when absent from the prompt.
    pub helpful_markers: Vec<String>,
    pub fail_map: BTreeMap<String, BTreeSet<String>>,
    pub pass_grade: f64,
    pub fail_grade: f64,
}

impl Default for MockOracleSpec {
    fn default() -> Self {
        Self {
            harmful_markers: Vec::new(),
            helpful_markers: Vec::new(),
            fail_map: BTreeMap::new(),
            pass_grade: 100.0,
            fail_grade: 0.0,
        }
    }
}

impl MockOracleSpec {
    pub fn validate(&self) -> Result<(), String> {
        let in_range = |g: f64| (0.0..=100.0).contains(&g);
        if !(in_range(self.pass_grade) && in_range(self.fail_grade)) {
            return Err("pass_grade and fail_grade must lie in [0, 100]".into());
        }
        if self.pass_grade <= self.fail_grade {
            return Err("pass_grade must exceed fail_grade".into());
        }
        Ok(())
    }

    /// Whether `example_id` fails under `prompt`.
    pub fn fails(&self, example_id: &str, prompt: &str) -> bool {
        self.fail_map.get(example_id).is_some_and(|markers| {
            markers.iter().any(|m| {
                let present = prompt.contains(m.as_str());
                if self.helpful_markers.iter().any(|h| h == m) {
                    !present
                } else {
                    present
                }
            })
        })
    }

    pub fn wrong_answer(example_id: &str) -> String {
        format!("WRONG ANSWER for {example_id}")
    }
}

/// Task model driven by a [`MockOracleSpec`]. Examples are recognized by their input text.
pub struct MockTaskBackend {
    name: String,
    spec: MockOracleSpec,
    by_input: HashMap<String, (String, String)>,
    counter: CallCounter,
}

impl MockTaskBackend {
    pub fn new(spec: MockOracleSpec, examples: &[Example]) -> Self {
        let by_input = examples
            .iter()
            .map(|e| (e.input_text.clone(), (e.id.clone(), e.target.clone())))
            .collect();
        Self {
            name: "mock-task".into(),
            spec,
            by_input,
            counter: CallCounter::default(),
        }
    }

    pub fn spec(&self) -> &MockOracleSpec {
        &self.spec
    }
}

impl ModelBackend for MockTaskBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn counter(&self) -> &CallCounter {
        &self.counter
    }

    fn generate(&self, request: &ModelRequest) -> Result<String, BackendError> {
        let (id, target) = self.by_input.get(&request.user_input).ok_or_else(|| BackendError::Other {
            backend: self.name.clone(),
            message: format!("unknown example input {:?}", request.user_input),
        })?;
        if self.spec.fails(id, &request.system_prompt) {
            Ok(MockOracleSpec::wrong_answer(id))
        } else {
            Ok(target.clone())
        }
    }
}

/// Grader that awards `pass_grade` on an exact match with the reference answer.
pub struct MockGrader {
    pass_grade: f64,
    fail_grade: f64,
    counter: CallCounter,
}

impl MockGrader {
    pub fn new(pass_grade: f64, fail_grade: f64) -> Self {
        Self {
            pass_grade,
            fail_grade,
            counter: CallCounter::default(),
        }
    }

    pub fn from_spec(spec: &MockOracleSpec) -> Self {
        Self::new(spec.pass_grade, spec.fail_grade)
    }
}

impl ModelBackend for MockGrader {
    fn name(&self) -> &str {
        "mock-grader"
    }

    fn counter(&self) -> &CallCounter {
        &self.counter
    }

    fn generate(&self, request: &ModelRequest) -> Result<String, BackendError> {
        let (_, target, output) = parse_grader_prompt(&request.user_input).ok_or_else(|| BackendError::Other {
            backend: "mock-grader".into(),
            message: "request is not a grader prompt".into(),
        })?;
        let score = if output.trim() == target.trim() {
            self.pass_grade
        } else {
            self.fail_grade
        };
        Ok(format!("Score: {score}"))
    }
}

/// One row of a scripted edit table: when the optimizer is asked to apply
/// `operator` to a unit containing `unit_contains`, it answers `text`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedEdit {
    pub unit_contains: String,
    pub operator: EditOperator,
    pub text: String,
}

/// Optimizer stand-in answering edit meta-prompts from a fixed table.
/// Without a matching row it echoes the target unit; it never proposes a
/// reorder destination, so reorders fall back to the adjacent swap.
pub struct ScriptedEditor {
    edits: Vec<ScriptedEdit>,
    counter: CallCounter,
}

impl ScriptedEditor {
    pub fn new(edits: Vec<ScriptedEdit>) -> Self {
        Self {
            edits,
            counter: CallCounter::default(),
        }
    }
}

impl ModelBackend for ScriptedEditor {
    fn name(&self) -> &str {
        "scripted-optimizer"
    }

    fn counter(&self) -> &CallCounter {
        &self.counter
    }

    fn generate(&self, request: &ModelRequest) -> Result<String, BackendError> {
        match parse_edit_request(&request.user_input) {
            Some(EditRequestView::Edit { operator, unit_text }) => Ok(self
                .edits
                .iter()
                .find(|e| e.operator == operator && unit_text.contains(&e.unit_contains))
                .map(|e| e.text.clone())
                .unwrap_or(unit_text)),
            Some(EditRequestView::ReorderPosition) => Ok("no preference".into()),
            None => Err(BackendError::Other {
                backend: self.name().into(),
                message: "request is not an edit meta-prompt".into(),
            }),
        }
    }
}

type Responder = dyn Fn(&ModelRequest) -> Result<String, BackendError> + Send + Sync;

/// Backend whose replies come from a closure; handy for scripting failures.
pub struct FnBackend {
    name: String,
    respond: Box<Responder>,
    counter: CallCounter,
}

impl FnBackend {
    pub fn new(
        name: impl Into<String>,
        respond: impl Fn(&ModelRequest) -> Result<String, BackendError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            respond: Box::new(respond),
            counter: CallCounter::default(),
        }
    }
}

impl ModelBackend for FnBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn counter(&self) -> &CallCounter {
        &self.counter
    }

    fn generate(&self, request: &ModelRequest) -> Result<String, BackendError> {
        (self.respond)(request)
    }
}
