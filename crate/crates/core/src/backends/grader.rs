use std::sync::OnceLock;

use regex::Regex;

use super::{BackendError, GenerationParams, ModelBackend, ModelRequest};

const PREAMBLE: &str = "You are a professional question-answering assessment expert. You will be given a question description (including the question itself and the answer requirements), a standard answer, and an answer; you will use this to evaluate the quality of the answer.";
const TASK_HEADING: &str = "\n\nQuestion description:\n";
const TARGET_HEADING: &str = "\n\nReference answer:\n";
const OUTPUT_HEADING: &str = "\n\nAnswer:\n";
const CLOSING: &str = "\n\nTry to learn and understand the task description, and score the specific answer generated based on the task description and the reference answer to reflect whether the answer perfectly meets the question requirements in terms of steps and results, with a maximum score of 100.";

/// Appended to the grader prompt when the first reply had no score.
pub const REASK_SUFFIX: &str = "\n\nReply with only the numeric score between 0 and 100.";

/// Fills the grading template. Substitution is literal: placeholder-like
/// text inside the arguments is never expanded.
pub fn render_grader_prompt(task: &str, target: &str, output: &str) -> String {
    let mut s = String::with_capacity(
        PREAMBLE.len() + CLOSING.len() + task.len() + target.len() + output.len() + 64,
    );
    s.push_str(PREAMBLE);
    s.push_str(TASK_HEADING);
    s.push_str(task);
    s.push_str(TARGET_HEADING);
    s.push_str(target);
    s.push_str(OUTPUT_HEADING);
    s.push_str(output);
    s.push_str(CLOSING);
    s
}

/// Recovers (task, target, output) from a rendered grader prompt, with or
/// without the re-ask suffix. Used by the offline grader.
pub fn parse_grader_prompt(prompt: &str) -> Option<(String, String, String)> {
    let prompt = prompt.strip_suffix(REASK_SUFFIX).unwrap_or(prompt);
    let rest = prompt.strip_prefix(PREAMBLE)?.strip_prefix(TASK_HEADING)?;
    let rest = rest.strip_suffix(CLOSING)?;
    let (task, rest) = rest.split_once(TARGET_HEADING)?;
    let (target, output) = rest.rsplit_once(OUTPUT_HEADING)?;
    Some((task.to_string(), target.to_string(), output.to_string()))
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+(?:\.\d+)?").unwrap())
}

/// First numeric token of a grader reply. `Ok(None)` when there is none.
pub fn parse_score(reply: &str) -> Result<Option<f64>, BackendError> {
    let Some(m) = number_re().find(reply) else {
        return Ok(None);
    };
    let value: f64 = m.as_str().parse().map_err(|_| BackendError::NoScore(reply.to_string()))?;
    if !(0.0..=100.0).contains(&value) {
        return Err(BackendError::ScoreOutOfRange(value));
    }
    Ok(Some(value))
}

/// Scores `output` against `target` with the grader model, re-asking once
/// when the reply carries no number.
pub fn grade(
    grader: &dyn ModelBackend,
    task: &str,
    target: &str,
    output: &str,
    params: &GenerationParams,
) -> Result<f64, BackendError> {
    let prompt = render_grader_prompt(task, target, output);
    let reply = grader.complete(&ModelRequest::text("", prompt.clone(), params.clone()))?;
    if let Some(score) = parse_score(&reply)? {
        return Ok(score);
    }
    let retry = grader.complete(&ModelRequest::text("", prompt + REASK_SUFFIX, params.clone()))?;
    parse_score(&retry)?.ok_or(BackendError::NoScore(retry))
}
