//! Meta-prompts sent to the optimizer model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::selector::EditOperator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaFlags {
    /// Lists the weakest units with their blended scores.
    pub prioritize_weak: bool,
    /// Adds a step-wise analysis scaffold.
    pub structured_reasoning: bool,
}

impl Default for MetaFlags {
    fn default() -> Self {
        Self {
            prioritize_weak: true,
            structured_reasoning: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditContext {
    pub unit_index: usize,
    pub unit_text: String,
    pub operator: EditOperator,
    pub raw_score: f64,
    pub blended_score: f64,
    /// (unit text, blended score), any order; rendered descending.
    pub weak_units: Vec<(String, f64)>,
    pub reasons: Vec<String>,
}

#[derive(Debug, Error, PartialEq)]
pub enum MetaError {
    #[error("unit {0:?} does not occur in the previous candidate")]
    UnitNotFound(String),
}

const ROLE: &str = "You are refining a task prompt for a language model one semantic unit at a time.";
const REPLY_RULE: &str = "Apply the requested edit to the marked unit only. Reply with the resulting text alone, without commentary or quotation marks.";

pub const SECTION_CANDIDATE: &str = "## Previous candidate";
pub const SECTION_LOCATION: &str = "## Edit location";
pub const SECTION_SUGGESTIONS: &str = "## Suggestions";
pub const SECTION_REASONS: &str = "## Reasons";
pub const SECTION_WEAK: &str = "## Weak elements";
pub const SECTION_REASONING: &str = "## Step-wise analysis";
pub const SECTION_MULTIMODAL: &str = "## Multimodal background";
const SECTION_REORDER: &str = "## Reorder destination";

const UNIT_OPEN: &str = "<<<UNIT";
const UNIT_CLOSE: &str = "UNIT>>>";

pub const MULTIMODAL_NOTE: &str = "The task is multimodal: every input pairs question text with one or more images that the task model sees directly. Keep instructions about reading the images intact.";

fn suggestion(op: EditOperator) -> &'static str {
    match op {
        EditOperator::Replace => "Write a replacement for the marked unit that plays the same role in the prompt but removes the cause of the failures listed under Reasons.",
        EditOperator::Insert => "Write one new unit to be inserted directly after the marked unit. It should add the guidance the prompt is missing for the failures listed under Reasons.",
        EditOperator::Delete => "Remove the marked unit.",
        EditOperator::Reorder => "Move the marked unit to the position where it is most effective.",
        EditOperator::Refine => "Rewrite the marked unit so that it keeps its intent but is clearer and more precise about what the task requires.",
    }
}

fn preview(text: &str) -> String {
    let flat = crate::segmenter::normalize_ws(text);
    if flat.chars().count() <= 80 {
        flat
    } else {
        let cut: String = flat.chars().take(77).collect();
        format!("{cut}...")
    }
}

/// Builds the optimizer instruction for one edit. Optional sections are
/// omitted entirely when their flag is off.
pub fn build_meta_prompt(
    prev_prompt: &str,
    ctx: &EditContext,
    flags: MetaFlags,
    multimodal: bool,
) -> Result<String, MetaError> {
    if !prev_prompt.contains(ctx.unit_text.as_str()) {
        return Err(MetaError::UnitNotFound(ctx.unit_text.clone()));
    }
    let mut out = Vec::new();
    out.push(format!("{ROLE}\n{REPLY_RULE}"));
    out.push(format!("{SECTION_CANDIDATE}\n<<<PROMPT\n{prev_prompt}\nPROMPT>>>"));
    out.push(format!(
        "{SECTION_LOCATION}\nOperator: {}\nUnit index: {}\n{UNIT_OPEN}\n{}\n{UNIT_CLOSE}",
        ctx.operator.name(),
        ctx.unit_index,
        ctx.unit_text
    ));
    out.push(format!("{SECTION_SUGGESTIONS}\n{}", suggestion(ctx.operator)));
    let mut reasons = format!(
        "{SECTION_REASONS}\n- Occlusion score {:.4}, blended attribution score {:.4}.",
        ctx.raw_score, ctx.blended_score
    );
    for r in &ctx.reasons {
        reasons.push_str("\n- ");
        reasons.push_str(r);
    }
    out.push(reasons);
    if flags.prioritize_weak {
        let mut weak = ctx.weak_units.clone();
        weak.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut s = format!("{SECTION_WEAK}\nUnits ranked by attribution score, weakest first:");
        for (i, (text, score)) in weak.iter().enumerate() {
            s.push_str(&format!("\n{}. [{score:.4}] {}", i + 1, preview(text)));
        }
        out.push(s);
    }
    if flags.structured_reasoning {
        out.push(format!(
            "{SECTION_REASONING}\n\
             1. State what the marked unit asks the task model to do.\n\
             2. Compare that with the failing examples under Reasons.\n\
             3. Identify the wording that leads to the failures.\n\
             4. Produce the edited text, leaving the intent of the rest of the prompt unchanged."
        ));
    }
    if multimodal {
        out.push(format!("{SECTION_MULTIMODAL}\n{MULTIMODAL_NOTE}"));
    }
    Ok(out.join("\n\n"))
}

/// Asks for a destination index for a reorder edit.
pub fn build_reorder_prompt(prev_prompt: &str, unit_index: usize, unit_text: &str, unit_count: usize) -> String {
    format!(
        "{ROLE}\n\n{SECTION_CANDIDATE}\n<<<PROMPT\n{prev_prompt}\nPROMPT>>>\n\n{SECTION_REORDER}\n\
         The marked unit is at position {unit_index} of {unit_count} (0-based).\n{UNIT_OPEN}\n{unit_text}\n{UNIT_CLOSE}\n\
         Reply with the single 0-based position it should move to."
    )
}

/// What an optimizer request asks for; used by offline optimizers.
#[derive(Debug, Clone, PartialEq)]
pub enum EditRequestView {
    Edit { operator: EditOperator, unit_text: String },
    ReorderPosition,
}

pub fn parse_edit_request(meta: &str) -> Option<EditRequestView> {
    if meta.contains(SECTION_REORDER) {
        return Some(EditRequestView::ReorderPosition);
    }
    let location = &meta[meta.find(SECTION_LOCATION)?..];
    let op_line = location.lines().find_map(|l| l.strip_prefix("Operator: "))?;
    let operator = EditOperator::from_name(op_line.trim())?;
    let start = location.find(UNIT_OPEN)? + UNIT_OPEN.len() + 1;
    let end = location.find(UNIT_CLOSE)?;
    let unit_text = location.get(start..end)?.strip_suffix('\n')?.to_string();
    Some(EditRequestView::Edit { operator, unit_text })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> EditContext {
        EditContext {
            unit_index: 1,
            unit_text: "Answer with UNIT_BAD.".into(),
            operator: EditOperator::Refine,
            raw_score: -0.5,
            blended_score: 0.35,
            weak_units: vec![("Be short.".into(), 0.1), ("Answer with UNIT_BAD.".into(), 0.35)],
            reasons: vec!["Masking this unit fixed 2 of 4 failing examples.".into()],
        }
    }

    const PREV: &str = "Solve it.\nAnswer with UNIT_BAD.\nBe short.";

    fn positions(m: &str) -> Vec<Option<usize>> {
        [
            SECTION_CANDIDATE,
            SECTION_LOCATION,
            SECTION_SUGGESTIONS,
            SECTION_REASONS,
            SECTION_WEAK,
            SECTION_REASONING,
            SECTION_MULTIMODAL,
        ]
        .iter()
        .map(|s| m.find(s))
        .collect()
    }

    #[test]
    fn full_meta_prompt_sections_in_order() {
        let m = build_meta_prompt(PREV, &ctx(), MetaFlags::default(), false).unwrap();
        let pos = positions(&m);
        let present: Vec<usize> = pos[..6].iter().map(|p| p.unwrap()).collect();
        assert!(present.windows(2).all(|w| w[0] < w[1]));
        assert!(pos[6].is_none());
        assert!(m.contains(PREV));
        let weak = &m[pos[4].unwrap()..];
        assert!(weak.find("[0.3500]").unwrap() < weak.find("[0.1000]").unwrap());
    }

    #[test]
    fn flags_off_remove_sections() {
        let flags = MetaFlags {
            prioritize_weak: false,
            structured_reasoning: false,
        };
        let m = build_meta_prompt(PREV, &ctx(), flags, false).unwrap();
        assert!(!m.contains(SECTION_WEAK));
        assert!(!m.contains(SECTION_REASONING));
        assert!(!m.contains("weakest first"));
        let only_weak_off = build_meta_prompt(
            PREV,
            &ctx(),
            MetaFlags {
                prioritize_weak: false,
                structured_reasoning: true,
            },
            false,
        )
        .unwrap();
        assert!(!only_weak_off.contains(SECTION_WEAK));
        assert!(only_weak_off.contains(SECTION_REASONING));
    }

    #[test]
    fn multimodal_annotation_closes_the_prompt() {
        let m = build_meta_prompt(PREV, &ctx(), MetaFlags::default(), true).unwrap();
        assert!(m.ends_with(MULTIMODAL_NOTE));
        assert!(m.lines().last().unwrap().contains("multimodal"));
    }

    #[test]
    fn unit_must_occur_in_prompt() {
        let mut c = ctx();
        c.unit_text = "absent".into();
        assert_eq!(
            build_meta_prompt(PREV, &c, MetaFlags::default(), false),
            Err(MetaError::UnitNotFound("absent".into()))
        );
    }

    #[test]
    fn parse_round_trip() {
        let m = build_meta_prompt(PREV, &ctx(), MetaFlags::default(), true).unwrap();
        assert_eq!(
            parse_edit_request(&m),
            Some(EditRequestView::Edit {
                operator: EditOperator::Refine,
                unit_text: "Answer with UNIT_BAD.".into()
            })
        );
        let r = build_reorder_prompt(PREV, 1, "Answer with UNIT_BAD.", 3);
        assert_eq!(parse_edit_request(&r), Some(EditRequestView::ReorderPosition));
        assert_eq!(parse_edit_request("hello"), None);
    }
}
