//! Edit selection: (unit, operator) arms chosen by an upper confidence
//! bound, with a warm start that pulls every new arm once and elimination of
//! arms whose mean reward is not positive.

use std::cmp::Ordering;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributor::ActionableSet;
use crate::backends::{BackendError, GenerationParams, ModelBackend, ModelRequest};
use crate::corpus::{accuracy, EvalResult, Example};
use crate::eval::{EvalError, Evaluator};
use crate::optimizer::meta::{build_meta_prompt, build_reorder_prompt, EditContext, MetaError, MetaFlags};
use crate::segmenter::{join_units, Fingerprint, Segmentation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EditOperator {
    Replace,
    Insert,
    Delete,
    Reorder,
    Refine,
}

impl EditOperator {
    pub const ALL: [EditOperator; 5] = [
        EditOperator::Replace,
        EditOperator::Insert,
        EditOperator::Delete,
        EditOperator::Reorder,
        EditOperator::Refine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EditOperator::Replace => "Replace",
            EditOperator::Insert => "Insert",
            EditOperator::Delete => "Delete",
            EditOperator::Reorder => "Reorder",
            EditOperator::Refine => "Refine",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SelectorError {
    #[error("no live arm is left to pull")]
    AllEliminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub fingerprint: Fingerprint,
    pub operator: EditOperator,
    pub mean_reward: f64,
    pub pulls: u32,
    pub eliminated: bool,
    /// In the current actionable set. Parked arms keep their statistics.
    pub live: bool,
    pub unit_index: usize,
}

impl Arm {
    pub fn mean(&self) -> Option<f64> {
        (self.pulls > 0).then_some(self.mean_reward)
    }

    fn order_key(&self) -> (usize, EditOperator) {
        (self.unit_index, self.operator)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditState {
    pub arms: Vec<Arm>,
    pub exploration_c: f64,
    /// Cap on total pulls over the whole run.
    pub t_max: u32,
    pub total_pulls: u32,
    pub eliminate_non_positive: bool,
}

impl BanditState {
    pub fn new(exploration_c: f64, t_max: u32) -> Self {
        Self {
            arms: Vec::new(),
            exploration_c,
            t_max,
            total_pulls: 0,
            eliminate_non_positive: true,
        }
    }

    pub fn find(&self, fingerprint: &Fingerprint, operator: EditOperator) -> Option<usize> {
        self.arms
            .iter()
            .position(|a| &a.fingerprint == fingerprint && a.operator == operator)
    }

    /// Makes the arms over `actionable` live (creating missing ones) and
    /// parks every other arm.
    pub fn build_arms(&mut self, actionable: &ActionableSet) {
        for arm in &mut self.arms {
            arm.live = false;
        }
        for unit in &actionable.units {
            for op in EditOperator::ALL {
                match self.find(&unit.fingerprint, op) {
                    Some(i) => {
                        self.arms[i].live = true;
                        self.arms[i].unit_index = unit.index;
                    }
                    None => self.arms.push(Arm {
                        fingerprint: unit.fingerprint.clone(),
                        operator: op,
                        mean_reward: 0.0,
                        pulls: 0,
                        eliminated: false,
                        live: true,
                        unit_index: unit.index,
                    }),
                }
            }
        }
    }

    pub fn live_count(&self) -> usize {
        self.arms.iter().filter(|a| a.live).count()
    }

    pub fn budget_left(&self) -> bool {
        self.total_pulls < self.t_max
    }

    fn candidates(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.arms.len())
            .filter(|&i| self.arms[i].live && !self.arms[i].eliminated)
            .collect();
        idx.sort_by_key(|&i| self.arms[i].order_key());
        idx
    }

    pub fn ucb_score(&self, arm: &Arm) -> f64 {
        let t = f64::from(self.total_pulls.max(1));
        arm.mean_reward + self.exploration_c * (t.ln() / f64::from(arm.pulls.max(1))).sqrt()
    }

    /// Index of the next arm to pull: the first unpulled live arm if any,
    /// otherwise the UCB maximizer.
    pub fn ucb_choose(&self) -> Result<usize, SelectorError> {
        let candidates = self.candidates();
        if let Some(&i) = candidates.iter().find(|&&i| self.arms[i].pulls == 0) {
            return Ok(i);
        }
        let mut best: Option<(usize, f64)> = None;
        for i in candidates {
            let score = self.ucb_score(&self.arms[i]);
            match best {
                Some((_, b)) if score.total_cmp(&b) != Ordering::Greater => {}
                _ => best = Some((i, score)),
            }
        }
        best.map(|(i, _)| i).ok_or(SelectorError::AllEliminated)
    }

    /// Whether the next pull is part of the warm start.
    pub fn in_warm_start(&self) -> bool {
        self.candidates().iter().any(|&i| self.arms[i].pulls == 0)
    }

    pub fn update_arm(&mut self, index: usize, reward: f64) {
        let eliminate = self.eliminate_non_positive;
        let arm = &mut self.arms[index];
        arm.pulls += 1;
        arm.mean_reward += (reward - arm.mean_reward) / f64::from(arm.pulls);
        if eliminate && arm.mean_reward <= 0.0 {
            arm.eliminated = true;
        }
        self.total_pulls += 1;
    }

    pub fn eliminate(&mut self, index: usize) {
        self.arms[index].eliminated = true;
    }
}

#[derive(Debug, Error)]
pub enum EditError {
    #[error("unit {0} is not part of the segmentation")]
    UnitMissing(Fingerprint),
    #[error("optimizer returned an empty edit")]
    EmptyEdit,
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Settings for turning an arm into a candidate prompt.
pub struct EditEngine<'a> {
    pub optimizer: &'a dyn ModelBackend,
    pub params: GenerationParams,
    pub flags: MetaFlags,
    pub multimodal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutcome {
    pub prompt: String,
    /// Set when the unit's text changed, for history transfer.
    pub rewritten: Option<(Fingerprint, Fingerprint)>,
}

fn first_int(s: &str) -> Option<i64> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"-?\d+").unwrap());
    re.find(s)?.as_str().parse().ok()
}

fn ask(engine: &EditEngine, user_input: String) -> Result<String, EditError> {
    let reply = engine
        .optimizer
        .complete(&ModelRequest::text("", user_input, engine.params.clone()))?;
    let text = reply.trim();
    if text.is_empty() {
        return Err(EditError::EmptyEdit);
    }
    Ok(text.to_string())
}

/// Applies `ctx.operator` to the unit `fingerprint`. Delete needs no model
/// call; Reorder asks for a destination and falls back to swapping with the
/// next unit (or the previous one when last).
pub fn apply_edit(
    segmentation: &Segmentation,
    fingerprint: &Fingerprint,
    ctx: &EditContext,
    engine: &EditEngine,
) -> Result<EditOutcome, EditError> {
    let k = segmentation
        .position(fingerprint)
        .ok_or_else(|| EditError::UnitMissing(fingerprint.clone()))?;
    let mut texts: Vec<String> = segmentation.units.iter().map(|u| u.text.clone()).collect();
    let prev = segmentation.reassemble();
    let mut rewritten = None;
    match ctx.operator {
        EditOperator::Delete => {
            texts.remove(k);
        }
        EditOperator::Reorder => {
            let n = texts.len();
            let fallback = if k + 1 < n { k + 1 } else { k.saturating_sub(1) };
            let reply = engine.optimizer.complete(&ModelRequest::text(
                "",
                build_reorder_prompt(&prev, k, &texts[k], n),
                engine.params.clone(),
            ))?;
            let dest = first_int(&reply)
                .map(|d| d.clamp(0, n as i64 - 1) as usize)
                .filter(|&d| d != k)
                .unwrap_or(fallback);
            let unit = texts.remove(k);
            texts.insert(dest, unit);
        }
        EditOperator::Replace | EditOperator::Refine => {
            let new_text = ask(engine, build_meta_prompt(&prev, ctx, engine.flags, engine.multimodal)?)?;
            rewritten = Some((fingerprint.clone(), Fingerprint::of(&new_text)));
            texts[k] = new_text;
        }
        EditOperator::Insert => {
            let new_text = ask(engine, build_meta_prompt(&prev, ctx, engine.flags, engine.multimodal)?)?;
            texts.insert(k + 1, new_text);
        }
    }
    Ok(EditOutcome {
        prompt: join_units(texts.iter().map(String::as_str)),
        rewritten,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardOutcome {
    pub reward: f64,
    pub dev_score: f64,
    pub dev_results: Vec<EvalResult>,
}

/// Dev-accuracy difference between `new_prompt` and the cached evaluation
/// of `old_prompt`. An unchanged prompt scores 0 without model calls.
pub fn reward(
    old_prompt: &str,
    old_dev: &[EvalResult],
    new_prompt: &str,
    dev: &[Example],
    evaluator: &Evaluator,
) -> Result<RewardOutcome, EvalError> {
    debug_assert!(!dev.is_empty() && !old_dev.is_empty());
    let old_score = accuracy(old_dev).unwrap_or(0.0);
    if new_prompt == old_prompt {
        return Ok(RewardOutcome {
            reward: 0.0,
            dev_score: old_score,
            dev_results: old_dev.to_vec(),
        });
    }
    let dev_results = evaluator.evaluate_prompt(new_prompt, dev)?;
    let dev_score = accuracy(&dev_results).unwrap_or(0.0);
    Ok(RewardOutcome {
        reward: dev_score - old_score,
        dev_score,
        dev_results,
    })
}
