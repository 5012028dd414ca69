//! The outer optimization loop and its persistent state.

pub mod checkpoint;
pub mod drift;
pub mod meta;
pub mod report;
mod run;
pub mod runlog;

use std::collections::BTreeSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributor::AttributionState;
use crate::backends::{BackendError, CallCounts, GenerationParams};
use crate::corpus::{CorpusError, EvalResult};
use crate::eval::EvalError;
use crate::segmenter::{SegmentError, SegmenterConfig};
use crate::selector::BanditState;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, SplitIds};
pub use drift::{drift_metrics, global_drift, DriftError, DriftRecord};
pub use meta::MetaFlags;
pub use report::{FinalReport, IterationSummary};
pub use run::{run_dataset, Optimizer, RunOutcome};
pub use runlog::{RunEvent, RunLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_iterations: u32,
    pub patience: u32,
    pub min_reward: f64,
    pub drift_threshold: f64,
    /// Size of the actionable set.
    pub actionable_units: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub exploration_c: f64,
    /// Cap on bandit pulls over the whole run.
    pub t_max: u32,
    /// UCB pulls per iteration once every live arm has been tried.
    pub pulls_per_iteration: u32,
    pub correctness_threshold: f64,
    pub multimodal: bool,
    pub meta: MetaFlags,
    /// Most failing examples used for occlusion in one iteration.
    pub error_cap: usize,
    pub seed: u64,
    pub sample_fraction: f64,
    pub dev_fraction: f64,
    pub max_concurrency: usize,
    pub segmenter: SegmenterConfig,
    pub generation: GenerationParams,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            patience: 3,
            min_reward: 0.005,
            drift_threshold: 0.10,
            actionable_units: 4,
            lambda: 0.5,
            alpha: 0.7,
            gamma: 0.9,
            exploration_c: std::f64::consts::SQRT_2,
            t_max: 100,
            pulls_per_iteration: 1,
            correctness_threshold: 60.0,
            multimodal: false,
            meta: MetaFlags::default(),
            error_cap: 16,
            seed: 0,
            sample_fraction: 0.03,
            dev_fraction: 0.5,
            max_concurrency: 8,
            segmenter: SegmenterConfig::default(),
            generation: GenerationParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl OptimizerConfig {
    /// Every violated constraint, one entry per field.
    pub fn validate(&self) -> Result<(), Vec<ConfigIssue>> {
        let mut issues = Vec::new();
        let mut check = |ok: bool, field: &'static str, message: &str| {
            if !ok {
                issues.push(ConfigIssue {
                    field,
                    message: message.to_string(),
                });
            }
        };
        let open01 = |x: f64| x > 0.0 && x < 1.0;
        let closed01 = |x: f64| (0.0..=1.0).contains(&x);
        check(self.max_iterations >= 1, "max_iterations", "must be at least 1");
        check(self.patience >= 1, "patience", "must be at least 1");
        check(open01(self.min_reward), "min_reward", "must lie strictly between 0 and 1");
        check(open01(self.drift_threshold), "drift_threshold", "must lie strictly between 0 and 1");
        check(self.actionable_units >= 1, "actionable_units", "must be at least 1");
        check(closed01(self.lambda), "lambda", "must lie in [0, 1]");
        check(closed01(self.alpha), "alpha", "must lie in [0, 1]");
        check(self.gamma > 0.0 && self.gamma <= 1.0, "gamma", "must lie in (0, 1]");
        check(
            self.exploration_c.is_finite() && self.exploration_c >= 0.0,
            "exploration_c",
            "must be a finite non-negative number",
        );
        check(self.t_max >= 1, "t_max", "must be at least 1");
        check(self.pulls_per_iteration >= 1, "pulls_per_iteration", "must be at least 1");
        check(
            (0.0..=100.0).contains(&self.correctness_threshold),
            "correctness_threshold",
            "must lie in [0, 100]",
        );
        check(self.error_cap >= 1, "error_cap", "must be at least 1");
        check(
            self.sample_fraction > 0.0 && self.sample_fraction <= 1.0,
            "sample_fraction",
            "must lie in (0, 1]",
        );
        check(open01(self.dev_fraction), "dev_fraction", "must lie strictly between 0 and 1");
        check(self.max_concurrency >= 1, "max_concurrency", "must be at least 1");
        check(
            self.segmenter.min_unit_chars < self.segmenter.max_unit_chars,
            "segmenter.max_unit_chars",
            "must exceed segmenter.min_unit_chars",
        );
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    IterationLimit,
    NoImprovement,
    DriftRisk,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::IterationLimit => "iteration-limit",
            StopReason::NoImprovement => "no-improvement",
            StopReason::DriftRisk => "drift-risk",
        }
    }
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop(StopReason),
}

/// Everything needed to continue a run exactly where it left off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    /// Completed iterations.
    pub iteration: u32,
    pub initial_prompt: String,
    pub current_prompt: String,
    pub best_prompt: String,
    pub best_dev_score: f64,
    /// Dev results of the current prompt; empty before the first iteration.
    pub current_dev: Vec<EvalResult>,
    /// Train results of the current prompt, reused as the next iteration's
    /// train evaluation.
    pub current_train: Option<Vec<EvalResult>>,
    pub attribution: AttributionState,
    pub bandit: BanditState,
    pub drift_history: Vec<DriftRecord>,
    /// Train ids solved by the current prompt.
    pub solved: BTreeSet<String>,
    pub rng: ChaCha8Rng,
    pub calls: CallCounts,
    pub consecutive_no_improve: u32,
    pub consecutive_drift_exceed: u32,
    pub summaries: Vec<IterationSummary>,
    pub stopped: Option<StopReason>,
    pub test_accuracy: Option<f64>,
}

impl RunState {
    pub fn new(initial_prompt: &str, config: &OptimizerConfig) -> Self {
        Self {
            iteration: 0,
            initial_prompt: initial_prompt.to_string(),
            current_prompt: initial_prompt.to_string(),
            best_prompt: initial_prompt.to_string(),
            best_dev_score: 0.0,
            current_dev: Vec::new(),
            current_train: None,
            attribution: AttributionState::new(config.lambda, config.alpha, config.gamma),
            bandit: BanditState::new(config.exploration_c, config.t_max),
            drift_history: Vec::new(),
            solved: BTreeSet::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            calls: CallCounts::default(),
            consecutive_no_improve: 0,
            consecutive_drift_exceed: 0,
            summaries: Vec::new(),
            stopped: None,
            test_accuracy: None,
        }
    }

    /// Updates the counters after an iteration. Drift exceedances are
    /// counted by [`RunState::protective_action`]; a compliant iteration
    /// resets that counter here.
    pub fn tally(&mut self, reward: f64, drift: f64, config: &OptimizerConfig) {
        if reward <= config.min_reward {
            self.consecutive_no_improve += 1;
        } else {
            self.consecutive_no_improve = 0;
        }
        if drift <= config.drift_threshold {
            self.consecutive_drift_exceed = 0;
        }
    }

    /// Reverts to the best prompt and eliminates the arm that caused drift.
    pub fn protective_action(&mut self, offending_arm: Option<usize>) {
        self.current_prompt = self.best_prompt.clone();
        if let Some(i) = offending_arm {
            self.bandit.eliminate(i);
        }
        self.consecutive_drift_exceed += 1;
    }
}

pub fn should_stop(state: &RunState, config: &OptimizerConfig) -> StopDecision {
    if state.consecutive_drift_exceed >= config.patience {
        StopDecision::Stop(StopReason::DriftRisk)
    } else if state.iteration >= config.max_iterations {
        StopDecision::Stop(StopReason::IterationLimit)
    } else if state.consecutive_no_improve >= config.patience {
        StopDecision::Stop(StopReason::NoImprovement)
    } else {
        StopDecision::Continue
    }
}

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("invalid configuration: {}", join_issues(.0))]
    Config(Vec<ConfigIssue>),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error("checkpoint splits do not match the dataset: {0}")]
    SplitMismatch(String),
    #[error("output I/O on {path}: {message}")]
    Io { path: String, message: String },
}

fn join_issues(issues: &[ConfigIssue]) -> String {
    issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}
