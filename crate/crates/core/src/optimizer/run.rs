use std::fs;
use std::path::{Path, PathBuf};

use crate::attributor::{occlusion_deltas, select_actionable, OcclusionDeltas, ScoredUnit};
use crate::backends::{Backends, CallCounts};
use crate::corpus::{accuracy, load_dataset, sample_splits, DatasetSplits, EvalResult, Example};
use crate::eval::{EvalSettings, Evaluator};
use crate::optimizer::checkpoint::{save_checkpoint, write_atomic, Checkpoint, SplitIds};
use crate::optimizer::drift::{drift_metrics, global_drift, solved_ids};
use crate::optimizer::meta::EditContext;
use crate::optimizer::report::{FinalReport, IterationSummary};
use crate::optimizer::runlog::{RunEvent, RunLog, UnitSnapshot};
use crate::optimizer::{should_stop, OptimizerConfig, OptimizerError, RunState, StopDecision, StopReason};
use crate::segmenter::{segment, Fingerprint, SegmentError, Segmentation};
use crate::selector::{apply_edit, reward, Arm, EditEngine, EditError, EditOutcome, RewardOutcome};

pub enum RunOutcome {
    Finished(FinalReport),
    Halted { iteration: u32 },
}

/// Drives one optimization run. Only leaf evaluations run concurrently;
/// the loop itself is sequential.
pub struct Optimizer<'a> {
    config: OptimizerConfig,
    splits: DatasetSplits,
    backends: Backends<'a>,
    evaluator: Evaluator<'a>,
    state: RunState,
    out_dir: Option<PathBuf>,
    log: RunLog,
    base_calls: CallCounts,
    start_calls: CallCounts,
}

struct Candidate {
    arm: usize,
    edit: EditOutcome,
    reward: RewardOutcome,
}

fn preview(text: &str, limit: usize) -> String {
    let flat = crate::segmenter::normalize_ws(text);
    if flat.chars().count() <= limit {
        flat
    } else {
        let cut: String = flat.chars().take(limit - 3).collect();
        format!("{cut}...")
    }
}

fn arm_label(arm: &Arm) -> String {
    format!("{}@{}:{}", arm.operator.name(), arm.unit_index, arm.fingerprint)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> OptimizerError {
    OptimizerError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

impl<'a> Optimizer<'a> {
    pub fn new(
        config: OptimizerConfig,
        initial_prompt: &str,
        splits: DatasetSplits,
        backends: Backends<'a>,
    ) -> Result<Self, OptimizerError> {
        config.validate().map_err(OptimizerError::Config)?;
        if initial_prompt.trim().is_empty() {
            return Err(SegmentError::EmptyPrompt.into());
        }
        let state = RunState::new(initial_prompt, &config);
        Ok(Self::assemble(config, splits, backends, state))
    }

    /// Continues from a checkpoint. The splits must be the ones the run
    /// started with.
    pub fn from_checkpoint(
        checkpoint: Checkpoint,
        splits: DatasetSplits,
        backends: Backends<'a>,
    ) -> Result<Self, OptimizerError> {
        checkpoint.config.validate().map_err(OptimizerError::Config)?;
        let ids = SplitIds::of(&splits);
        for (name, ours, theirs) in [
            ("train", &ids.train, &checkpoint.splits.train),
            ("dev", &ids.dev, &checkpoint.splits.dev),
            ("test", &ids.test, &checkpoint.splits.test),
        ] {
            if ours != theirs {
                return Err(OptimizerError::SplitMismatch(format!("{name} ids differ")));
            }
        }
        Ok(Self::assemble(checkpoint.config, splits, backends, checkpoint.state))
    }

    fn assemble(config: OptimizerConfig, splits: DatasetSplits, backends: Backends<'a>, state: RunState) -> Self {
        let settings = EvalSettings {
            params: config.generation.clone(),
            correctness_threshold: config.correctness_threshold,
            multimodal: config.multimodal,
            max_concurrency: config.max_concurrency,
        };
        let evaluator = Evaluator::new(backends.task, backends.grader, settings);
        Self {
            base_calls: state.calls,
            start_calls: backends.call_counts(),
            config,
            splits,
            backends,
            evaluator,
            state,
            out_dir: None,
            log: RunLog::memory(),
        }
    }

    /// Writes checkpoints, the event log and the final report under `dir`.
    pub fn with_output_dir(mut self, dir: &Path) -> Result<Self, OptimizerError> {
        let ckpt = dir.join("checkpoints");
        fs::create_dir_all(&ckpt).map_err(|e| io_err(&ckpt, e))?;
        let log_path = dir.join("events.jsonl");
        self.log = RunLog::open(&log_path).map_err(|e| io_err(&log_path, e))?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn splits(&self) -> &DatasetSplits {
        &self.splits
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            splits: SplitIds::of(&self.splits),
            state: self.state.clone(),
        }
    }

    fn calls_now(&self) -> CallCounts {
        self.base_calls
            .plus(&self.backends.call_counts().minus(&self.start_calls))
    }

    pub fn run(&mut self) -> Result<FinalReport, OptimizerError> {
        match self.run_until(None)? {
            RunOutcome::Finished(report) => Ok(report),
            RunOutcome::Halted { .. } => unreachable!("no halt requested"),
        }
    }

    /// Runs until a stop rule fires, or returns early once `halt_after`
    /// iterations are complete.
    pub fn run_until(&mut self, halt_after: Option<u32>) -> Result<RunOutcome, OptimizerError> {
        if self.state.stopped.is_some() {
            return Ok(RunOutcome::Finished(self.report()));
        }
        if self.state.iteration == 0 && self.state.current_dev.is_empty() {
            self.log.record(&RunEvent::Start {
                iteration: 0,
                train: self.splits.train.len(),
                dev: self.splits.dev.len(),
                test: self.splits.test.len(),
            });
        } else {
            self.log.record(&RunEvent::Resume {
                iteration: self.state.iteration,
            });
        }
        loop {
            if let StopDecision::Stop(reason) = should_stop(&self.state, &self.config) {
                return self.finish(reason).map(RunOutcome::Finished);
            }
            if halt_after.is_some_and(|h| self.state.iteration >= h) {
                return Ok(RunOutcome::Halted {
                    iteration: self.state.iteration,
                });
            }
            let snapshot = self.state.clone();
            match self.step() {
                Ok(()) => self.save()?,
                Err(e) => {
                    self.log.record(&RunEvent::Error {
                        iteration: snapshot.iteration + 1,
                        message: e.to_string(),
                    });
                    self.state = snapshot;
                    if let Err(ce) = self.save() {
                        log::error!("could not write checkpoint after failure: {ce}");
                    }
                    return Err(e);
                }
            }
        }
    }

    fn save(&self) -> Result<(), OptimizerError> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        let ckpt = self.checkpoint();
        let dir = dir.join("checkpoints");
        save_checkpoint(&ckpt, &dir.join(format!("iter-{:04}.json", self.state.iteration)))?;
        save_checkpoint(&ckpt, &dir.join("latest.json"))?;
        Ok(())
    }

    fn failing_examples(&self, train: &[EvalResult]) -> Vec<Example> {
        self.splits
            .train
            .iter()
            .zip(train)
            .filter(|(_, r)| !r.correct)
            .map(|(e, _)| e.clone())
            .collect()
    }

    fn cap_errors(&mut self, errors: Vec<Example>) -> Vec<Example> {
        if errors.len() <= self.config.error_cap {
            return errors;
        }
        let mut keep = rand::seq::index::sample(&mut self.state.rng, errors.len(), self.config.error_cap).into_vec();
        keep.sort_unstable();
        keep.into_iter().map(|i| errors[i].clone()).collect()
    }

    fn reasons(&self, k: usize, deltas: &OcclusionDeltas, errors: &[Example], train: &[EvalResult]) -> Vec<String> {
        if errors.is_empty() {
            return Vec::new();
        }
        let n = errors.len();
        let mut out = vec![match deltas.deltas.get(&k) {
            Some(d) => format!(
                "Masking this unit fixed {} of {n} failing training examples.",
                (-d * n as f64).round()
            ),
            None => "No occlusion result is available for this unit.".to_string(),
        }];
        for e in errors.iter().take(2) {
            let got = train
                .iter()
                .find(|r| r.example_id == e.id)
                .map_or("", |r| r.raw_output.as_str());
            out.push(format!(
                "Failing example {}: expected \"{}\", got \"{}\".",
                e.id,
                preview(&e.target, 120),
                preview(got, 120)
            ));
        }
        out
    }

    /// One pass of the outer loop.
    fn step(&mut self) -> Result<(), OptimizerError> {
        let t = self.state.iteration + 1;
        let before = self.calls_now();
        let current = self.state.current_prompt.clone();

        let (train, cached) = match self.state.current_train.take() {
            Some(r) => (r, true),
            None => (self.evaluator.evaluate_prompt(&current, &self.splits.train)?, false),
        };
        if self.state.current_dev.is_empty() {
            let dev = self.evaluator.evaluate_prompt(&current, &self.splits.dev)?;
            self.state.best_dev_score = accuracy(&dev)?;
            self.state.current_dev = dev;
        }
        let solved_prev = solved_ids(&train);
        self.log.record(&RunEvent::TrainEval {
            iteration: t,
            accuracy: accuracy(&train)?,
            solved: solved_prev.len(),
            failing: train.len() - solved_prev.len(),
            cached,
        });

        let seg = segment(&current, &self.config.segmenter, None)?;
        let failing = self.failing_examples(&train);
        let errors = self.cap_errors(failing);
        let deltas = if errors.is_empty() {
            OcclusionDeltas::default()
        } else {
            occlusion_deltas(&seg, &errors, &self.evaluator)
        };
        self.state.attribution.update_scores(&deltas.by_fingerprint(&seg));
        let fps: Vec<Fingerprint> = seg.units.iter().map(|u| u.fingerprint.clone()).collect();
        let blended = self.state.attribution.blend(&fps, t);
        let scored: Vec<ScoredUnit> = seg
            .units
            .iter()
            .zip(&blended)
            .map(|(u, &score)| ScoredUnit {
                index: u.index,
                fingerprint: u.fingerprint.clone(),
                score,
            })
            .collect();
        let actionable = select_actionable(&scored, self.config.actionable_units);
        self.log.record(&RunEvent::Attribution {
            iteration: t,
            errors: errors.len(),
            units: seg
                .units
                .iter()
                .zip(&blended)
                .map(|(u, &b)| UnitSnapshot {
                    index: u.index,
                    fingerprint: u.fingerprint.to_string(),
                    preview: preview(&u.text, 60),
                    raw: self.state.attribution.raw(&u.fingerprint),
                    blended: b,
                    delta: deltas.deltas.get(&u.index).copied(),
                })
                .collect(),
            actionable: actionable.units.iter().map(|u| u.index).collect(),
        });

        let mut candidates = Vec::new();
        if !errors.is_empty() && !actionable.is_empty() {
            self.state.bandit.build_arms(&actionable);
            let mut ucb_pulls = 0;
            while self.state.bandit.budget_left() {
                let warm = self.state.bandit.in_warm_start();
                if !warm && ucb_pulls >= self.config.pulls_per_iteration {
                    break;
                }
                let Ok(i) = self.state.bandit.ucb_choose() else { break };
                if !warm {
                    ucb_pulls += 1;
                }
                let ctx = self.edit_context(i, &seg, &blended, &actionable.units, &deltas, &errors, &train);
                if let Some(c) = self.pull(t, i, warm, &current, &seg, &ctx)? {
                    candidates.push(c);
                }
            }
        }

        let mut chosen: Option<&Candidate> = None;
        for c in &candidates {
            if c.reward.reward > 0.0 && chosen.is_none_or(|b| c.reward.reward > b.reward.reward) {
                chosen = Some(c);
            }
        }

        let mut kept_reward = 0.0;
        let mut accepted_arm = None;
        let mut protective = false;
        let record = match chosen {
            Some(c) => {
                let cand_train = self.evaluator.evaluate_prompt(&c.edit.prompt, &self.splits.train)?;
                let rec = drift_metrics(t, &solved_prev, &cand_train)?;
                let label = arm_label(&self.state.bandit.arms[c.arm]);
                if rec.drift > self.config.drift_threshold {
                    self.state.protective_action(Some(c.arm));
                    protective = true;
                    self.state.current_train = Some(train);
                    self.log.record(&RunEvent::Protective {
                        iteration: t,
                        arm: Some(label),
                        drift: rec.drift,
                        consecutive: self.state.consecutive_drift_exceed,
                    });
                } else {
                    if let Some((from, to)) = &c.edit.rewritten {
                        self.state.attribution.transfer_history(from, to);
                    }
                    self.state.current_prompt = c.edit.prompt.clone();
                    self.state.best_prompt = c.edit.prompt.clone();
                    self.state.best_dev_score = self.state.best_dev_score.max(c.reward.dev_score);
                    self.state.current_dev = c.reward.dev_results.clone();
                    self.state.current_train = Some(cand_train);
                    kept_reward = c.reward.reward;
                    self.log.record(&RunEvent::Accept {
                        iteration: t,
                        arm: label.clone(),
                        reward: c.reward.reward,
                        dev_score: c.reward.dev_score,
                    });
                    accepted_arm = Some(label);
                }
                rec
            }
            None => {
                let rec = drift_metrics(t, &solved_prev, &train)?;
                self.state.current_train = Some(train);
                rec
            }
        };
        self.log.record(&RunEvent::Drift {
            iteration: t,
            solved_prev: record.solved_prev,
            newly_failed: record.newly_failed,
            retention: record.retention,
            drift: record.drift,
        });
        self.state.solved = self.state.current_train.as_deref().map(solved_ids).unwrap_or_default();
        self.state.tally(kept_reward, record.drift, &self.config);
        self.state.iteration = t;

        let after = self.calls_now();
        self.state.calls = after;
        let dev_acc = accuracy(&self.state.current_dev)?;
        let summary = IterationSummary {
            iteration: t,
            dev_acc,
            reward: kept_reward,
            drift: record.drift,
            calls: after.total() - before.total(),
            accepted_arm,
            protective,
        };
        self.log.record(&RunEvent::IterationEnd {
            iteration: t,
            dev_acc,
            reward: kept_reward,
            drift: record.drift,
            calls: summary.calls,
            best_dev_score: self.state.best_dev_score,
        });
        self.state.drift_history.push(record);
        self.state.summaries.push(summary);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn edit_context(
        &self,
        arm: usize,
        seg: &Segmentation,
        blended: &[f64],
        actionable: &[ScoredUnit],
        deltas: &OcclusionDeltas,
        errors: &[Example],
        train: &[EvalResult],
    ) -> EditContext {
        let arm = &self.state.bandit.arms[arm];
        let k = seg.position(&arm.fingerprint).unwrap_or(arm.unit_index);
        EditContext {
            unit_index: k,
            unit_text: seg.units[k].text.clone(),
            operator: arm.operator,
            raw_score: self.state.attribution.raw(&arm.fingerprint),
            blended_score: blended[k],
            weak_units: actionable
                .iter()
                .map(|u| (seg.units[u.index].text.clone(), u.score))
                .collect(),
            reasons: self.reasons(k, deltas, errors, train),
        }
    }

    /// Applies one arm and scores it on dev. Edits the optimizer cannot
    /// produce count as a zero reward and eliminate the arm.
    fn pull(
        &mut self,
        t: u32,
        i: usize,
        warm: bool,
        current: &str,
        seg: &Segmentation,
        ctx: &EditContext,
    ) -> Result<Option<Candidate>, OptimizerError> {
        let fp = self.state.bandit.arms[i].fingerprint.clone();
        let engine = EditEngine {
            optimizer: self.backends.optimizer,
            params: self.config.generation.clone(),
            flags: self.config.meta,
            multimodal: self.config.multimodal,
        };
        let (candidate, error) = match apply_edit(seg, &fp, ctx, &engine) {
            Ok(edit) => {
                let r = reward(current, &self.state.current_dev, &edit.prompt, &self.splits.dev, &self.evaluator)?;
                self.state.bandit.update_arm(i, r.reward);
                self.state.attribution.record_history(&fp, t, r.reward);
                (Some(Candidate { arm: i, edit, reward: r }), None)
            }
            Err(EditError::Backend(e)) => return Err(e.into()),
            Err(e) => {
                self.state.bandit.update_arm(i, 0.0);
                self.state.bandit.eliminate(i);
                (None, Some(e.to_string()))
            }
        };
        let arm = &self.state.bandit.arms[i];
        self.log.record(&RunEvent::Pull {
            iteration: t,
            arm: arm_label(arm),
            warm_start: warm,
            reward: candidate.as_ref().map_or(0.0, |c| c.reward.reward),
            mean: arm.mean_reward,
            pulls: arm.pulls,
            eliminated: arm.eliminated,
            error,
        });
        Ok(candidate)
    }

    fn finish(&mut self, reason: StopReason) -> Result<FinalReport, OptimizerError> {
        let before = self.calls_now();
        let test = self.evaluator.evaluate_prompt(&self.state.best_prompt, &self.splits.test)?;
        let test_accuracy = accuracy(&test)?;
        let after = self.calls_now();
        if let Some(last) = self.state.summaries.last_mut() {
            last.calls += after.total() - before.total();
        }
        self.state.calls = after;
        self.state.test_accuracy = Some(test_accuracy);
        self.state.stopped = Some(reason);
        self.log.record(&RunEvent::Stop {
            iteration: self.state.iteration,
            reason: reason.as_str().to_string(),
            best_dev_score: self.state.best_dev_score,
            test_accuracy,
            calls: after,
            total_calls: after.total(),
        });
        self.save()?;
        let report = self.report();
        if let Some(dir) = &self.out_dir {
            write_atomic(&dir.join("report.json"), report.to_json().as_bytes())?;
            write_atomic(&dir.join("iterations.csv"), report.to_csv().as_bytes())?;
            write_atomic(&dir.join("best_prompt.txt"), report.best_prompt.as_bytes())?;
        }
        Ok(report)
    }

    /// The report for a stopped run.
    pub fn report(&self) -> FinalReport {
        FinalReport {
            stop_reason: self.state.stopped.map_or("running", StopReason::as_str).to_string(),
            iterations: self.state.iteration,
            initial_prompt: self.state.initial_prompt.clone(),
            best_prompt: self.state.best_prompt.clone(),
            best_dev_score: self.state.best_dev_score,
            test_accuracy: self.state.test_accuracy.unwrap_or(0.0),
            global_drift: global_drift(&self.state.drift_history).ok(),
            min_retention: self
                .state
                .drift_history
                .iter()
                .map(|r| r.retention)
                .min_by(f64::total_cmp),
            calls: self.state.calls,
            total_calls: self.state.calls.total(),
            rows: self.state.summaries.clone(),
        }
    }
}

/// Loads a dataset, draws the seeded splits and runs to completion.
pub fn run_dataset(
    config: OptimizerConfig,
    initial_prompt: &str,
    dataset_path: &Path,
    backends: Backends<'_>,
    out_dir: Option<&Path>,
) -> Result<FinalReport, OptimizerError> {
    config.validate().map_err(OptimizerError::Config)?;
    let examples = load_dataset(dataset_path)?;
    let splits = sample_splits(&examples, config.sample_fraction, config.dev_fraction, config.seed)?;
    let mut opt = Optimizer::new(config, initial_prompt, splits, backends)?;
    if let Some(dir) = out_dir {
        opt = opt.with_output_dir(dir)?;
    }
    opt.run()
}
