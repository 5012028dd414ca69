use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use segopt_core::backends::CallCounts;
use segopt_core::corpus::{accuracy, load_dataset, sample_splits, DatasetSplits, Example};
use segopt_core::eval::{EvalSettings, Evaluator};
use segopt_core::optimizer::runlog::read_events;
use segopt_core::optimizer::{load_checkpoint, Optimizer, OptimizerConfig, RunEvent, RunOutcome};

use crate::config::{BackendSet, CliConfig, Overrides};
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_path: PathBuf,
    pub dataset_path: PathBuf,
    /// The configuration as used, overrides included.
    pub config: CliConfig,
    pub backends: BTreeMap<String, String>,
    pub started_at: String,
    pub ended_at: Option<String>,
    pub status: String,
    pub stop_reason: Option<String>,
    pub calls: Option<CallCounts>,
    pub total_calls: Option<u64>,
}

impl RunManifest {
    pub fn read(run_dir: &Path) -> Result<Self, CliError> {
        let path = run_dir.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))
    }

    fn write(&self, run_dir: &Path) -> Result<(), CliError> {
        let path = run_dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

fn now() -> String {
    chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string()
}

fn load_examples(path: &Path) -> Result<Vec<Example>, CliError> {
    load_dataset(path).map_err(|e| CliError::Config(format!("dataset {}: {e}", path.display())))
}

fn splits_for(examples: &[Example], cfg: &OptimizerConfig) -> Result<DatasetSplits, CliError> {
    sample_splits(examples, cfg.sample_fraction, cfg.dev_fraction, cfg.seed)
        .map_err(|e| CliError::Config(format!("sampling: {e}")))
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<CliConfig, CliError> {
    let mut cfg = CliConfig::load(path)?;
    overrides.apply(&mut cfg.optimizer);
    cfg.validate()?;
    Ok(cfg)
}

pub struct OptimizeArgs {
    pub config: PathBuf,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub run_id: Option<String>,
    pub force: bool,
    pub stop_after: Option<u32>,
    pub overrides: Overrides,
}

pub fn optimize(args: OptimizeArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let dataset_path = fs::canonicalize(&args.dataset)
        .map_err(|e| CliError::Config(format!("dataset {}: {e}", args.dataset.display())))?;
    let examples = load_examples(&dataset_path)?;
    let splits = splits_for(&examples, &cfg.optimizer)?;

    let run_id = args
        .run_id
        .unwrap_or_else(|| chrono::Utc::now().format("run-%Y%m%dT%H%M%S%.3fZ").to_string());
    if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
        return Err(CliError::Config(format!("run id {run_id:?} is not a plain directory name")));
    }
    let run_dir = args.out.join(&run_id);
    if run_dir.exists() {
        if !args.force {
            return Err(CliError::Config(format!(
                "{} already exists; pass --force to overwrite it",
                run_dir.display()
            )));
        }
        fs::remove_dir_all(&run_dir).map_err(|e| CliError::Io(format!("{}: {e}", run_dir.display())))?;
    }
    fs::create_dir_all(&run_dir).map_err(|e| CliError::Io(format!("{}: {e}", run_dir.display())))?;

    let set = BackendSet::build(&cfg, &examples, Some(&run_dir.join("transcripts")))?;
    let mut manifest = RunManifest {
        run_id: run_id.clone(),
        config_path: fs::canonicalize(&args.config).unwrap_or(args.config.clone()),
        dataset_path,
        config: cfg.clone(),
        backends: set.names(),
        started_at: now(),
        ended_at: None,
        status: "running".into(),
        stop_reason: None,
        calls: None,
        total_calls: None,
    };
    manifest.write(&run_dir)?;
    log::info!(
        "run {run_id}: {} train, {} dev, {} test examples",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len()
    );
    let opt = Optimizer::new(cfg.optimizer.clone(), cfg.prompt(), splits, set.backends())
        .and_then(|o| o.with_output_dir(&run_dir))?;
    drive(opt, &run_dir, &mut manifest, args.stop_after)
}

fn drive(mut opt: Optimizer<'_>, run_dir: &Path, manifest: &mut RunManifest, stop_after: Option<u32>) -> Result<(), CliError> {
    let outcome = opt.run_until(stop_after);
    manifest.calls = Some(opt.state().calls);
    manifest.total_calls = Some(opt.state().calls.total());
    match outcome {
        Ok(RunOutcome::Finished(report)) => {
            manifest.ended_at = Some(now());
            manifest.status = "completed".into();
            manifest.stop_reason = Some(report.stop_reason.clone());
            manifest.write(run_dir)?;
            println!("stop reason:    {}", report.stop_reason);
            println!("iterations:     {}", report.iterations);
            println!("best dev score: {}", report.best_dev_score);
            println!("test accuracy:  {}", report.test_accuracy);
            println!("model calls:    {}", report.total_calls);
            println!("best prompt:    {}", run_dir.join("best_prompt.txt").display());
            Ok(())
        }
        Ok(RunOutcome::Halted { iteration }) => {
            manifest.status = "halted".into();
            manifest.write(run_dir)?;
            println!(
                "halted after iteration {iteration}; resume with: segopt resume {}",
                run_dir.join("checkpoints/latest.json").display()
            );
            Ok(())
        }
        Err(e) => {
            manifest.ended_at = Some(now());
            manifest.status = "failed".into();
            manifest.write(run_dir)?;
            Err(e.into())
        }
    }
}

/// The run directory owning a checkpoint file.
fn run_dir_of(checkpoint: &Path) -> PathBuf {
    let parent = checkpoint.parent().unwrap_or(Path::new("."));
    if parent.file_name().is_some_and(|n| n == "checkpoints") {
        parent.parent().unwrap_or(Path::new(".")).to_path_buf()
    } else {
        parent.to_path_buf()
    }
}

pub fn resume(checkpoint_path: &Path) -> Result<(), CliError> {
    let ckpt = load_checkpoint(checkpoint_path)?;
    if let Some(reason) = ckpt.state.stopped {
        println!(
            "run already stopped ({reason}) after {} iterations; nothing to do",
            ckpt.state.iteration
        );
        return Ok(());
    }
    let run_dir = run_dir_of(checkpoint_path);
    let mut manifest = RunManifest::read(&run_dir)?;
    let examples = load_examples(&manifest.dataset_path)?;
    let splits = splits_for(&examples, &ckpt.config)?;
    let set = BackendSet::build(&manifest.config, &examples, Some(&run_dir.join("transcripts")))?;
    log::info!("resuming run {} at iteration {}", manifest.run_id, ckpt.state.iteration);
    let opt = Optimizer::from_checkpoint(ckpt, splits, set.backends()).and_then(|o| o.with_output_dir(&run_dir))?;
    manifest.status = "running".into();
    drive(opt, &run_dir, &mut manifest, None)
}

pub struct EvaluateArgs {
    pub config: PathBuf,
    pub dataset: PathBuf,
    pub prompt_file: PathBuf,
    pub split: String,
    pub overrides: Overrides,
}

pub fn evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let prompt = fs::read_to_string(&args.prompt_file)
        .map_err(|e| CliError::Config(format!("prompt file {}: {e}", args.prompt_file.display())))?;
    if prompt.trim().is_empty() {
        return Err(CliError::Config(format!("prompt file {} is empty", args.prompt_file.display())));
    }
    let examples = load_examples(&args.dataset)?;
    let splits = splits_for(&examples, &cfg.optimizer)?;
    let split = splits
        .by_name(&args.split)
        .ok_or_else(|| CliError::Config(format!("unknown split {:?} (expected train, dev or test)", args.split)))?;
    let set = BackendSet::build(&cfg, &examples, None)?;
    let b = set.backends();
    let settings = EvalSettings {
        params: cfg.optimizer.generation.clone(),
        correctness_threshold: cfg.optimizer.correctness_threshold,
        multimodal: cfg.optimizer.multimodal,
        max_concurrency: cfg.optimizer.max_concurrency,
    };
    let results = Evaluator::new(b.task, b.grader, settings)
        .evaluate_prompt(&prompt, split)
        .map_err(|e| CliError::Backend(e.to_string()))?;
    let acc = accuracy(&results).map_err(|e| CliError::Config(e.to_string()))?;
    println!("accuracy: {acc}");
    println!();
    let mut w = csv::Writer::from_writer(std::io::stdout());
    w.write_record(["example_id", "grade", "correct"]).map_err(|e| CliError::Io(e.to_string()))?;
    for r in &results {
        w.write_record([r.example_id.clone(), r.grade.to_string(), r.correct.to_string()])
            .map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}

/// Formats without a negative zero.
fn num(x: f64) -> String {
    (x + 0.0).to_string()
}

fn csv_string(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

/// Builds the text report from a run's event log. Incomplete logs give a
/// partial report.
pub fn render_report(events: &[RunEvent]) -> String {
    let mut iterations: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    let mut attribution: BTreeMap<u32, Vec<Vec<String>>> = BTreeMap::new();
    let mut timeline: Vec<String> = Vec::new();
    let mut stop: Option<(String, CallCounts, u64, f64)> = None;
    for ev in events {
        match ev {
            RunEvent::IterationEnd {
                iteration,
                dev_acc,
                reward,
                drift,
                calls,
                ..
            } => {
                iterations.insert(
                    *iteration,
                    vec![
                        iteration.to_string(),
                        dev_acc.to_string(),
                        reward.to_string(),
                        drift.to_string(),
                        calls.to_string(),
                    ],
                );
            }
            RunEvent::Attribution { iteration, units, .. } => {
                let rows = units
                    .iter()
                    .map(|u| {
                        vec![
                            iteration.to_string(),
                            u.index.to_string(),
                            u.fingerprint.clone(),
                            num(u.raw),
                            num(u.blended),
                            u.delta.map(num).unwrap_or_default(),
                            u.preview.clone(),
                        ]
                    })
                    .collect();
                attribution.insert(*iteration, rows);
            }
            RunEvent::Accept {
                iteration,
                arm,
                reward,
                dev_score,
            } => timeline.push(format!(
                "iteration {iteration}: accepted {arm} (reward {reward}, dev {dev_score})"
            )),
            RunEvent::Protective {
                iteration,
                arm,
                drift,
                consecutive,
            } => timeline.push(format!(
                "iteration {iteration}: protective rollback, drift {drift}, arm {} eliminated, {consecutive} consecutive",
                arm.as_deref().unwrap_or("none")
            )),
            RunEvent::Resume { iteration } => timeline.push(format!("iteration {iteration}: resumed from checkpoint")),
            RunEvent::Error { iteration, message } => {
                timeline.push(format!("iteration {iteration}: error: {message}"))
            }
            RunEvent::Stop {
                iteration,
                reason,
                calls,
                total_calls,
                test_accuracy,
                ..
            } => {
                timeline.push(format!("iteration {iteration}: stopped ({reason})"));
                stop = Some((reason.clone(), *calls, *total_calls, *test_accuracy));
            }
            _ => {}
        }
    }
    let mut rows: Vec<Vec<String>> = iterations.into_values().collect();
    if let Some((_, _, total, _)) = &stop {
        let sum: u64 = rows.iter().map(|r| r[4].parse::<u64>().unwrap_or(0)).sum();
        if let Some(last) = rows.last_mut() {
            let own: u64 = last[4].parse().unwrap_or(0);
            last[4] = (own + total.saturating_sub(sum)).to_string();
        }
    }

    let mut out = String::new();
    out.push_str("== iterations ==\n");
    out.push_str(&csv_string(&["iteration", "dev_acc", "reward", "drift", "calls"], &rows));
    out.push_str("\n== attribution ==\n");
    let attr_rows: Vec<Vec<String>> = attribution.into_values().flatten().collect();
    out.push_str(&csv_string(
        &["iteration", "unit", "fingerprint", "raw", "blended", "delta", "preview"],
        &attr_rows,
    ));
    out.push_str("\n== calls ==\n");
    match &stop {
        Some((_, calls, total, _)) => {
            let rows = vec![
                vec!["task".to_string(), calls.task.to_string()],
                vec!["grader".to_string(), calls.grader.to_string()],
                vec!["optimizer".to_string(), calls.optimizer.to_string()],
                vec!["total".to_string(), total.to_string()],
            ];
            out.push_str(&csv_string(&["backend", "calls"], &rows));
        }
        None => {
            let sum: u64 = rows.iter().map(|r| r[4].parse::<u64>().unwrap_or(0)).sum();
            let _ = writeln!(out, "run not finished; {sum} calls logged so far");
        }
    }
    out.push_str("\n== timeline ==\n");
    for line in &timeline {
        out.push_str(line);
        out.push('\n');
    }
    if let Some((reason, _, _, test)) = &stop {
        let _ = writeln!(out, "\nstop reason: {reason}\ntest accuracy: {test}");
    }
    out
}

pub fn report(run_dir: &Path) -> Result<(), CliError> {
    let path = run_dir.join("events.jsonl");
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Checkpoint(format!("run log {}: {e}", path.display())))?;
    let (events, truncated) = read_events(&text);
    if events.is_empty() {
        return Err(CliError::Checkpoint(format!("run log {} has no readable events", path.display())));
    }
    if truncated {
        log::warn!("run log {} is truncated; the report is partial", path.display());
        eprintln!("warning: run log is truncated; the report below is partial");
    }
    print!("{}", render_report(&events));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_maps_to_its_run_dir() {
        assert_eq!(run_dir_of(Path::new("runs/a/checkpoints/latest.json")), Path::new("runs/a"));
        assert_eq!(run_dir_of(Path::new("runs/a/saved.json")), Path::new("runs/a"));
    }

    fn end(iteration: u32, calls: u64) -> RunEvent {
        RunEvent::IterationEnd {
            iteration,
            dev_acc: 0.5,
            reward: 0.0,
            drift: 0.0,
            calls,
            best_dev_score: 0.5,
        }
    }

    #[test]
    fn last_row_absorbs_the_remainder_and_replays_keep_the_latest() {
        let calls = CallCounts {
            task: 40,
            grader: 40,
            optimizer: 5,
        };
        let events = vec![
            end(1, 30),
            end(2, 99),
            end(2, 20),
            RunEvent::Stop {
                iteration: 2,
                reason: "no-improvement".into(),
                best_dev_score: 0.5,
                test_accuracy: 0.5,
                calls,
                total_calls: 85,
            },
        ];
        let text = render_report(&events);
        assert!(text.contains("1,0.5,0,0,30\n2,0.5,0,0,55\n"), "{text}");
        assert!(text.contains("total,85\n"));
    }

    #[test]
    fn unfinished_log_reports_calls_so_far() {
        let text = render_report(&[end(1, 12)]);
        assert!(text.contains("12 calls logged so far"), "{text}");
        assert!(num(-0.0) == "0");
    }
}
