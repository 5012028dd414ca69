//! Run configuration file and backend construction.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use segopt_core::backends::mock::{MockGrader, MockOracleSpec, MockTaskBackend, ScriptedEdit, ScriptedEditor};
use segopt_core::backends::remote::{ChatBackend, RemoteConfig, TranscriptLog, UreqTransport};
use segopt_core::backends::{Backends, ModelBackend};
use segopt_core::corpus::Example;
use segopt_core::optimizer::OptimizerConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_prompt: Option<String>,
    /// Read relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_prompt_file: Option<PathBuf>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub backends: BackendsConfig,
    #[serde(default)]
    pub mock: MockConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    #[serde(default)]
    pub task: BackendSpec,
    #[serde(default)]
    pub grader: BackendSpec,
    #[serde(default)]
    pub optimizer: BackendSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// Offline oracle for the task and grader roles, scripted edit table
    /// for the optimizer role.
    #[default]
    Mock,
    /// OpenAI-compatible chat completions endpoint.
    Remote(RemoteConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    pub harmful_markers: Vec<String>,
    pub helpful_markers: Vec<String>,
    pub fail_map: BTreeMap<String, BTreeSet<String>>,
    pub pass_grade: f64,
    pub fail_grade: f64,
    pub edits: Vec<ScriptedEdit>,
}

impl Default for MockConfig {
    fn default() -> Self {
        let spec = MockOracleSpec::default();
        Self {
            harmful_markers: spec.harmful_markers,
            helpful_markers: spec.helpful_markers,
            fail_map: spec.fail_map,
            pass_grade: spec.pass_grade,
            fail_grade: spec.fail_grade,
            edits: Vec::new(),
        }
    }
}

impl MockConfig {
    pub fn oracle(&self) -> MockOracleSpec {
        MockOracleSpec {
            harmful_markers: self.harmful_markers.clone(),
            helpful_markers: self.helpful_markers.clone(),
            fail_map: self.fail_map.clone(),
            pass_grade: self.pass_grade,
            fail_grade: self.fail_grade,
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub no_prioritize_weak: bool,
    pub no_structured_reasoning: bool,
    pub text_only: bool,
    pub max_concurrency: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut OptimizerConfig) {
        if self.no_prioritize_weak {
            cfg.meta.prioritize_weak = false;
        }
        if self.no_structured_reasoning {
            cfg.meta.structured_reasoning = false;
        }
        if self.text_only {
            cfg.multimodal = false;
        }
        if let Some(n) = self.max_concurrency {
            cfg.max_concurrency = n;
        }
    }
}

impl CliConfig {
    /// Parses the file and inlines `initial_prompt_file`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: CliConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(file) = cfg.initial_prompt_file.take() {
            if cfg.initial_prompt.is_some() {
                return Err(CliError::Config(
                    "initial_prompt: set either initial_prompt or initial_prompt_file, not both".into(),
                ));
            }
            let full = path.parent().unwrap_or(Path::new(".")).join(&file);
            let prompt = std::fs::read_to_string(&full)
                .map_err(|e| CliError::Config(format!("initial_prompt_file: cannot read {}: {e}", full.display())))?;
            cfg.initial_prompt = Some(prompt);
        }
        Ok(cfg)
    }

    /// All problems at once, one line per field.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut issues: Vec<String> = Vec::new();
        match &self.initial_prompt {
            None => issues.push("initial_prompt: missing".into()),
            Some(p) if p.trim().is_empty() => issues.push("initial_prompt: must not be empty".into()),
            _ => {}
        }
        if let Err(list) = self.optimizer.validate() {
            issues.extend(list.iter().map(|i| format!("optimizer.{i}")));
        }
        if let Err(e) = self.mock.oracle().validate() {
            issues.push(format!("mock: {e}"));
        }
        for (role, spec) in self.roles() {
            if let BackendSpec::Remote(r) = spec {
                if r.base_url.trim().is_empty() {
                    issues.push(format!("backends.{role}.base_url: must not be empty"));
                }
                if r.model.trim().is_empty() {
                    issues.push(format!("backends.{role}.model: must not be empty"));
                }
                if r.max_attempts == 0 {
                    issues.push(format!("backends.{role}.max_attempts: must be at least 1"));
                }
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(format!("invalid configuration:\n  {}", issues.join("\n  "))))
        }
    }

    fn roles(&self) -> [(&'static str, &BackendSpec); 3] {
        [
            ("task", &self.backends.task),
            ("grader", &self.backends.grader),
            ("optimizer", &self.backends.optimizer),
        ]
    }

    pub fn prompt(&self) -> &str {
        self.initial_prompt.as_deref().unwrap_or_default()
    }
}

/// Owns the three backends of a run.
pub struct BackendSet {
    task: Box<dyn ModelBackend>,
    grader: Box<dyn ModelBackend>,
    optimizer: Box<dyn ModelBackend>,
}

impl BackendSet {
    /// `transcripts` receives one JSONL file per remote role.
    pub fn build(cfg: &CliConfig, examples: &[Example], transcripts: Option<&Path>) -> Result<Self, CliError> {
        let oracle = cfg.mock.oracle();
        let remote = |role: &str, r: &RemoteConfig| -> Result<Box<dyn ModelBackend>, CliError> {
            let transport = Arc::new(UreqTransport::new(Duration::from_secs(r.timeout_secs)));
            let mut backend = ChatBackend::new(r.clone(), transport).map_err(|e| CliError::Backend(e.to_string()))?;
            if let Some(dir) = transcripts {
                std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
                let path = dir.join(format!("{role}.jsonl"));
                let log = TranscriptLog::open(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                backend = backend.with_transcript(Arc::new(log));
            }
            Ok(Box::new(backend))
        };
        let task: Box<dyn ModelBackend> = match &cfg.backends.task {
            BackendSpec::Mock => Box::new(MockTaskBackend::new(oracle.clone(), examples)),
            BackendSpec::Remote(r) => remote("task", r)?,
        };
        let grader: Box<dyn ModelBackend> = match &cfg.backends.grader {
            BackendSpec::Mock => Box::new(MockGrader::from_spec(&oracle)),
            BackendSpec::Remote(r) => remote("grader", r)?,
        };
        let optimizer: Box<dyn ModelBackend> = match &cfg.backends.optimizer {
            BackendSpec::Mock => Box::new(ScriptedEditor::new(cfg.mock.edits.clone())),
            BackendSpec::Remote(r) => remote("optimizer", r)?,
        };
        Ok(Self { task, grader, optimizer })
    }

    pub fn backends(&self) -> Backends<'_> {
        Backends {
            task: self.task.as_ref(),
            grader: self.grader.as_ref(),
            optimizer: self.optimizer.as_ref(),
        }
    }

    pub fn names(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("task".to_string(), self.task.name().to_string()),
            ("grader".to_string(), self.grader.name().to_string()),
            ("optimizer".to_string(), self.optimizer.name().to_string()),
        ])
    }
}
