//! Model access: the task model that executes prompts, the optimizer model
//! that writes edits, and the grader that scores answers.

mod grader;
mod image;
pub mod mock;
pub mod remote;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use grader::{grade, parse_grader_prompt, parse_score, render_grader_prompt, REASK_SUFFIX};
pub use image::{encode_image, media_type_for};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("authentication failed for {backend}: {message}")]
    Auth { backend: String, message: String },
    #[error("missing credentials: environment variable {var} is not set")]
    MissingCredentials { var: String },
    #[error("{backend}: gave up after {attempts} attempts, last error: {last}")]
    RetryExhausted {
        backend: String,
        attempts: u32,
        last: String,
    },
    #[error("{backend}: HTTP {status}: {body}")]
    Http {
        backend: String,
        status: u16,
        body: String,
    },
    #[error("{backend}: unrecognized response: {message}")]
    Schema { backend: String, message: String },
    #[error("unsupported image extension {0:?}")]
    UnknownMediaType(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("grader reply has no score: {0:?}")]
    NoScore(String),
    #[error("grader score {0} outside [0, 100]")]
    ScoreOutOfRange(f64),
    #[error("{backend}: {message}")]
    Other { backend: String, message: String },
}

/// Sampling parameters held fixed for every task-model call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub presence_penalty: f64,
    pub frequency_penalty: f64,
    pub max_tokens: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            presence_penalty: 0.0,
            frequency_penalty: 0.0,
            max_tokens: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePayload {
    pub media_type: String,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub system_prompt: String,
    pub user_input: String,
    pub image_payloads: Vec<ImagePayload>,
    pub params: GenerationParams,
}

impl ModelRequest {
    pub fn text(system_prompt: impl Into<String>, user_input: impl Into<String>, params: GenerationParams) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_input: user_input.into(),
            image_payloads: Vec::new(),
            params,
        }
    }
}

/// Monotone call counter shared by all backend implementations.
#[derive(Debug, Default)]
pub struct CallCounter(AtomicU64);

impl CallCounter {
    pub fn record(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// A chat model. Implementors supply `generate`; callers go through
/// `complete`, which counts every call whether it succeeds or fails.
pub trait ModelBackend: Send + Sync {
    fn name(&self) -> &str;

    fn counter(&self) -> &CallCounter;

    fn generate(&self, request: &ModelRequest) -> Result<String, BackendError>;

    fn complete(&self, request: &ModelRequest) -> Result<String, BackendError> {
        let out = self.generate(request);
        self.counter().record();
        out
    }

    fn calls(&self) -> u64 {
        self.counter().get()
    }
}

/// The three model roles of an optimization run.
#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub task: &'a dyn ModelBackend,
    pub grader: &'a dyn ModelBackend,
    pub optimizer: &'a dyn ModelBackend,
}

impl Backends<'_> {
    pub fn call_counts(&self) -> CallCounts {
        CallCounts {
            task: self.task.calls(),
            grader: self.grader.calls(),
            optimizer: self.optimizer.calls(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub task: u64,
    pub grader: u64,
    pub optimizer: u64,
}

impl CallCounts {
    pub fn total(&self) -> u64 {
        self.task + self.grader + self.optimizer
    }

    pub fn plus(&self, other: &CallCounts) -> CallCounts {
        CallCounts {
            task: self.task + other.task,
            grader: self.grader + other.grader,
            optimizer: self.optimizer + other.optimizer,
        }
    }

    pub fn minus(&self, other: &CallCounts) -> CallCounts {
        CallCounts {
            task: self.task - other.task,
            grader: self.grader - other.grader,
            optimizer: self.optimizer - other.optimizer,
        }
    }
}
