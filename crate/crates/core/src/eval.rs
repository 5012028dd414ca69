//! Runs a prompt over examples: task call, then grader call, fanned out
//! over a bounded worker pool. Output order always matches input order.

use std::fmt;

use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};

use crate::backends::{encode_image, grade, BackendError, GenerationParams, ModelBackend, ModelRequest};
use crate::corpus::{EvalResult, Example};

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub params: GenerationParams,
    pub correctness_threshold: f64,
    pub multimodal: bool,
    pub max_concurrency: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            params: GenerationParams::default(),
            correctness_threshold: 60.0,
            multimodal: false,
            max_concurrency: 8,
        }
    }
}

/// Failures of one evaluation batch, by example id.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalError {
    pub failures: Vec<(String, BackendError)>,
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} example(s) failed:", self.failures.len())?;
        for (id, e) in &self.failures {
            write!(f, " [{id}: {e}]")?;
        }
        Ok(())
    }
}

impl std::error::Error for EvalError {}

pub struct Evaluator<'a> {
    task: &'a dyn ModelBackend,
    grader: &'a dyn ModelBackend,
    settings: EvalSettings,
    pool: ThreadPool,
}

impl<'a> Evaluator<'a> {
    pub fn new(task: &'a dyn ModelBackend, grader: &'a dyn ModelBackend, settings: EvalSettings) -> Self {
        let pool = ThreadPoolBuilder::new()
            .num_threads(settings.max_concurrency.max(1))
            .build()
            .expect("worker pool");
        Self {
            task,
            grader,
            settings,
            pool,
        }
    }

    pub fn settings(&self) -> &EvalSettings {
        &self.settings
    }

    /// The task-model request for one example.
    pub fn request(&self, prompt: &str, example: &Example) -> Result<ModelRequest, BackendError> {
        let image_payloads = if self.settings.multimodal {
            example
                .image_paths
                .iter()
                .map(|p| encode_image(p))
                .collect::<Result<_, _>>()?
        } else {
            Vec::new()
        };
        Ok(ModelRequest {
            system_prompt: prompt.to_string(),
            user_input: example.input_text.clone(),
            image_payloads,
            params: self.settings.params.clone(),
        })
    }

    pub fn evaluate_one(&self, prompt: &str, example: &Example) -> Result<EvalResult, BackendError> {
        let output = self.task.complete(&self.request(prompt, example)?)?;
        let score = grade(
            self.grader,
            &example.input_text,
            &example.target,
            &output,
            &self.settings.params,
        )?;
        Ok(EvalResult::new(
            example.id.clone(),
            output,
            score,
            self.settings.correctness_threshold,
        ))
    }

    /// Evaluates arbitrary (prompt, example) pairs concurrently.
    pub fn evaluate_pairs(&self, jobs: &[(&str, &Example)]) -> Vec<Result<EvalResult, BackendError>> {
        self.pool.install(|| {
            jobs.par_iter()
                .map(|(prompt, example)| self.evaluate_one(prompt, example))
                .collect()
        })
    }

    pub fn evaluate_prompt(&self, prompt: &str, examples: &[Example]) -> Result<Vec<EvalResult>, EvalError> {
        let jobs: Vec<(&str, &Example)> = examples.iter().map(|e| (prompt, e)).collect();
        let mut ok = Vec::with_capacity(examples.len());
        let mut failures = Vec::new();
        for (res, ex) in self.evaluate_pairs(&jobs).into_iter().zip(examples) {
            match res {
                Ok(r) => ok.push(r),
                Err(e) => failures.push((ex.id.clone(), e)),
            }
        }
        if failures.is_empty() {
            Ok(ok)
        } else {
            Err(EvalError { failures })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{FnBackend, MockGrader, MockOracleSpec, MockTaskBackend};
    use crate::corpus::accuracy;
    use std::collections::{BTreeMap, BTreeSet};
    use std::sync::{Arc, Mutex};

    fn examples(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                id: format!("e{i}"),
                input_text: format!("question {i}"),
                image_paths: vec![],
                target: format!("{i}"),
            })
            .collect()
    }

    #[test]
    fn clean_prompt_scores_one() {
        let ex = examples(5);
        let task = MockTaskBackend::new(MockOracleSpec::default(), &ex);
        let grader = MockGrader::new(100.0, 0.0);
        let ev = Evaluator::new(&task, &grader, EvalSettings::default());
        let r = ev.evaluate_prompt("Answer.", &ex).unwrap();
        assert_eq!(accuracy(&r).unwrap(), 1.0);
        assert_eq!(task.calls(), 5);
        assert_eq!(grader.calls(), 5);
    }

    #[test]
    fn harmful_marker_on_two_of_five() {
        let ex = examples(5);
        let mut fail_map = BTreeMap::new();
        for id in ["e1", "e3"] {
            fail_map.insert(id.to_string(), BTreeSet::from(["UNIT_BAD".to_string()]));
        }
        let spec = MockOracleSpec {
            fail_map,
            ..Default::default()
        };
        let task = MockTaskBackend::new(spec, &ex);
        let grader = MockGrader::new(100.0, 0.0);
        let ev = Evaluator::new(&task, &grader, EvalSettings::default());
        let r = ev.evaluate_prompt("Answer. UNIT_BAD", &ex).unwrap();
        assert!((accuracy(&r).unwrap() - 0.6).abs() < 1e-12);
        let ids: Vec<_> = r.iter().map(|x| x.example_id.as_str()).collect();
        assert_eq!(ids, ["e0", "e1", "e2", "e3", "e4"]);
        assert!(!r[1].correct && r[2].correct);
    }

    #[test]
    fn multimodal_requests_embed_images() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("a.png");
        std::fs::write(&img, [9u8, 8, 7, 6]).unwrap();
        let mut ex = examples(1);
        ex[0].image_paths.push(img.clone());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let seen2 = seen.clone();
        let task = FnBackend::new("t", move |r| {
            seen2.lock().unwrap().push(r.image_payloads.clone());
            Ok("0".into())
        });
        let grader = MockGrader::new(100.0, 0.0);
        let settings = EvalSettings {
            multimodal: true,
            ..Default::default()
        };
        Evaluator::new(&task, &grader, settings).evaluate_prompt("p", &ex).unwrap();
        let payloads = seen.lock().unwrap()[0].clone();
        assert_eq!(payloads.len(), 1);
        use base64::Engine;
        let decoded = base64::engine::general_purpose::STANDARD.decode(&payloads[0].data).unwrap();
        assert_eq!(decoded, std::fs::read(&img).unwrap());

        Evaluator::new(&task, &grader, EvalSettings::default()).evaluate_prompt("p", &ex).unwrap();
        assert!(seen.lock().unwrap()[1].is_empty());
    }

    #[test]
    fn failures_report_example_ids() {
        let ex = examples(3);
        let task = FnBackend::new("t", |r| {
            if r.user_input.ends_with('1') {
                Err(BackendError::Other {
                    backend: "t".into(),
                    message: "boom".into(),
                })
            } else {
                Ok("x".into())
            }
        });
        let grader = MockGrader::new(100.0, 0.0);
        let err = Evaluator::new(&task, &grader, EvalSettings::default())
            .evaluate_prompt("p", &ex)
            .unwrap_err();
        assert_eq!(err.failures.len(), 1);
        assert_eq!(err.failures[0].0, "e1");
        assert!(err.to_string().contains("e1"));
    }
}
