//! Scoring prompts on labeled examples.

mod dataset;
mod extract;
mod metrics;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dataset::{load_jsonl, Dataset, DatasetError, ExampleRecord, Gold, Split, SplitManifest};
pub use extract::Extraction;
pub use metrics::{confusion, exact_match_rate, macro_f1, LabelTally, Metric};

use crate::critic::BatchItem;
use crate::gateway::{Gateway, GatewayError, GenerationRequest, RequestTag};
use crate::tree::digest_text;

pub const DEFAULT_INPUT_WRAPPER: &str = "{prompt}\n\nInput: {input}";

fn default_wrapper() -> String {
    DEFAULT_INPUT_WRAPPER.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub label_set: Vec<String>,
    pub metric: Metric,
    pub extraction: Extraction,
    /// `{prompt}` and `{input}` are substituted.
    #[serde(default = "default_wrapper")]
    pub input_wrapper: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("no records to evaluate")]
    EmptyRecords,
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, labels: &[&str], metric: Metric, extraction: Extraction) -> Self {
        Self {
            name: name.into(),
            label_set: labels.iter().map(|s| s.to_string()).collect(),
            metric,
            extraction,
            input_wrapper: default_wrapper(),
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.label_set.is_empty() {
            return Err(EvalError::InvalidTask("label_set is empty".into()));
        }
        if !self.input_wrapper.contains("{input}") {
            return Err(EvalError::InvalidTask("input_wrapper lacks `{input}`".into()));
        }
        self.extraction.check_alphabet(&self.label_set).map_err(EvalError::InvalidTask)
    }

    pub fn compose(&self, prompt: &str, input: &str) -> String {
        self.input_wrapper.replace("{prompt}", prompt).replace("{input}", input)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prediction {
    /// Nothing extractable; always counted wrong.
    Abstain,
    Answer(BTreeSet<String>),
}

impl Prediction {
    pub fn labels(&self) -> Option<&BTreeSet<String>> {
        match self {
            Prediction::Abstain => None,
            Prediction::Answer(s) => Some(s),
        }
    }

    pub fn display(&self) -> String {
        match self {
            Prediction::Abstain => "abstain".into(),
            Prediction::Answer(s) => s.iter().cloned().collect::<Vec<_>>().join(", "),
        }
    }

    pub fn is_correct(&self, gold: &Gold) -> bool {
        self.labels().is_some_and(|s| *s == gold.set())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub id: String,
    pub prediction: Prediction,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub score: f64,
    pub per_example: Vec<ExampleOutcome>,
    pub confusion: BTreeMap<String, LabelTally>,
    pub sample_size: usize,
}

impl EvalResult {
    pub fn from_predictions(records: &[ExampleRecord], predictions: Vec<Prediction>, metric: Metric) -> EvalResult {
        let golds: Vec<BTreeSet<String>> = records.iter().map(|r| r.gold.set()).collect();
        let confusion = confusion(golds.iter().zip(predictions.iter().map(Prediction::labels)));
        let per_example: Vec<ExampleOutcome> = records
            .iter()
            .zip(predictions)
            .map(|(r, p)| ExampleOutcome {
                id: r.id.clone(),
                correct: p.is_correct(&r.gold),
                prediction: p,
            })
            .collect();
        let correct: Vec<bool> = per_example.iter().map(|e| e.correct).collect();
        EvalResult {
            score: metric.compute(&correct, &confusion),
            sample_size: per_example.len(),
            per_example,
            confusion,
        }
    }

    /// Recomputes the score from the stored outcomes.
    pub fn recompute(&self, metric: Metric) -> f64 {
        let correct: Vec<bool> = self.per_example.iter().map(|e| e.correct).collect();
        metric.compute(&correct, &self.confusion)
    }
}

/// One deterministic model call plus answer extraction.
pub fn predict(prompt: &str, record: &ExampleRecord, task: &TaskSpec, gateway: &Gateway) -> Result<Prediction, EvalError> {
    let req = GenerationRequest::new(RequestTag::Evaluation, "", task.compose(prompt, &record.input)).with_temperature(0.0);
    let reply = gateway.generate(&req)?;
    Ok(task.extraction.extract(&reply, &task.label_set))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub prompt_digest: String,
    pub record_id: String,
    pub prediction: Prediction,
}

/// Task-bound scorer with a prediction cache keyed by (prompt digest,
/// record id).
#[derive(Debug)]
pub struct Evaluator {
    pub task: TaskSpec,
    pub parallelism: usize,
    cache: Mutex<HashMap<(String, String), Prediction>>,
}

impl Evaluator {
    pub fn new(task: TaskSpec) -> Self {
        Self {
            task,
            parallelism: 8,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.parallelism = n.max(1);
        self
    }

    pub fn cache_entries(&self) -> Vec<CacheEntry> {
        let mut out: Vec<CacheEntry> = self
            .cache
            .lock()
            .unwrap()
            .iter()
            .map(|((d, id), p)| CacheEntry {
                prompt_digest: d.clone(),
                record_id: id.clone(),
                prediction: p.clone(),
            })
            .collect();
        out.sort_by(|a, b| (&a.prompt_digest, &a.record_id).cmp(&(&b.prompt_digest, &b.record_id)));
        out
    }

    pub fn restore_cache(&self, entries: &[CacheEntry]) {
        let mut cache = self.cache.lock().unwrap();
        cache.clear();
        for e in entries {
            cache.insert((e.prompt_digest.clone(), e.record_id.clone()), e.prediction.clone());
        }
    }

    /// Predictions in record order, fanning out over uncached records.
    pub fn predict_all(&self, prompt: &str, records: &[ExampleRecord], gateway: &Gateway) -> Result<Vec<Prediction>, EvalError> {
        let digest = digest_text(prompt);
        let mut out: Vec<Option<Prediction>> = {
            let cache = self.cache.lock().unwrap();
            records.iter().map(|r| cache.get(&(digest.clone(), r.id.clone())).cloned()).collect()
        };
        let todo: Vec<usize> = (0..records.len()).filter(|&i| out[i].is_none()).collect();
        if !todo.is_empty() {
            let next = AtomicUsize::new(0);
            let results: Mutex<Vec<(usize, Result<Prediction, EvalError>)>> = Mutex::new(Vec::new());
            std::thread::scope(|s| {
                for _ in 0..self.parallelism.min(todo.len()) {
                    s.spawn(|| loop {
                        let k = next.fetch_add(1, Ordering::SeqCst);
                        let Some(&i) = todo.get(k) else { break };
                        let r = predict(prompt, &records[i], &self.task, gateway);
                        results.lock().unwrap().push((i, r));
                    });
                }
            });
            let mut results = results.into_inner().unwrap();
            results.sort_by_key(|(i, _)| *i);
            let mut cache = self.cache.lock().unwrap();
            for (i, r) in results {
                let p = r?;
                cache.insert((digest.clone(), records[i].id.clone()), p.clone());
                out[i] = Some(p);
            }
        }
        Ok(out.into_iter().map(|p| p.expect("every record predicted")).collect())
    }

    pub fn score(&self, prompt: &str, records: &[ExampleRecord], gateway: &Gateway) -> Result<EvalResult, EvalError> {
        if records.is_empty() {
            return Err(EvalError::EmptyRecords);
        }
        let predictions = self.predict_all(prompt, records, gateway)?;
        Ok(EvalResult::from_predictions(records, predictions, self.task.metric))
    }

    /// Up to `limit` wrong predictions, taken in order from a shuffle of
    /// `records` drawn with `rng`.
    pub fn misclassified(
        &self,
        prompt: &str,
        records: &[ExampleRecord],
        gateway: &Gateway,
        limit: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<BatchItem>, EvalError> {
        let mut order: Vec<&ExampleRecord> = records.iter().collect();
        order.shuffle(rng);
        let chunk = limit.max(self.parallelism).max(1);
        let mut out = Vec::new();
        for part in order.chunks(chunk) {
            let owned: Vec<ExampleRecord> = part.iter().map(|r| (*r).clone()).collect();
            let preds = self.predict_all(prompt, &owned, gateway)?;
            for (r, p) in owned.into_iter().zip(preds) {
                if out.len() == limit {
                    return Ok(out);
                }
                if !p.is_correct(&r.gold) {
                    out.push(BatchItem {
                        id: r.id,
                        input: r.input,
                        gold: r.gold.display(),
                        prediction: p.display(),
                    });
                }
            }
        }
        Ok(out)
    }
}

/// Uncached one-shot scoring.
pub fn score(prompt: &str, records: &[ExampleRecord], task: &TaskSpec, gateway: &Gateway) -> Result<EvalResult, EvalError> {
    Evaluator::new(task.clone()).score(prompt, records, gateway)
}
