//! Bandit-guided beam search over prompt candidates.

mod run;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use run::{optimize, Checkpoint, Ranked, Search, SearchOutcome, SearchState, StepSummary, StopReason, CHECKPOINT_FORMAT};

use crate::actor::StageRecord;
use crate::eval::{DatasetError, EvalError, Evaluator, ExampleRecord};
use crate::gateway::{Gateway, GatewayError};
use crate::tree::{PromptTree, TreeError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("initial prompt: {0}")]
    Prompt(#[from] TreeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("every candidate in the pool is quarantined")]
    NoViableCandidates,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    NodeBased,
    PatternBased,
}

fn default_k() -> usize {
    4
}
fn default_g() -> usize {
    4
}
fn default_steps() -> usize {
    8
}
fn default_budget() -> usize {
    384
}
fn default_step_cap() -> usize {
    16
}
fn default_c() -> f64 {
    2.0
}
fn default_rounds() -> usize {
    24
}
fn default_sample() -> usize {
    8
}
fn default_batch() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    /// K: candidates selected for expansion per step.
    #[serde(default = "default_k")]
    pub beam_select: usize,
    /// g: reflection groups (and so children) per selected candidate.
    #[serde(default = "default_g")]
    pub groups: usize,
    #[serde(default = "default_steps")]
    pub max_steps: usize,
    /// Total candidates ever created, the initial prompt included.
    #[serde(default = "default_budget")]
    pub candidate_budget: usize,
    #[serde(default = "default_step_cap")]
    pub step_candidate_cap: usize,
    #[serde(default = "default_c")]
    pub ucb_c: f64,
    /// T: bandit rounds per selection.
    #[serde(default = "default_rounds")]
    pub ucb_rounds: usize,
    /// Validation examples drawn per bandit round.
    #[serde(default = "default_sample")]
    pub ucb_sample_size: usize,
    #[serde(default = "default_k")]
    pub top_b: usize,
    #[serde(default = "default_batch")]
    pub error_batch_limit: usize,
    #[serde(default)]
    pub rephrase_enabled: bool,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let positive = [
            ("beam_select", self.beam_select),
            ("groups", self.groups),
            ("max_steps", self.max_steps),
            ("candidate_budget", self.candidate_budget),
            ("step_candidate_cap", self.step_candidate_cap),
            ("ucb_rounds", self.ucb_rounds),
            ("ucb_sample_size", self.ucb_sample_size),
            ("top_b", self.top_b),
            ("error_batch_limit", self.error_batch_limit),
        ];
        for (name, v) in positive {
            // max_steps = 0 is a valid "score the initial prompt" run.
            if v == 0 && name != "max_steps" {
                return Err(SearchError::Config(format!("`{name}` must be positive")));
            }
        }
        if !(self.ucb_c >= 0.0 && self.ucb_c.is_finite()) {
            return Err(SearchError::Config("`ucb_c` must be a non-negative number".into()));
        }
        if self.beam_select * self.groups > self.step_candidate_cap {
            return Err(SearchError::Config(format!(
                "beam_select * groups = {} exceeds step_candidate_cap {}",
                self.beam_select * self.groups,
                self.step_candidate_cap
            )));
        }
        Ok(())
    }

    /// Independent random stream for one purpose within one step.
    pub fn rng(&self, step: usize, stream: u32) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((step as u64) << 32) | stream as u64);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Initial,
    Expansion,
    Rephrase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub parent: Option<String>,
    pub step: usize,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<String>,
    /// Shared by every child expanded from the same parent in the same step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structural: Option<StageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<StageRecord>,
    #[serde(default)]
    pub reflection_digests: Vec<String>,
}

impl Lineage {
    pub fn initial() -> Self {
        Self {
            parent: None,
            step: 0,
            origin: Origin::Initial,
            group_id: None,
            structural: None,
            error: None,
            reflection_digests: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub tree: PromptTree,
    pub rendered: String,
    /// Σ r·|sample| over bandit evaluations.
    pub reward_weighted_sum: f64,
    /// Total examples evaluated.
    pub eval_count: usize,
    pub pull_count: usize,
    #[serde(default)]
    pub quarantined: bool,
    pub lineage: Lineage,
    pub born_step: usize,
}

impl Candidate {
    pub fn new(id: impl Into<String>, tree: PromptTree, lineage: Lineage, born_step: usize) -> Self {
        Self {
            id: id.into(),
            rendered: tree.render(),
            tree,
            reward_weighted_sum: 0.0,
            eval_count: 0,
            pull_count: 0,
            quarantined: false,
            lineage,
            born_step,
        }
    }

    /// Sample-size weighted mean reward; `None` before any evaluation.
    /// Quarantined candidates read as 0.
    pub fn mean(&self) -> Option<f64> {
        if self.quarantined {
            Some(0.0)
        } else if self.eval_count == 0 {
            None
        } else {
            Some(self.reward_weighted_sum / self.eval_count as f64)
        }
    }

    pub fn record(&mut self, reward: f64, sample_size: usize) {
        self.reward_weighted_sum += reward * sample_size as f64;
        self.eval_count += sample_size;
        self.pull_count += 1;
    }

    pub fn ucb(&self, t: usize, c: f64) -> f64 {
        ucb_score(self.mean().unwrap_or(0.0), self.eval_count, t, c)
    }
}

/// μ̂ + c·sqrt(ln t / n); unevaluated arms score +infinity.
pub fn ucb_score(mean: f64, n: usize, t: usize, c: f64) -> f64 {
    if n == 0 {
        return f64::INFINITY;
    }
    if c == 0.0 {
        return mean;
    }
    mean + c * ((t.max(1) as f64).ln() / n as f64).sqrt()
}

/// Pool indices ordered best first: mean (unevaluated last), then the
/// younger candidate, then id.
pub fn rank_by_mean(pool: &[Candidate]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ca, cb) = (&pool[a], &pool[b]);
        let ma = ca.mean().unwrap_or(f64::NEG_INFINITY);
        let mb = cb.mean().unwrap_or(f64::NEG_INFINITY);
        mb.total_cmp(&ma)
            .then(cb.born_step.cmp(&ca.born_step))
            .then(ca.id.cmp(&cb.id))
    });
    idx
}

fn is_fatal(e: &EvalError) -> bool {
    matches!(
        e,
        EvalError::Gateway(GatewayError::BudgetExceeded { .. } | GatewayError::BackendUnavailable { .. } | GatewayError::State(_))
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BanditParams {
    pub rounds: usize,
    pub sample_size: usize,
    pub c: f64,
}

impl From<&SearchConfig> for BanditParams {
    fn from(c: &SearchConfig) -> Self {
        Self {
            rounds: c.ucb_rounds,
            sample_size: c.ucb_sample_size,
            c: c.ucb_c,
        }
    }
}

/// Runs `params.rounds` UCB rounds over the pool, each evaluating the
/// argmax candidate on a fresh validation sample, and returns the indices
/// of the `count` best candidates by mean.
pub fn ucb_select(
    pool: &mut [Candidate],
    count: usize,
    val: &[ExampleRecord],
    evaluator: &Evaluator,
    gateway: &Gateway,
    params: BanditParams,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, SearchError> {
    if val.is_empty() {
        return Err(EvalError::EmptyRecords.into());
    }
    let m = params.sample_size.min(val.len());
    for t in 1..=params.rounds {
        let Some(arm) = (0..pool.len())
            .filter(|&i| !pool[i].quarantined)
            .max_by(|&a, &b| pool[a].ucb(t, params.c).total_cmp(&pool[b].ucb(t, params.c)).then(b.cmp(&a)))
        else {
            return Err(SearchError::NoViableCandidates);
        };
        let records: Vec<ExampleRecord> = sample(rng, val.len(), m).into_iter().map(|i| val[i].clone()).collect();
        match evaluator.score(&pool[arm].rendered, &records, gateway) {
            Ok(r) => pool[arm].record(r.score, r.sample_size),
            Err(e) if is_fatal(&e) => return Err(e.into()),
            Err(e) => {
                log::warn!("candidate {} quarantined: {e}", pool[arm].id);
                pool[arm].quarantined = true;
            }
        }
    }
    Ok(rank_by_mean(pool).into_iter().take(count).collect())
}
