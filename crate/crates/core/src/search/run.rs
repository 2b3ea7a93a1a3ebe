use serde::{Deserialize, Serialize};

use super::{ucb_select, Aggregation, BanditParams, Candidate, Lineage, Origin, SearchConfig, SearchError};
use crate::actor::{self, ActorError, Stage, StageRecord};
use crate::critic::{self, CriticError, ReflectionGroup};
use crate::eval::{CacheEntry, Dataset, EvalError, Evaluator, TaskSpec};
use crate::gateway::{Gateway, GatewayError, GatewaySnapshot};
use crate::tree::{parse_markdown, PromptTree};

pub const CHECKPOINT_FORMAT: &str = "treeprompt-checkpoint/1";

/// Random stream used by the final selection.
const FINAL_STREAM: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    BudgetReached,
    NoNewCandidates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub selected: Vec<String>,
    pub created: Vec<String>,
    /// Best bandit mean in the pool after selection.
    pub best_mean: f64,
    pub pool_size: usize,
    #[serde(default)]
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    /// Completed steps.
    pub step: usize,
    pub pool: Vec<Candidate>,
    pub history: Vec<StepSummary>,
    #[serde(default)]
    pub stop: Option<StopReason>,
}

impl SearchState {
    pub fn new(initial: PromptTree) -> Self {
        Self {
            step: 0,
            pool: vec![Candidate::new("c0000", initial, Lineage::initial(), 0)],
            history: Vec::new(),
            stop: None,
        }
    }

    pub fn candidate(&self, id: &str) -> Option<&Candidate> {
        self.pool.iter().find(|c| c.id == id)
    }

    fn next_id(&self) -> String {
        format!("c{:04}", self.pool.len())
    }
}

/// Everything needed to continue a run after a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: SearchConfig,
    pub state: SearchState,
    pub gateway: GatewaySnapshot,
    pub eval_cache: Vec<CacheEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub id: String,
    pub prompt: String,
    /// Score on the full validation split.
    pub final_score: f64,
    /// Bandit estimate before the final evaluation.
    pub mean_estimate: Option<f64>,
    pub lineage: Lineage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub initial_score: f64,
    pub ranking: Vec<Ranked>,
    pub stop: Option<StopReason>,
    pub steps: usize,
    pub candidates: usize,
}

fn gateway_fatal(e: &GatewayError) -> bool {
    matches!(
        e,
        GatewayError::BudgetExceeded { .. } | GatewayError::BackendUnavailable { .. } | GatewayError::State(_)
    )
}

fn critic_fatal(e: &CriticError) -> Option<GatewayError> {
    match e {
        CriticError::Gateway(g) if gateway_fatal(g) => Some(g.clone()),
        _ => None,
    }
}

fn actor_fatal(e: &ActorError) -> Option<GatewayError> {
    match e {
        ActorError::Gateway(g) if gateway_fatal(g) => Some(g.clone()),
        _ => None,
    }
}

fn eval_fatal(e: EvalError) -> Result<EvalError, SearchError> {
    match e {
        EvalError::Gateway(g) if gateway_fatal(&g) => Err(g.into()),
        other => Ok(other),
    }
}

/// One optimization run's collaborators.
pub struct Search<'a> {
    pub config: &'a SearchConfig,
    pub evaluator: &'a Evaluator,
    pub data: &'a Dataset,
    pub gateway: &'a Gateway,
}

impl Search<'_> {
    fn task(&self) -> &TaskSpec {
        &self.evaluator.task
    }

    fn bandit(&self) -> BanditParams {
        BanditParams::from(self.config)
    }

    pub fn checkpoint(&self, state: &SearchState) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            state: state.clone(),
            gateway: self.gateway.snapshot(),
            eval_cache: self.evaluator.cache_entries(),
        }
    }

    /// Restores gateway and cache from `cp` and returns its state.
    pub fn resume(&self, cp: &Checkpoint) -> Result<SearchState, SearchError> {
        if cp.format != CHECKPOINT_FORMAT {
            return Err(SearchError::Checkpoint(format!("unsupported format `{}`", cp.format)));
        }
        if cp.config != *self.config {
            return Err(SearchError::Checkpoint("search config differs from the checkpoint's".into()));
        }
        self.gateway.restore(&cp.gateway)?;
        self.evaluator.restore_cache(&cp.eval_cache);
        Ok(cp.state.clone())
    }

    fn structural_stage(&self, parent: &Candidate, diag: &mut Vec<String>) -> Result<(Stage, Vec<String>), SearchError> {
        let unchanged = || Stage {
            tree: parent.tree.clone(),
            record: StageRecord::default(),
        };
        let reflection = match critic::structural_reflection(&parent.tree, self.gateway) {
            Ok(r) => r,
            Err(e) => {
                if let Some(g) = critic_fatal(&e) {
                    return Err(g.into());
                }
                diag.push(format!("{}: structural critique failed: {e}", parent.id));
                return Ok((unchanged(), Vec::new()));
            }
        };
        let digests = vec![reflection.digest()];
        match actor::run_stage(&parent.tree, &reflection, self.gateway) {
            Ok(s) => Ok((s, digests)),
            Err(e) => {
                if let Some(g) = actor_fatal(&e) {
                    return Err(g.into());
                }
                diag.push(format!("{}: structural actions failed: {e}", parent.id));
                Ok((unchanged(), digests))
            }
        }
    }

    fn groups(&self, parent: &Candidate, k: usize, step: usize, diag: &mut Vec<String>) -> Result<Vec<ReflectionGroup>, SearchError> {
        let mut rng = self.config.rng(step, 1 + k as u32);
        let batch = match self.evaluator.misclassified(
            &parent.rendered,
            &self.data.train,
            self.gateway,
            self.config.error_batch_limit,
            &mut rng,
        ) {
            Ok(b) => b,
            Err(e) => {
                let e = eval_fatal(e)?;
                diag.push(format!("{}: error batch failed: {e}", parent.id));
                return Ok(Vec::new());
            }
        };
        if batch.is_empty() {
            diag.push(format!("{}: no misclassified training examples", parent.id));
            return Ok(Vec::new());
        }
        let groups = match self.config.aggregation {
            Aggregation::NodeBased => critic::error_reflections(&parent.tree, &batch, self.gateway).map(|r| {
                if !r.uncovered.is_empty() {
                    diag.push(format!("{}: critic skipped examples {:?}", parent.id, r.uncovered));
                }
                critic::cap_groups(critic::aggregate_node_based(&r.reflections), self.config.groups)
            }),
            Aggregation::PatternBased => {
                critic::aggregate_pattern_based(&parent.tree, &batch, self.config.groups, self.gateway)
            }
        };
        match groups {
            Ok(g) => Ok(g),
            Err(e) => {
                if let Some(g) = critic_fatal(&e) {
                    return Err(g.into());
                }
                diag.push(format!("{}: error critique failed: {e}", parent.id));
                Ok(Vec::new())
            }
        }
    }

    /// Select, reflect, aggregate and expand once.
    pub fn run_step(&self, state: &mut SearchState) -> Result<StepSummary, SearchError> {
        let step = state.step + 1;
        let budget = self.config.candidate_budget;
        let mut rng = self.config.rng(step, 0);
        let selected = ucb_select(
            &mut state.pool,
            self.config.beam_select,
            &self.data.val,
            self.evaluator,
            self.gateway,
            self.bandit(),
            &mut rng,
        )?;
        let mut diagnostics = Vec::new();
        let mut created = Vec::new();
        for (k, &idx) in selected.iter().enumerate() {
            let parent = state.pool[idx].clone();
            if state.pool.len() >= budget {
                diagnostics.push("candidate budget reached".into());
                break;
            }
            let (stage, structural_digests) = self.structural_stage(&parent, &mut diagnostics)?;
            for group in self.groups(&parent, k, step, &mut diagnostics)? {
                if state.pool.len() >= budget {
                    break;
                }
                match actor::expand_from_stage(&stage, &group, self.gateway) {
                    Ok(exp) => {
                        let mut digests = structural_digests.clone();
                        digests.extend(group.members.iter().map(|m| m.digest()));
                        let lineage = Lineage {
                            parent: Some(parent.id.clone()),
                            step,
                            origin: Origin::Expansion,
                            group_id: Some(group.group_id.clone()),
                            structural: Some(exp.structural),
                            error: Some(exp.error),
                            reflection_digests: digests,
                        };
                        let c = Candidate::new(state.next_id(), exp.tree, lineage, step);
                        created.push(c.id.clone());
                        state.pool.push(c);
                    }
                    Err(e) => {
                        if let Some(g) = actor_fatal(&e) {
                            return Err(g.into());
                        }
                        diagnostics.push(format!("{} / {}: expansion failed: {e}", parent.id, group.group_id));
                    }
                }
            }
            if self.config.rephrase_enabled && state.pool.len() < budget {
                match actor::rephrase_candidate(&parent.tree, &self.task().label_set, self.gateway) {
                    Ok(tree) => {
                        let lineage = Lineage {
                            parent: Some(parent.id.clone()),
                            step,
                            origin: Origin::Rephrase,
                            group_id: None,
                            structural: None,
                            error: None,
                            reflection_digests: Vec::new(),
                        };
                        let c = Candidate::new(state.next_id(), tree, lineage, step);
                        created.push(c.id.clone());
                        state.pool.push(c);
                    }
                    Err(e) => {
                        if let Some(g) = actor_fatal(&e) {
                            return Err(g.into());
                        }
                        diagnostics.push(format!("{}: rephrase discarded: {e}", parent.id));
                    }
                }
            }
        }
        for d in &diagnostics {
            log::info!("step {step}: {d}");
        }
        let best_mean = state.pool.iter().filter_map(Candidate::mean).fold(0.0, f64::max);
        let summary = StepSummary {
            step,
            selected: selected.iter().map(|&i| state.pool[i].id.clone()).collect(),
            created,
            best_mean,
            pool_size: state.pool.len(),
            diagnostics,
        };
        state.step = step;
        if summary.created.is_empty() {
            log::warn!("step {step} produced no candidates; stopping");
            state.stop = Some(StopReason::NoNewCandidates);
        }
        state.history.push(summary.clone());
        Ok(summary)
    }

    /// Steps until a stop condition, handing a checkpoint to `on_step`
    /// after each one.
    pub fn run(
        &self,
        state: &mut SearchState,
        mut on_step: impl FnMut(&Checkpoint) -> Result<(), SearchError>,
    ) -> Result<(), SearchError> {
        self.config.validate()?;
        while state.stop.is_none() {
            if state.step >= self.config.max_steps {
                state.stop = Some(StopReason::MaxSteps);
            } else if state.pool.len() >= self.config.candidate_budget {
                state.stop = Some(StopReason::BudgetReached);
            } else {
                self.run_step(state)?;
                on_step(&self.checkpoint(state))?;
            }
        }
        Ok(())
    }

    /// Picks the top-b finalists and ranks them by full-validation score.
    pub fn finalize(&self, state: &mut SearchState) -> Result<SearchOutcome, SearchError> {
        let val = &self.data.val;
        let initial_score = self.evaluator.score(&state.pool[0].rendered, val, self.gateway)?.score;
        let mut rng = self.config.rng(state.step + 1, FINAL_STREAM);
        let finalists = ucb_select(
            &mut state.pool,
            self.config.top_b,
            val,
            self.evaluator,
            self.gateway,
            self.bandit(),
            &mut rng,
        )?;
        let mut ranking = Vec::new();
        for i in finalists {
            let c = &state.pool[i];
            let final_score = match self.evaluator.score(&c.rendered, val, self.gateway) {
                Ok(r) => r.score,
                Err(e) => {
                    let e = eval_fatal(e)?;
                    log::warn!("finalist {} failed evaluation: {e}", c.id);
                    0.0
                }
            };
            ranking.push(Ranked {
                id: c.id.clone(),
                prompt: c.rendered.clone(),
                final_score,
                mean_estimate: c.mean(),
                lineage: c.lineage.clone(),
            });
        }
        ranking.sort_by(|a, b| b.final_score.total_cmp(&a.final_score));
        Ok(SearchOutcome {
            initial_score,
            ranking,
            stop: state.stop,
            steps: state.step,
            candidates: state.pool.len(),
        })
    }
}

/// Runs a whole search from prompt text without checkpointing.
pub fn optimize(
    initial_prompt: &str,
    data: &Dataset,
    task: &TaskSpec,
    config: &SearchConfig,
    gateway: &Gateway,
) -> Result<SearchOutcome, SearchError> {
    task.validate()?;
    data.require(crate::eval::Split::Val)?;
    let evaluator = Evaluator::new(task.clone());
    let search = Search {
        config,
        evaluator: &evaluator,
        data,
        gateway,
    };
    let mut state = SearchState::new(parse_markdown(initial_prompt)?);
    search.run(&mut state, |_| Ok(()))?;
    search.finalize(&mut state)
}
