//! Configuration, run persistence, reports and the command-line front end.

pub mod cli;
mod config;
mod reports;
mod rundir;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{BackendProfile, GatewaySection, RunConfig};
pub use reports::{
    action_distribution, parse_compare, report_action_distribution, report_compare, report_curve, report_diff,
    score_curve, ActionRow, ActionTable, Change, CompareScores, CurvePoint, DiffEntry, TreeDiff,
};
pub use rundir::{summary_text, LineageEntry, LineageFile, RunDir, RunReport, RUN_FORMAT};

use crate::eval::{DatasetError, Evaluator, Split};
use crate::search::{Search, SearchError, SearchOutcome, SearchState};
use crate::tree::{parse_markdown, PromptTree};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(#[from] DatasetError),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("run error: {0}")]
    Run(String),
    #[error("run has no completed steps")]
    EmptyRun,
    #[error("judge score `{field}` = {value} is outside 1..=10")]
    OutOfRangeScore { field: String, value: f64 },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Dataset(_) => 3,
            HarnessError::Backend(_) => 4,
            _ => 5,
        }
    }
}

impl From<SearchError> for HarnessError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Config(m) => HarnessError::Config(m),
            SearchError::Prompt(t) => HarnessError::Config(format!("initial prompt: {t}")),
            SearchError::Dataset(d) => HarnessError::Dataset(d),
            SearchError::Gateway(g) => HarnessError::Backend(g.to_string()),
            other => HarnessError::Run(other.to_string()),
        }
    }
}

/// Written next to the config snapshot so a run can be resumed without the
/// original config path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub config_dir: PathBuf,
}

pub fn parse_prompt(text: &str) -> Result<PromptTree, HarnessError> {
    parse_markdown(text).map_err(|e| HarnessError::Config(format!("initial prompt: {e}")))
}

pub fn describe(tree: &PromptTree) -> String {
    let titles = tree.top_level_titles();
    format!("{} top-level sections: {}\n\n{}", titles.len(), titles.join(" | "), tree.outline())
}

/// Runs or continues an optimization; returns `None` when the run was
/// already complete.
pub fn run_optimize(
    config_path: &Path,
    resume: Option<&Path>,
    dry_run: bool,
    out: &mut dyn Write,
) -> Result<Option<SearchOutcome>, HarnessError> {
    let (cfg, text) = RunConfig::load(config_path)?;
    let tree = parse_prompt(&cfg.prompt_text()?)?;
    if dry_run {
        cfg.load_dataset()?;
        let _ = writeln!(out, "{}", describe(&tree));
        return Ok(None);
    }
    let dir = match resume {
        Some(p) => RunDir::open(p)?,
        None => {
            let path = cfg.output_dir();
            if path.join("config.snapshot").exists() {
                return Err(HarnessError::Run(format!("{} already holds a run; resume it instead", path.display())));
            }
            let dir = RunDir::create(&path, &text)?;
            let base = cfg.base_dir.canonicalize().unwrap_or_else(|_| cfg.base_dir.clone());
            dir.write_json(
                "run.json",
                &RunManifest {
                    format: RUN_FORMAT.into(),
                    config_dir: base,
                },
            )?;
            dir
        }
    };
    execute(&cfg, tree, &dir, out)
}

/// Continues the run stored in `run_dir` using its config snapshot.
pub fn run_resume(run_dir: &Path, out: &mut dyn Write) -> Result<Option<SearchOutcome>, HarnessError> {
    let dir = RunDir::open(run_dir)?;
    let manifest: RunManifest = dir.read_json("run.json")?;
    if manifest.format != RUN_FORMAT {
        return Err(HarnessError::Run(format!("unsupported run format `{}`", manifest.format)));
    }
    let cfg = RunConfig::from_toml(&dir.config_text()?, &manifest.config_dir)?;
    let tree = parse_prompt(&cfg.prompt_text()?)?;
    execute(&cfg, tree, &dir, out)
}

fn execute(cfg: &RunConfig, tree: PromptTree, dir: &RunDir, out: &mut dyn Write) -> Result<Option<SearchOutcome>, HarnessError> {
    if dir.is_complete() {
        let _ = writeln!(out, "run in {} is already complete", dir.path.display());
        return Ok(None);
    }
    let data = cfg.load_dataset()?;
    data.require(Split::Val)?;
    let gateway = cfg.build_gateway()?;
    let evaluator = Evaluator::new(cfg.task.clone()).with_parallelism(cfg.gateway.parallelism);
    let search = Search {
        config: &cfg.search,
        evaluator: &evaluator,
        data: &data,
        gateway: &gateway,
    };
    let mut state = match dir.latest_checkpoint()? {
        Some(cp) => {
            let _ = writeln!(out, "resuming after step {}", cp.state.step);
            search.resume(&cp)?
        }
        None => SearchState::new(tree),
    };
    search.run(&mut state, |cp| {
        log::info!("step {} done, pool {}", cp.state.step, cp.state.pool.len());
        dir.write_checkpoint(cp).map_err(|e| SearchError::Checkpoint(e.to_string()))
    })?;
    let outcome = search.finalize(&mut state)?;
    dir.write_final(&state, &outcome, &gateway.ledger())?;
    if !state.history.is_empty() {
        report_action_distribution(dir)?;
        report_curve(dir)?;
    }
    let _ = write!(out, "{}", summary_text(&outcome, &gateway.ledger()));
    Ok(Some(outcome))
}

/// Loads the gateway described by a run's config snapshot.
pub fn run_gateway(dir: &RunDir) -> Result<crate::gateway::Gateway, HarnessError> {
    let manifest: RunManifest = dir.read_json("run.json")?;
    RunConfig::from_toml(&dir.config_text()?, &manifest.config_dir)?.build_gateway()
}
