use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::gateway::UsageLedger;
use crate::search::{Checkpoint, Lineage, SearchOutcome, SearchState, StepSummary};

pub const RUN_FORMAT: &str = "treeprompt-run/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub id: String,
    pub born_step: usize,
    pub mean: Option<f64>,
    pub eval_count: usize,
    pub quarantined: bool,
    pub lineage: Lineage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageFile {
    pub format: String,
    pub steps: Vec<StepSummary>,
    pub candidates: Vec<LineageEntry>,
}

impl LineageFile {
    pub fn from_state(state: &SearchState) -> Self {
        Self {
            format: RUN_FORMAT.into(),
            steps: state.history.clone(),
            candidates: state
                .pool
                .iter()
                .map(|c| LineageEntry {
                    id: c.id.clone(),
                    born_step: c.born_step,
                    mean: c.mean(),
                    eval_count: c.eval_count,
                    quarantined: c.quarantined,
                    lineage: c.lineage.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub outcome: SearchOutcome,
    pub ledger: UsageLedger,
}

/// On-disk layout of one run.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

fn io(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Run(format!("{}: {e}", path.display()))
}

impl RunDir {
    /// Creates the directory and writes the config snapshot verbatim.
    pub fn create(path: &Path, config_text: &str) -> Result<RunDir, HarnessError> {
        fs::create_dir_all(path.join("candidates")).map_err(|e| io(path, e))?;
        let dir = RunDir { path: path.to_path_buf() };
        dir.write_text("config.snapshot", config_text)?;
        Ok(dir)
    }

    pub fn open(path: &Path) -> Result<RunDir, HarnessError> {
        if !path.join("config.snapshot").is_file() {
            return Err(HarnessError::Run(format!("{} is not a run directory", path.display())));
        }
        Ok(RunDir { path: path.to_path_buf() })
    }

    fn write_text(&self, name: &str, text: &str) -> Result<(), HarnessError> {
        let p = self.path.join(name);
        fs::write(&p, text).map_err(|e| io(&p, e))
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<(), HarnessError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Run(e.to_string()))?;
        self.write_text(name, &(text + "\n"))
    }

    pub fn read_json<T: DeserializeOwned>(&self, name: &str) -> Result<T, HarnessError> {
        let p = self.path.join(name);
        let text = fs::read_to_string(&p).map_err(|e| io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Run(format!("{}: {e}", p.display())))
    }

    pub fn config_text(&self) -> Result<String, HarnessError> {
        let p = self.path.join("config.snapshot");
        fs::read_to_string(&p).map_err(|e| io(&p, e))
    }

    pub fn is_complete(&self) -> bool {
        self.path.join("report.json").is_file()
    }

    fn write_state(&self, state: &SearchState) -> Result<(), HarnessError> {
        for c in &state.pool {
            let md = format!("candidates/{}.md", c.id);
            if !self.path.join(&md).exists() {
                self.write_text(&md, &c.rendered)?;
                self.write_json(&format!("candidates/{}.json", c.id), &c.tree)?;
            }
        }
        self.write_json("lineage.json", &LineageFile::from_state(state))
    }

    /// Persists a step checkpoint plus the candidate store, lineage and ledger.
    pub fn write_checkpoint(&self, cp: &Checkpoint) -> Result<(), HarnessError> {
        self.write_json(&format!("step-{:03}.checkpoint", cp.state.step), cp)?;
        self.write_state(&cp.state)?;
        self.write_json("ledger.json", &cp.gateway.ledger)
    }

    pub fn checkpoint_steps(&self) -> Result<Vec<usize>, HarnessError> {
        let mut steps: Vec<usize> = fs::read_dir(&self.path)
            .map_err(|e| io(&self.path, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                name.strip_prefix("step-")?.strip_suffix(".checkpoint")?.parse().ok()
            })
            .collect();
        steps.sort_unstable();
        Ok(steps)
    }

    pub fn read_checkpoint(&self, step: usize) -> Result<Checkpoint, HarnessError> {
        self.read_json(&format!("step-{step:03}.checkpoint"))
    }

    pub fn latest_checkpoint(&self) -> Result<Option<Checkpoint>, HarnessError> {
        match self.checkpoint_steps()?.last() {
            Some(&s) => self.read_checkpoint(s).map(Some),
            None => Ok(None),
        }
    }

    pub fn write_final(&self, state: &SearchState, outcome: &SearchOutcome, ledger: &UsageLedger) -> Result<(), HarnessError> {
        self.write_state(state)?;
        self.write_json("ledger.json", ledger)?;
        self.write_json(
            "report.json",
            &RunReport {
                format: RUN_FORMAT.into(),
                outcome: outcome.clone(),
                ledger: ledger.clone(),
            },
        )?;
        self.write_text("summary.txt", &summary_text(outcome, ledger))
    }

    pub fn lineage(&self) -> Result<LineageFile, HarnessError> {
        let l: LineageFile = self.read_json("lineage.json")?;
        if l.format != RUN_FORMAT {
            return Err(HarnessError::Run(format!("unsupported run format `{}`", l.format)));
        }
        Ok(l)
    }

    pub fn candidate_text(&self, id: &str) -> Result<String, HarnessError> {
        let p = self.path.join("candidates").join(format!("{id}.md"));
        fs::read_to_string(&p).map_err(|e| io(&p, e))
    }

    pub fn report(&self) -> Result<RunReport, HarnessError> {
        self.read_json("report.json")
    }
}

pub fn summary_text(outcome: &SearchOutcome, ledger: &UsageLedger) -> String {
    let mut out = format!(
        "steps: {}\ncandidates: {}\nstop: {:?}\ninitial score: {:.4}\n\nranking:\n",
        outcome.steps, outcome.candidates, outcome.stop, outcome.initial_score
    );
    for (i, r) in outcome.ranking.iter().enumerate() {
        out.push_str(&format!(
            "{:>2}. {} final {:.4} (estimate {})\n",
            i + 1,
            r.id,
            r.final_score,
            r.mean_estimate.map(|m| format!("{m:.4}")).unwrap_or_else(|| "-".into())
        ));
    }
    let t = ledger.total();
    out.push_str(&format!("\ntokens: {} in, {} out", t.input_tokens, t.output_tokens));
    if let Some(cost) = ledger.cost() {
        out.push_str(&format!(", cost {cost:.4}"));
    }
    if ledger.approximate {
        out.push_str(" (approximate)");
    }
    out.push('\n');
    out
}
