use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::eval::{Dataset, SplitManifest, TaskSpec};
use crate::gateway::{Gateway, LiveBackend, LiveProfile, RetryPolicy, ScriptedBackend, UnitPrices};
use crate::search::SearchConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendProfile {
    /// Replays `<fixtures>/<tag>/<n>.txt` replies.
    Scripted { fixtures: PathBuf },
    Live(LiveProfile),
}

fn default_parallelism() -> usize {
    8
}
fn default_attempts() -> u32 {
    3
}
fn default_base_ms() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewaySection {
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_attempts")]
    pub retry_attempts: u32,
    #[serde(default = "default_base_ms")]
    pub retry_base_ms: u64,
    #[serde(default)]
    pub token_cap: Option<u64>,
    #[serde(default)]
    pub prices: Option<UnitPrices>,
}

impl Default for GatewaySection {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Markdown file holding the prompt to optimize.
    pub initial_prompt: PathBuf,
    pub output_dir: PathBuf,
    /// Overrides `search.seed` when set.
    #[serde(default)]
    pub seed: Option<u64>,
    pub task: TaskSpec,
    pub dataset: SplitManifest,
    #[serde(default)]
    pub search: SearchConfig,
    pub backend: BackendProfile,
    #[serde(default)]
    pub gateway: GatewaySection,
    /// Directory relative paths resolve against; set on load.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<RunConfig, HarnessError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        if let Some(seed) = cfg.seed {
            cfg.search.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(RunConfig, String), HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Self::from_toml(&text, &base)?, text))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.task.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.search.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.gateway.parallelism == 0 || self.gateway.retry_attempts == 0 {
            return Err(HarnessError::Config("gateway parallelism and retry_attempts must be positive".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn prompt_text(&self) -> Result<String, HarnessError> {
        let p = self.resolve(&self.initial_prompt);
        fs::read_to_string(&p).map_err(|e| HarnessError::Config(format!("initial prompt {}: {e}", p.display())))
    }

    pub fn load_dataset(&self) -> Result<Dataset, HarnessError> {
        Ok(Dataset::load(&self.dataset, &self.base_dir, &self.task.label_set)?)
    }

    pub fn build_gateway(&self) -> Result<Gateway, HarnessError> {
        let backend: Arc<dyn crate::gateway::Backend> = match &self.backend {
            BackendProfile::Scripted { fixtures } => {
                let dir = self.resolve(fixtures);
                Arc::new(
                    ScriptedBackend::from_dir(dir.display().to_string(), &dir)
                        .map_err(|e| HarnessError::Backend(format!("fixtures {}: {e}", dir.display())))?,
                )
            }
            BackendProfile::Live(profile) => {
                if let Some(var) = &profile.auth_env {
                    if std::env::var(var).is_err() {
                        return Err(HarnessError::Backend(format!("environment variable `{var}` is not set")));
                    }
                }
                Arc::new(LiveBackend::new(profile.clone()))
            }
        };
        Ok(Gateway::new(backend)
            .with_parallelism(self.gateway.parallelism)
            .with_retry(RetryPolicy {
                attempts: self.gateway.retry_attempts,
                base_delay: Duration::from_millis(self.gateway.retry_base_ms),
            })
            .with_token_cap(self.gateway.token_cap)
            .with_prices(self.gateway.prices))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }
}
