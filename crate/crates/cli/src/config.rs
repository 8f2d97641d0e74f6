use std::path::{Path, PathBuf};

use mellow_core::tasks::{BitSequenceTask, EvalProtocol, RewardTable, DEFAULT_FOUND_RADIUS};
use mellow_core::{GmParams, RegularizerKind, SequenceSpace, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskSpec {
    Bitseq {
        n: usize,
        k: usize,
        /// Inline bit strings; takes precedence over `modes_file`.
        #[serde(default)]
        modes: Option<Vec<String>>,
        #[serde(default)]
        modes_file: Option<PathBuf>,
        /// Used to draw modes when neither of the above is given.
        #[serde(default = "default_num_modes")]
        num_modes: usize,
        #[serde(default)]
        mode_seed: u64,
    },
    RewardTable {
        alphabet: Vec<String>,
        min_len: usize,
        max_len: usize,
        #[serde(default)]
        variable_length: bool,
        table: PathBuf,
        #[serde(default)]
        stats: Option<PathBuf>,
    },
}

fn default_num_modes() -> usize {
    3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamSettings {
    pub q: f64,
    pub alpha: f64,
    pub omega: f64,
    pub beta: f64,
}

impl Default for ParamSettings {
    fn default() -> Self {
        ParamSettings { q: 0.0, alpha: 0.0, omega: 1.0, beta: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub explore_eps: f64,
    pub grad_clip: f64,
    pub adam_eps: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSettings {
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            steps: d.steps,
            explore_eps: d.explore_eps,
            grad_clip: d.grad_clip,
            adam_eps: d.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UsetSettings {
    pub kind: RegularizerKind,
    pub q: f64,
    pub omega: f64,
    pub d: Vec<f64>,
    pub r0: Vec<f64>,
    pub grid: usize,
    pub range: (f64, f64),
    pub steps: usize,
}

impl Default for UsetSettings {
    fn default() -> Self {
        UsetSettings {
            kind: RegularizerKind::Gm,
            q: 1.0,
            omega: 1.0,
            d: vec![0.5, 0.5],
            r0: Vec::new(),
            grid: 101,
            range: (-3.0, 3.0),
            steps: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: Option<TaskSpec>,
    pub params: ParamSettings,
    pub train: TrainSettings,
    pub eval: EvalProtocol,
    pub found_radius: usize,
    pub quantile_buckets: usize,
    pub uset: UsetSettings,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: None,
            params: ParamSettings::default(),
            train: TrainSettings::default(),
            eval: EvalProtocol::default(),
            found_radius: DEFAULT_FOUND_RADIUS,
            quantile_buckets: 10,
            uset: UsetSettings::default(),
            out: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Reads a config file, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut config.task {
            Some(TaskSpec::Bitseq { modes_file: Some(p), .. }) => resolve(p),
            Some(TaskSpec::RewardTable { table, stats, .. }) => {
                resolve(table);
                if let Some(p) = stats {
                    resolve(p);
                }
            }
            _ => {}
        }
        Ok(config)
    }

    pub fn gm_params(&self) -> Result<GmParams, CliError> {
        let p = self.params;
        Ok(GmParams::new(p.q, p.alpha, p.omega, p.beta)?)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            params: self.gm_params()?,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            steps: self.train.steps,
            explore_eps: self.train.explore_eps,
            grad_clip: self.train.grad_clip,
            adam_eps: self.train.adam_eps,
            seed: self.seed,
        })
    }

    pub fn task(&self) -> Result<Task, CliError> {
        let spec = self
            .task
            .as_ref()
            .ok_or_else(|| CliError::Usage("config has no task".into()))?;
        let beta = self.params.beta;
        match spec {
            TaskSpec::Bitseq { n, k, modes, modes_file, num_modes, mode_seed } => {
                let modes = if let Some(inline) = modes {
                    BitSequenceTask::parse_modes(&inline.join("\n"))?
                } else if let Some(p) = modes_file {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| CliError::Usage(format!("cannot read modes file {}: {e}", p.display())))?;
                    BitSequenceTask::parse_modes(&text)?
                } else {
                    BitSequenceTask::random_modes(*n, *num_modes, *mode_seed)?
                };
                let task = BitSequenceTask::new(*n, *k, modes, beta)?;
                let space = task.space()?;
                Ok(Task::Bitseq { task, space })
            }
            TaskSpec::RewardTable { alphabet, min_len, max_len, variable_length, table, stats } => {
                let space = SequenceSpace::new(alphabet.clone(), *min_len, *max_len, *variable_length)?;
                if !table.exists() {
                    return Err(CliError::Usage(format!("reward table {} not found", table.display())));
                }
                if let Some(p) = stats {
                    if !p.exists() {
                        return Err(CliError::Usage(format!("stats file {} not found", p.display())));
                    }
                }
                let table = RewardTable::from_files(&space, table, stats.as_deref(), beta)?;
                Ok(Task::Table { table, space })
            }
        }
    }
}

pub enum Task {
    Bitseq { task: BitSequenceTask, space: SequenceSpace },
    Table { table: RewardTable, space: SequenceSpace },
}

impl Task {
    pub fn space(&self) -> &SequenceSpace {
        match self {
            Task::Bitseq { space, .. } | Task::Table { space, .. } => space,
        }
    }

    pub fn reward(&self) -> &dyn mellow_core::RewardModel {
        match self {
            Task::Bitseq { task, .. } => task,
            Task::Table { table, .. } => table,
        }
    }
}
