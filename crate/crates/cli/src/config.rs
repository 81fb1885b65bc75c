use std::path::{Path, PathBuf};

use cgrid_core::dataset::{DatasetConfig, Task};
use cgrid_core::model::{Constraint, ModelConfig};
use cgrid_core::train::TrainConfig;
use cgrid_core::verify::DEFAULT_TOLERANCE;
use cgrid_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const OUTPUT_ENV: &str = "CGRID_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    /// Autoregressive steps; `None` uses the full test trajectories.
    pub steps: Option<usize>,
    /// Test initial conditions to roll out; `None` uses all of them.
    pub ics: Option<usize>,
    pub threshold: f64,
    /// Steps over which the headline NRMSE is averaged.
    pub summary_steps: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            steps: None,
            ics: None,
            threshold: cgrid_core::metrics::HIGH_CORRELATION,
            summary_steps: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SymmetryConfig {
    pub tolerance: f64,
    /// Random weight and input draws for network targets.
    pub draws: usize,
    pub seed: u64,
    /// Grid side; defaults to 16 (SWE solver), 32 (INS solver) or the
    /// dataset grid (networks).
    pub grid: Option<usize>,
}

impl Default for SymmetryConfig {
    fn default() -> Self {
        SymmetryConfig {
            tolerance: DEFAULT_TOLERANCE,
            draws: 10,
            seed: 0,
            grid: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rollout: RolloutConfig,
    pub symmetry: SymmetryConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Desk-scale defaults with the strongest constraints the task admits.
    pub fn for_task(task: Task) -> Self {
        let (dataset, constraints) = match task {
            Task::Swe => (DatasetConfig::swe_desk(), Constraint::Mass),
            Task::Ins => (DatasetConfig::ins_desk(), Constraint::MassMomentum),
        };
        ExperimentConfig {
            task,
            dataset,
            model: ModelConfig {
                task,
                constraints,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            rollout: RolloutConfig::default(),
            symmetry: SymmetryConfig::default(),
            output_dir: PathBuf::from(match task {
                Task::Swe => "runs/swe",
                Task::Ins => "runs/ins",
            }),
        }
    }

    /// Parses a JSON config on top of the defaults for its `task`.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        if !user.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let task: Task = match user.get("task") {
            Some(t) => serde_json::from_value(t.clone()).map_err(|e| Error::Config(format!("task: {e}")))?,
            None => Task::Swe,
        };
        let mut merged = serde_json::to_value(Self::for_task(task)).expect("config serialises");
        merge(&mut merged, user);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.task != self.task || self.model.task != self.task {
            return Err(Error::Config(format!(
                "task is {:?} but dataset.task is {:?} and model.task is {:?}",
                self.task, self.dataset.task, self.model.task
            )));
        }
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.rollout.steps == Some(0) || self.rollout.ics == Some(0) || self.rollout.summary_steps == 0 {
            return Err(Error::Config(
                "rollout steps, ics and summary_steps must be positive".into(),
            ));
        }
        if !(self.symmetry.tolerance > 0.0) || self.symmetry.draws == 0 {
            return Err(Error::Config("symmetry tolerance and draws must be positive".into()));
        }
        Ok(())
    }

    /// Output directory, with the environment override applied.
    pub fn output(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ENV)
            .filter(|v| !v.is_empty())
            .map_or_else(|| self.output_dir.clone(), PathBuf::from)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output().join("data")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output().join("model.ssck")
    }

    pub fn rollout_dir(&self) -> PathBuf {
        self.output().join("rollout")
    }
}

/// Overlays `user` onto `base`, recursing into objects.
fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, u) => *b = u,
    }
}
