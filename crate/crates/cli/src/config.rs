//! The single run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use bgcut::attenuation::{AttenuationConfig, SegNetConfig};
use bgcut::data::DatasetSpec;
use bgcut::prune::PruneSchedule;
use bgcut::refinement::RefinementConfig;
use bgcut::train::TrainConfig;
use bgcut::{BgError, Result};
use serde::{Deserialize, Serialize};

/// Side of the default synthetic scenes, in pixels.
pub const DEFAULT_SCENE_SIZE: usize = 128;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub segnet: SegNetConfig,
    pub attenuation: AttenuationConfig,
    pub refinement: RefinementConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub step_keep_ratio: f64,
    pub num_steps: usize,
    pub finetune_iters_per_step: usize,
    /// `[height, width]` of the latency probe; `[0, 0]` skips timing.
    pub latency_size: [usize; 2],
}

impl Default for PruneConfig {
    fn default() -> Self {
        let s = PruneSchedule::default();
        Self {
            step_keep_ratio: s.step_keep_ratio,
            num_steps: s.num_steps,
            finetune_iters_per_step: s.finetune_iters_per_step,
            latency_size: [128, 128],
        }
    }
}

impl PruneConfig {
    pub fn schedule(&self) -> PruneSchedule {
        PruneSchedule {
            step_keep_ratio: self.step_keep_ratio,
            num_steps: self.num_steps,
            finetune_iters_per_step: self.finetune_iters_per_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub band_widths: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            band_widths: bgcut::pipeline::eval::DEFAULT_BAND_WIDTHS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub iterations: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            warmup: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompositeConfig {
    pub feather: usize,
}

impl Default for CompositeConfig {
    fn default() -> Self {
        Self { feather: 2 }
    }
}

/// Paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub train_manifest: PathBuf,
    /// Input of `train stage2` and `prune`.
    pub stage1_checkpoint: PathBuf,
    /// Checkpoint written by `train` and `prune`.
    pub output: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            train_manifest: "data/train.json".into(),
            stage1_checkpoint: "runs/stage1.bgc".into(),
            output: "runs/model.bgc".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prune: PruneConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub composite: CompositeConfig,
    pub io: IoConfig,
    /// Directory relative paths resolve against; not part of the file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for Config {
    /// Library defaults, except that scenes are large enough for the default crop.
    fn default() -> Self {
        let train = TrainConfig::default();
        let mut dataset = DatasetSpec::default();
        dataset.scene.width = DEFAULT_SCENE_SIZE.max(train.crop);
        dataset.scene.height = DEFAULT_SCENE_SIZE.max(train.crop);
        Self {
            dataset,
            model: ModelConfig::default(),
            train,
            prune: PruneConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            composite: CompositeConfig::default(),
            io: IoConfig::default(),
            base_dir: PathBuf::new(),
        }
    }
}

impl Config {
    /// Reads `path` (defaults when `None`) and applies `key.path=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (text, base_dir) = match path {
            Some(p) => (
                std::fs::read_to_string(p).map_err(|e| BgError::io(p, e))?,
                p.parent().map(Path::to_path_buf).unwrap_or_default(),
            ),
            None => (String::new(), PathBuf::new()),
        };
        let mut value: toml::Value = toml::from_str(&text).map_err(|e| config_error(path, e))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: Config = value.try_into().map_err(|e| config_error(path, e))?;
        cfg.base_dir = base_dir;
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn config_error(path: Option<&Path>, e: impl std::fmt::Display) -> BgError {
    let src = path.map_or("overrides".into(), |p| p.display().to_string());
    BgError::Config(format!("{src}: {e}"))
}

/// Sets a dotted key; the value is parsed as TOML, falling back to a string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| BgError::Config(format!("override {assignment:?} is not key=value")))?;
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| BgError::Config(format!("override {key}: {part} is not a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    node.as_table_mut()
        .ok_or_else(|| BgError::Config(format!("override {key}: parent is not a table")))?
        .insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}
