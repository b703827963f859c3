use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregate::{Regime, SettingGrid};
use crate::attacks::EPSILONS_255;
use crate::corruptions::SeverityTable;
use crate::data::DatasetName;
use crate::models::{Architecture, ModelSpec};
use crate::trainer::TrainConfig;

use super::OrchestratorError;

pub const DATA_DIR_ENV: &str = "PERMUBENCH_DATA_DIR";

/// Optional replacements for the default architecture hyperparameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverride {
    pub patch_size: Option<usize>,
    pub embed_dims: Option<Vec<usize>>,
    pub depth: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_ratio: Option<f64>,
}

/// A benchmark run, read from a JSON document; every field is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Directory holding `<dataset>.npz` archives.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub models: Vec<Architecture>,
    pub datasets: Vec<DatasetName>,
    pub seeds: Vec<u64>,
    pub regimes: Vec<Regime>,
    pub train: TrainConfig,
    pub corruptions: SeverityTable,
    /// Attack budgets in units of 1/255, shared by FGSM and PGD.
    pub attack_epsilons: Vec<u32>,
    pub model_overrides: BTreeMap<Architecture, ModelOverride>,
    /// Worker threads; 0 uses every available core.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            out_dir: PathBuf::from("results"),
            models: Architecture::ALL.to_vec(),
            datasets: DatasetName::ALL.to_vec(),
            seeds: TrainConfig::default().seeds,
            regimes: Regime::ALL.to_vec(),
            train: TrainConfig::default(),
            corruptions: SeverityTable::default(),
            attack_epsilons: EPSILONS_255.to_vec(),
            model_overrides: BTreeMap::new(),
            jobs: 0,
        }
    }
}

fn check_unique<T: Ord + Clone + std::fmt::Debug>(what: &str, items: &[T]) -> Result<(), OrchestratorError> {
    let mut v = items.to_vec();
    v.sort();
    v.dedup();
    if items.is_empty() {
        return Err(OrchestratorError::Config(format!("{what} must not be empty")));
    }
    if v.len() != items.len() {
        return Err(OrchestratorError::Config(format!("{what} contains duplicates: {items:?}")));
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path).map_err(|e| OrchestratorError::Io(path.to_path_buf(), e))?;
        serde_json::from_str(&text).map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        check_unique("models", &self.models)?;
        check_unique("datasets", &self.datasets)?;
        check_unique("seeds", &self.seeds)?;
        check_unique("regimes", &self.regimes)?;
        check_unique("attack_epsilons", &self.attack_epsilons)?;
        if self.attack_epsilons.windows(2).any(|w| w[0] > w[1]) || self.attack_epsilons.contains(&0) {
            return Err(OrchestratorError::Config("attack_epsilons must be positive and ascending".into()));
        }
        self.train.validate().map_err(|e| OrchestratorError::Config(e.to_string()))?;
        self.corruptions.validate().map_err(|e| OrchestratorError::Config(e.to_string()))?;
        for &m in &self.models {
            self.model_spec(m, DatasetName::OrganAMnist)?;
        }
        Ok(())
    }

    /// Explicit setting, then the environment, then `./data`.
    pub fn resolved_data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn setting_grid(&self) -> SettingGrid {
        SettingGrid::new(&self.attack_epsilons)
    }

    /// Records each (model, dataset, seed) run produces.
    pub fn records_per_run(&self) -> usize {
        self.setting_grid().records_per_run(&self.regimes)
    }

    pub fn model_spec(&self, arch: Architecture, dataset: DatasetName) -> Result<ModelSpec, OrchestratorError> {
        let mut spec = ModelSpec::default_for(arch, dataset.num_classes());
        if let Some(o) = self.model_overrides.get(&arch) {
            spec.patch_size = o.patch_size.unwrap_or(spec.patch_size);
            spec.embed_dims = o.embed_dims.clone().unwrap_or(spec.embed_dims);
            spec.depth = o.depth.unwrap_or(spec.depth);
            spec.heads = o.heads.unwrap_or(spec.heads);
            spec.mlp_ratio = o.mlp_ratio.unwrap_or(spec.mlp_ratio);
        }
        spec.validate().map_err(|e| OrchestratorError::Config(format!("{arch}: {e}")))?;
        Ok(spec)
    }
}
