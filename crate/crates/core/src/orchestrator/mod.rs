//! Run engine: trains and evaluates every (dataset, model, seed) run of a
//! configuration, persists records, and renders reports.

mod config;
mod report;
mod selftest;
mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::Serialize;

use crate::aggregate::{AggregateError, MetricRecord, Regime, SummaryTable};
use crate::attacks::{AttackError, AttackSpec};
use crate::corruptions::{self, CorruptionError};
use crate::data::{self, DataError, Dataset, DatasetName, ImageBatch};
use crate::metrics::{self, MetricError, EVAL_CHUNK};
use crate::models::{Architecture, ModelError, ModelParams, ModelSpec, Network};
use crate::trainer::{self, TrainConfig, TrainError};

pub use config::{ModelOverride, RunConfig, DATA_DIR_ENV};
pub use report::{report, Report, ReportScope, INJECTED_FILE};
pub use selftest::{selftest, CheckResult};
pub use store::{RunKey, Store, INDEX_FILE, RECORDS_FILE};

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{}: {1}", .0.display())]
    Io(PathBuf, #[source] std::io::Error),
    #[error("record store: {0}")]
    Store(String),
    #[error("dataset file for {dataset} not found at {}", path.display())]
    MissingData { dataset: DatasetName, path: PathBuf },
    #[error("nothing to report: {0}")]
    EmptyScope(String),
    #[error("{} run(s) failed: {}", .0.len(), .0.join("; "))]
    RunsFailed(Vec<String>),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corruption(#[from] CorruptionError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestratorError + '_ {
    move |e| OrchestratorError::Io(path.to_path_buf(), e)
}

/// Outcome of [`run_matrix`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub trained: Vec<RunKey>,
    pub skipped: Vec<RunKey>,
    pub failed: Vec<(RunKey, String)>,
    pub records: usize,
}

impl RunSummary {
    pub fn ok(&self) -> bool {
        self.failed.is_empty()
    }
}

/// Every run of the configuration, in dataset, model, seed order.
pub fn plan(cfg: &RunConfig) -> Vec<RunKey> {
    let mut keys = Vec::new();
    for &dataset in &cfg.datasets {
        for &model in &cfg.models {
            for &seed in &cfg.seeds {
                keys.push(RunKey { dataset, model, seed });
            }
        }
    }
    keys.sort();
    keys
}

pub fn dataset_path(cfg: &RunConfig, dataset: DatasetName) -> PathBuf {
    cfg.resolved_data_dir().join(dataset.file_name())
}

pub fn load_dataset(cfg: &RunConfig, dataset: DatasetName) -> Result<Dataset, OrchestratorError> {
    let path = dataset_path(cfg, dataset);
    if !path.is_file() {
        return Err(OrchestratorError::MissingData { dataset, path });
    }
    Ok(data::load_npz_as(&path, dataset)?)
}

/// Directory holding the artifacts of one run.
pub fn run_dir(out_dir: &Path, key: &RunKey) -> PathBuf {
    out_dir.join("runs").join(key.dataset.key()).join(key.model.key()).join(format!("seed{}", key.seed))
}

#[derive(Serialize)]
struct Manifest<'a> {
    dataset: DatasetName,
    model: Architecture,
    seed: u64,
    spec: &'a ModelSpec,
    train: &'a TrainConfig,
    selected_epoch: usize,
    records: usize,
}

/// Trains, evaluates and stores every pending run. Completed runs are
/// skipped; a failing run is logged and reported without stopping the
/// others.
pub fn run_matrix(cfg: &RunConfig) -> Result<RunSummary, OrchestratorError> {
    cfg.validate()?;
    let mut store = Store::open(&cfg.out_dir)?;
    let mut summary = RunSummary::default();
    let mut pending: BTreeMap<DatasetName, Vec<RunKey>> = BTreeMap::new();
    for key in plan(cfg) {
        if store.is_complete(&key) {
            summary.skipped.push(key);
        } else {
            pending.entry(key.dataset).or_default().push(key);
        }
    }
    for &dataset in pending.keys() {
        let path = dataset_path(cfg, dataset);
        if !path.is_file() {
            return Err(OrchestratorError::MissingData { dataset, path });
        }
    }
    if !summary.skipped.is_empty() {
        log::info!("{} run(s) already complete", summary.skipped.len());
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| OrchestratorError::Config(format!("thread pool: {e}")))?;
    for (dataset, keys) in pending {
        let ds = load_dataset(cfg, dataset)?;
        let shared = Mutex::new(&mut store);
        let outcomes: Vec<(RunKey, Result<(), OrchestratorError>)> = pool.install(|| {
            keys.par_iter()
                .map(|&key| {
                    log::info!("training {key}");
                    let result = execute_run(cfg, &ds, key).and_then(|records| {
                        let mut guard = shared.lock().unwrap_or_else(|p| p.into_inner());
                        guard.commit(key, records)
                    });
                    (key, result)
                })
                .collect()
        });
        for (key, result) in outcomes {
            match result {
                Ok(()) => summary.trained.push(key),
                Err(e) => {
                    log::error!("{key} failed: {e}");
                    summary.failed.push((key, e.to_string()));
                }
            }
        }
    }
    store.compact()?;
    summary.records = store.records().len();
    Ok(summary)
}

/// Trains one run, writes its artifacts and returns its records.
pub fn execute_run(cfg: &RunConfig, ds: &Dataset, key: RunKey) -> Result<Vec<MetricRecord>, OrchestratorError> {
    let spec = cfg.model_spec(key.model, key.dataset)?;
    let (params, log) = trainer::train(&spec, ds.training_splits(), &cfg.train, key.seed)?;
    let records = evaluate_run(cfg, &spec, &params, &ds.test, key)?;

    let dir = run_dir(&cfg.out_dir, &key);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut bytes = Vec::new();
    params.write_to(&mut bytes)?;
    write_file(&dir.join("params.bin"), &bytes)?;
    let mut bytes = Vec::new();
    log.write_jsonl(&mut bytes).map_err(io_err(&dir))?;
    write_file(&dir.join("train_log.jsonl"), &bytes)?;
    let manifest = Manifest {
        dataset: key.dataset,
        model: key.model,
        seed: key.seed,
        spec: &spec,
        train: &cfg.train,
        selected_epoch: log.selected_epoch,
        records: records.len(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| OrchestratorError::Store(e.to_string()))?;
    text.push('\n');
    write_file(&dir.join("manifest.json"), text.as_bytes())?;
    Ok(records)
}

/// Scores trained parameters on `test` under every configured regime.
pub fn evaluate_run(
    cfg: &RunConfig,
    spec: &ModelSpec,
    params: &ModelParams,
    test: &ImageBatch,
    key: RunKey,
) -> Result<Vec<MetricRecord>, OrchestratorError> {
    let net = Network::new(spec, params);
    let task = key.dataset.task();
    let k = key.dataset.num_classes();
    let score = |batch: &ImageBatch| metrics::evaluate(&net, batch, task, k, cfg.train.binary_metric);
    let record = |regime, setting: Option<String>, r: metrics::EvalResult| MetricRecord {
        dataset: key.dataset,
        model: key.model,
        seed: key.seed,
        regime,
        setting,
        metric: r.metric,
        value: r.value,
    };
    let mut out = Vec::with_capacity(cfg.records_per_run());
    for &regime in &cfg.regimes {
        match regime {
            Regime::Clean => out.push(record(regime, None, score(test)?)),
            Regime::Corruption => {
                for c in corruptions::corruption_grid(key.seed) {
                    let corrupted = corruptions::apply_with(&cfg.corruptions, &c, test)?;
                    out.push(record(regime, Some(c.setting()), score(&corrupted)?));
                }
            }
            Regime::Fgsm | Regime::Pgd => {
                let kind = regime.attack().expect("attack regime");
                for &eps in &cfg.attack_epsilons {
                    let a = AttackSpec::new(kind, eps);
                    let adv = a.run_chunked(&net, test, EVAL_CHUNK)?;
                    out.push(record(regime, Some(a.setting()), score(&adv)?));
                }
            }
        }
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), OrchestratorError> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Loads the stored parameters of a completed run.
pub fn load_params(cfg: &RunConfig, key: &RunKey) -> Result<(ModelSpec, ModelParams), OrchestratorError> {
    let spec = cfg.model_spec(key.model, key.dataset)?;
    let path = run_dir(&cfg.out_dir, key).join("params.bin");
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    let params = ModelParams::read_from(std::io::BufReader::new(file))?;
    params.check_against(&spec)?;
    Ok((spec, params))
}

/// Validates externally supplied per-cell means and stores them canonically
/// in `out_dir` for aggregation-only reporting.
pub fn inject(means_csv: &Path, out_dir: &Path) -> Result<SummaryTable, OrchestratorError> {
    let file = fs::File::open(means_csv).map_err(io_err(means_csv))?;
    let table = SummaryTable::read_csv(std::io::BufReader::new(file))?;
    if table.is_empty() {
        return Err(OrchestratorError::EmptyScope(format!("{} has no rows", means_csv.display())));
    }
    for ((d, m, r), c) in table.iter() {
        if !(0.0..=1.0).contains(&c.mean) || !c.std.is_finite() || c.std < 0.0 {
            return Err(AggregateError::InvalidRecord(format!("{d}/{m}/{r}: mean {} std {}", c.mean, c.std)).into());
        }
    }
    let mut missing = Vec::new();
    let regimes: BTreeSet<Regime> = table.regimes().into_iter().collect();
    for d in table.datasets() {
        for m in table.models() {
            for &r in &regimes {
                if table.get(d, m, r).is_none() {
                    missing.push(format!("{d}/{m}/{r}"));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(AggregateError::Incomplete(missing).into());
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut bytes = Vec::new();
    table.write_csv(&mut bytes)?;
    write_file(&out_dir.join(INJECTED_FILE), &bytes)?;
    Ok(table)
}

/// Writes `batch` as `images.npy` (uint8, N×28×28×3), `labels.npy` and
/// `ids.npy` in `dir`.
pub fn dump_batch(batch: &ImageBatch, dir: &Path) -> Result<(), OrchestratorError> {
    use crate::data::npy;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let pixels: Vec<u8> = batch.images().data().iter().map(|&p| (f64::from(p) * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let labels: Vec<i64> = batch.labels().iter().map(|&l| l as i64).collect();
    let ids: Vec<i64> = batch.ids().iter().map(|&i| i as i64).collect();
    let mut bytes = Vec::new();
    npy::write_npy_u8(&mut bytes, batch.images().shape(), &pixels).map_err(io_err(dir))?;
    write_file(&dir.join("images.npy"), &bytes)?;
    bytes.clear();
    npy::write_npy_i64(&mut bytes, &[labels.len()], &labels).map_err(io_err(dir))?;
    write_file(&dir.join("labels.npy"), &bytes)?;
    bytes.clear();
    npy::write_npy_i64(&mut bytes, &[ids.len()], &ids).map_err(io_err(dir))?;
    write_file(&dir.join("ids.npy"), &bytes)?;
    Ok(())
}
