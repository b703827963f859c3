//! Per-seed regime means, cross-seed summaries, mean ranks and retention.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackKind, AttackSpec};
use crate::corruptions::{self, CorruptionKind, CorruptionSpec};
use crate::data::DatasetName;
use crate::metrics::{average_ranks, MetricName};
use crate::models::Architecture;

#[derive(Debug, thiserror::Error)]
pub enum AggregateError {
    #[error("incomplete results; missing: {}", .0.join(", "))]
    Incomplete(Vec<String>),
    #[error("conflicting values for {0}")]
    Conflict(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("retention undefined for {model} on {dataset}: clean mean is zero")]
    ZeroClean { model: Architecture, dataset: DatasetName },
    #[error("nothing to aggregate")]
    Empty,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Clean,
    Corruption,
    Fgsm,
    Pgd,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Clean, Regime::Corruption, Regime::Fgsm, Regime::Pgd];

    pub fn key(self) -> &'static str {
        match self {
            Regime::Clean => "clean",
            Regime::Corruption => "corruption",
            Regime::Fgsm => "fgsm",
            Regime::Pgd => "pgd",
        }
    }

    pub fn attack(self) -> Option<AttackKind> {
        match self {
            Regime::Fgsm => Some(AttackKind::Fgsm),
            Regime::Pgd => Some(AttackKind::Pgd),
            _ => None,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Regime {
    type Err = AggregateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        Regime::ALL
            .into_iter()
            .find(|r| r.key() == s)
            .ok_or_else(|| AggregateError::InvalidRecord(format!("unknown regime `{s}`")))
    }
}

/// One evaluated metric value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub dataset: DatasetName,
    pub model: Architecture,
    pub seed: u64,
    pub regime: Regime,
    /// `None` for clean; `"gaussian_noise:2"` or `"fgsm:4/255"` otherwise.
    pub setting: Option<String>,
    pub metric: MetricName,
    pub value: f64,
}

/// Identity of a record; two records with the same key describe the same
/// measurement.
pub type RecordKey = (DatasetName, Architecture, u64, Regime, String);

impl MetricRecord {
    pub fn key(&self) -> RecordKey {
        (self.dataset, self.model, self.seed, self.regime, self.setting.clone().unwrap_or_default())
    }

    pub fn validate(&self) -> Result<(), AggregateError> {
        let bad = |m: String| Err(AggregateError::InvalidRecord(m));
        match (self.regime, &self.setting) {
            (Regime::Clean, None) => {}
            (Regime::Clean, Some(s)) => return bad(format!("clean record with setting `{s}`")),
            (r, None) => return bad(format!("{r} record without a setting")),
            (Regime::Corruption, Some(s)) => {
                CorruptionSpec::parse_setting(s, 0).map_err(|e| AggregateError::InvalidRecord(e.to_string()))?;
            }
            (r, Some(s)) => {
                let a = AttackSpec::parse_setting(s).map_err(|e| AggregateError::InvalidRecord(e.to_string()))?;
                if Some(a.kind) != r.attack() {
                    return bad(format!("setting `{s}` does not belong to regime {r}"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.value) {
            return bad(format!("value {} outside [0, 1]", self.value));
        }
        Ok(())
    }
}

/// Settings each regime must cover.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SettingGrid {
    pub corruption: Vec<String>,
    pub fgsm: Vec<String>,
    pub pgd: Vec<String>,
}

impl Default for SettingGrid {
    fn default() -> Self {
        Self::new(&attacks::EPSILONS_255)
    }
}

impl SettingGrid {
    /// The 15-setting corruption grid plus the given ε grid for both attacks.
    pub fn new(epsilons_255: &[u32]) -> Self {
        let attack = |kind| epsilons_255.iter().map(|&e| AttackSpec::new(kind, e).setting()).collect();
        Self {
            corruption: corruptions::corruption_grid(0).iter().map(CorruptionSpec::setting).collect(),
            fgsm: attack(AttackKind::Fgsm),
            pgd: attack(AttackKind::Pgd),
        }
    }

    /// Setting labels of `regime`; clean has the single empty setting.
    pub fn settings(&self, regime: Regime) -> Vec<String> {
        match regime {
            Regime::Clean => vec![String::new()],
            Regime::Corruption => self.corruption.clone(),
            Regime::Fgsm => self.fgsm.clone(),
            Regime::Pgd => self.pgd.clone(),
        }
    }

    pub fn records_per_run(&self, regimes: &[Regime]) -> usize {
        regimes.iter().map(|&r| self.settings(r).len()).sum()
    }
}

/// Keyed, order-free collection of records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecordSet {
    map: BTreeMap<RecordKey, MetricRecord>,
}

fn describe(key: &RecordKey) -> String {
    let (d, m, s, r, setting) = key;
    if setting.is_empty() {
        format!("{d}/{m}/seed {s}/{r}")
    } else {
        format!("{d}/{m}/seed {s}/{setting}")
    }
}

impl RecordSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a record; an identical duplicate is ignored, a different value is a conflict.
    pub fn insert(&mut self, rec: MetricRecord) -> Result<(), AggregateError> {
        rec.validate()?;
        let key = rec.key();
        match self.map.get(&key) {
            Some(old) if old.value.to_bits() == rec.value.to_bits() && old.metric == rec.metric => Ok(()),
            Some(_) => Err(AggregateError::Conflict(describe(&key))),
            None => {
                self.map.insert(key, rec);
                Ok(())
            }
        }
    }

    pub fn from_records(records: impl IntoIterator<Item = MetricRecord>) -> Result<Self, AggregateError> {
        let mut set = Self::new();
        for r in records {
            set.insert(r)?;
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Records in key order.
    pub fn iter(&self) -> impl Iterator<Item = &MetricRecord> {
        self.map.values()
    }

    pub fn get(&self, key: &RecordKey) -> Option<&MetricRecord> {
        self.map.get(key)
    }

    pub fn contains(&self, key: &RecordKey) -> bool {
        self.map.contains_key(key)
    }

    pub fn datasets(&self) -> BTreeSet<DatasetName> {
        self.map.keys().map(|k| k.0).collect()
    }

    pub fn models(&self) -> BTreeSet<Architecture> {
        self.map.keys().map(|k| k.1).collect()
    }

    pub fn regimes(&self) -> BTreeSet<Regime> {
        self.map.keys().map(|k| k.3).collect()
    }

    pub fn seeds(&self) -> BTreeSet<u64> {
        self.map.keys().map(|k| k.2).collect()
    }

    /// Writes `dataset,model,seed,regime,setting,metric,value` rows in key order.
    pub fn write_csv(&self, w: impl Write) -> Result<(), AggregateError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(RECORD_HEADER)?;
        for r in self.iter() {
            out.write_record(record_row(r))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self, AggregateError> {
        Self::from_records(read_records(r)?)
    }
}

pub const RECORD_HEADER: [&str; 7] = ["dataset", "model", "seed", "regime", "setting", "metric", "value"];

/// CSV fields of one record; floats use the shortest round-trip form.
pub fn record_row(r: &MetricRecord) -> [String; 7] {
    [
        r.dataset.key().to_string(),
        r.model.key().to_string(),
        r.seed.to_string(),
        r.regime.key().to_string(),
        r.setting.clone().unwrap_or_default(),
        r.metric.key().to_string(),
        format!("{:?}", r.value),
    ]
}

fn invalid(m: impl Into<String>) -> AggregateError {
    AggregateError::InvalidRecord(m.into())
}

pub fn parse_record(fields: &csv::StringRecord) -> Result<MetricRecord, AggregateError> {
    if fields.len() != RECORD_HEADER.len() {
        return Err(invalid(format!("expected 7 fields, found {}", fields.len())));
    }
    let setting = fields[4].trim();
    Ok(MetricRecord {
        dataset: fields[0].parse().map_err(|e: crate::data::DataError| invalid(e.to_string()))?,
        model: fields[1].parse().map_err(|e: crate::models::ModelError| invalid(e.to_string()))?,
        seed: fields[2].trim().parse().map_err(|_| invalid(format!("bad seed `{}`", &fields[2])))?,
        regime: fields[3].parse()?,
        setting: (!setting.is_empty()).then(|| setting.to_string()),
        metric: fields[5].trim().parse().map_err(invalid)?,
        value: fields[6].trim().parse().map_err(|_| invalid(format!("bad value `{}`", &fields[6])))?,
    })
}

pub fn read_records(r: impl Read) -> Result<Vec<MetricRecord>, AggregateError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != RECORD_HEADER {
        return Err(invalid(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    rdr.records().map(|row| parse_record(&row?)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample (n − 1) standard deviation; 0 for a single value.
pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Unweighted mean over the regime's settings for one seed.
pub fn regime_mean_per_seed(
    records: &RecordSet,
    grid: &SettingGrid,
    dataset: DatasetName,
    model: Architecture,
    seed: u64,
    regime: Regime,
) -> Result<f64, AggregateError> {
    let mut values = Vec::new();
    let mut missing = Vec::new();
    for setting in grid.settings(regime) {
        let key = (dataset, model, seed, regime, setting);
        match records.get(&key) {
            Some(r) => values.push(r.value),
            None => missing.push(describe(&key)),
        }
    }
    if missing.is_empty() {
        Ok(mean(&values))
    } else {
        Err(AggregateError::Incomplete(missing))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
    pub metric: Option<MetricName>,
}

/// Per `(dataset, model, regime)` mean ± std over seeds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SummaryTable {
    cells: BTreeMap<(DatasetName, Architecture, Regime), Cell>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SummaryRow {
    dataset: String,
    model: String,
    regime: String,
    metric: Option<String>,
    mean: f64,
    std: Option<f64>,
    n_seeds: Option<usize>,
}

impl SummaryTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, dataset: DatasetName, model: Architecture, regime: Regime, cell: Cell) {
        self.cells.insert((dataset, model, regime), cell);
    }

    pub fn get(&self, dataset: DatasetName, model: Architecture, regime: Regime) -> Option<&Cell> {
        self.cells.get(&(dataset, model, regime))
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((DatasetName, Architecture, Regime), &Cell)> {
        self.cells.iter().map(|(k, v)| (*k, v))
    }

    pub fn datasets(&self) -> Vec<DatasetName> {
        let set: BTreeSet<_> = self.cells.keys().map(|k| k.0).collect();
        DatasetName::ALL.into_iter().filter(|d| set.contains(d)).collect()
    }

    pub fn models(&self) -> Vec<Architecture> {
        let set: BTreeSet<_> = self.cells.keys().map(|k| k.1).collect();
        Architecture::ALL.into_iter().filter(|m| set.contains(m)).collect()
    }

    pub fn regimes(&self) -> Vec<Regime> {
        let set: BTreeSet<_> = self.cells.keys().map(|k| k.2).collect();
        Regime::ALL.into_iter().filter(|r| set.contains(r)).collect()
    }

    /// Mean over the selected cells of every dataset × model, or the missing list.
    fn means(&self, regime: Regime) -> Result<Vec<Vec<f64>>, AggregateError> {
        let (datasets, models) = (self.datasets(), self.models());
        if datasets.is_empty() {
            return Err(AggregateError::Empty);
        }
        let mut missing = Vec::new();
        let rows = datasets
            .iter()
            .map(|&d| {
                models
                    .iter()
                    .map(|&m| match self.get(d, m, regime) {
                        Some(c) => c.mean,
                        None => {
                            missing.push(format!("{d}/{m}/{regime}"));
                            f64::NAN
                        }
                    })
                    .collect()
            })
            .collect();
        if missing.is_empty() {
            Ok(rows)
        } else {
            Err(AggregateError::Incomplete(missing))
        }
    }

    /// CSV with `dataset,model,regime,metric,mean,std,n_seeds`.
    pub fn write_csv(&self, w: impl Write) -> Result<(), AggregateError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["dataset", "model", "regime", "metric", "mean", "std", "n_seeds"])?;
        for ((d, m, r), c) in self.iter() {
            out.write_record([
                d.key().to_string(),
                m.key().to_string(),
                r.key().to_string(),
                c.metric.map(|m| m.key().to_string()).unwrap_or_default(),
                format!("{:?}", c.mean),
                format!("{:?}", c.std),
                c.n_seeds.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads per-cell means; `metric`, `std` and `n_seeds` columns are optional.
    ///
    /// Dataset and model names may be keys or display names.
    pub fn read_csv(r: impl Read) -> Result<Self, AggregateError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let mut table = Self::new();
        for row in rdr.deserialize::<SummaryRow>() {
            let row = row?;
            let dataset: DatasetName = row.dataset.parse().map_err(|e: crate::data::DataError| invalid(e.to_string()))?;
            let model: Architecture = row.model.parse().map_err(|e: crate::models::ModelError| invalid(e.to_string()))?;
            let regime: Regime = row.regime.parse()?;
            let metric = match row.metric.as_deref() {
                None | Some("") => None,
                Some(m) => Some(m.parse().map_err(invalid)?),
            };
            if !row.mean.is_finite() {
                return Err(invalid(format!("non-finite mean for {dataset}/{model}/{regime}")));
            }
            let cell = Cell { mean: row.mean, std: row.std.unwrap_or(0.0), n_seeds: row.n_seeds.unwrap_or(0), metric };
            if table.cells.insert((dataset, model, regime), cell).is_some() {
                return Err(AggregateError::Conflict(format!("{dataset}/{model}/{regime}")));
            }
        }
        Ok(table)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let cells: Vec<serde_json::Value> = self
            .iter()
            .map(|((d, m, r), c)| {
                serde_json::json!({
                    "dataset": d.key(), "model": m.key(), "regime": r.key(),
                    "metric": c.metric.map(MetricName::key), "mean": c.mean, "std": c.std, "n_seeds": c.n_seeds,
                })
            })
            .collect();
        serde_json::Value::Array(cells)
    }
}

/// Seed means and sample standard deviations for every dataset × model in
/// `records` and every regime in `regimes`.
pub fn summarize(records: &RecordSet, grid: &SettingGrid, seeds: &[u64], regimes: &[Regime]) -> Result<SummaryTable, AggregateError> {
    if records.is_empty() || seeds.is_empty() || regimes.is_empty() {
        return Err(AggregateError::Empty);
    }
    let mut table = SummaryTable::new();
    let mut missing = Vec::new();
    for dataset in records.datasets() {
        for model in records.models() {
            for &regime in regimes {
                let mut per_seed = Vec::new();
                for &seed in seeds {
                    match regime_mean_per_seed(records, grid, dataset, model, seed, regime) {
                        Ok(v) => per_seed.push(v),
                        Err(AggregateError::Incomplete(m)) => missing.extend(m),
                        Err(e) => return Err(e),
                    }
                }
                if per_seed.len() == seeds.len() {
                    let metric = records
                        .iter()
                        .find(|r| r.dataset == dataset && r.model == model)
                        .map(|r| r.metric);
                    let cell = Cell { mean: mean(&per_seed), std: sample_std(&per_seed), n_seeds: seeds.len(), metric };
                    table.insert(dataset, model, regime, cell);
                }
            }
        }
    }
    if missing.is_empty() {
        Ok(table)
    } else {
        Err(AggregateError::Incomplete(missing))
    }
}

/// Per-dataset ranks of the seed means (1 = best, ties averaged), averaged
/// over datasets.
pub fn mean_ranks(table: &SummaryTable, regime: Regime) -> Result<BTreeMap<Architecture, f64>, AggregateError> {
    let rows = table.means(regime)?;
    let models = table.models();
    let mut totals = vec![0.0; models.len()];
    for row in &rows {
        let negated: Vec<f64> = row.iter().map(|v| -v).collect();
        for (t, r) in totals.iter_mut().zip(average_ranks(&negated)) {
            *t += r;
        }
    }
    Ok(models.into_iter().zip(totals).map(|(m, t)| (m, t / rows.len() as f64)).collect())
}

/// Mean over datasets of `regime mean / clean mean` for `model`.
pub fn retention(table: &SummaryTable, model: Architecture, regime: Regime) -> Result<f64, AggregateError> {
    let datasets = table.datasets();
    if datasets.is_empty() {
        return Err(AggregateError::Empty);
    }
    let mut ratios = Vec::new();
    let mut missing = Vec::new();
    for dataset in datasets {
        match (table.get(dataset, model, Regime::Clean), table.get(dataset, model, regime)) {
            (Some(c), Some(r)) => {
                if c.mean == 0.0 {
                    return Err(AggregateError::ZeroClean { model, dataset });
                }
                ratios.push(r.mean / c.mean);
            }
            (c, r) => {
                if c.is_none() {
                    missing.push(format!("{dataset}/{model}/clean"));
                }
                if r.is_none() {
                    missing.push(format!("{dataset}/{model}/{regime}"));
                }
            }
        }
    }
    if missing.is_empty() {
        Ok(mean(&ratios))
    } else {
        Err(AggregateError::Incomplete(missing))
    }
}

/// Seed-mean metric per severity (0 = clean) for one dataset and corruption kind.
#[derive(Clone, Debug, PartialEq)]
pub struct SeverityCurve {
    pub dataset: DatasetName,
    pub kind: CorruptionKind,
    pub models: Vec<Architecture>,
    /// `rows[s][m]`: severity `s`, model `models[m]`.
    pub rows: Vec<Vec<f64>>,
}

impl SeverityCurve {
    pub fn write_csv(&self, w: impl Write) -> Result<(), AggregateError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["severity".to_string()];
        header.extend(self.models.iter().map(|m| m.display_name().to_string()));
        out.write_record(&header)?;
        for (s, row) in self.rows.iter().enumerate() {
            let mut fields = vec![s.to_string()];
            fields.extend(row.iter().map(|v| format!("{v:.6}")));
            out.write_record(&fields)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn severity_curves(records: &RecordSet, seeds: &[u64]) -> Result<Vec<SeverityCurve>, AggregateError> {
    let models: Vec<Architecture> = records.models().into_iter().collect();
    let mut curves = Vec::new();
    let mut missing = Vec::new();
    for dataset in records.datasets() {
        for kind in CorruptionKind::ALL {
            let mut rows = Vec::new();
            for severity in 0..=3u8 {
                let (regime, setting) = if severity == 0 {
                    (Regime::Clean, String::new())
                } else {
                    (Regime::Corruption, format!("{kind}:{severity}"))
                };
                let row: Vec<f64> = models
                    .iter()
                    .map(|&m| {
                        let vals: Vec<f64> = seeds
                            .iter()
                            .filter_map(|&s| {
                                let key = (dataset, m, s, regime, setting.clone());
                                let v = records.get(&key).map(|r| r.value);
                                if v.is_none() {
                                    missing.push(describe(&key));
                                }
                                v
                            })
                            .collect();
                        if vals.is_empty() {
                            f64::NAN
                        } else {
                            mean(&vals)
                        }
                    })
                    .collect();
                rows.push(row);
            }
            curves.push(SeverityCurve { dataset, kind, models: models.clone(), rows });
        }
    }
    if missing.is_empty() {
        Ok(curves)
    } else {
        Err(AggregateError::Incomplete(missing))
    }
}
