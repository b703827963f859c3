//! Result tables, rank and retention summaries, and severity-curve data.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::aggregate::{self, AggregateError, Cell, RecordSet, Regime, SettingGrid, SummaryTable};
use crate::data::DatasetName;
use crate::models::Architecture;

use super::{io_err, OrchestratorError, Store, RECORDS_FILE};

/// Canonical copy of externally supplied means written by `inject`.
pub const INJECTED_FILE: &str = "injected_means.csv";

/// Restricts a report; `None` selects everything present in the store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportScope {
    pub datasets: Option<Vec<DatasetName>>,
    pub models: Option<Vec<Architecture>>,
    pub seeds: Option<Vec<u64>>,
    pub regimes: Option<Vec<Regime>>,
}

/// Everything a report writes, computed before any file is touched.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub table: SummaryTable,
    pub ranks: BTreeMap<Regime, BTreeMap<Architecture, f64>>,
    /// `retention[model][regime]` for every non-clean regime in scope.
    pub retention: BTreeMap<Architecture, BTreeMap<Regime, f64>>,
    pub files: Vec<(PathBuf, Vec<u8>)>,
}

fn keep<T: PartialEq>(filter: &Option<Vec<T>>, v: &T) -> bool {
    filter.as_ref().is_none_or(|f| f.contains(v))
}

fn ordered<T: Ord + Copy>(all: &[T], present: impl IntoIterator<Item = T>, filter: &Option<Vec<T>>) -> Vec<T> {
    let present: Vec<T> = present.into_iter().collect();
    match filter {
        Some(f) => all.iter().copied().filter(|x| f.contains(x)).collect(),
        None => all.iter().copied().filter(|x| present.contains(x)).collect(),
    }
}

/// Builds the report for `out_dir` (stored records, or injected means when
/// no records exist) and writes it there. Nothing is written on error.
pub fn report(out_dir: &Path, scope: &ReportScope, grid: &SettingGrid) -> Result<Report, OrchestratorError> {
    let report = build(out_dir, scope, grid)?;
    for (path, bytes) in &report.files {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(path, bytes).map_err(io_err(path))?;
    }
    Ok(report)
}

pub fn build(out_dir: &Path, scope: &ReportScope, grid: &SettingGrid) -> Result<Report, OrchestratorError> {
    let has_records = out_dir.join(RECORDS_FILE).is_file();
    let injected = out_dir.join(INJECTED_FILE);
    let (table, records, regimes) = if has_records {
        let store = Store::open(out_dir)?;
        let records = RecordSet::from_records(
            store
                .records()
                .iter()
                .filter(|r| keep(&scope.datasets, &r.dataset) && keep(&scope.models, &r.model) && keep(&scope.seeds, &r.seed))
                .cloned(),
        )?;
        if records.is_empty() {
            return Err(OrchestratorError::EmptyScope(format!("no records in {} match the scope", out_dir.display())));
        }
        let datasets = ordered(&DatasetName::ALL, records.datasets(), &scope.datasets);
        let models = ordered(&Architecture::ALL, records.models(), &scope.models);
        let regimes = ordered(&Regime::ALL, records.regimes(), &scope.regimes);
        let seeds: Vec<u64> = match &scope.seeds {
            Some(s) => s.clone(),
            None => records.seeds().into_iter().collect(),
        };
        check_complete(&records, grid, &datasets, &models, &seeds, &regimes)?;
        let table = aggregate::summarize(&records, grid, &seeds, &regimes)?;
        (table, Some((records, seeds)), regimes)
    } else if injected.is_file() {
        let file = fs::File::open(&injected).map_err(io_err(&injected))?;
        let full = SummaryTable::read_csv(std::io::BufReader::new(file))?;
        let mut table = SummaryTable::new();
        for ((d, m, r), c) in full.iter() {
            if keep(&scope.datasets, &d) && keep(&scope.models, &m) && keep(&scope.regimes, &r) {
                table.insert(d, m, r, *c);
            }
        }
        if table.is_empty() {
            return Err(OrchestratorError::EmptyScope(format!("no injected means in {} match the scope", out_dir.display())));
        }
        let datasets = ordered(&DatasetName::ALL, table.datasets(), &scope.datasets);
        let models = ordered(&Architecture::ALL, table.models(), &scope.models);
        let regimes = ordered(&Regime::ALL, table.regimes(), &scope.regimes);
        let mut missing = Vec::new();
        for &d in &datasets {
            for &m in &models {
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
        (table, None, regimes)
    } else {
        return Err(OrchestratorError::EmptyScope(format!(
            "{} holds neither {RECORDS_FILE} nor {INJECTED_FILE}",
            out_dir.display()
        )));
    };

    let mut ranks = BTreeMap::new();
    for &r in &regimes {
        ranks.insert(r, aggregate::mean_ranks(&table, r)?);
    }
    let mut retention: BTreeMap<Architecture, BTreeMap<Regime, f64>> = BTreeMap::new();
    if regimes.contains(&Regime::Clean) {
        for m in table.models() {
            for &r in regimes.iter().filter(|&&r| r != Regime::Clean) {
                retention.entry(m).or_default().insert(r, aggregate::retention(&table, m, r)?);
            }
        }
    }

    let mut files = Vec::new();
    let panels = [
        ("clean_corruption.csv", [Regime::Clean, Regime::Corruption]),
        ("attacks.csv", [Regime::Fgsm, Regime::Pgd]),
    ];
    for (name, pair) in panels {
        let cols: Vec<Regime> = pair.into_iter().filter(|r| regimes.contains(r)).collect();
        if !cols.is_empty() {
            files.push((out_dir.join(name), render_table(&table, &cols, &ranks)?));
        }
    }
    files.push((out_dir.join("ranks.json"), json_bytes(&ranks_json(&ranks))?));
    if !retention.is_empty() {
        files.push((out_dir.join("retention.json"), json_bytes(&retention_json(&retention))?));
    }
    let mut summary = Vec::new();
    table.write_csv(&mut summary)?;
    files.push((out_dir.join("summary.csv"), summary));
    files.push((out_dir.join("summary.json"), json_bytes(&table.to_json())?));
    if let Some((records, seeds)) = &records {
        if regimes.contains(&Regime::Clean) && regimes.contains(&Regime::Corruption) {
            for curve in aggregate::severity_curves(records, seeds)? {
                let mut bytes = Vec::new();
                curve.write_csv(&mut bytes)?;
                let path = out_dir.join("severity_curves").join(format!("{}_{}.csv", curve.dataset.key(), curve.kind.key()));
                files.push((path, bytes));
            }
        }
    }
    Ok(Report { table, ranks, retention, files })
}

fn check_complete(
    records: &RecordSet,
    grid: &SettingGrid,
    datasets: &[DatasetName],
    models: &[Architecture],
    seeds: &[u64],
    regimes: &[Regime],
) -> Result<(), OrchestratorError> {
    let mut missing = Vec::new();
    for &d in datasets {
        for &m in models {
            for &s in seeds {
                for &r in regimes {
                    match aggregate::regime_mean_per_seed(records, grid, d, m, s, r) {
                        Ok(_) => {}
                        Err(AggregateError::Incomplete(mut v)) => missing.append(&mut v),
                        Err(e) => return Err(e.into()),
                    }
                }
            }
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(AggregateError::Incomplete(missing).into())
    }
}

fn cell_text(c: &Cell) -> String {
    format!("{:.3} ± {:.3}", c.mean, c.std)
}

/// One row per dataset, one column per model within each regime, and a
/// mean-rank footer.
fn render_table(
    table: &SummaryTable,
    regimes: &[Regime],
    ranks: &BTreeMap<Regime, BTreeMap<Architecture, f64>>,
) -> Result<Vec<u8>, OrchestratorError> {
    let models = table.models();
    let mut out = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["dataset".to_string(), "metric".to_string()];
    for r in regimes {
        header.extend(models.iter().map(|m| format!("{} ({r})", m.display_name())));
    }
    out.write_record(&header).map_err(AggregateError::from)?;
    for d in table.datasets() {
        let metric = models
            .iter()
            .find_map(|&m| table.get(d, m, Regime::Clean).or_else(|| table.get(d, m, regimes[0])).and_then(|c| c.metric))
            .map(|m| m.key().to_string())
            .unwrap_or_default();
        let mut row = vec![d.display_name().to_string(), metric];
        for &r in regimes {
            for &m in &models {
                row.push(table.get(d, m, r).map(cell_text).unwrap_or_default());
            }
        }
        out.write_record(&row).map_err(AggregateError::from)?;
    }
    let mut footer = vec!["Mean rank".to_string(), String::new()];
    for r in regimes {
        footer.extend(models.iter().map(|m| format!("{:.2}", ranks[r][m])));
    }
    out.write_record(&footer).map_err(AggregateError::from)?;
    out.into_inner().map_err(|e| OrchestratorError::Store(e.to_string()))
}

fn ranks_json(ranks: &BTreeMap<Regime, BTreeMap<Architecture, f64>>) -> serde_json::Value {
    let mut obj = serde_json::Map::new();
    for (r, per_model) in ranks {
        let inner = per_model.iter().map(|(m, v)| (m.key().to_string(), serde_json::json!(v))).collect();
        obj.insert(r.key().to_string(), serde_json::Value::Object(inner));
    }
    serde_json::Value::Object(obj)
}

fn retention_json(retention: &BTreeMap<Architecture, BTreeMap<Regime, f64>>) -> serde_json::Value {
    let mut obj = serde_json::Map::new();
    for (m, per_regime) in retention {
        let inner = per_regime.iter().map(|(r, v)| (r.key().to_string(), serde_json::json!(v))).collect();
        obj.insert(m.key().to_string(), serde_json::Value::Object(inner));
    }
    serde_json::Value::Object(obj)
}

fn json_bytes(v: &serde_json::Value) -> Result<Vec<u8>, OrchestratorError> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(|e| OrchestratorError::Store(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}
