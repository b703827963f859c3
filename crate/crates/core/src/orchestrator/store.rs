//! Append-only record store with a sidecar index of completed runs.
//!
//! `records.csv` receives each run's records in one append, then
//! `records.idx` receives the run's key. On open, records of runs absent
//! from the index (an interrupted append) are discarded. [`Store::compact`]
//! rewrites both files in key order, so the final bytes do not depend on the
//! order in which runs finished.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::aggregate::{self, MetricRecord, RecordSet, RECORD_HEADER};
use crate::data::DatasetName;
use crate::models::Architecture;

use super::OrchestratorError;

pub const RECORDS_FILE: &str = "records.csv";
pub const INDEX_FILE: &str = "records.idx";

/// One (model, dataset, seed) training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RunKey {
    pub dataset: DatasetName,
    pub model: Architecture,
    pub seed: u64,
}

impl std::fmt::Display for RunKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/seed {}", self.dataset, self.model, self.seed)
    }
}

impl RunKey {
    fn index_line(&self, count: usize) -> String {
        format!("{},{},{},{}", self.dataset.key(), self.model.key(), self.seed, count)
    }

    fn parse_index_line(line: &str) -> Option<(Self, usize)> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return None;
        }
        let key = RunKey { dataset: f[0].parse().ok()?, model: f[1].parse().ok()?, seed: f[2].parse().ok()? };
        Some((key, f[3].parse().ok()?))
    }

    pub fn of(r: &MetricRecord) -> Self {
        Self { dataset: r.dataset, model: r.model, seed: r.seed }
    }
}

pub struct Store {
    dir: PathBuf,
    completed: BTreeMap<RunKey, usize>,
    records: RecordSet,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestratorError + '_ {
    move |e| OrchestratorError::Io(path.to_path_buf(), e)
}

impl Store {
    /// Opens (or creates) the store in `dir`.
    pub fn open(dir: &Path) -> Result<Self, OrchestratorError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let idx_path = dir.join(INDEX_FILE);
        let mut completed = BTreeMap::new();
        if idx_path.exists() {
            let text = fs::read_to_string(&idx_path).map_err(io_err(&idx_path))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let (key, n) = RunKey::parse_index_line(line)
                    .ok_or_else(|| OrchestratorError::Store(format!("bad index line `{line}`")))?;
                completed.insert(key, n);
            }
        }
        let rec_path = dir.join(RECORDS_FILE);
        let mut records = RecordSet::new();
        if rec_path.exists() {
            let file = File::open(&rec_path).map_err(io_err(&rec_path))?;
            for r in aggregate::read_records(BufReader::new(file))? {
                if completed.contains_key(&RunKey::of(&r)) {
                    records.insert(r)?;
                }
            }
        }
        let mut counts: BTreeMap<RunKey, usize> = BTreeMap::new();
        for r in records.iter() {
            *counts.entry(RunKey::of(r)).or_default() += 1;
        }
        for (key, &n) in &completed {
            let found = counts.get(key).copied().unwrap_or(0);
            if found != n {
                return Err(OrchestratorError::Store(format!("{key}: index lists {n} records, found {found}")));
            }
        }
        Ok(Self { dir: dir.to_path_buf(), completed, records })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn is_complete(&self, key: &RunKey) -> bool {
        self.completed.contains_key(key)
    }

    pub fn completed_runs(&self) -> impl Iterator<Item = &RunKey> {
        self.completed.keys()
    }

    pub fn records(&self) -> &RecordSet {
        &self.records
    }

    /// Appends one run's records, then marks it complete.
    pub fn commit(&mut self, key: RunKey, records: Vec<MetricRecord>) -> Result<(), OrchestratorError> {
        if self.is_complete(&key) {
            return Err(OrchestratorError::Store(format!("{key} is already stored")));
        }
        if let Some(r) = records.iter().find(|r| RunKey::of(r) != key) {
            return Err(OrchestratorError::Store(format!("record for {} committed under {key}", RunKey::of(r))));
        }
        let mut staged = self.records.clone();
        for r in &records {
            staged.insert(r.clone())?;
        }
        let rec_path = self.dir.join(RECORDS_FILE);
        let fresh = !rec_path.exists() || fs::metadata(&rec_path).map_err(io_err(&rec_path))?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(&rec_path).map_err(io_err(&rec_path))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        if fresh {
            w.write_record(RECORD_HEADER).map_err(aggregate::AggregateError::from)?;
        }
        for r in &records {
            w.write_record(aggregate::record_row(r)).map_err(aggregate::AggregateError::from)?;
        }
        w.flush().map_err(io_err(&rec_path))?;
        drop(w);

        let idx_path = self.dir.join(INDEX_FILE);
        let mut idx = OpenOptions::new().create(true).append(true).open(&idx_path).map_err(io_err(&idx_path))?;
        writeln!(idx, "{}", key.index_line(records.len())).map_err(io_err(&idx_path))?;
        idx.sync_data().map_err(io_err(&idx_path))?;

        self.completed.insert(key, records.len());
        self.records = staged;
        Ok(())
    }

    /// Rewrites both files in key order, dropping anything not indexed.
    pub fn compact(&self) -> Result<(), OrchestratorError> {
        let rec_path = self.dir.join(RECORDS_FILE);
        let tmp = self.dir.join(format!("{RECORDS_FILE}.tmp"));
        let mut buf = Vec::new();
        self.records.write_csv(&mut buf)?;
        fs::write(&tmp, buf).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &rec_path).map_err(io_err(&rec_path))?;

        let idx_path = self.dir.join(INDEX_FILE);
        let tmp = self.dir.join(format!("{INDEX_FILE}.tmp"));
        let text: String = self.completed.iter().map(|(k, &n)| k.index_line(n) + "\n").collect();
        fs::write(&tmp, text).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &idx_path).map_err(io_err(&idx_path))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::Regime;
    use crate::metrics::MetricName;

    fn run(seed: u64, value: f64) -> (RunKey, Vec<MetricRecord>) {
        let key = RunKey { dataset: DatasetName::BreastMnist, model: Architecture::Abmil, seed };
        let recs = vec![
            MetricRecord {
                dataset: key.dataset,
                model: key.model,
                seed,
                regime: Regime::Clean,
                setting: None,
                metric: MetricName::Auc,
                value,
            },
            MetricRecord {
                dataset: key.dataset,
                model: key.model,
                seed,
                regime: Regime::Fgsm,
                setting: Some("fgsm:8/255".into()),
                metric: MetricName::Auc,
                value: value / 2.0,
            },
        ];
        (key, recs)
    }

    #[test]
    fn commit_reopen_and_compact() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Store::open(dir.path()).unwrap();
        let (k5, r5) = run(5, 0.8);
        let (k3, r3) = run(3, 0.6);
        s.commit(k5, r5.clone()).unwrap();
        s.commit(k3, r3).unwrap();
        assert!(s.commit(k5, r5).is_err());
        let reopened = Store::open(dir.path()).unwrap();
        assert_eq!(reopened.records(), s.records());
        assert!(reopened.is_complete(&k3));
        s.compact().unwrap();
        let text = fs::read_to_string(dir.path().join(RECORDS_FILE)).unwrap();
        let seeds: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
        assert_eq!(seeds, vec!["3", "3", "5", "5"]);
        let idx = fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap();
        assert_eq!(idx, "breastmnist,abmil,3,2\nbreastmnist,abmil,5,2\n");
    }

    #[test]
    fn unindexed_records_are_dropped_on_open() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Store::open(dir.path()).unwrap();
        let (k3, r3) = run(3, 0.6);
        s.commit(k3, r3).unwrap();
        // an interrupted append: records written, index line missing
        let mut f = OpenOptions::new().append(true).open(dir.path().join(RECORDS_FILE)).unwrap();
        writeln!(f, "breastmnist,abmil,7,clean,,auc,0.5").unwrap();
        let s = Store::open(dir.path()).unwrap();
        assert_eq!(s.records().len(), 2);
        assert!(!s.is_complete(&RunKey { seed: 7, ..k3 }));
    }

    #[test]
    fn index_and_records_must_agree() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Store::open(dir.path()).unwrap();
        let (k3, r3) = run(3, 0.6);
        s.commit(k3, r3).unwrap();
        fs::write(dir.path().join(INDEX_FILE), "breastmnist,abmil,3,5\n").unwrap();
        assert!(matches!(Store::open(dir.path()), Err(OrchestratorError::Store(_))));
    }
}
