//! Evaluated candidates, indexed for duplicate lookup, optionally mirrored
//! to a JSON-lines file as they arrive.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{parse, ExprTree};
use crate::loss_check::RejectReason;
use crate::loss_expr::{canonical, Fingerprint};

#[derive(Clone, Debug, PartialEq)]
pub enum RecordStatus {
    Finished,
    Rejected(RejectReason),
    /// Reward copied from the record with this canonical form.
    CachedFrom(String),
}

impl fmt::Display for RecordStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordStatus::Finished => f.write_str("finished"),
            RecordStatus::Rejected(r) => write!(f, "rejected:{r}"),
            RecordStatus::CachedFrom(c) => write!(f, "cached-from:{c}"),
        }
    }
}

impl std::str::FromStr for RecordStatus {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "finished" {
            return Ok(RecordStatus::Finished);
        }
        if let Some(reason) = s.strip_prefix("rejected:") {
            return RejectReason::from_str_opt(reason)
                .map(RecordStatus::Rejected)
                .ok_or_else(|| format!("unknown rejection reason `{reason}`"));
        }
        if let Some(c) = s.strip_prefix("cached-from:") {
            return Ok(RecordStatus::CachedFrom(c.to_string()));
        }
        Err(format!("unknown status `{s}`"))
    }
}

impl Serialize for RecordStatus {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RecordStatus {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveRecord {
    pub expr: String,
    pub canonical: String,
    /// Best validation balanced accuracy; partial for early rejections.
    pub reward: f64,
    pub status: RecordStatus,
    pub episode: usize,
    pub trial: usize,
    pub wall_ms: u64,
}

impl ArchiveRecord {
    pub fn new(tree: &ExprTree, reward: f64, status: RecordStatus, episode: usize, trial: usize, wall_ms: u64) -> Self {
        Self {
            expr: tree.to_string(),
            canonical: canonical(tree),
            reward,
            status,
            episode,
            trial,
            wall_ms,
        }
    }

    /// The reward the search sees: rejected candidates score zero.
    pub fn search_reward(&self) -> f64 {
        match self.status {
            RecordStatus::Rejected(_) => 0.0,
            _ => self.reward,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.status == RecordStatus::Finished
    }

    pub fn tree(&self) -> Result<ExprTree> {
        parse(&self.expr)
    }
}

#[derive(Debug, Default)]
pub struct Archive {
    records: Vec<ArchiveRecord>,
    by_canonical: HashMap<String, usize>,
    by_fingerprint: HashMap<u64, usize>,
    sink: Option<(PathBuf, File)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    /// An empty archive that appends every inserted record to `path`.
    pub fn with_sink(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            sink: Some((path, file)),
            ..Self::default()
        })
    }

    /// Reads a JSON-lines archive. Fingerprints are not stored on disk; use
    /// [`Archive::index_fingerprint`] to rebuild that index if needed.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut archive = Self::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ArchiveRecord = serde_json::from_str(&line).map_err(|e| Error::Data {
                file: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            archive.insert(record, None)?;
        }
        Ok(archive)
    }

    /// Adds a record, indexing it by canonical text (first one wins) and by
    /// fingerprint if given. Returns its index.
    pub fn insert(&mut self, record: ArchiveRecord, fingerprint: Option<Fingerprint>) -> Result<usize> {
        if let Some((path, file)) = &mut self.sink {
            let mut line = serde_json::to_string(&record)?;
            line.push('\n');
            file.write_all(line.as_bytes()).map_err(|e| Error::io(path.as_path(), e))?;
            file.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        let idx = self.records.len();
        self.by_canonical.entry(record.canonical.clone()).or_insert(idx);
        if let Some(fp) = fingerprint {
            self.index_fingerprint(idx, fp.hash);
        }
        self.records.push(record);
        Ok(idx)
    }

    pub fn index_fingerprint(&mut self, idx: usize, hash: u64) {
        self.by_fingerprint.entry(hash).or_insert(idx);
    }

    pub fn lookup_canonical(&self, canonical: &str) -> Option<usize> {
        self.by_canonical.get(canonical).copied()
    }

    pub fn lookup_fingerprint(&self, hash: u64) -> Option<usize> {
        self.by_fingerprint.get(&hash).copied()
    }

    pub fn records(&self) -> &[ArchiveRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn path(&self) -> Option<&Path> {
        self.sink.as_ref().map(|(p, _)| p.as_path())
    }

    /// Indices of the `k` best finished records, best first. Ties go to the
    /// earlier record.
    pub fn top_finished(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.records.len()).filter(|&i| self.records[i].is_finished()).collect();
        idx.sort_by(|&a, &b| self.records[b].reward.total_cmp(&self.records[a].reward).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }

    /// Reward of the k-th best finished record, if there are at least k.
    pub fn kth_best(&self, k: usize) -> Option<f64> {
        let top = self.top_finished(k);
        (k > 0 && top.len() == k).then(|| self.records[top[k - 1]].reward)
    }

    pub fn max_reward(&self) -> f64 {
        self.records.iter().map(ArchiveRecord::search_reward).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(expr: &str, reward: f64, status: RecordStatus) -> ArchiveRecord {
        ArchiveRecord::new(&parse(expr).unwrap(), reward, status, 0, 0, 0)
    }

    #[test]
    fn status_round_trip() {
        for s in [
            RecordStatus::Finished,
            RecordStatus::Rejected(RejectReason::NonMonotone),
            RecordStatus::CachedFrom("add(N,yhat)".into()),
        ] {
            assert_eq!(s.to_string().parse::<RecordStatus>().unwrap(), s);
        }
        assert!("rejected:bogus".parse::<RecordStatus>().is_err());
    }

    #[test]
    fn ranking_and_rewards() {
        let mut a = Archive::new();
        a.insert(rec("mul(y,mul(yhat,N))", 0.5, RecordStatus::Finished), None).unwrap();
        a.insert(rec("add(y,mul(yhat,N))", 0.9, RecordStatus::Rejected(RejectReason::PoorPerformance)), None)
            .unwrap();
        a.insert(rec("add(N,mul(yhat,y))", 0.7, RecordStatus::Finished), None).unwrap();
        a.insert(rec("add(N,mul(y,yhat))", 0.7, RecordStatus::CachedFrom("x".into())), None).unwrap();
        assert_eq!(a.top_finished(10), vec![2, 0]);
        assert_eq!(a.kth_best(2), Some(0.5));
        assert_eq!(a.kth_best(3), None);
        assert_eq!(a.records()[1].search_reward(), 0.0);
        assert_eq!(a.max_reward(), 0.7);
        // canonical index keeps the first record
        assert_eq!(a.lookup_canonical("add(N,mul(y,yhat))"), Some(2));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("archive.jsonl");
        let mut a = Archive::with_sink(&path).unwrap();
        a.insert(rec("mul(y,mul(yhat,N))", 0.5, RecordStatus::Finished), None).unwrap();
        a.insert(rec("add(y,mul(yhat,N))", 0.1, RecordStatus::Rejected(RejectReason::NonFinite)), None).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["expr", "canonical", "reward", "status", "episode", "trial", "wall_ms"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        assert_eq!(first["status"], "finished");
        let b = Archive::load(&path).unwrap();
        assert_eq!(b.records(), a.records());
    }

    #[test]
    fn load_reports_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"expr\": 1}\n").unwrap();
        assert!(matches!(Archive::load(&path), Err(Error::Data { line: 1, .. })));
    }
}
