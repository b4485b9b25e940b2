//! Dataset manifests, ground truth and recall@N.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FolError, Result};

/// Distance within which a database image shows the same place.
pub const DEFAULT_RADIUS_M: f64 = 25.0;
/// Frame offset within which a sequence frame shows the same place.
pub const DEFAULT_FRAME_WINDOW: u64 = 10;
pub const DEFAULT_RECALL_NS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Database,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Position {
    Utm { easting: f64, northing: f64 },
    Frame(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRecord", into = "RawRecord")]
pub struct ManifestRecord {
    pub id: String,
    pub role: Role,
    pub position: Position,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    role: Role,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    utm: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    frame: Option<u64>,
}

impl TryFrom<RawRecord> for ManifestRecord {
    type Error = String;

    fn try_from(raw: RawRecord) -> std::result::Result<Self, String> {
        let position = match (raw.utm, raw.frame) {
            (Some([easting, northing]), None) if easting.is_finite() && northing.is_finite() => {
                Position::Utm { easting, northing }
            }
            (None, Some(f)) => Position::Frame(f),
            _ => return Err(format!("record `{}` needs exactly one of \"utm\" or \"frame\"", raw.id)),
        };
        Ok(ManifestRecord {
            id: raw.id,
            role: raw.role,
            position,
        })
    }
}

impl From<ManifestRecord> for RawRecord {
    fn from(r: ManifestRecord) -> Self {
        let (utm, frame) = match r.position {
            Position::Utm { easting, northing } => (Some([easting, northing]), None),
            Position::Frame(f) => (None, Some(f)),
        };
        RawRecord {
            id: r.id,
            role: r.role,
            utm,
            frame,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(FolError::DuplicateId(r.id.clone()));
            }
        }
        let is_utm = |r: &ManifestRecord| matches!(r.position, Position::Utm { .. });
        if let Some(first) = records.first() {
            if records.iter().any(|r| is_utm(r) != is_utm(first)) {
                return Err(FolError::invalid("manifest mixes UTM and frame positions"));
            }
        }
        Ok(DatasetManifest { records })
    }

    pub fn ids_with_role(&self, role: Role) -> impl Iterator<Item = &str> {
        self.records.iter().filter(move |r| r.role == role).map(|r| r.id.as_str())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(line).map_err(|e| FolError::Parse(format!("manifest line {}: {e}", i + 1)))?,
            );
        }
        DatasetManifest::new(records)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| FolError::io(path, e))?;
        DatasetManifest::from_jsonl(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| FolError::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthConfig {
    pub radius_m: f64,
    pub frame_window: u64,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        GroundTruthConfig {
            radius_m: DEFAULT_RADIUS_M,
            frame_window: DEFAULT_FRAME_WINDOW,
        }
    }
}

/// Whether two positions count as the same place.
pub fn is_positive(a: Position, b: Position, cfg: &GroundTruthConfig) -> Result<bool> {
    match (a, b) {
        (Position::Utm { easting: e1, northing: n1 }, Position::Utm { easting: e2, northing: n2 }) => {
            Ok((e1 - e2).hypot(n1 - n2) <= cfg.radius_m)
        }
        (Position::Frame(f1), Position::Frame(f2)) => Ok(f1.abs_diff(f2) <= cfg.frame_window),
        _ => Err(FolError::invalid("cannot compare UTM and frame positions")),
    }
}

pub type GroundTruth = BTreeMap<String, BTreeSet<String>>;

/// Maps every query to the database ids showing the same place (possibly
/// none).
pub fn ground_truth(manifest: &DatasetManifest, cfg: &GroundTruthConfig) -> Result<GroundTruth> {
    let queries: Vec<&ManifestRecord> = manifest.records.iter().filter(|r| r.role == Role::Query).collect();
    let database: Vec<&ManifestRecord> = manifest.records.iter().filter(|r| r.role == Role::Database).collect();
    if queries.is_empty() || database.is_empty() {
        return Err(FolError::invalid("ground truth needs at least one query and one database record"));
    }
    let mut truth = GroundTruth::new();
    for q in queries {
        let mut hits = BTreeSet::new();
        for d in &database {
            if is_positive(q.position, d.position, cfg)? {
                hits.insert(d.id.clone());
            }
        }
        truth.insert(q.id.clone(), hits);
    }
    Ok(truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub n_values: Vec<usize>,
    pub recalls: Vec<f64>,
    pub query_count: usize,
}

impl RecallReport {
    pub fn recall_at(&self, n: usize) -> Option<f64> {
        self.n_values.iter().position(|&x| x == n).map(|i| self.recalls[i])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("N,recall,queries\n");
        for (n, r) in self.n_values.iter().zip(&self.recalls) {
            writeln!(out, "{n},{r:.6},{}", self.query_count).expect("string write");
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Fraction of queries with at least one true positive among their first
/// `N` results, for each requested `N`. Queries without any true positive
/// are left out of the denominator.
pub fn recall_at_n(
    rankings: &BTreeMap<String, Vec<String>>,
    truth: &GroundTruth,
    n_values: &[usize],
) -> Result<RecallReport> {
    if n_values.is_empty() || n_values.contains(&0) {
        return Err(FolError::invalid("recall N values must be >= 1"));
    }
    let mut sorted_ns = n_values.to_vec();
    sorted_ns.sort_unstable();
    sorted_ns.dedup();

    let mut hits = vec![0usize; sorted_ns.len()];
    let mut counted = 0;
    for (query, ranked) in rankings {
        let positives = truth
            .get(query)
            .ok_or_else(|| FolError::invalid(format!("query `{query}` has no ground-truth entry")))?;
        if positives.is_empty() {
            continue;
        }
        counted += 1;
        if let Some(first) = ranked.iter().position(|id| positives.contains(id)) {
            for (h, &n) in hits.iter_mut().zip(&sorted_ns) {
                if first < n {
                    *h += 1;
                }
            }
        }
    }
    if counted == 0 {
        return Err(FolError::invalid("no evaluable queries (none has a true positive)"));
    }
    Ok(RecallReport {
        recalls: hits.iter().map(|&h| h as f64 / counted as f64).collect(),
        n_values: sorted_ns,
        query_count: counted,
    })
}
