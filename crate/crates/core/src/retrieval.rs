//! Stage-one exhaustive retrieval over global descriptors.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FolError, Result};
use crate::model::{GlobalDescriptor, UNIT_NORM_TOL};
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// Default number of stage-one candidates passed to re-ranking.
pub const DEFAULT_TOPK: usize = 100;

pub const INDEX_MATRIX_FILE: &str = "descriptors.folt";
pub const INDEX_IDS_FILE: &str = "ids.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IdLine {
    id: String,
}

/// Immutable stack of unit-norm descriptors with their image ids.
#[derive(Debug, Clone)]
pub struct DescriptorIndex {
    ids: Vec<String>,
    matrix: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub sim: f64,
}

impl DescriptorIndex {
    pub fn build(entries: Vec<(String, GlobalDescriptor)>) -> Result<Self> {
        let Some(dim) = entries.first().map(|(_, d)| d.dim()) else {
            return Err(FolError::invalid("cannot build an index from zero entries"));
        };
        let mut seen = HashSet::new();
        let mut matrix = Array2::<f64>::zeros((entries.len(), dim));
        let mut ids = Vec::with_capacity(entries.len());
        for (r, (id, desc)) in entries.into_iter().enumerate() {
            if desc.dim() != dim {
                return Err(FolError::dim(format!(
                    "descriptor `{id}` has dim {} but the index has dim {dim}",
                    desc.dim()
                )));
            }
            if !seen.insert(id.clone()) {
                return Err(FolError::DuplicateId(id));
            }
            matrix.row_mut(r).assign(&Array1::from(desc.into_vec()));
            ids.push(id);
        }
        Ok(DescriptorIndex { ids, matrix })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    /// The `k` most similar entries by dot product, best first; equal
    /// similarities keep insertion order.
    pub fn query_topk(&self, query: &GlobalDescriptor, k: usize) -> Result<Vec<Hit>> {
        if self.is_empty() {
            return Err(FolError::invalid("query against an empty index"));
        }
        if k == 0 {
            return Err(FolError::invalid("top-k needs k >= 1"));
        }
        if query.dim() != self.dim() {
            return Err(FolError::dim(format!(
                "query dim {} vs index dim {}",
                query.dim(),
                self.dim()
            )));
        }
        let sims = self.matrix.dot(&Array1::from(query.as_slice().to_vec()));
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
        order.truncate(k);
        Ok(order
            .into_iter()
            .map(|i| Hit {
                id: self.ids[i].clone(),
                sim: sims[i],
            })
            .collect())
    }

    /// Runs [`query_topk`](Self::query_topk) for every query; results are
    /// in query order regardless of scheduling.
    pub fn query_batch(&self, queries: &[GlobalDescriptor], k: usize) -> Result<Vec<Vec<Hit>>> {
        queries.par_iter().map(|q| self.query_topk(q, k)).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| FolError::io(dir, e))?;
        write_tensor(&Tensor::from_matrix(&self.matrix), dir.join(INDEX_MATRIX_FILE))?;
        let path = dir.join(INDEX_IDS_FILE);
        let mut out = Vec::new();
        for id in &self.ids {
            serde_json::to_writer(&mut out, &IdLine { id: id.clone() }).expect("string serializes");
            out.push(b'\n');
        }
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| FolError::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let matrix = read_tensor(dir.join(INDEX_MATRIX_FILE))?;
        if matrix.rank() != 2 {
            return Err(FolError::dim("index matrix must be rank 2"));
        }
        let matrix = matrix.to_matrix()?;
        let path = dir.join(INDEX_IDS_FILE);
        let file = fs::File::open(&path).map_err(|e| FolError::io(&path, e))?;
        let mut entries = Vec::with_capacity(matrix.nrows());
        for (r, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| FolError::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let id: IdLine = serde_json::from_str(&line)
                .map_err(|e| FolError::Parse(format!("{}:{}: {e}", path.display(), r + 1)))?;
            if entries.len() >= matrix.nrows() {
                return Err(FolError::dim("more ids than descriptor rows"));
            }
            let row = matrix.row(entries.len()).to_vec();
            let desc = GlobalDescriptor::new(row).map_err(|_| {
                FolError::invalid(format!("index row for `{}` is not unit norm within {UNIT_NORM_TOL}", id.id))
            })?;
            entries.push((id.id, desc));
        }
        if entries.len() != matrix.nrows() {
            return Err(FolError::dim(format!(
                "{} ids for {} descriptor rows",
                entries.len(),
                matrix.nrows()
            )));
        }
        DescriptorIndex::build(entries)
    }
}
