//! On-disk layout of pipeline artifacts.
//!
//! ```text
//! DATA/manifest.jsonl
//! DATA/clusters.folt              (m+1) x (d+1) packed cluster parameters
//! DATA/synth.json                 generator summary (synthetic sets only)
//! DATA/images/<id>/patches.folt   h x w x d
//! DATA/images/<id>/cls.folt       d
//! DATA/images/<id>/attn.folt      heads x n
//! DATA/images/<id>/local.folt     h_l x w_l x d_l
//! DATA/images/<id>/reduced.folt   h x w x l (optional)
//! AGG/<id>/descriptor.folt        global descriptor
//! AGG/<id>/assignment.folt        n x (m+1) transport plan
//! AGG/<id>/mask_e.folt, mask_a.folt, mask.folt   h x w masks
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{FolError, Result};
use crate::model::{AssignmentMatrix, AttentionStack, DiscriminativeMask, FeatureMap, GlobalDescriptor, LocalFeatureMap};
use crate::rerank::Reranked;
use crate::retrieval::Hit;
use crate::synth::SynthSceneSet;
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CLUSTERS_FILE: &str = "clusters.folt";
pub const SYNTH_FILE: &str = "synth.json";
pub const IMAGES_DIR: &str = "images";

pub const PATCHES_FILE: &str = "patches.folt";
pub const CLS_FILE: &str = "cls.folt";
pub const ATTENTION_FILE: &str = "attn.folt";
pub const LOCAL_FILE: &str = "local.folt";
pub const REDUCED_FILE: &str = "reduced.folt";

pub const DESCRIPTOR_FILE: &str = "descriptor.folt";
pub const ASSIGNMENT_FILE: &str = "assignment.folt";
pub const MASK_E_FILE: &str = "mask_e.folt";
pub const MASK_A_FILE: &str = "mask_a.folt";
pub const MASK_FILE: &str = "mask.folt";

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FolError::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| FolError::io(path, e))
}

/// Names of the subdirectories of `dir`, sorted.
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| FolError::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| FolError::io(dir, e))?;
        if entry.path().is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

/// Resolves the per-image directory root: `dir/images` when present,
/// `dir` otherwise.
pub fn images_root(dir: &Path) -> PathBuf {
    let nested = dir.join(IMAGES_DIR);
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

pub fn load_feature_map(image_dir: &Path) -> Result<FeatureMap> {
    let patches = read_tensor(image_dir.join(PATCHES_FILE))?;
    let cls = read_tensor(image_dir.join(CLS_FILE))?;
    let reduced_path = image_dir.join(REDUCED_FILE);
    let reduced = if reduced_path.exists() {
        Some(read_tensor(reduced_path)?)
    } else {
        None
    };
    FeatureMap::from_tensors(&patches, &cls, reduced.as_ref())
}

pub fn load_attention(image_dir: &Path) -> Result<AttentionStack> {
    AttentionStack::from_tensor(&read_tensor(image_dir.join(ATTENTION_FILE))?)
}

pub fn load_local(image_dir: &Path) -> Result<LocalFeatureMap> {
    LocalFeatureMap::from_tensor(&read_tensor(image_dir.join(LOCAL_FILE))?)
}

pub fn load_descriptor(agg_dir: &Path) -> Result<GlobalDescriptor> {
    let path = agg_dir.join(DESCRIPTOR_FILE);
    let t = read_tensor(&path)?;
    if t.rank() != 1 {
        return Err(FolError::dim(format!("{} must be rank 1", path.display())));
    }
    // Stored as f32, so renormalize in f64 before the unit-norm check.
    GlobalDescriptor::from_unnormalized(t.to_vector().as_slice().expect("contiguous"))
}

pub fn load_assignment(agg_dir: &Path) -> Result<AssignmentMatrix> {
    AssignmentMatrix::from_tensor(&read_tensor(agg_dir.join(ASSIGNMENT_FILE))?)
}

pub fn load_mask(agg_dir: &Path, file: &str) -> Result<DiscriminativeMask> {
    DiscriminativeMask::from_tensor(&read_tensor(agg_dir.join(file))?)
}

/// Writes a synthetic set in the layout above. Files are written in id
/// order so the tree is identical across runs.
pub fn write_scene_set(set: &SynthSceneSet, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    set.manifest.save(dir.join(MANIFEST_FILE))?;
    write_tensor(&set.clusters.to_tensor(), dir.join(CLUSTERS_FILE))?;
    let mut summary = serde_json::to_string_pretty(&set.summary).expect("summary serializes");
    summary.push('\n');
    write_text(&dir.join(SYNTH_FILE), &summary)?;
    let images = dir.join(IMAGES_DIR);
    for im in &set.images {
        let d = images.join(&im.id);
        create_dir(&d)?;
        write_tensor(&im.patches, d.join(PATCHES_FILE))?;
        write_tensor(&im.cls, d.join(CLS_FILE))?;
        write_tensor(&im.attention, d.join(ATTENTION_FILE))?;
        write_tensor(&im.local, d.join(LOCAL_FILE))?;
    }
    Ok(())
}

pub fn write_mask(mask: &DiscriminativeMask, path: &Path) -> Result<()> {
    write_tensor(&mask.to_tensor(), path)
}

pub fn write_descriptor(desc: &GlobalDescriptor, path: &Path) -> Result<()> {
    write_tensor(&Tensor::from_vector(desc.as_slice()), path)
}

/// One line of a stage-one ranking file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub query: String,
    pub results: Vec<Hit>,
}

/// One line of a re-ranked file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankRecord {
    pub query: String,
    pub results: Vec<Reranked>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| FolError::Parse(e.to_string()))?;
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| FolError::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| FolError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| FolError::Parse(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_scene_set, SynthParams};

    #[test]
    fn scene_set_round_trip() {
        let p = SynthParams {
            places: 3,
            views_per_place: 2,
            alias_pairs: 1,
            height: 3,
            width: 3,
            dim: 8,
            clusters: 4,
            local_dim: 4,
            heads: 2,
            ..Default::default()
        };
        let set = synth_scene_set(2, &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_scene_set(&set, dir.path()).unwrap();
        let root = images_root(dir.path());
        let ids = list_ids(&root).unwrap();
        assert_eq!(ids.len(), 6);
        let fm = load_feature_map(&root.join(&ids[0])).unwrap();
        assert_eq!((fm.height(), fm.width(), fm.dim()), (3, 3, 8));
        assert_eq!(load_attention(&root.join(&ids[0])).unwrap().num_heads(), 2);
        assert_eq!(load_local(&root.join(&ids[0])).unwrap().height(), 6);
        let manifest = crate::eval::DatasetManifest::load(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest, set.manifest);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rank.jsonl");
        let recs = vec![RankRecord {
            query: "q".into(),
            results: vec![Hit { id: "a".into(), sim: 0.5 }],
        }];
        write_jsonl(&path, &recs).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "{\"query\":\"q\",\"results\":[{\"id\":\"a\",\"sim\":0.5}]}\n");
        assert_eq!(read_jsonl::<RankRecord>(&path).unwrap(), recs);
        let missing = read_jsonl::<RankRecord>(&dir.path().join("nope.jsonl"));
        assert!(matches!(missing, Err(FolError::Io { .. })));
    }
}
