//! Brute-force cosine search over unit-norm foreground embeddings, at the
//! instance level and over pattern centroids.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::vector::{dot, l2_normalize};

pub const STORE_FORMAT_VERSION: u32 = 1;

/// Immutable matrix of unit-norm embeddings with instance and pattern ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    d: usize,
    rows: Vec<f32>,
    ids: Vec<String>,
    pattern_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

/// Ranks `n` rows by descending score, ties by ascending id, and keeps `k`.
fn rank(scores: Vec<f64>, ids: &[String], k: usize) -> Vec<Hit> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| ids[a].cmp(&ids[b]))
    });
    order
        .into_iter()
        .take(k)
        .map(|i| Hit {
            id: ids[i].clone(),
            score: scores[i].clamp(-1.0, 1.0),
        })
        .collect()
}

impl EmbeddingStore {
    /// Normalizes every row. Rows must share dimension `d`; ids must be
    /// unique.
    pub fn build(d: usize, embeddings: &[Vec<f32>], ids: Vec<String>, pattern_ids: Vec<String>) -> Result<Self> {
        check_dim(embeddings.len(), ids.len())?;
        check_dim(embeddings.len(), pattern_ids.len())?;
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!("duplicate id '{id}' in embedding store")));
            }
        }
        let mut rows = Vec::with_capacity(d * embeddings.len());
        for e in embeddings {
            check_dim(d, e.len())?;
            rows.extend(l2_normalize(e)?);
        }
        Ok(Self { d, rows, ids, pattern_ids })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn pattern_ids(&self) -> &[String] {
        &self.pattern_ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    fn scores(&self, q: &[f32]) -> Result<Vec<f64>> {
        check_dim(self.d, q.len())?;
        Ok((0..self.len()).map(|i| dot(q, self.row(i))).collect())
    }

    /// Top-`k` rows by cosine to the unit query `q`. A `k` beyond the store
    /// size returns the full ranking.
    pub fn search_instances(&self, q: &[f32], k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        Ok(rank(self.scores(q)?, &self.ids, k))
    }

    /// Member row indices per pattern id.
    pub fn members(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, p) in self.pattern_ids.iter().enumerate() {
            out.entry(p.clone()).or_default().push(i);
        }
        out
    }

    fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.payload()))
    }

    fn payload(&self) -> Vec<u8> {
        self.rows.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Writes `<path>` (JSON manifest) and its sibling `.bin` matrix.
    pub fn save(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        let bin = bin_path(path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let manifest = StoreManifest {
            format_version: STORE_FORMAT_VERSION,
            d: self.d,
            n: self.len(),
            ids: self.ids.clone(),
            pattern_ids: self.pattern_ids.clone(),
            matrix_file: bin.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            sha256: self.checksum(),
            config_hash: config_hash.map(str::to_string),
        };
        std::fs::write(&bin, self.payload()).map_err(|e| Error::io(&bin, e))?;
        let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(format!("embedding store {}", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: StoreManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if m.format_version != STORE_FORMAT_VERSION {
            return Err(Error::corrupt(path, format!("unsupported store version {}", m.format_version)));
        }
        let bin = path.parent().unwrap_or(Path::new(".")).join(&m.matrix_file);
        if !bin.exists() {
            return Err(Error::Missing(format!("embedding matrix {}", bin.display())));
        }
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if hex::encode(Sha256::digest(&bytes)) != m.sha256 {
            return Err(Error::corrupt(&bin, "matrix checksum mismatch"));
        }
        if bytes.len() != m.d * m.n * 4 || m.ids.len() != m.n || m.pattern_ids.len() != m.n {
            return Err(Error::corrupt(path, "store dimensions disagree with its contents"));
        }
        let rows = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            d: m.d,
            rows,
            ids: m.ids,
            pattern_ids: m.pattern_ids,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreManifest {
    pub format_version: u32,
    pub d: usize,
    pub n: usize,
    pub ids: Vec<String>,
    pub pattern_ids: Vec<String>,
    pub matrix_file: String,
    pub sha256: String,
    #[serde(default)]
    pub config_hash: Option<String>,
}

fn bin_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

/// Same as [`EmbeddingStore::build`].
pub fn build_index(d: usize, embeddings: &[Vec<f32>], ids: Vec<String>, pattern_ids: Vec<String>) -> Result<EmbeddingStore> {
    EmbeddingStore::build(d, embeddings, ids, pattern_ids)
}

/// One normalized centroid per pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternIndex {
    d: usize,
    rows: Vec<f32>,
    pattern_ids: Vec<String>,
    members: Vec<Vec<String>>,
}

/// Mean of member embeddings, then normalized. A zero mean is an error.
pub fn pattern_centroids(store: &EmbeddingStore) -> Result<PatternIndex> {
    let d = store.dim();
    let mut rows = Vec::new();
    let mut pattern_ids = Vec::new();
    let mut members = Vec::new();
    for (pid, idx) in store.members() {
        let mut mean = vec![0.0f64; d];
        for &i in &idx {
            for (m, &v) in mean.iter_mut().zip(store.row(i)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= idx.len() as f64);
        let c = l2_normalize(&mean).map_err(|_| Error::degenerate(format!("pattern {pid} has a zero-mean centroid")))?;
        rows.extend(c.iter().map(|&v| v as f32));
        let mut ids: Vec<String> = idx.iter().map(|&i| store.ids()[i].clone()).collect();
        ids.sort();
        members.push(ids);
        pattern_ids.push(pid);
    }
    Ok(PatternIndex {
        d,
        rows,
        pattern_ids,
        members,
    })
}

impl PatternIndex {
    pub fn len(&self) -> usize {
        self.pattern_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pattern_ids.is_empty()
    }

    pub fn pattern_ids(&self) -> &[String] {
        &self.pattern_ids
    }

    pub fn centroid(&self, pattern_id: &str) -> Option<&[f32]> {
        let i = self.pattern_ids.iter().position(|p| p == pattern_id)?;
        Some(&self.rows[i * self.d..(i + 1) * self.d])
    }

    /// Member instance ids of a pattern, ascending.
    pub fn members_of(&self, pattern_id: &str) -> &[String] {
        self.pattern_ids
            .iter()
            .position(|p| p == pattern_id)
            .map_or(&[], |i| self.members[i].as_slice())
    }

    pub fn search_patterns(&self, q: &[f32], k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        check_dim(self.d, q.len())?;
        let scores = (0..self.len())
            .map(|i| dot(q, &self.rows[i * self.d..(i + 1) * self.d]))
            .collect();
        Ok(rank(scores, &self.pattern_ids, k))
    }
}

/// Column of a pattern-level result grid: the pattern and its members ranked
/// by similarity to the query.
#[derive(Debug, Clone, PartialEq)]
pub struct GridColumn {
    pub pattern: Hit,
    pub members: Vec<Hit>,
}

/// Expands the top-`k` patterns into their `per_pattern` best members.
pub fn pattern_grid(store: &EmbeddingStore, index: &PatternIndex, q: &[f32], k: usize, per_pattern: usize) -> Result<Vec<GridColumn>> {
    let patterns = index.search_patterns(q, k)?;
    patterns
        .into_iter()
        .map(|p| {
            let ids: Vec<String> = index.members_of(&p.id).to_vec();
            let scores = ids
                .iter()
                .map(|id| dot(q, store.row(store.index_of(id).expect("member of store"))))
                .collect();
            Ok(GridColumn {
                members: rank(scores, &ids, per_pattern),
                pattern: p,
            })
        })
        .collect()
}
