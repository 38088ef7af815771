//! On-disk dataset layout: `manifest.json` plus lossless PNG files under
//! `instances/` and `queries/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Corpus, InstanceRecord, QueryRecord, Split};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::types::{AttributeVector, ForegroundInstance, QueryInput, Rectangle};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceEntry {
    pub id: String,
    /// Path relative to the manifest directory.
    pub image: String,
    pub attributes: Option<AttributeVector>,
    pub pattern_id: Option<String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryEntry {
    pub id: String,
    pub background: String,
    pub rect: Rectangle,
    pub split: Split,
    #[serde(default)]
    pub scene_label: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub category: String,
    pub schema_hash: String,
    #[serde(default)]
    pub config_hash: Option<String>,
    pub num_patterns: usize,
    pub instances: Vec<InstanceEntry>,
    pub queries: Vec<QueryEntry>,
    pub compatibility: BTreeMap<String, Vec<String>>,
}

fn file_stem(index: usize, id: &str) -> String {
    let clean: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{index:05}-{clean}.png")
}

/// Resolves a dataset argument that may name either the directory or the
/// manifest file itself.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "json") {
        path.to_path_buf()
    } else {
        path.join(MANIFEST_FILE)
    }
}

/// Writes `corpus` under `dir` and returns the manifest path.
pub fn write_corpus(corpus: &Corpus, dir: &Path, config_hash: Option<&str>) -> Result<PathBuf> {
    corpus.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut instances = Vec::with_capacity(corpus.instances.len());
    for (i, r) in corpus.instances.iter().enumerate() {
        let rel = format!("instances/{}", file_stem(i, r.instance.id()));
        r.instance.image().save_png(&dir.join(&rel))?;
        instances.push(InstanceEntry {
            id: r.instance.id().to_string(),
            image: rel,
            attributes: r.instance.attributes().copied(),
            pattern_id: r.instance.pattern_id().map(str::to_string),
            split: r.split,
        });
    }
    let mut queries = Vec::with_capacity(corpus.queries.len());
    for (i, r) in corpus.queries.iter().enumerate() {
        let rel = format!("queries/{}", file_stem(i, &r.query.id));
        r.query.background.save_png(&dir.join(&rel))?;
        queries.push(QueryEntry {
            id: r.query.id.clone(),
            background: rel,
            rect: r.query.rect,
            split: r.split,
            scene_label: r.scene_label,
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        category: corpus.category.clone(),
        schema_hash: corpus.schema_hash.clone(),
        config_hash: config_hash.map(str::to_string),
        num_patterns: corpus.patterns().len(),
        instances,
        queries,
        compatibility: corpus.compatibility.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(path);
    if !path.exists() {
        return Err(Error::Missing(format!("dataset manifest {}", path.display())));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::corrupt(&path, format!("unsupported format version {}", m.format_version)));
    }
    Ok(m)
}

/// Loads a corpus from a dataset directory or manifest path.
pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let mpath = manifest_path(path);
    let m = read_manifest(&mpath)?;
    let dir = mpath.parent().unwrap_or(Path::new("."));
    let mut instances = Vec::with_capacity(m.instances.len());
    for e in &m.instances {
        let image = Image::load(&dir.join(&e.image))?;
        let instance = ForegroundInstance::new(e.id.clone(), image, e.attributes)?;
        if instance.pattern_id() != e.pattern_id.as_deref() {
            return Err(Error::corrupt(&mpath, format!("pattern id of '{}' disagrees with its attributes", e.id)));
        }
        instances.push(InstanceRecord { instance, split: e.split });
    }
    let mut queries = Vec::with_capacity(m.queries.len());
    for e in &m.queries {
        let background = Image::load(&dir.join(&e.background))?;
        queries.push(QueryRecord {
            query: QueryInput {
                id: e.id.clone(),
                background,
                rect: e.rect,
            },
            split: e.split,
            scene_label: e.scene_label,
        });
    }
    let corpus = Corpus {
        category: m.category,
        schema_hash: m.schema_hash,
        instances,
        queries,
        compatibility: m.compatibility,
    };
    corpus
        .validate()
        .map_err(|e| Error::corrupt(&mpath, e.to_string()))?;
    Ok(corpus)
}

/// SHA-256 of the manifest file bytes, hex encoded.
pub fn manifest_checksum(path: &Path) -> Result<String> {
    let path = manifest_path(path);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
