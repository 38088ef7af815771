//! Ingestion of segmentation-style annotations.
//!
//! The input is a JSON document:
//!
//! ```json
//! {
//!   "category": "person",
//!   "items": [
//!     {
//!       "id": "img-0001",
//!       "image": "images/0001.png",
//!       "mask": "masks/0001.png",
//!       "attributes": {"orientation": 3, "truncation": 0, "sport": null,
//!                      "motion": 17, "viewpoint": null, "state": null},
//!       "split": "train",
//!       "compatible_patterns": ["03/00/--/17/--/--"]
//!     }
//!   ]
//! }
//! ```
//!
//! Paths are relative to the document. Masks are images whose bright pixels
//! mark the object. `attributes`, `split` (default `train`) and
//! `compatible_patterns` are optional; without explicit compatibility a query
//! is compatible with the pattern of its own foreground.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use super::decompose::{decompose, AnnotatedComposite, DecomposeOptions, Inpainter, Mask};
use super::{Corpus, InstanceRecord, QueryRecord, Split};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::schema::AttributeSchema;
use crate::types::AttributeVector;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationItem {
    pub id: String,
    pub image: String,
    pub mask: String,
    #[serde(default)]
    pub attributes: Option<AttributeVector>,
    #[serde(default)]
    pub split: Option<Split>,
    #[serde(default)]
    pub compatible_patterns: Option<Vec<String>>,
    #[serde(default)]
    pub scene_label: Option<u32>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub category: String,
    pub items: Vec<AnnotationItem>,
}

/// Result of ingestion: the corpus and the items rejected by the exclusion
/// thresholds, with reasons.
#[derive(Debug)]
pub struct Ingested {
    pub corpus: Corpus,
    pub skipped: Vec<(String, String)>,
}

pub fn ingest_annotations(
    path: &Path,
    schema: &AttributeSchema,
    inpainter: &dyn Inpainter,
    opts: &DecomposeOptions,
) -> Result<Ingested> {
    if !path.exists() {
        return Err(Error::Missing(format!("annotation file {}", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: AnnotationFile = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let dir = path.parent().unwrap_or(Path::new("."));

    let mut instances = Vec::new();
    let mut queries = Vec::new();
    let mut explicit: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut skipped = Vec::new();
    for item in file.items {
        if let Some(a) = &item.attributes {
            a.validate(schema)?;
        }
        let image = Image::load(&dir.join(&item.image))?;
        let mask = Mask::load(&dir.join(&item.mask))?;
        let comp = AnnotatedComposite {
            id: item.id.clone(),
            image,
            mask,
            category: file.category.clone(),
            attributes: item.attributes,
        };
        let (query, instance) = match decompose(&comp, inpainter, opts) {
            Ok(pair) => pair,
            Err(Error::InvalidInput(reason)) => {
                skipped.push((item.id, reason));
                continue;
            }
            Err(e) => return Err(e),
        };
        let split = item.split.unwrap_or(Split::Train);
        let compat = match item.compatible_patterns {
            Some(ps) => ps,
            None => instance.pattern_id().map(|p| vec![p.to_string()]).unwrap_or_default(),
        };
        if !compat.is_empty() {
            explicit.insert(item.id.clone(), compat);
        }
        queries.push(QueryRecord {
            query,
            split,
            scene_label: item.scene_label,
        });
        instances.push(InstanceRecord { instance, split });
    }
    for ps in explicit.values_mut() {
        ps.sort();
        ps.dedup();
    }
    let corpus = Corpus {
        category: file.category,
        schema_hash: schema.hash(),
        instances,
        queries,
        compatibility: explicit,
    };
    corpus.validate()?;
    Ok(Ingested { corpus, skipped })
}
