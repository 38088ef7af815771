//! Pattern-level dataset construction: decomposition of annotated images,
//! grouping of interchangeable foregrounds, triplet sampling, augmentation,
//! the synthetic corpus generator and the on-disk manifest.

pub mod annotations;
pub mod augment;
pub mod decompose;
pub mod manifest;
pub mod synthetic;
pub mod triplet;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AttributeVector, ForegroundInstance, Pattern, QueryInput};

pub use augment::{augment_foreground, augment_rectangle, augment_zoom, FgAugmentConfig};
pub use decompose::{decompose, mean_fill_inpaint, AnnotatedComposite, DecomposeOptions, Inpainter, Mask};
pub use synthetic::{generate_synthetic_corpus, SyntheticConfig};
pub use triplet::{sample_triplet, Triplet, TripletSampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub instance: ForegroundInstance,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub query: QueryInput,
    pub split: Split,
    /// Scene class of the background, when the source provides one. Used only
    /// to pre-train the background extractor.
    pub scene_label: Option<u32>,
}

/// What a query is compatible with.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CompatibleTarget {
    Pattern(String),
    Instance(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CompatiblePair {
    pub query_id: String,
    pub target: CompatibleTarget,
}

/// A complete FoS dataset held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub category: String,
    pub schema_hash: String,
    pub instances: Vec<InstanceRecord>,
    pub queries: Vec<QueryRecord>,
    /// query id -> compatible pattern ids (sorted, duplicate-free)
    pub compatibility: BTreeMap<String, Vec<String>>,
}

impl Corpus {
    pub fn instance(&self, id: &str) -> Option<&InstanceRecord> {
        self.instances.iter().find(|r| r.instance.id() == id)
    }

    pub fn query(&self, id: &str) -> Option<&QueryRecord> {
        self.queries.iter().find(|r| r.query.id == id)
    }

    pub fn patterns(&self) -> Vec<Pattern> {
        let all: Vec<ForegroundInstance> = self.instances.iter().map(|r| r.instance.clone()).collect();
        group_patterns(&all)
    }

    pub fn instances_in(&self, split: Split) -> impl Iterator<Item = &InstanceRecord> {
        self.instances.iter().filter(move |r| r.split == split)
    }

    pub fn queries_in(&self, split: Split) -> impl Iterator<Item = &QueryRecord> {
        self.queries.iter().filter(move |r| r.split == split)
    }

    pub fn compatible_patterns(&self, query_id: &str) -> &[String] {
        self.compatibility.get(query_id).map_or(&[], |v| v.as_slice())
    }

    /// Pattern-level compatible pairs, one per (query, pattern).
    pub fn pattern_pairs(&self) -> Vec<CompatiblePair> {
        self.compatibility
            .iter()
            .flat_map(|(q, ps)| {
                ps.iter().map(move |p| CompatiblePair {
                    query_id: q.clone(),
                    target: CompatibleTarget::Pattern(p.clone()),
                })
            })
            .collect()
    }

    /// Expands pattern-level pairs into instance-level ones: a pattern with
    /// k members yields k pairs.
    pub fn instance_pairs(&self) -> Vec<CompatiblePair> {
        let patterns: BTreeMap<String, Pattern> =
            self.patterns().into_iter().map(|p| (p.pattern_id.clone(), p)).collect();
        self.pattern_pairs()
            .into_iter()
            .flat_map(|pair| {
                let members = match &pair.target {
                    CompatibleTarget::Pattern(p) => patterns.get(p).map(|p| p.member_ids.clone()).unwrap_or_default(),
                    CompatibleTarget::Instance(i) => vec![i.clone()],
                };
                members.into_iter().map(move |m| CompatiblePair {
                    query_id: pair.query_id.clone(),
                    target: CompatibleTarget::Instance(m),
                })
            })
            .collect()
    }

    /// Structural checks: unique ids, compatibility referencing known queries
    /// and patterns, rectangles inside the unit square.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for r in &self.instances {
            if !ids.insert(r.instance.id()) {
                return Err(Error::invalid(format!("duplicate instance id '{}'", r.instance.id())));
            }
        }
        let mut qids = HashSet::new();
        for r in &self.queries {
            if !qids.insert(r.query.id.as_str()) {
                return Err(Error::invalid(format!("duplicate query id '{}'", r.query.id)));
            }
            if !r.query.rect.is_inside_unit() {
                return Err(Error::invalid(format!("query '{}' rectangle leaves the image", r.query.id)));
            }
        }
        let patterns: HashSet<String> = self.patterns().into_iter().map(|p| p.pattern_id).collect();
        for (q, ps) in &self.compatibility {
            if !qids.contains(q.as_str()) {
                return Err(Error::invalid(format!("compatibility references unknown query '{q}'")));
            }
            for p in ps {
                if !patterns.contains(p) {
                    return Err(Error::invalid(format!("query '{q}' references unknown pattern '{p}'")));
                }
            }
        }
        Ok(())
    }
}

/// Groups labelled instances into patterns of identical attribute vectors.
/// Unlabelled instances are skipped. Patterns come out sorted by id; members
/// keep input order.
pub fn group_patterns(instances: &[ForegroundInstance]) -> Vec<Pattern> {
    let mut groups: BTreeMap<AttributeVector, Vec<String>> = BTreeMap::new();
    for inst in instances {
        if let Some(attrs) = inst.attributes() {
            let members = groups.entry(*attrs).or_default();
            if !members.iter().any(|m| m == inst.id()) {
                members.push(inst.id().to_string());
            }
        }
    }
    let mut patterns: Vec<Pattern> = groups
        .into_iter()
        .map(|(attrs, member_ids)| Pattern {
            pattern_id: attrs.key(),
            attribute_key: attrs,
            member_ids,
        })
        .collect();
    patterns.sort_by(|a, b| a.pattern_id.cmp(&b.pattern_id));
    patterns
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use rand::{Rng, SeedableRng};

    fn inst(id: &str, attrs: Option<AttributeVector>) -> ForegroundInstance {
        ForegroundInstance::new(id, Image::white(2), attrs).unwrap()
    }

    #[test]
    fn identical_tuples_share_a_pattern() {
        let a = AttributeVector::new(1, 2);
        let ps = group_patterns(&[inst("x", Some(a)), inst("y", Some(a))]);
        assert_eq!(ps.len(), 1);
        assert_eq!(ps[0].member_ids, vec!["x", "y"]);
    }

    #[test]
    fn differing_motion_splits_patterns() {
        let mut a = AttributeVector::new(1, 2);
        a.motion = Some(3);
        let mut b = a;
        b.motion = Some(4);
        let ps = group_patterns(&[inst("x", Some(a)), inst("y", Some(b)), inst("z", None)]);
        assert_eq!(ps.len(), 2);
        assert_eq!(ps.iter().map(|p| p.member_ids.len()).sum::<usize>(), 2);
    }

    /// Reference-scale grouping: 5468 labelled instances spread over 699
    /// distinct attribute tuples group into exactly 699 patterns.
    #[test]
    fn reference_scale_grouping_count() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut tuples = std::collections::BTreeSet::new();
        while tuples.len() < 699 {
            let mut a = AttributeVector::new(rng.gen_range(0..8), rng.gen_range(0..6));
            a.sport = rng.gen_bool(0.5).then(|| rng.gen_range(0..12));
            a.motion = rng.gen_bool(0.7).then(|| rng.gen_range(0..31));
            a.viewpoint = rng.gen_bool(0.3).then(|| rng.gen_range(0..4));
            a.state = rng.gen_bool(0.3).then(|| rng.gen_range(0..3));
            tuples.insert(a);
        }
        let tuples: Vec<AttributeVector> = tuples.into_iter().collect();
        let instances: Vec<ForegroundInstance> = (0..5468)
            .map(|i| {
                // every tuple used at least once, the rest at random
                let a = if i < 699 { tuples[i] } else { tuples[rng.gen_range(0..699)] };
                inst(&format!("i{i}"), Some(a))
            })
            .collect();
        let ps = group_patterns(&instances);
        assert_eq!(ps.len(), 699);
        assert_eq!(ps.iter().map(|p| p.member_ids.len()).sum::<usize>(), 5468);
    }

    #[test]
    fn membership_is_attribute_equality() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let instances: Vec<ForegroundInstance> = (0..200)
            .map(|i| {
                let mut a = AttributeVector::new(rng.gen_range(0..2), rng.gen_range(0..2));
                a.state = rng.gen_bool(0.5).then(|| rng.gen_range(0..2));
                inst(&format!("i{i}"), Some(a))
            })
            .collect();
        let ps = group_patterns(&instances);
        let pattern_of: BTreeMap<&str, &str> = ps
            .iter()
            .flat_map(|p| p.member_ids.iter().map(move |m| (m.as_str(), p.pattern_id.as_str())))
            .collect();
        for a in &instances {
            for b in &instances {
                let same_pattern = pattern_of[a.id()] == pattern_of[b.id()];
                assert_eq!(same_pattern, a.attributes() == b.attributes());
            }
        }
    }
}
