//! Triplet sampling from pattern-level compatibility.
//!
//! For an anchor query, every instance of a compatible pattern is a positive
//! and every instance of any other pattern is a negative.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;

use super::{CompatiblePair, CompatibleTarget, Corpus, Split};
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::types::{ForegroundInstance, Pattern, QueryInput};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet<'a> {
    pub anchor: &'a QueryInput,
    pub positive: &'a ForegroundInstance,
    pub negative: &'a ForegroundInstance,
}

/// Index-based sampler over a fixed set of anchors and instances.
#[derive(Debug, Clone)]
pub struct TripletSampler {
    /// per anchor: compatible pattern member lists (instance indices)
    positives: Vec<Vec<Vec<usize>>>,
    /// per anchor: all instance indices of incompatible patterns
    negatives: Vec<Vec<usize>>,
}

impl TripletSampler {
    /// `anchors[a]` lists the compatible pattern ids of anchor `a`;
    /// `instance_patterns[i]` is the pattern of instance `i`.
    pub fn new(anchors: &[Vec<String>], instance_patterns: &[String]) -> Result<Self> {
        let mut by_pattern: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, p) in instance_patterns.iter().enumerate() {
            by_pattern.entry(p.as_str()).or_default().push(i);
        }
        let mut positives = Vec::with_capacity(anchors.len());
        let mut negatives = Vec::with_capacity(anchors.len());
        for (a, compat) in anchors.iter().enumerate() {
            let compat: HashSet<&str> = compat.iter().map(|s| s.as_str()).collect();
            let pos: Vec<Vec<usize>> = by_pattern
                .iter()
                .filter(|(p, _)| compat.contains(*p))
                .map(|(_, m)| m.clone())
                .collect();
            if pos.is_empty() {
                return Err(Error::invalid(format!("anchor {a} has no compatible instances")));
            }
            let neg: Vec<usize> = by_pattern
                .iter()
                .filter(|(p, _)| !compat.contains(*p))
                .flat_map(|(_, m)| m.iter().copied())
                .collect();
            if neg.is_empty() {
                return Err(Error::invalid(format!("anchor {a} has no incompatible instances")));
            }
            positives.push(pos);
            negatives.push(neg);
        }
        Ok(Self { positives, negatives })
    }

    pub fn num_anchors(&self) -> usize {
        self.positives.len()
    }

    /// Draws `(positive, negative)` instance indices for `anchor`: a
    /// compatible pattern uniformly, then one of its members uniformly; the
    /// negative uniformly over all incompatible instances.
    pub fn sample<R: Rng>(&self, anchor: usize, rng: &mut R) -> (usize, usize) {
        let pats = &self.positives[anchor];
        let members = &pats[rng.gen_range(0..pats.len())];
        let pos = members[rng.gen_range(0..members.len())];
        let negs = &self.negatives[anchor];
        let neg = negs[rng.gen_range(0..negs.len())];
        (pos, neg)
    }

    pub fn for_corpus(corpus: &Corpus, split: Split) -> Result<(Self, Vec<usize>, Vec<usize>)> {
        let inst_idx: Vec<usize> = corpus
            .instances
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split && r.instance.pattern_id().is_some())
            .map(|(i, _)| i)
            .collect();
        let inst_patterns: Vec<String> = inst_idx
            .iter()
            .map(|&i| corpus.instances[i].instance.pattern_id().unwrap_or_default().to_string())
            .collect();
        let query_idx: Vec<usize> = corpus
            .queries
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split && !corpus.compatible_patterns(&r.query.id).is_empty())
            .map(|(i, _)| i)
            .collect();
        let anchors: Vec<Vec<String>> = query_idx
            .iter()
            .map(|&q| corpus.compatible_patterns(&corpus.queries[q].query.id).to_vec())
            .collect();
        Ok((Self::new(&anchors, &inst_patterns)?, query_idx, inst_idx))
    }
}

/// Samples one triplet for `anchor_id` from pattern-level pairs.
/// Deterministic for a fixed seed.
pub fn sample_triplet<'a>(
    pairs: &[CompatiblePair],
    patterns: &[Pattern],
    queries: &'a [QueryInput],
    instances: &'a [ForegroundInstance],
    anchor_id: &str,
    seed: u64,
) -> Result<Triplet<'a>> {
    let anchor = queries
        .iter()
        .find(|q| q.id == anchor_id)
        .ok_or_else(|| Error::invalid(format!("unknown anchor '{anchor_id}'")))?;
    let compat: Vec<String> = pairs
        .iter()
        .filter(|p| p.query_id == anchor_id)
        .filter_map(|p| match &p.target {
            CompatibleTarget::Pattern(id) => Some(id.clone()),
            CompatibleTarget::Instance(_) => None,
        })
        .collect();
    if compat.is_empty() {
        return Err(Error::invalid(format!("anchor '{anchor_id}' has an empty compatible set")));
    }
    let index: BTreeMap<&str, usize> = instances.iter().enumerate().map(|(i, f)| (f.id(), i)).collect();
    let mut inst_patterns = vec![String::new(); instances.len()];
    for p in patterns {
        for m in &p.member_ids {
            if let Some(&i) = index.get(m.as_str()) {
                inst_patterns[i] = p.pattern_id.clone();
            }
        }
    }
    // unlabelled instances never participate
    let labelled: Vec<usize> = (0..instances.len()).filter(|&i| !inst_patterns[i].is_empty()).collect();
    let sub_patterns: Vec<String> = labelled.iter().map(|&i| inst_patterns[i].clone()).collect();
    let sampler = TripletSampler::new(&[compat], &sub_patterns)?;
    let mut rng = derive_rng(seed, "triplet", 0);
    let (p, n) = sampler.sample(0, &mut rng);
    Ok(Triplet {
        anchor,
        positive: &instances[labelled[p]],
        negative: &instances[labelled[n]],
    })
}
