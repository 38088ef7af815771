//! Test protocol and metrics: evaluation-set construction, top-k pattern
//! accuracy, non-interpolated average precision and mAP, and the ablation
//! harness.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::tensor_checksum;
use crate::dataset::{Corpus, Split};
use crate::error::{Error, Result};
use crate::fg_encoder::{classify_pattern, embed_foreground, FgEncoder};
use crate::query_encoder::{train_query_encoder, AblationMode, QueryEncoder, QueryTrainConfig};
use crate::retrieval::{pattern_centroids, EmbeddingStore};
use crate::rng::derive_rng;
use crate::types::{Embedding, ForegroundInstance, QueryInput};

/// Reference numbers reported for the full-scale system. Informational only.
pub mod reference {
    pub const MAP_OURS: f64 = 53.72;
    pub const MAP_BASELINE: f64 = 43.30;
    pub const TOP1: f64 = 53.15;
    pub const TOP5: f64 = 85.79;
    /// mAP (%) per ablation mode.
    pub const ABLATION: [(&str, f64); 6] = [
        ("baseline-proxy", 43.30),
        ("early-fusion", 48.98),
        ("no-aug", 51.91),
        ("no-bg-freeze", 53.61),
        ("full", 53.72),
        ("multi-task", 54.48),
    ];

    pub fn ablation(mode: &str) -> Option<f64> {
        ABLATION.iter().find(|(m, _)| *m == mode).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Patterns with fewer test-split members are left out of the database.
    pub min_pattern_size: usize,
    /// Database members drawn per kept pattern.
    pub per_pattern: usize,
    /// Cap on the number of queries; all test queries when unset.
    pub max_queries: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            min_pattern_size: 10,
            per_pattern: 3,
            max_queries: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub database: Vec<ForegroundInstance>,
    pub queries: Vec<QueryInput>,
    /// query id -> relevant pattern ids present in the database
    pub relevance: BTreeMap<String, BTreeSet<String>>,
    /// Test queries dropped for having no relevant pattern in the database.
    pub excluded: Vec<String>,
}

pub fn build_eval_set(corpus: &Corpus, cfg: &EvalConfig, seed: u64) -> Result<EvalSet> {
    if cfg.per_pattern == 0 {
        return Err(Error::invalid("per_pattern must be at least 1"));
    }
    let mut by_pattern: BTreeMap<&str, Vec<&ForegroundInstance>> = BTreeMap::new();
    for r in corpus.instances_in(Split::Test) {
        if let Some(p) = r.instance.pattern_id() {
            by_pattern.entry(p).or_default().push(&r.instance);
        }
    }
    let mut database = Vec::new();
    let mut kept = BTreeSet::new();
    for (i, (pid, mut members)) in by_pattern.into_iter().enumerate() {
        if members.len() < cfg.min_pattern_size.max(cfg.per_pattern) {
            continue;
        }
        members.shuffle(&mut derive_rng(seed, "eval-db", i as u64));
        let mut pick: Vec<ForegroundInstance> = members[..cfg.per_pattern].iter().map(|&m| m.clone()).collect();
        pick.sort_by(|a, b| a.id().cmp(b.id()));
        database.extend(pick);
        kept.insert(pid.to_string());
    }
    if kept.is_empty() {
        return Err(Error::invalid(format!(
            "no test pattern has at least {} members",
            cfg.min_pattern_size.max(cfg.per_pattern)
        )));
    }
    let mut queries = Vec::new();
    let mut relevance = BTreeMap::new();
    let mut excluded = Vec::new();
    for r in corpus.queries_in(Split::Test) {
        if cfg.max_queries.is_some_and(|m| queries.len() >= m) {
            break;
        }
        let rel: BTreeSet<String> = corpus
            .compatible_patterns(&r.query.id)
            .iter()
            .filter(|p| kept.contains(*p))
            .cloned()
            .collect();
        if rel.is_empty() {
            excluded.push(r.query.id.clone());
            continue;
        }
        relevance.insert(r.query.id.clone(), rel);
        queries.push(r.query.clone());
    }
    if queries.is_empty() {
        return Err(Error::invalid("evaluation set has no scorable queries"));
    }
    Ok(EvalSet {
        database,
        queries,
        relevance,
        excluded,
    })
}

/// Fraction of samples whose truth is among the first `k` predictions.
pub fn topk_accuracy(predictions: &[Vec<String>], truths: &[String], k: usize) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != truths.len() {
        return Err(Error::invalid("top-k accuracy needs equally many predictions and truths"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let hits = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| p.iter().take(k).any(|x| x == *t))
        .count();
    Ok(hits as f64 / truths.len() as f64)
}

/// Non-interpolated AP: mean of precision@r over the ranks r of relevant
/// items.
pub fn average_precision(relevant: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::invalid("average precision needs at least one relevant item"));
    }
    Ok(sum / hits as f64)
}

/// Embeds the database with the given foreground encoder.
pub fn embed_database(eval: &EvalSet, fg: &FgEncoder) -> Result<EmbeddingStore> {
    let rows = eval
        .database
        .iter()
        .map(|i| embed_foreground(fg, i.image()).map(Embedding::into_inner))
        .collect::<Result<Vec<_>>>()?;
    let ids = eval.database.iter().map(|i| i.id().to_string()).collect();
    let pats = eval
        .database
        .iter()
        .map(|i| i.pattern_id().unwrap_or_default().to_string())
        .collect();
    EmbeddingStore::build(fg.dim(), &rows, ids, pats)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryScore {
    pub query_id: String,
    pub ap: f64,
    pub pattern_ap: f64,
    pub num_relevant: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapResult {
    /// Instance-level mAP.
    pub map: f64,
    /// mAP over pattern-centroid rankings.
    pub pattern_map: f64,
    /// Expected instance-level AP under random ranking (mean relevant
    /// fraction).
    pub random_baseline: f64,
    pub per_query: Vec<QueryScore>,
    pub excluded: usize,
}

/// Ranks the full database for every query and averages AP over queries
/// with at least one relevant item.
pub fn mean_average_precision<F>(eval: &EvalSet, store: &EmbeddingStore, mut embed: F) -> Result<MapResult>
where
    F: FnMut(&QueryInput) -> Result<Embedding>,
{
    if eval.queries.is_empty() || store.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let index = pattern_centroids(store)?;
    let mut per_query = Vec::with_capacity(eval.queries.len());
    let mut excluded = eval.excluded.len();
    let mut random = 0.0;
    for q in &eval.queries {
        let rel = &eval.relevance[&q.id];
        let flags: Vec<bool> = store.pattern_ids().iter().map(|p| rel.contains(p)).collect();
        let num_relevant = flags.iter().filter(|&&f| f).count();
        if num_relevant == 0 {
            excluded += 1;
            continue;
        }
        let e = embed(q)?;
        let ranked = store.search_instances(e.values(), store.len())?;
        let inst_flags: Vec<bool> = ranked
            .iter()
            .map(|h| rel.contains(&store.pattern_ids()[store.index_of(&h.id).expect("ranked id")]))
            .collect();
        let pranked = index.search_patterns(e.values(), index.len())?;
        let pat_flags: Vec<bool> = pranked.iter().map(|h| rel.contains(&h.id)).collect();
        random += num_relevant as f64 / store.len() as f64;
        per_query.push(QueryScore {
            query_id: q.id.clone(),
            ap: average_precision(&inst_flags)?,
            pattern_ap: average_precision(&pat_flags)?,
            num_relevant,
        });
    }
    if per_query.is_empty() {
        return Err(Error::invalid("no query has a relevant item in the database"));
    }
    let n = per_query.len() as f64;
    Ok(MapResult {
        map: per_query.iter().map(|s| s.ap).sum::<f64>() / n,
        pattern_map: per_query.iter().map(|s| s.pattern_ap).sum::<f64>() / n,
        random_baseline: random / n,
        per_query,
        excluded,
    })
}

/// Share of queries whose nearest pattern centroid is relevant.
pub fn nearest_centroid_compatibility<F>(eval: &EvalSet, store: &EmbeddingStore, mut embed: F) -> Result<f64>
where
    F: FnMut(&QueryInput) -> Result<Embedding>,
{
    let index = pattern_centroids(store)?;
    let mut ok = 0usize;
    for q in &eval.queries {
        let top = index.search_patterns(embed(q)?.values(), 1)?;
        if eval.relevance[&q.id].contains(&top[0].id) {
            ok += 1;
        }
    }
    Ok(ok as f64 / eval.queries.len() as f64)
}

/// Top-k pattern classification accuracy of the teacher on labelled
/// test-split instances, for each requested k (capped at the class count).
pub fn pattern_accuracy(teacher: &FgEncoder, corpus: &Corpus, ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    let test: Vec<&ForegroundInstance> = corpus
        .instances_in(Split::Test)
        .map(|r| &r.instance)
        .filter(|i| i.pattern_id().is_some_and(|p| teacher.pattern_ids.iter().any(|x| x == p)))
        .collect();
    if test.is_empty() {
        return Err(Error::invalid("no labelled test instances with known patterns"));
    }
    let kmax = ks.iter().copied().max().unwrap_or(1).clamp(1, teacher.num_patterns());
    let preds = test
        .iter()
        .map(|i| classify_pattern(teacher, i.image(), kmax))
        .collect::<Result<Vec<_>>>()?;
    let truths: Vec<String> = test.iter().map(|i| i.pattern_id().unwrap_or_default().to_string()).collect();
    ks.iter()
        .map(|&k| Ok((k, topk_accuracy(&preds, &truths, k.min(kmax))?)))
        .collect()
}

/// Structured evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub config_hash: Option<String>,
    pub seed: u64,
    pub mode: String,
    pub database_size: usize,
    pub num_patterns: usize,
    pub scored_queries: usize,
    pub excluded_queries: usize,
    pub map: f64,
    pub pattern_map: f64,
    pub random_baseline: f64,
    pub topk_accuracy: Vec<(usize, f64)>,
    pub per_query: Vec<QueryScore>,
}

impl EvalReport {
    pub fn new(result: MapResult, store: &EmbeddingStore, mode: AblationMode, seed: u64, config_hash: Option<String>) -> Self {
        Self {
            format_version: 1,
            config_hash,
            seed,
            mode: mode.to_string(),
            database_size: store.len(),
            num_patterns: store.members().len(),
            scored_queries: result.per_query.len(),
            excluded_queries: result.excluded,
            map: result.map,
            pattern_map: result.pattern_map,
            random_baseline: result.random_baseline,
            topk_accuracy: Vec::new(),
            per_query: result.per_query,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "mode {}\nseed {}\nconfig_hash {}\ndatabase {} instances / {} patterns\nqueries scored {} excluded {}\nmAP {:.6}\npattern mAP {:.6}\nrandom baseline {:.6}\n",
            self.mode,
            self.seed,
            self.config_hash.as_deref().unwrap_or("-"),
            self.database_size,
            self.num_patterns,
            self.scored_queries,
            self.excluded_queries,
            self.map,
            self.pattern_map,
            self.random_baseline
        );
        for (k, a) in &self.topk_accuracy {
            s += &format!("top-{k} accuracy {a:.6}\n");
        }
        for q in &self.per_query {
            s += &format!("query {} ap {:.6} pattern_ap {:.6} relevant {}\n", q.query_id, q.ap, q.pattern_ap, q.num_relevant);
        }
        s
    }
}

// ---------------------------------------------------------------------------
// ablation

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub map: Option<f64>,
    pub pattern_map: Option<f64>,
    /// Teacher weights unchanged by training (always expected in frozen
    /// modes).
    pub teacher_unchanged: bool,
    pub error: Option<String>,
    /// Full-scale reference mAP in percent, for comparison only.
    pub reference_map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub format_version: u32,
    pub config_hash: Option<String>,
    pub seed: u64,
    pub random_baseline: Option<f64>,
    pub rows: Vec<AblationRow>,
    pub reference_top1: f64,
    pub reference_top5: f64,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut s = String::from("| mode | mAP | pattern mAP | reference mAP (%) | status |\n|---|---|---|---|---|\n");
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        for r in &self.rows {
            s += &format!(
                "| {} | {} | {} | {} | {} |\n",
                r.mode,
                fmt(r.map),
                fmt(r.pattern_map),
                r.reference_map.map_or("-".to_string(), |x| format!("{x:.2}")),
                r.error.as_deref().unwrap_or("ok")
            );
        }
        s += &format!(
            "\nrandom baseline {}\nreference values come from full-scale training and are not expected at this scale (top-1 {:.2}%, top-5 {:.2}%).\nseed {} config_hash {}\n",
            fmt(self.random_baseline),
            self.reference_top1,
            self.reference_top5,
            self.seed,
            self.config_hash.as_deref().unwrap_or("-")
        );
        s
    }
}

/// Scores a trained student on the evaluation set.
pub fn evaluate_student(teacher: &FgEncoder, student: &QueryEncoder, eval: &EvalSet) -> Result<MapResult> {
    let store = embed_database(eval, student.foreground_encoder(teacher))?;
    mean_average_precision(eval, &store, |q| student.embed(q))
}

/// Trains and evaluates one student per mode from identical data and seeds.
/// A mode that fails is recorded and the suite moves on.
pub fn run_ablation_suite(
    teacher: &FgEncoder,
    corpus: &Corpus,
    base: &QueryTrainConfig,
    modes: &[AblationMode],
    eval_cfg: &EvalConfig,
    seed: u64,
    config_hash: Option<String>,
) -> Result<AblationTable> {
    let eval = build_eval_set(corpus, eval_cfg, seed)?;
    let before = tensor_checksum(teacher.extractor().params());
    let mut rows = Vec::with_capacity(modes.len());
    let mut random_baseline = None;
    for &mode in modes {
        let cfg = QueryTrainConfig { mode, ..base.clone() };
        let outcome = train_query_encoder(teacher, corpus, &cfg, seed).and_then(|(student, _)| evaluate_student(teacher, &student, &eval));
        let teacher_unchanged = tensor_checksum(teacher.extractor().params()) == before;
        let row = match outcome {
            Ok(r) => {
                random_baseline = Some(r.random_baseline);
                AblationRow {
                    mode,
                    map: Some(r.map),
                    pattern_map: Some(r.pattern_map),
                    teacher_unchanged,
                    error: None,
                    reference_map: reference::ablation(mode.as_str()),
                }
            }
            Err(e) => {
                log::warn!("ablation mode {mode} failed: {e}");
                AblationRow {
                    mode,
                    map: None,
                    pattern_map: None,
                    teacher_unchanged,
                    error: Some(e.to_string()),
                    reference_map: reference::ablation(mode.as_str()),
                }
            }
        };
        log::info!("ablation {mode}: {:?}", row.map);
        rows.push(row);
    }
    Ok(AblationTable {
        format_version: 1,
        config_hash,
        seed,
        random_baseline,
        rows,
        reference_top1: reference::TOP1,
        reference_top5: reference::TOP5,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Precision at every rank, averaged at the relevant ranks.
    fn oracle_ap(flags: &[bool]) -> Option<f64> {
        let rel: Vec<usize> = (0..flags.len()).filter(|&i| flags[i]).collect();
        if rel.is_empty() {
            return None;
        }
        let prec = |r: usize| flags[..=r].iter().filter(|&&f| f).count() as f64 / (r + 1) as f64;
        Some(rel.iter().map(|&r| prec(r)).sum::<f64>() / rel.len() as f64)
    }

    #[test]
    fn ap_examples() {
        assert!((average_precision(&[true, false, true]).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[true; 5]).unwrap(), 1.0);
        assert_eq!(average_precision(&[false, true]).unwrap(), 0.5);
        assert!(average_precision(&[false, false]).is_err());
    }

    #[test]
    fn ap_matches_oracle_on_short_lists() {
        for n in 1..=8 {
            for bits in 0u32..(1 << n) {
                let flags: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
                match oracle_ap(&flags) {
                    Some(a) => assert_eq!(average_precision(&flags).unwrap(), a),
                    None => assert!(average_precision(&flags).is_err()),
                }
            }
        }
    }

    #[test]
    fn topk_examples() {
        let p = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let preds = vec![p(&["a", "b"]), p(&["b", "a"]), p(&["a", "c"]), p(&["c", "a"])];
        let truths = p(&["a", "b", "c", "b"]);
        assert_eq!(topk_accuracy(&preds, &truths, 1).unwrap(), 0.5);
        assert_eq!(topk_accuracy(&preds, &truths, 2).unwrap(), 0.75);
        assert!(topk_accuracy(&[], &[], 1).is_err());
    }

    proptest! {
        #[test]
        fn ap_ignores_trailing_irrelevant(flags in proptest::collection::vec(any::<bool>(), 1..30), extra in 0usize..10) {
            prop_assume!(flags.iter().any(|&f| f));
            let mut longer = flags.clone();
            longer.extend(std::iter::repeat(false).take(extra));
            prop_assert_eq!(average_precision(&flags).unwrap(), average_precision(&longer).unwrap());
        }

        #[test]
        fn moving_relevant_item_up_never_hurts(flags in proptest::collection::vec(any::<bool>(), 2..30), at in 1usize..30) {
            let at = at % flags.len();
            prop_assume!(at > 0 && flags[at] && !flags[at - 1]);
            let mut up = flags.clone();
            up.swap(at, at - 1);
            let a = average_precision(&flags).unwrap();
            let b = average_precision(&up).unwrap();
            prop_assert!(b >= a && (0.0..=1.0).contains(&b));
        }

        #[test]
        fn topk_monotone_in_k(n in 1usize..20, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = derive_rng(seed, "t", 0);
            let labels: Vec<String> = (0..5).map(|i| i.to_string()).collect();
            let preds: Vec<Vec<String>> = (0..n).map(|_| {
                let mut l = labels.clone();
                l.shuffle(&mut rng);
                l
            }).collect();
            let truths: Vec<String> = (0..n).map(|_| labels[rng.gen_range(0..5)].clone()).collect();
            let mut last = 0.0;
            for k in 1..=5 {
                let a = topk_accuracy(&preds, &truths, k).unwrap();
                prop_assert!(a >= last);
                last = a;
            }
            prop_assert_eq!(last, 1.0);
        }
    }

    #[test]
    fn eval_set_counts_follow_config() {
        let corpus = crate::dataset::generate_synthetic_corpus(&crate::dataset::SyntheticConfig::default(), 2).unwrap();
        let eval = build_eval_set(&corpus, &EvalConfig::default(), 1).unwrap();
        assert_eq!(eval.database.len(), 8 * 3);
        assert_eq!(eval.queries.len() + eval.excluded.len(), 50);
        assert_eq!(build_eval_set(&corpus, &EvalConfig::default(), 1).unwrap(), eval);
        let too_big = EvalConfig {
            min_pattern_size: 11,
            ..Default::default()
        };
        assert!(build_eval_set(&corpus, &too_big, 1).is_err());
    }

    #[test]
    fn perfect_ranking_gives_unit_map() {
        let corpus = crate::dataset::generate_synthetic_corpus(&crate::dataset::SyntheticConfig::default(), 2).unwrap();
        let eval = build_eval_set(&corpus, &EvalConfig::default(), 1).unwrap();
        // one axis per pattern; each query points at the sum of its relevant axes
        let pats: Vec<String> = eval.database.iter().filter_map(|i| i.pattern_id().map(str::to_string)).collect::<BTreeSet<_>>().into_iter().collect();
        let axis = |p: &str| {
            let mut v = vec![0.0f32; pats.len()];
            v[pats.iter().position(|x| x == p).unwrap()] = 1.0;
            v
        };
        let rows: Vec<Vec<f32>> = eval.database.iter().map(|i| axis(i.pattern_id().unwrap())).collect();
        let store = EmbeddingStore::build(
            pats.len(),
            &rows,
            eval.database.iter().map(|i| i.id().to_string()).collect(),
            eval.database.iter().map(|i| i.pattern_id().unwrap().to_string()).collect(),
        )
        .unwrap();
        let r = mean_average_precision(&eval, &store, |q| {
            let mut v = vec![0.0f32; pats.len()];
            for p in &eval.relevance[&q.id] {
                v = v.iter().zip(axis(p)).map(|(a, b)| a + b).collect();
            }
            Embedding::from_raw(&v)
        })
        .unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.pattern_map, 1.0);
        assert_eq!(r.per_query.len(), eval.queries.len());
    }
}
