//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `cargo test -p fos-core --test acceptance`

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fos_core::checkpoint::tensor_checksum;
use fos_core::dataset::manifest::{manifest_checksum, read_corpus, write_corpus};
use fos_core::dataset::{generate_synthetic_corpus, Corpus, Split, SyntheticConfig};
use fos_core::evaluation::{
    average_precision, build_eval_set, embed_database, evaluate_student,
    nearest_centroid_compatibility, pattern_accuracy, reference, run_ablation_suite, EvalConfig, EvalSet,
};
use fos_core::fg_encoder::{
    center_loss, center_loss_grad, intra_pattern_variance, softmax_loss, softmax_loss_grad, total_fg_loss,
    total_fg_loss_grad, train_foreground_encoder, FgEncoder, FgTrainConfig,
};
use fos_core::query_encoder::{
    layout_embedding, train_query_encoder, triplet_loss, triplet_loss_grad, AblationMode, QueryEncoder,
    QueryTrainConfig,
};
use fos_core::retrieval::{pattern_centroids, EmbeddingStore};
use fos_core::types::Rectangle;

const SEED: u64 = 1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Shared {
    corpus: Corpus,
    teacher: Option<FgEncoder>,
    student: Option<QueryEncoder>,
    eval: Option<EvalSet>,
    ablation_text: Option<String>,
}

// ---------------------------------------------------------------------------
// oracles

/// Precision at every rank, averaged over the relevant ranks.
fn oracle_ap(flags: &[bool]) -> Option<f64> {
    let n_rel = flags.iter().filter(|&&f| f).count();
    if n_rel == 0 {
        return None;
    }
    let mut total = 0.0;
    for r in 0..flags.len() {
        if flags[r] {
            let hits = flags[..=r].iter().filter(|&&f| f).count();
            total += hits as f64 / (r + 1) as f64;
        }
    }
    Some(total / n_rel as f64)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite difference of `f` along coordinate `i` of `x`.
fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut up = x.to_vec();
    let mut down = x.to_vec();
    up[i] += h;
    down[i] -= h;
    (f(&up) - f(&down)) / (2.0 * h)
}

fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-scale..scale)).collect()).collect()
}

fn flat(v: &[Vec<f64>]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

fn unflat(v: &[f64], d: usize) -> Vec<Vec<f64>> {
    v.chunks(d).map(|c| c.to_vec()).collect()
}

/// Largest relative error between analytic and numeric gradients.
fn max_grad_err(f: &dyn Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) -> f64 {
    (0..x.len())
        .map(|i| rel_err(grad[i], central_diff(f, x, i, 1e-4)))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// criteria

fn c1_reference_constants(shared: &Shared) -> Outcome {
    let consts_ok = reference::MAP_OURS == 53.72
        && reference::MAP_BASELINE == 43.30
        && reference::TOP1 == 53.15
        && reference::TOP5 == 85.79
        && reference::ABLATION.len() == 6;
    let Some(text) = &shared.ablation_text else {
        return outcome(false, "no ablation report to inspect");
    };
    let in_report = ["53.72", "43.30", "48.98", "51.91", "53.61", "54.48", "53.15", "85.79"]
        .iter()
        .all(|v| text.contains(v));
    outcome(
        consts_ok && in_report,
        "reference values are reported for comparison and never asserted against desk-scale results",
    )
}

fn c2_ap_oracle() -> Outcome {
    let t = Instant::now();
    let mut lists = 0usize;
    for n in 1..=10usize {
        for bits in 0u32..(1 << n) {
            let flags: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
            let ok = match (oracle_ap(&flags), average_precision(&flags)) {
                (Some(a), Ok(b)) => a == b,
                (None, Err(_)) => true,
                _ => false,
            };
            if !ok {
                return outcome(false, format!("mismatch on {flags:?}"));
            }
            lists += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = rng.gen_range(0.01..0.5);
        let mut flags: Vec<bool> = (0..345).map(|_| rng.gen_bool(p)).collect();
        flags[rng.gen_range(0..345)] = true;
        worst = worst.max((oracle_ap(&flags).unwrap() - average_precision(&flags).unwrap()).abs());
    }
    let el = t.elapsed();
    outcome(
        worst <= 1e-12 && el < Duration::from_secs(10),
        format!("{lists} exhaustive lists exact, 100 lists of 345 max diff {worst:.1e}, {:.2}s", el.as_secs_f64()),
    )
}

fn c3_gradients() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut w_soft, mut w_center, mut w_total, mut w_trip) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let m = rng.gen_range(1..5);
        let k = rng.gen_range(2..6);
        let d = rng.gen_range(2..6);
        let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..k)).collect();
        let logits = rows(&mut rng, m, k, 2.0);
        let x = rows(&mut rng, m, d, 2.0);
        let centers = rows(&mut rng, k, d, 1.0);
        let lambda = rng.gen_range(0.001..0.5);

        let (_, g) = softmax_loss_grad(&logits, &labels).unwrap();
        let f = |z: &[f64]| softmax_loss(&unflat(z, k), &labels).unwrap();
        w_soft = w_soft.max(max_grad_err(&f, &flat(&logits), &flat(&g)));

        let (_, g) = center_loss_grad(&x, &labels, &centers).unwrap();
        let f = |z: &[f64]| center_loss(&unflat(z, d), &labels, &centers).unwrap();
        w_center = w_center.max(max_grad_err(&f, &flat(&x), &flat(&g)));

        let (_, gz, gx) = total_fg_loss_grad(&logits, &x, &labels, &centers, lambda).unwrap();
        let f = |z: &[f64]| total_fg_loss(&unflat(z, k), &x, &labels, &centers, lambda).unwrap();
        w_total = w_total.max(max_grad_err(&f, &flat(&logits), &flat(&gz)));
        let f = |z: &[f64]| total_fg_loss(&logits, &unflat(z, d), &labels, &centers, lambda).unwrap();
        w_total = w_total.max(max_grad_err(&f, &flat(&x), &flat(&gx)));

        // triplet: resample until away from the hinge so the loss is smooth
        let margin = 0.1;
        let (q, p, n) = loop {
            let v = rows(&mut rng, 3, d, 1.0);
            let s = fos_core::vector::dot(&v[0], &v[2]) - fos_core::vector::dot(&v[0], &v[1]) + margin;
            if s.abs() > 1e-2 {
                break (v[0].clone(), v[1].clone(), v[2].clone());
            }
        };
        let (_, dq, dp, dn) = triplet_loss_grad(&q, &p, &n, margin).unwrap();
        let fq = |z: &[f64]| triplet_loss(z, &p, &n, margin);
        let fp = |z: &[f64]| triplet_loss(&q, z, &n, margin);
        let fn_ = |z: &[f64]| triplet_loss(&q, &p, z, margin);
        w_trip = w_trip
            .max(max_grad_err(&fq, &q, &dq))
            .max(max_grad_err(&fp, &p, &dp))
            .max(max_grad_err(&fn_, &n, &dn));
    }
    let el = t.elapsed();
    let worst = w_soft.max(w_center).max(w_total).max(w_trip);
    outcome(
        worst <= 1e-3 && el < Duration::from_secs(30),
        format!(
            "max rel err softmax {w_soft:.1e} center {w_center:.1e} total {w_total:.1e} triplet {w_trip:.1e}, {:.2}s",
            el.as_secs_f64()
        ),
    )
}

fn c4_teacher(shared: &mut Shared) -> Outcome {
    let t = Instant::now();
    let cfg = FgTrainConfig::default();
    let teacher = match train_foreground_encoder(&shared.corpus, &cfg, SEED) {
        Ok((m, _)) => m,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let el = t.elapsed();
    let top1 = pattern_accuracy(&teacher, &shared.corpus, &[1]).map(|v| v[0].1).unwrap_or(0.0);
    shared.teacher = Some(teacher);
    outcome(
        top1 >= 0.95 && el < Duration::from_secs(300),
        format!("held-out top-1 {top1:.4} (d={}), trained in {:.1}s", cfg.dim, el.as_secs_f64()),
    )
}

fn c5_center_loss(shared: &Shared) -> Outcome {
    let Some(with) = &shared.teacher else {
        return outcome(false, "no teacher from criterion 4");
    };
    let cfg = FgTrainConfig {
        lambda: 0.0,
        ..Default::default()
    };
    let without = match train_foreground_encoder(&shared.corpus, &cfg, SEED) {
        Ok((m, _)) => m,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let test: Vec<_> = shared.corpus.instances_in(Split::Test).map(|r| &r.instance).collect();
    let (a, b) = match (intra_pattern_variance(with, &test), intra_pattern_variance(&without, &test)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return outcome(false, "variance computation failed"),
    };
    outcome(a < b, format!("intra-pattern variance lambda=0.005 {a:.5} vs lambda=0 {b:.5}"))
}

fn c6_distillation(shared: &mut Shared) -> Outcome {
    let Some(teacher) = &shared.teacher else {
        return outcome(false, "no teacher from criterion 4");
    };
    let before = teacher.weights_checksum();
    let t = Instant::now();
    let student = match train_query_encoder(teacher, &shared.corpus, &QueryTrainConfig::default(), SEED) {
        Ok((s, _)) => s,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let el = t.elapsed();
    let eval = match build_eval_set(&shared.corpus, &EvalConfig::default(), SEED) {
        Ok(e) => e,
        Err(e) => return outcome(false, format!("eval set: {e}")),
    };
    let r = match evaluate_student(teacher, &student, &eval) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("evaluation failed: {e}")),
    };
    let frozen = teacher.weights_checksum() == before;
    shared.student = Some(student);
    shared.eval = Some(eval);
    outcome(
        r.map >= 0.80 && r.map - r.random_baseline >= 0.3 && frozen && el < Duration::from_secs(900),
        format!(
            "instance mAP {:.4} (pattern mAP {:.4}) vs random {:.4}, {} queries, teacher frozen {frozen}, trained in {:.1}s",
            r.map,
            r.pattern_map,
            r.random_baseline,
            r.per_query.len(),
            el.as_secs_f64()
        ),
    )
}

fn c7_ablation(shared: &mut Shared) -> Outcome {
    let Some(teacher) = &shared.teacher else {
        return outcome(false, "no teacher from criterion 4");
    };
    let before = tensor_checksum(teacher.extractor().params());
    let before_all = teacher.weights_checksum();
    let base = QueryTrainConfig {
        triplets_per_epoch: 4000,
        epochs: 4,
        ..Default::default()
    };
    let t = Instant::now();
    let table = match run_ablation_suite(
        teacher,
        &shared.corpus,
        &base,
        &AblationMode::ALL,
        &EvalConfig::default(),
        SEED,
        None,
    ) {
        Ok(t) => t,
        Err(e) => return outcome(false, format!("suite failed: {e}")),
    };
    let text = table.to_text();
    println!("{text}");
    shared.ablation_text = Some(text);
    let complete = table.rows.len() == 6 && table.rows.iter().all(|r| r.map.is_some());
    let full_frozen = table
        .rows
        .iter()
        .find(|r| r.mode == AblationMode::Full)
        .is_some_and(|r| r.teacher_unchanged)
        && tensor_checksum(teacher.extractor().params()) == before
        && teacher.weights_checksum() == before_all;
    let summary: Vec<String> = table
        .rows
        .iter()
        .map(|r| format!("{}={}", r.mode, r.map.map_or("failed".into(), |m| format!("{m:.3}"))))
        .collect();
    outcome(
        complete && full_frozen,
        format!("{}; teacher checksum unchanged {full_frozen}; {:.1}s", summary.join(" "), t.elapsed().as_secs_f64()),
    )
}

fn c8_retrieval() -> Outcome {
    let mut checked = 0usize;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=100);
        let d = rng.gen_range(2..8);
        // coarse values and repeated rows force exact ties
        let mut vecs: Vec<Vec<f32>> = Vec::with_capacity(n);
        for _ in 0..n {
            if !vecs.is_empty() && rng.gen_bool(0.2) {
                let j = rng.gen_range(0..vecs.len());
                vecs.push(vecs[j].clone());
            } else {
                let v: Vec<f32> = (0..d).map(|_| rng.gen_range(-2i32..=2) as f32).collect();
                if v.iter().all(|&x| x == 0.0) {
                    vecs.push((0..d).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect());
                } else {
                    vecs.push(v);
                }
            }
        }
        let mut ids: Vec<String> = (0..n).map(|i| format!("id{:03}", (i * 37 + seed as usize) % 1000)).collect();
        ids.dedup();
        if ids.iter().collect::<BTreeSet<_>>().len() != n {
            ids = (0..n).map(|i| format!("id{i:03}")).collect();
        }
        let pats = vec!["p".to_string(); n];
        let store = match EmbeddingStore::build(d, &vecs, ids.clone(), pats) {
            Ok(s) => s,
            Err(e) => return outcome(false, format!("build failed: {e}")),
        };
        let q: Vec<f32> = fos_core::vector::l2_normalize(&(0..d).map(|_| rng.gen_range(-2i32..=2) as f32 + 0.5).collect::<Vec<_>>()).unwrap();
        let ranked = store.search_instances(&q, n).unwrap();
        // pairwise oracle: i precedes j iff its cosine is larger, or equal
        // with a smaller id
        let score = |i: usize| -> f64 { fos_core::vector::dot(&q, store.row(i)) };
        let pos: Vec<usize> = ranked.iter().map(|h| store.index_of(&h.id).unwrap()).collect();
        for a in 0..n {
            for b in a + 1..n {
                let (i, j) = (pos[a], pos[b]);
                let (si, sj) = (score(i), score(j));
                if !(si > sj || (si == sj && ids[i] < ids[j])) {
                    return outcome(false, format!("seed {seed}: {} ranked before {}", ids[i], ids[j]));
                }
                checked += 1;
            }
        }
        // self query on a row with no duplicate
        for i in 0..n {
            let dup = (0..n).any(|j| j != i && store.row(j) == store.row(i));
            if !dup {
                let top = &store.search_instances(store.row(i), 1).unwrap()[0];
                if top.id != ids[i] || (top.score - 1.0).abs() > 1e-6 {
                    return outcome(false, format!("seed {seed}: self query of {} returned {} ({})", ids[i], top.id, top.score));
                }
                break;
            }
        }
    }
    outcome(true, format!("20 random stores, {checked} ordered pairs agree with the pairwise oracle"))
}

fn c9_patterns(shared: &Shared) -> Outcome {
    let single = EmbeddingStore::build(3, &[vec![0.2, -0.4, 0.9]], vec!["a".into()], vec!["p".into()]).unwrap();
    let idx = pattern_centroids(&single).unwrap();
    let single_ok = idx.centroid("p").unwrap() == single.row(0);

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let vecs: Vec<Vec<f32>> = (0..30).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let ids = (0..30).map(|i| format!("i{i:02}")).collect();
    let pats = (0..30).map(|i| format!("p{}", i % 5)).collect();
    let store = EmbeddingStore::build(6, &vecs, ids, pats).unwrap();
    let index = pattern_centroids(&store).unwrap();
    let centroid_ok = index
        .pattern_ids()
        .iter()
        .all(|p| index.search_patterns(index.centroid(p).unwrap(), 1).unwrap()[0].id == *p);

    let (Some(teacher), Some(student), Some(eval)) = (&shared.teacher, &shared.student, &shared.eval) else {
        return outcome(false, "no trained student from criterion 6");
    };
    let frac = embed_database(eval, student.foreground_encoder(teacher))
        .and_then(|db| nearest_centroid_compatibility(eval, &db, |q| student.embed(q)));
    let frac = match frac {
        Ok(f) => f,
        Err(e) => return outcome(false, format!("centroid search failed: {e}")),
    };
    outcome(
        single_ok && centroid_ok && frac >= 0.9,
        format!(
            "single-member centroid exact {single_ok}, centroid self-retrieval {centroid_ok}, nearest centroid compatible for {:.1}% of {} held-out queries",
            frac * 100.0,
            eval.queries.len()
        ),
    )
}

fn c10_formats(shared: &Shared) -> Outcome {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return outcome(false, e.to_string()),
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let manifest_ok = (|| -> fos_core::error::Result<bool> {
        let pa = write_corpus(&shared.corpus, &a, Some("hash"))?;
        let back = read_corpus(&a)?;
        let pb = write_corpus(&back, &b, Some("hash"))?;
        Ok(manifest_checksum(&pa)? == manifest_checksum(&pb)?)
    })()
    .unwrap_or(false);

    let store_ok = (|| -> fos_core::error::Result<bool> {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        let vecs: Vec<Vec<f32>> = (0..50).map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let ids = (0..50).map(|i| format!("f{i:02}")).collect();
        let pats = (0..50).map(|i| format!("p{}", i % 7)).collect();
        let s = EmbeddingStore::build(16, &vecs, ids, pats)?;
        let (s1, s2) = (dir.path().join("s1"), dir.path().join("s2"));
        std::fs::create_dir_all(&s1).map_err(|e| fos_core::error::Error::io(&s1, e))?;
        std::fs::create_dir_all(&s2).map_err(|e| fos_core::error::Error::io(&s2, e))?;
        s.save(&s1.join("store.json"), Some("hash"))?;
        let back = EmbeddingStore::load(&s1.join("store.json"))?;
        back.save(&s2.join("store.json"), Some("hash"))?;
        let same = |f: &str| std::fs::read(s1.join(f)).ok() == std::fs::read(s2.join(f)).ok();
        Ok(back == s && same("store.json") && same("store.bin"))
    })()
    .unwrap_or(false);

    let r = Rectangle::checked(0.125, 0.5, 0.25, 0.29).unwrap();
    let l = layout_embedding(&r).0;
    let bits_ok = l[0].to_bits() == 0.12f64.to_bits()
        && l[1].to_bits() == 0.5f64.to_bits()
        && l[2].to_bits() == 0.25f64.to_bits()
        && l[3].to_bits() == 0.29f64.to_bits();
    outcome(
        manifest_ok && store_ok && bits_ok,
        format!("manifest round trip {manifest_ok}, store round trip {store_ok}, layout truncation bit-exact {bits_ok} ({l:?})"),
    )
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    // `cargo test -- --list` and similar harness probes
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let started = Instant::now();
    let corpus = generate_synthetic_corpus(&SyntheticConfig::default(), SEED).expect("synthetic corpus");
    let mut shared = Shared {
        corpus,
        teacher: None,
        student: None,
        eval: None,
        ablation_text: None,
    };
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((2, "AP/mAP oracle equivalence", c2_ap_oracle()));
    results.push((3, "loss gradient checks", c3_gradients()));
    results.push((4, "teacher training end-to-end", c4_teacher(&mut shared)));
    results.push((5, "center-loss effect", c5_center_loss(&shared)));
    results.push((6, "distillation end-to-end", c6_distillation(&mut shared)));
    results.push((7, "ablation harness", c7_ablation(&mut shared)));
    results.push((1, "reference numbers reported, not asserted", c1_reference_constants(&shared)));
    results.push((8, "retrieval correctness", c8_retrieval()));
    results.push((9, "pattern-level properties", c9_patterns(&shared)));
    results.push((10, "format round-trips", c10_formats(&shared)));
    results.sort_by_key(|r| r.0);

    println!();
    for (n, name, o) in &results {
        println!("{} criterion {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("acceptance: {} passed, {failed} failed, {:.1}s total", results.len() - failed, started.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
