use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use fos_core::dataset::annotations::ingest_annotations;
use fos_core::dataset::manifest::{manifest_checksum, manifest_path, read_corpus, read_manifest, write_corpus};
use fos_core::dataset::{generate_synthetic_corpus, mean_fill_inpaint, Corpus};
use fos_core::evaluation::{
    build_eval_set, embed_database, mean_average_precision, pattern_accuracy, run_ablation_suite, EvalReport,
};
use fos_core::fg_encoder::{auto_label, embed_foreground, train_foreground_encoder, FgEncoder};
use fos_core::image::Image;
use fos_core::query_encoder::{train_query_encoder, AblationMode, QueryEncoder};
use fos_core::retrieval::{pattern_centroids, pattern_grid, EmbeddingStore};
use fos_core::schema::AttributeSchema;
use fos_core::types::{Embedding, QueryInput, Rectangle};

use crate::config::{BadInput, RunConfig};
use crate::{grid, Cli, Command, Level, MissingArtifact};

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for s in &cli.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| anyhow!(BadInput(format!("--set expects KEY=VALUE, got '{s}'"))))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| toml_string(&p.to_string_lossy()));
    let mode = |m: &Option<String>| m.as_ref().map(|m| toml_string(m));
    flag("seed", cli.seed.map(|s| s.to_string()));
    match &cli.command {
        Command::BuildDataset(a) => {
            flag("synthetic.patterns", a.patterns.map(|v| v.to_string()));
            flag("synthetic.per_pattern", a.per_pattern.map(|v| v.to_string()));
            flag("paths.annotations", path(&a.annotations));
            flag("paths.dataset", path(&a.out));
        }
        Command::TrainForeground(a) => {
            flag("paths.dataset", path(&a.dataset));
            flag("paths.teacher", path(&a.out));
            flag("foreground.epochs", a.epochs.map(|v| v.to_string()));
            flag("foreground.lambda", a.lambda.map(|v| format!("{v:?}")));
        }
        Command::TrainQuery(a) => {
            flag("paths.dataset", path(&a.dataset));
            flag("paths.teacher", path(&a.teacher));
            flag("paths.student", path(&a.out));
            flag("query.mode", mode(&a.ablation));
            flag("query.epochs", a.epochs.map(|v| v.to_string()));
        }
        Command::Index(a) => {
            flag("paths.dataset", path(&a.dataset));
            flag("paths.teacher", path(&a.teacher));
            flag("paths.store", path(&a.out));
        }
        Command::Search(a) => {
            flag("paths.store", path(&a.store));
            flag("paths.student", path(&a.student));
            flag("paths.dataset", path(&a.dataset));
            flag("query.mode", mode(&a.ablation));
        }
        Command::Evaluate(a) => {
            flag("paths.dataset", path(&a.dataset));
            flag("paths.teacher", path(&a.teacher));
            flag("paths.student", path(&a.student));
            flag("paths.reports", path(&a.out));
            flag("query.mode", mode(&a.ablation));
        }
        Command::Ablate(a) => {
            flag("paths.dataset", path(&a.dataset));
            flag("paths.teacher", path(&a.teacher));
            flag("paths.reports", path(&a.out));
        }
    }
    Ok(out)
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides(cli)?)?;
    let seed = cfg.seed()?;
    let hash = cfg.hash()?;
    match &cli.command {
        Command::BuildDataset(a) => build_dataset(&cfg, a.synthetic, seed, &hash),
        Command::TrainForeground(_) => train_foreground(&cfg, seed, &hash),
        Command::TrainQuery(_) => train_query(&cfg, seed, &hash),
        Command::Index(a) => index(&cfg, a.student.as_deref(), &hash),
        Command::Search(a) => search(&cfg, a),
        Command::Evaluate(_) => evaluate(&cfg, seed, &hash),
        Command::Ablate(a) => ablate(&cfg, &a.modes, seed, &hash),
    }
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    Ok(read_corpus(&cfg.paths.dataset)?)
}

fn load_teacher(path: &Path) -> Result<FgEncoder> {
    if !path.exists() {
        bail!(MissingArtifact(format!(
            "teacher checkpoint {} not found; train foreground encoder first",
            path.display()
        )));
    }
    Ok(FgEncoder::load(path)?)
}

fn load_student(path: &Path) -> Result<QueryEncoder> {
    if !path.exists() {
        bail!(MissingArtifact(format!(
            "query encoder checkpoint {} not found; run train-query first",
            path.display()
        )));
    }
    Ok(QueryEncoder::load(path)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn metrics_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".metrics.jsonl");
    PathBuf::from(s)
}

fn build_dataset(cfg: &RunConfig, synthetic: bool, seed: u64, hash: &str) -> Result<()> {
    let corpus = match (&cfg.paths.annotations, synthetic) {
        (Some(ann), false) => {
            if !ann.exists() {
                bail!(BadInput(format!("annotation source {} does not exist", ann.display())));
            }
            let schema = match &cfg.paths.schema {
                Some(p) => AttributeSchema::load(p)?,
                None => AttributeSchema::person(),
            };
            let ingested = ingest_annotations(ann, &schema, &mean_fill_inpaint, &cfg.decompose)?;
            for (id, why) in &ingested.skipped {
                eprintln!("skipped {id}: {why}");
            }
            ingested.corpus
        }
        _ => generate_synthetic_corpus(&cfg.synthetic, seed)?,
    };
    let path = write_corpus(&corpus, &cfg.paths.dataset, Some(hash))?;
    println!("patterns {}", corpus.patterns().len());
    println!("instances {}", corpus.instances.len());
    println!("queries {}", corpus.queries.len());
    println!("manifest {}", path.display());
    println!("checksum {}", manifest_checksum(&path)?);
    Ok(())
}

fn train_foreground(cfg: &RunConfig, seed: u64, hash: &str) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let (model, history) = train_foreground_encoder(&corpus, &cfg.foreground, seed)?;
    let mut log = String::new();
    for m in &history {
        println!("{}", m.log_line());
        log += &serde_json::to_string(m)?;
        log.push('\n');
    }
    model.save(&cfg.paths.teacher, Some(hash))?;
    write_text(&metrics_path(&cfg.paths.teacher), &log)?;
    match history.last().and_then(|m| m.val_top1) {
        Some(a) => println!("validation top-1 {a:.4}"),
        None => println!("validation top-1 n/a"),
    }
    println!("checkpoint {}", cfg.paths.teacher.display());
    Ok(())
}

fn train_query(cfg: &RunConfig, seed: u64, hash: &str) -> Result<()> {
    let teacher = load_teacher(&cfg.paths.teacher)?;
    let corpus = load_corpus(cfg)?;
    let (model, history) = train_query_encoder(&teacher, &corpus, &cfg.query, seed)?;
    for e in &history.epochs {
        println!(
            "epoch={} train_loss={:.6} active={:.4} val_loss={}",
            e.epoch,
            e.train_loss,
            e.active_fraction,
            e.val_loss.map_or("n/a".to_string(), |v| format!("{v:.6}"))
        );
    }
    let out = cfg.paths.student_for(cfg.query.mode);
    model.save(&out, Some(hash))?;
    let mut log = String::new();
    for s in &history.steps {
        log += &serde_json::to_string(s)?;
        log.push('\n');
    }
    for e in &history.epochs {
        log += &serde_json::to_string(e)?;
        log.push('\n');
    }
    write_text(&metrics_path(&out), &log)?;
    println!("mode {}", cfg.query.mode);
    println!("best epoch {}", history.best_epoch);
    println!("checkpoint {}", out.display());
    Ok(())
}

fn index(cfg: &RunConfig, student: Option<&Path>, hash: &str) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let teacher = load_teacher(&cfg.paths.teacher)?;
    let student = student.map(load_student).transpose()?;
    let encoder = student.as_ref().map_or(&teacher, |s| s.foreground_encoder(&teacher));
    let instances: Vec<_> = corpus.instances.iter().map(|r| r.instance.clone()).collect();
    let labelled = auto_label(&teacher, &instances)?;
    let rows = labelled
        .iter()
        .map(|i| embed_foreground(encoder, i.image()).map(Embedding::into_inner))
        .collect::<fos_core::error::Result<Vec<_>>>()?;
    let ids = labelled.iter().map(|i| i.id().to_string()).collect();
    let pats = labelled.iter().map(|i| i.pattern_id().unwrap_or_default().to_string()).collect();
    let store = EmbeddingStore::build(encoder.dim(), &rows, ids, pats)?;
    store.save(&cfg.paths.store, Some(hash))?;
    println!("indexed {} foregrounds (d={})", store.len(), store.dim());
    println!("store {}", cfg.paths.store.display());
    Ok(())
}

fn parse_rect(s: &str) -> Result<Rectangle> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| anyhow!(BadInput(format!("--rect expects cx,cy,w,h, got '{s}'"))))?;
    if v.len() != 4 {
        bail!(BadInput(format!("--rect expects four numbers, got {}", v.len())));
    }
    Ok(Rectangle::checked(v[0], v[1], v[2], v[3])?)
}

fn search(cfg: &RunConfig, a: &crate::SearchArgs) -> Result<()> {
    let rect = parse_rect(&a.rect)?;
    if a.k == 0 {
        bail!(BadInput("k must be at least 1".into()));
    }
    if !a.background.exists() {
        bail!(BadInput(format!("background image {} does not exist", a.background.display())));
    }
    let background = Image::load(&a.background)?;
    if !cfg.paths.store.exists() {
        bail!(MissingArtifact(format!(
            "embedding store {} not found; run index first",
            cfg.paths.store.display()
        )));
    }
    let store = EmbeddingStore::load(&cfg.paths.store)?;
    let student = load_student(&cfg.paths.student_for(cfg.query.mode))?;
    let query = QueryInput {
        id: "query".into(),
        background,
        rect,
    };
    let q = student.embed(&query)?;
    let mut columns: Vec<Vec<String>> = Vec::new();
    match a.level {
        Level::Instance => {
            if a.k > store.len() {
                eprintln!("warning: k={} exceeds the {} stored foregrounds; returning the full ranking", a.k, store.len());
            }
            let hits = store.search_instances(q.values(), a.k)?;
            for (r, h) in hits.iter().enumerate() {
                let p = &store.pattern_ids()[store.index_of(&h.id).expect("hit in store")];
                println!("{}\t{}\t{:.6}\t{}", r + 1, h.id, h.score, p);
            }
            columns = hits.into_iter().map(|h| vec![h.id]).collect();
        }
        Level::Pattern => {
            let index = pattern_centroids(&store)?;
            if a.k > index.len() {
                eprintln!("warning: k={} exceeds the {} patterns; returning the full ranking", a.k, index.len());
            }
            for (r, col) in pattern_grid(&store, &index, q.values(), a.k, a.per_pattern)?.into_iter().enumerate() {
                let members: Vec<String> = col.members.iter().map(|m| m.id.clone()).collect();
                println!("{}\t{}\t{:.6}\t{}", r + 1, col.pattern.id, col.pattern.score, members.join(","));
                columns.push(members);
            }
        }
    }
    if let Some(out) = &a.grid {
        let m = read_manifest(&cfg.paths.dataset)?;
        let dir = manifest_path(&cfg.paths.dataset).parent().map(Path::to_path_buf).unwrap_or_default();
        let files: BTreeMap<&str, &str> = m.instances.iter().map(|e| (e.id.as_str(), e.image.as_str())).collect();
        let images = columns
            .iter()
            .map(|col| {
                col.iter()
                    .map(|id| {
                        let rel = files
                            .get(id.as_str())
                            .ok_or_else(|| anyhow!(MissingArtifact(format!("foreground '{id}' is not in the dataset"))))?;
                        Ok(Image::load(&dir.join(rel))?)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        grid::render(&query.background, &query.rect, &images).save_png(out)?;
        println!("grid {}", out.display());
    }
    Ok(())
}

fn evaluate(cfg: &RunConfig, seed: u64, hash: &str) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let teacher = load_teacher(&cfg.paths.teacher)?;
    let student = load_student(&cfg.paths.student_for(cfg.query.mode))?;
    let eval = build_eval_set(&corpus, &cfg.eval, seed)?;
    let store = embed_database(&eval, student.foreground_encoder(&teacher))?;
    let result = mean_average_precision(&eval, &store, |q| student.embed(q))?;
    let mut report = EvalReport::new(result, &store, student.mode(), seed, Some(hash.to_string()));
    report.topk_accuracy = pattern_accuracy(&teacher, &corpus, &[1, 5])?;
    let stem = format!("eval-{}", student.mode());
    write_text(&cfg.paths.reports.join(format!("{stem}.json")), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    write_text(&cfg.paths.reports.join(format!("{stem}.txt")), &report.to_text())?;
    println!("mAP {:.6}", report.map);
    println!("pattern mAP {:.6}", report.pattern_map);
    println!("random baseline {:.6}", report.random_baseline);
    for (k, a) in &report.topk_accuracy {
        println!("top-{k} accuracy {a:.6}");
    }
    println!("scored queries {} excluded {}", report.scored_queries, report.excluded_queries);
    println!("report {}", cfg.paths.reports.join(format!("{stem}.json")).display());
    Ok(())
}

fn ablate(cfg: &RunConfig, modes: &[String], seed: u64, hash: &str) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let teacher = load_teacher(&cfg.paths.teacher)?;
    let modes: Vec<AblationMode> = if modes.is_empty() {
        AblationMode::ALL.to_vec()
    } else {
        modes.iter().map(|m| m.parse()).collect::<fos_core::error::Result<_>>()?
    };
    let table = run_ablation_suite(&teacher, &corpus, &cfg.query, &modes, &cfg.eval, seed, Some(hash.to_string()))?;
    let text = table.to_text();
    write_text(&cfg.paths.reports.join("ablation.json"), &(serde_json::to_string_pretty(&table)? + "\n"))?;
    write_text(&cfg.paths.reports.join("ablation.md"), &text)?;
    print!("{text}");
    Ok(())
}
