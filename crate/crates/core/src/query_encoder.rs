//! Query encoder (the student). A query is square-cropped around its
//! rectangle, the background passes through a (normally frozen) convolutional
//! extractor, the truncated layout `(cx, cy, w, h)` is fused with that
//! feature by an outer product, and a two-layer head projects the result into
//! the teacher's embedding space. Training uses a triplet loss against
//! teacher embeddings of compatible and incompatible foregrounds.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{tensor_checksum, Checkpoint};
use crate::dataset::augment::{augment_zoom, grow_rectangle};
use crate::dataset::{Corpus, Split, TripletSampler};
use crate::error::{check_dim, Error, Result};
use crate::fg_encoder::{f32_precision, image_tensor, prepare_training_set, teacher_batch_step, update_centers, FgEncoder};
use crate::image::Image;
use crate::nn::{Adam, Network, NetworkSpec, Sgd, Trace};
use crate::rng::derive_rng;
use crate::types::{Embedding, QueryInput, Rectangle};
use crate::vector::{dot, norm, normalize_backward, outer_product_backward, outer_product_flatten};

pub const CHECKPOINT_KIND: &str = "query-encoder";

/// Training variants compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// Late fusion, frozen background extractor, zoom augmentation.
    Full,
    /// Single-stream input with the rectangle filled by the image mean.
    EarlyFusion,
    /// No zoom augmentation.
    NoAug,
    /// Background extractor trained together with the head.
    NoBgFreeze,
    /// Teacher fine-tuned jointly with its own loss plus the triplet loss.
    MultiTask,
    /// Early fusion with a foreground tower trained from scratch by the
    /// triplet loss alone (no teacher).
    BaselineProxy,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::BaselineProxy,
        AblationMode::EarlyFusion,
        AblationMode::NoAug,
        AblationMode::NoBgFreeze,
        AblationMode::Full,
        AblationMode::MultiTask,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::EarlyFusion => "early-fusion",
            AblationMode::NoAug => "no-aug",
            AblationMode::NoBgFreeze => "no-bg-freeze",
            AblationMode::MultiTask => "multi-task",
            AblationMode::BaselineProxy => "baseline-proxy",
        }
    }

    pub fn uses_zoom(self) -> bool {
        self != AblationMode::NoAug
    }

    pub fn early_fusion(self) -> bool {
        matches!(self, AblationMode::EarlyFusion | AblationMode::BaselineProxy)
    }

    pub fn background_trainable(self) -> bool {
        matches!(
            self,
            AblationMode::NoBgFreeze | AblationMode::EarlyFusion | AblationMode::BaselineProxy
        )
    }

    /// Whether foreground embeddings come from a tower trained here rather
    /// than from the frozen teacher.
    pub fn trains_foreground(self) -> bool {
        matches!(self, AblationMode::MultiTask | AblationMode::BaselineProxy)
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation mode '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueryTrainConfig {
    pub mode: AblationMode,
    pub margin: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub triplets_per_epoch: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Share of training queries held out for early stopping.
    pub val_fraction: f64,
    pub hidden: usize,
    pub bg_input_size: usize,
    pub bg_channels: Vec<usize>,
    pub bg_dim: usize,
    pub max_zoom: f64,
    /// Maximum rectangle growth per side, as a fraction of the side.
    pub rect_growth: f64,
    pub bg_pretrain_epochs: usize,
    pub bg_pretrain_lr: f64,
}

impl Default for QueryTrainConfig {
    fn default() -> Self {
        Self {
            mode: AblationMode::Full,
            margin: 0.1,
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.99,
            eps: 1e-9,
            batch_size: 16,
            triplets_per_epoch: 20000,
            epochs: 10,
            patience: 2,
            val_fraction: 0.1,
            hidden: 64,
            bg_input_size: 32,
            bg_channels: vec![16, 32, 32, 64],
            bg_dim: 32,
            max_zoom: 2.0,
            rect_growth: 0.5,
            bg_pretrain_epochs: 4,
            bg_pretrain_lr: 0.01,
        }
    }
}

impl QueryTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::invalid("triplet margin must be positive"));
        }
        if !(self.lr > 0.0 && self.bg_pretrain_lr > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(Error::invalid("invalid Adam parameters"));
        }
        if self.batch_size == 0 || self.hidden == 0 || self.bg_dim == 0 || self.bg_channels.is_empty() {
            return Err(Error::invalid("batch size and network dimensions must be positive"));
        }
        if self.bg_input_size % (1 << (self.bg_channels.len() - 1)) != 0 {
            return Err(Error::invalid("background input size must be divisible by the pooling factor"));
        }
        if !(self.max_zoom >= 1.0) || !(0.0..=1.0).contains(&self.rect_growth) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("augmentation or validation settings out of range"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// preprocessing

/// Square crop placing the rectangle as close to the center as the image
/// allows. The side is `min(W, H)`, enlarged to the rectangle's bounding
/// square when the rectangle does not fit; area outside the image is padded
/// with the per-channel image mean. Returns the crop and the rectangle in
/// crop coordinates.
pub fn square_crop(background: &Image, rect: &Rectangle) -> Result<(Image, Rectangle)> {
    let (w, h) = (background.width() as f64, background.height() as f64);
    let (rw, rh) = (rect.w * w, rect.h * h);
    let side = (w.min(h) as usize).max(rw.ceil() as usize).max(rh.ceil() as usize);
    let s = side as f64;
    let place = |center: f64, dim: f64| -> i64 {
        if s <= dim {
            (center - s / 2.0).clamp(0.0, dim - s).round() as i64
        } else {
            ((dim - s) / 2.0).round() as i64
        }
    };
    let x0 = place(rect.cx * w, w);
    let y0 = place(rect.cy * h, h);
    let crop = if x0 == 0 && y0 == 0 && side == background.width() && side == background.height() {
        background.clone()
    } else {
        background.crop_padded(x0, y0, side, side, background.mean_color())
    };
    let remapped = Rectangle::new(
        (rect.cx * w - x0 as f64) / s,
        (rect.cy * h - y0 as f64) / s,
        rw / s,
        rh / s,
    )?;
    Ok((crop, remapped))
}

/// Layout `(cx, cy, w, h)` truncated toward zero to two decimals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayoutEmbedding(pub [f64; 4]);

/// Truncates to two decimals. The small epsilon keeps values such as 0.29,
/// whose binary form sits just below the decimal, from dropping a digit.
pub fn truncate2(v: f64) -> f64 {
    ((v * 100.0 + 1e-9).floor() / 100.0).clamp(0.0, 1.0)
}

pub fn layout_embedding(rect: &Rectangle) -> LayoutEmbedding {
    LayoutEmbedding([truncate2(rect.cx), truncate2(rect.cy), truncate2(rect.w), truncate2(rect.h)])
}

impl LayoutEmbedding {
    pub fn values(&self) -> [f32; 4] {
        self.0.map(|v| v as f32)
    }
}

/// Fills the (truncated) rectangle region of a square image with the
/// per-channel image mean.
fn fill_rect_with_mean(square: &Image, rect: &Rectangle) -> Image {
    let l = layout_embedding(rect).0;
    let s = square.width() as f64;
    let x0 = ((l[0] - l[2] / 2.0) * s).round().max(0.0) as usize;
    let x1 = (((l[0] + l[2] / 2.0) * s).round() as usize).min(square.width());
    let y0 = ((l[1] - l[3] / 2.0) * s).round().max(0.0) as usize;
    let y1 = (((l[1] + l[3] / 2.0) * s).round() as usize).min(square.height());
    let mean = square.mean_color();
    let mut out = square.clone();
    for y in y0..y1 {
        for x in x0..x1 {
            out.set(x, y, mean);
        }
    }
    out
}

/// Early-fusion input: the square-cropped background with the rectangle
/// region replaced by the image mean.
pub fn early_fuse(background: &Image, rect: &Rectangle) -> Result<Image> {
    let (crop, r) = square_crop(background, rect)?;
    Ok(fill_rect_with_mean(&crop, &r))
}

// ---------------------------------------------------------------------------
// loss

/// `max(0, s_n − s_p + M)` with `s = ⟨q, ·⟩` (cosine for unit inputs).
pub fn triplet_loss(q: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    (dot(q, n) - dot(q, p) + margin).max(0.0)
}

/// Loss and gradients `(dq, dp, dn)`; all zero when the hinge is inactive.
pub fn triplet_loss_grad(q: &[f64], p: &[f64], n: &[f64], margin: f64) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
    check_dim(q.len(), p.len())?;
    check_dim(q.len(), n.len())?;
    let loss = triplet_loss(q, p, n, margin);
    if loss <= 0.0 {
        let z = vec![0.0; q.len()];
        return Ok((0.0, z.clone(), z.clone(), z));
    }
    let dq = n.iter().zip(p).map(|(a, b)| a - b).collect();
    let dp = q.iter().map(|v| -v).collect();
    let dn = q.to_vec();
    Ok((loss, dq, dp, dn))
}

// ---------------------------------------------------------------------------
// model

#[derive(Debug, Clone, PartialEq)]
pub struct QueryEncoder {
    pub config: QueryTrainConfig,
    pub schema_hash: String,
    /// Checksum of the teacher weights the student was distilled from.
    pub teacher_checksum: String,
    pub(crate) background: Network,
    pub(crate) head: Network,
    /// Foreground tower trained alongside the student (multi-task and
    /// baseline-proxy modes only).
    pub(crate) foreground: Option<FgEncoder>,
}

/// Network inputs of one query.
struct QueryTensor {
    image: Vec<f32>,
    layout: Option<[f32; 4]>,
}

struct QueryTrace {
    bg: Trace,
    layout: Option<[f32; 4]>,
    head: Trace,
    unit: Vec<f32>,
    norm: f64,
}

impl QueryEncoder {
    pub fn mode(&self) -> AblationMode {
        self.config.mode
    }

    pub fn dim(&self) -> usize {
        self.head.output_dim()
    }

    /// The encoder that embeds database foregrounds for this student: its
    /// own tower when it has one, the teacher otherwise.
    pub fn foreground_encoder<'a>(&'a self, teacher: &'a FgEncoder) -> &'a FgEncoder {
        self.foreground.as_ref().unwrap_or(teacher)
    }

    pub fn background_checksum(&self) -> String {
        tensor_checksum(self.background.params())
    }

    fn tensor_of_square(&self, square: &Image, rect: &Rectangle) -> QueryTensor {
        let size = self.config.bg_input_size;
        if self.mode().early_fusion() {
            let fused = fill_rect_with_mean(square, rect);
            QueryTensor {
                image: image_tensor(&fused.resize(size, size)),
                layout: None,
            }
        } else {
            QueryTensor {
                image: image_tensor(&square.resize(size, size)),
                layout: Some(layout_embedding(rect).values()),
            }
        }
    }

    fn tensor(&self, query: &QueryInput) -> Result<QueryTensor> {
        let (square, rect) = square_crop(&query.background, &query.rect)?;
        Ok(self.tensor_of_square(&square, &rect))
    }

    fn forward(&self, t: &QueryTensor) -> Result<QueryTrace> {
        let bg = self.background.forward(&t.image)?;
        let head_in = match &t.layout {
            Some(l) => outer_product_flatten(l, bg.output())?,
            None => bg.output().to_vec(),
        };
        let head = self.head.forward(&head_in)?;
        let n = norm(head.output());
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm);
        }
        let unit = head.output().iter().map(|&v| (v as f64 / n) as f32).collect();
        Ok(QueryTrace {
            bg,
            layout: t.layout,
            head,
            unit,
            norm: n,
        })
    }

    fn backward(&self, tr: &QueryTrace, d_unit: &[f32], g_head: &mut [f32], g_bg: Option<&mut [f32]>) -> Result<()> {
        let d_raw = normalize_backward(&tr.unit, tr.norm, d_unit);
        let d_in = self.head.backward(&tr.head, &d_raw, g_head, g_bg.is_some())?;
        if let Some(g_bg) = g_bg {
            let d_feat = match &tr.layout {
                Some(l) => outer_product_backward(l, tr.bg.output(), &d_in).1,
                None => d_in,
            };
            self.background.backward(&tr.bg, &d_feat, g_bg, false)?;
        }
        Ok(())
    }

    pub fn embed(&self, query: &QueryInput) -> Result<Embedding> {
        let tr = self.forward(&self.tensor(query)?)?;
        Embedding::from_raw(&tr.unit)
    }

    /// Unnormalized projection output.
    pub fn project(&self, query: &QueryInput) -> Result<Vec<f32>> {
        Ok(self.forward(&self.tensor(query)?)?.head.output().to_vec())
    }

    pub fn to_checkpoint(&self, config_hash: Option<&str>) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, &self.schema_hash);
        ck.mode = Some(self.mode().as_str().to_string());
        ck.config_hash = config_hash.map(str::to_string);
        ck.config = serde_json::to_value(&self.config).map_err(|e| Error::invalid(e.to_string()))?;
        let mut meta = serde_json::json!({
            "teacher_checksum": self.teacher_checksum,
            "background": self.background.spec(),
            "head": self.head.spec(),
        });
        ck.insert("background", vec![self.background.num_params()], self.background.params().to_vec());
        ck.insert("head", vec![self.head.num_params()], self.head.params().to_vec());
        if let Some(fg) = &self.foreground {
            let inner = fg.to_checkpoint(None)?;
            meta["foreground"] = serde_json::json!({"config": inner.config, "meta": inner.meta});
            for (name, (shape, values)) in inner.tensors {
                ck.insert(&format!("foreground.{name}"), shape, values);
            }
        }
        ck.meta = meta;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        let bad = |e: &dyn fmt::Display| Error::corrupt(path, e.to_string());
        let config: QueryTrainConfig = serde_json::from_value(ck.config.clone()).map_err(|e| bad(&e))?;
        if ck.mode.as_deref() != Some(config.mode.as_str()) {
            return Err(bad(&"mode tag disagrees with the stored configuration"));
        }
        let bg_spec: NetworkSpec = serde_json::from_value(ck.meta["background"].clone()).map_err(|e| bad(&e))?;
        let head_spec: NetworkSpec = serde_json::from_value(ck.meta["head"].clone()).map_err(|e| bad(&e))?;
        let teacher_checksum = ck.meta["teacher_checksum"].as_str().unwrap_or_default().to_string();
        let background = Network::from_params(bg_spec, ck.tensor("background")?.to_vec()).map_err(|e| bad(&e))?;
        let head = Network::from_params(head_spec, ck.tensor("head")?.to_vec()).map_err(|e| bad(&e))?;
        let foreground = match ck.meta.get("foreground") {
            Some(fg) if !fg.is_null() => {
                let mut inner = Checkpoint::new(crate::fg_encoder::CHECKPOINT_KIND, &ck.schema_hash);
                inner.config = fg["config"].clone();
                inner.meta = fg["meta"].clone();
                for (name, t) in &ck.tensors {
                    if let Some(short) = name.strip_prefix("foreground.") {
                        inner.tensors.insert(short.to_string(), t.clone());
                    }
                }
                Some(FgEncoder::from_checkpoint(&inner, path)?)
            }
            _ => None,
        };
        Ok(Self {
            config,
            schema_hash: ck.schema_hash.clone(),
            teacher_checksum,
            background,
            head,
            foreground,
        })
    }

    pub fn save(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        self.to_checkpoint(config_hash)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load_kind(path, CHECKPOINT_KIND)?;
        Self::from_checkpoint(&ck, path)
    }
}

/// Unit-norm embedding of a query in the teacher's space.
pub fn embed_query(model: &QueryEncoder, query: &QueryInput) -> Result<Embedding> {
    model.embed(query)
}

// ---------------------------------------------------------------------------
// training

/// Training-time query augmentation: optional rectangle growth, then an
/// optional zoom inside the square crop.
fn augment_square(square: &Image, rect: &Rectangle, cfg: &QueryTrainConfig, rng: &mut ChaCha8Rng) -> Result<(Image, Rectangle)> {
    let mut rect = *rect;
    if cfg.rect_growth > 0.0 {
        let gw = rng.gen_range(0.0..=cfg.rect_growth);
        let gh = rng.gen_range(0.0..=cfg.rect_growth);
        rect = grow_rectangle(&rect, gw, gh)?;
    }
    if cfg.mode.uses_zoom() && cfg.max_zoom > 1.0 {
        let q = QueryInput {
            id: String::new(),
            background: square.clone(),
            rect,
        };
        let z = augment_zoom(&q, cfg.max_zoom, rng)?;
        return Ok((z.background, z.rect));
    }
    Ok((square.clone(), rect))
}

/// Trains the background extractor to classify scene labels of training
/// queries. Without at least two distinct labels the randomly initialized
/// extractor is returned unchanged.
pub fn pretrain_background_extractor(corpus: &Corpus, cfg: &QueryTrainConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let mut rng = derive_rng(seed, "bg-init", 0);
    let spec = NetworkSpec::conv_extractor(cfg.bg_input_size, &cfg.bg_channels, cfg.bg_dim);
    let mut extractor = Network::new(spec, &mut rng)?;
    let labelled: Vec<(Image, Rectangle, u32)> = corpus
        .queries_in(Split::Train)
        .filter_map(|r| r.scene_label.map(|l| (r, l)))
        .map(|(r, l)| square_crop(&r.query.background, &r.query.rect).map(|(s, rect)| (s, rect, l)))
        .collect::<Result<_>>()?;
    let mut classes: Vec<u32> = labelled.iter().map(|x| x.2).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        log::warn!("fewer than two scene labels; background extractor left at random initialization");
        return Ok(extractor);
    }
    let mut classifier = Network::new(NetworkSpec::mlp(&[cfg.bg_dim, classes.len()]), &mut rng)?;
    let mut opt_ex = Sgd::new(extractor.num_params(), cfg.bg_pretrain_lr as f32, 0.9, 1e-4);
    let mut opt_cl = Sgd::new(classifier.num_params(), cfg.bg_pretrain_lr as f32, 0.9, 1e-4);
    let mut g_ex = vec![0.0f32; extractor.num_params()];
    let mut g_cl = vec![0.0f32; classifier.num_params()];
    let size = cfg.bg_input_size;
    let mut order: Vec<usize> = (0..labelled.len()).collect();
    for epoch in 0..cfg.bg_pretrain_epochs {
        let mut erng = derive_rng(seed, "bg-epoch", epoch as u64);
        order.shuffle(&mut erng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            g_ex.iter_mut().for_each(|g| *g = 0.0);
            g_cl.iter_mut().for_each(|g| *g = 0.0);
            let mut traces = Vec::with_capacity(chunk.len());
            let mut logits = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (square, rect, label) = &labelled[i];
                let q = QueryInput {
                    id: String::new(),
                    background: square.clone(),
                    rect: *rect,
                };
                let view = augment_zoom(&q, cfg.max_zoom, &mut erng)?;
                let t = extractor.forward(&image_tensor(&view.background.resize(size, size)))?;
                let ct = classifier.forward(t.output())?;
                logits.push(ct.output().iter().map(|&v| v as f64).collect::<Vec<f64>>());
                labels.push(classes.binary_search(label).expect("known class"));
                traces.push((t, ct));
            }
            let (loss, gz) = crate::fg_encoder::softmax_loss_grad(&logits, &labels)?;
            total += loss * chunk.len() as f64;
            for ((t, ct), g) in traces.iter().zip(&gz) {
                let g32: Vec<f32> = g.iter().map(|&v| v as f32).collect();
                let dx = classifier.backward(ct, &g32, &mut g_cl, true)?;
                extractor.backward(t, &dx, &mut g_ex, false)?;
            }
            opt_ex.step(extractor.params_mut(), &g_ex);
            opt_cl.step(classifier.params_mut(), &g_cl);
        }
        log::info!("background pretrain epoch={epoch} loss={:.6}", total / labelled.len() as f64);
    }
    Ok(extractor)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryStepMetrics {
    pub step: usize,
    pub loss: f64,
    pub active_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryEpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub active_fraction: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct QueryHistory {
    pub steps: Vec<QueryStepMetrics>,
    pub epochs: Vec<QueryEpochMetrics>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl QueryHistory {
    pub fn log_lines(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .steps
            .iter()
            .map(|s| format!("step={} loss={:.6} active={:.4}", s.step, s.loss, s.active_fraction))
            .collect();
        out.extend(self.epochs.iter().map(|e| {
            format!(
                "epoch={} train_loss={:.6} active={:.4} val_loss={}",
                e.epoch,
                e.train_loss,
                e.active_fraction,
                e.val_loss.map_or("n/a".to_string(), |v| format!("{v:.6}"))
            )
        }));
        out
    }
}

/// One sampled training example: anchor position and the view indices of
/// the positive and negative foregrounds.
#[derive(Debug, Clone, Copy)]
struct TripletDraw {
    anchor: usize,
    pos_view: usize,
    neg_view: usize,
}

struct Trainable<'a> {
    model: QueryEncoder,
    /// Cached teacher embeddings per view, for frozen-teacher modes.
    cached: Option<Vec<Vec<f32>>>,
    views: &'a [(Vec<f32>, usize)],
}

impl Trainable<'_> {
    fn fg_embedding(&self, view: usize) -> Result<Vec<f32>> {
        match (&self.cached, &self.model.foreground) {
            (Some(c), _) => Ok(c[view].clone()),
            (None, Some(fg)) => Ok(fg.embed_tensor(&self.views[view].0)?.into_inner()),
            (None, None) => Err(Error::invalid("no foreground encoder available")),
        }
    }
}

fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn to32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Distills the teacher into a query encoder on the training split of
/// `corpus`. The teacher itself is never modified; in multi-task mode a copy
/// is fine-tuned and stored in the returned model.
pub fn train_query_encoder(
    teacher: &FgEncoder,
    corpus: &Corpus,
    cfg: &QueryTrainConfig,
    seed: u64,
) -> Result<(QueryEncoder, QueryHistory)> {
    cfg.validate()?;
    if teacher.schema_hash != corpus.schema_hash {
        return Err(Error::invalid("teacher was trained against a different attribute schema"));
    }
    let mode = cfg.mode;
    let data = prepare_training_set(corpus, &teacher.config, seed)?;
    if data.pattern_ids != teacher.pattern_ids {
        return Err(Error::invalid("teacher patterns do not match the corpus training split"));
    }
    let (sampler, query_idx, inst_idx) = TripletSampler::for_corpus(corpus, Split::Train)?;
    let views_per = teacher.config.views_per_instance;
    check_dim(inst_idx.len() * views_per, data.views.len())?;
    if query_idx.is_empty() {
        return Err(Error::degenerate("no training queries with compatible patterns"));
    }

    // square crops of every anchor, computed once
    let squares: Vec<(Image, Rectangle)> = query_idx
        .iter()
        .map(|&q| {
            let r = &corpus.queries[q].query;
            square_crop(&r.background, &r.rect)
        })
        .collect::<Result<_>>()?;

    let mut anchors: Vec<usize> = (0..query_idx.len()).collect();
    anchors.shuffle(&mut derive_rng(seed, "val-split", 0));
    let n_val = if anchors.len() >= 10 {
        ((anchors.len() as f64 * cfg.val_fraction).ceil() as usize).min(anchors.len() - 1)
    } else {
        0
    };
    let (val_anchors, train_anchors) = anchors.split_at(n_val);
    let train_anchors = train_anchors.to_vec();

    // networks
    let background = pretrain_background_extractor(corpus, cfg, seed)?;
    let head_in = if mode.early_fusion() { cfg.bg_dim } else { 4 * cfg.bg_dim };
    let head = Network::new(
        NetworkSpec::mlp(&[head_in, cfg.hidden, teacher.dim()]),
        &mut derive_rng(seed, "head-init", 0),
    )?;
    let foreground = match mode {
        AblationMode::MultiTask => Some(teacher.clone()),
        AblationMode::BaselineProxy => Some(FgEncoder::init(
            &teacher.config,
            teacher.pattern_ids.clone(),
            &teacher.schema_hash,
            seed ^ 0x5eed,
        )?),
        _ => None,
    };
    let cached = if mode.trains_foreground() {
        None
    } else {
        Some(
            data.views
                .iter()
                .map(|(x, _)| teacher.embed_tensor(x).map(Embedding::into_inner))
                .collect::<Result<Vec<_>>>()?,
        )
    };
    let mut tr = Trainable {
        model: QueryEncoder {
            config: cfg.clone(),
            schema_hash: corpus.schema_hash.clone(),
            teacher_checksum: teacher.weights_checksum(),
            background,
            head,
            foreground,
        },
        cached,
        views: &data.views,
    };

    let adam = |n: usize| Adam::new(n, cfg.lr as f32, cfg.beta1 as f32, cfg.beta2 as f32, cfg.eps as f32);
    let mut opt_head = adam(tr.model.head.num_params());
    let mut opt_bg = adam(tr.model.background.num_params());
    let (n_fx, n_fc) = tr
        .model
        .foreground
        .as_ref()
        .map_or((0, 0), |f| (f.extractor.num_params(), f.classifier.num_params()));
    let mut opt_fx = adam(n_fx);
    let mut opt_fc = adam(n_fc);
    let mut g_head = vec![0.0f32; tr.model.head.num_params()];
    let mut g_bg = vec![0.0f32; tr.model.background.num_params()];
    let mut g_fx = vec![0.0f32; n_fx];
    let mut g_fc = vec![0.0f32; n_fc];

    // fixed validation triplets without augmentation
    let mut vrng = derive_rng(seed, "val-triplets", 0);
    let val: Vec<(usize, usize, usize)> = val_anchors
        .iter()
        .flat_map(|&a| {
            (0..4)
                .map(|_| {
                    let (p, n) = sampler.sample(a, &mut vrng);
                    (a, p * views_per, n * views_per)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let val_inputs: Vec<QueryTensor> = val
        .iter()
        .map(|&(a, _, _)| tr.model.tensor_of_square(&squares[a].0, &squares[a].1))
        .collect();

    let evaluate_val = |tr: &Trainable| -> Result<Option<f64>> {
        if val.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        for ((_, pv, nv), input) in val.iter().zip(&val_inputs) {
            let q = to64(&tr.model.forward(input)?.unit);
            let p = to64(&tr.fg_embedding(*pv)?);
            let n = to64(&tr.fg_embedding(*nv)?);
            total += triplet_loss(&q, &p, &n, cfg.margin);
        }
        Ok(Some(total / val.len() as f64))
    };

    let mut history = QueryHistory::default();
    let mut best: Option<(f64, QueryEncoder)> = None;
    let mut since_best = 0;
    let mut step = 0;
    let batches_per_epoch = cfg.triplets_per_epoch.div_ceil(cfg.batch_size).max(1);
    for epoch in 0..cfg.epochs {
        let mut erng = derive_rng(seed, "query-epoch", epoch as u64);
        let (mut e_loss, mut e_active, mut e_count) = (0.0, 0usize, 0usize);
        for _ in 0..batches_per_epoch {
            let draws: Vec<TripletDraw> = (0..cfg.batch_size)
                .map(|_| {
                    let anchor = train_anchors[erng.gen_range(0..train_anchors.len())];
                    let (p, n) = sampler.sample(anchor, &mut erng);
                    TripletDraw {
                        anchor,
                        pos_view: p * views_per + erng.gen_range(0..views_per),
                        neg_view: n * views_per + erng.gen_range(0..views_per),
                    }
                })
                .collect();
            g_head.iter_mut().for_each(|g| *g = 0.0);
            g_bg.iter_mut().for_each(|g| *g = 0.0);
            g_fx.iter_mut().for_each(|g| *g = 0.0);
            g_fc.iter_mut().for_each(|g| *g = 0.0);
            let m = draws.len() as f64;
            let (mut b_loss, mut b_active) = (0.0, 0usize);
            for d in &draws {
                let (square, rect) = augment_square(&squares[d.anchor].0, &squares[d.anchor].1, cfg, &mut erng)?;
                let input = tr.model.tensor_of_square(&square, &rect);
                let qt = tr.model.forward(&input)?;
                let q = to64(&qt.unit);
                let live = tr.cached.is_none();
                let (p, n, fg_traces) = if live {
                    let fg = tr.model.foreground.as_ref().expect("live tower");
                    let tp = fg.extractor.forward(&data.views[d.pos_view].0)?;
                    let tn = fg.extractor.forward(&data.views[d.neg_view].0)?;
                    let (np, nn) = (norm(tp.output()), norm(tn.output()));
                    if np == 0.0 || nn == 0.0 {
                        return Err(Error::ZeroNorm);
                    }
                    let up: Vec<f64> = tp.output().iter().map(|&v| v as f64 / np).collect();
                    let un: Vec<f64> = tn.output().iter().map(|&v| v as f64 / nn).collect();
                    (up, un, Some((tp, np, tn, nn)))
                } else {
                    (to64(&tr.fg_embedding(d.pos_view)?), to64(&tr.fg_embedding(d.neg_view)?), None)
                };
                let (loss, dq, dp, dn) = triplet_loss_grad(&q, &p, &n, cfg.margin)?;
                b_loss += loss;
                if loss > 0.0 {
                    b_active += 1;
                    let scale = |g: &[f64]| -> Vec<f32> { g.iter().map(|&v| (v / m) as f32).collect() };
                    let bg_grad = if cfg.mode.background_trainable() { Some(g_bg.as_mut_slice()) } else { None };
                    tr.model.backward(&qt, &scale(&dq), &mut g_head, bg_grad)?;
                    if let Some((tp, np, tn, nn)) = fg_traces {
                        let fg = tr.model.foreground.as_ref().expect("live tower");
                        let up = to32(&p);
                        let un = to32(&n);
                        let gp = normalize_backward(&up, np, &scale(&dp));
                        let gn = normalize_backward(&un, nn, &scale(&dn));
                        fg.extractor.backward(&tp, &gp, &mut g_fx, false)?;
                        fg.extractor.backward(&tn, &gn, &mut g_fx, false)?;
                    }
                }
            }
            if mode == AblationMode::MultiTask {
                // teacher objective on a batch of foreground views
                let picks: Vec<usize> = (0..cfg.batch_size).map(|_| erng.gen_range(0..data.views.len())).collect();
                let inputs: Vec<&[f32]> = picks.iter().map(|&i| data.views[i].0.as_slice()).collect();
                let labels: Vec<usize> = picks.iter().map(|&i| data.views[i].1).collect();
                let fg = tr.model.foreground.as_ref().expect("multi-task tower");
                let (_, feats) = teacher_batch_step(fg, &inputs, &labels, fg.config.lambda, &mut g_fx, &mut g_fc)?;
                let fg = tr.model.foreground.as_mut().expect("multi-task tower");
                fg.centers = f32_precision(update_centers(&fg.centers, &feats, &labels, fg.config.lr_center)?);
            }
            opt_head.step(tr.model.head.params_mut(), &g_head);
            if cfg.mode.background_trainable() {
                opt_bg.step(tr.model.background.params_mut(), &g_bg);
            }
            if let Some(fg) = tr.model.foreground.as_mut() {
                opt_fx.step(fg.extractor.params_mut(), &g_fx);
                if mode == AblationMode::MultiTask {
                    opt_fc.step(fg.classifier.params_mut(), &g_fc);
                }
            }
            let metrics = QueryStepMetrics {
                step,
                loss: b_loss / m,
                active_fraction: b_active as f64 / m,
            };
            step += 1;
            e_loss += b_loss;
            e_active += b_active;
            e_count += draws.len();
            history.steps.push(metrics);
        }
        if !e_loss.is_finite() {
            return Err(Error::degenerate(format!("query encoder loss diverged at epoch {epoch}")));
        }
        let val_loss = evaluate_val(&tr)?;
        let em = QueryEpochMetrics {
            epoch,
            train_loss: e_loss / e_count as f64,
            active_fraction: e_active as f64 / e_count as f64,
            val_loss,
        };
        log::info!(
            "query[{mode}] epoch={epoch} loss={:.6} active={:.4} val={:?}",
            em.train_loss,
            em.active_fraction,
            em.val_loss
        );
        history.epochs.push(em);
        let score = val_loss.unwrap_or(e_loss / e_count as f64);
        match &best {
            Some((b, _)) if score >= *b => {
                since_best += 1;
                if since_best > cfg.patience {
                    history.stopped_early = true;
                    break;
                }
            }
            _ => {
                best = Some((score, tr.model.clone()));
                history.best_epoch = epoch;
                since_best = 0;
            }
        }
    }
    let model = best.map(|(_, m)| m).unwrap_or(tr.model);
    Ok((model, history))
}
