//! Foreground encoder (the teacher): a convolutional extractor trained to
//! classify interchangeable-foreground patterns with softmax plus center
//! loss. Its normalized features define the shared embedding space.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{tensor_checksum, Checkpoint};
use crate::dataset::augment::{apply_fg_augment, FgAugmentConfig, FgAugmentParams};
use crate::dataset::{Corpus, Split};
use crate::error::{check_dim, Error, Result};
use crate::image::Image;
use crate::nn::{Network, NetworkSpec, Sgd};
use crate::rng::derive_rng;
use crate::types::{AttributeVector, Embedding, ForegroundInstance};

pub const CHECKPOINT_KIND: &str = "foreground-encoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FgTrainConfig {
    /// Center-loss weight.
    pub lambda: f64,
    pub lr: f64,
    /// Step size of the center update.
    pub lr_center: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplicative learning-rate decay applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Offline augmented samples per training foreground (the first is the
    /// unaugmented image).
    pub views_per_instance: usize,
    /// Network input side.
    pub input_size: usize,
    pub channels: Vec<usize>,
    /// Embedding dimension.
    pub dim: usize,
    pub augment: FgAugmentConfig,
}

impl Default for FgTrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.005,
            lr: 0.02,
            lr_center: 0.5,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay: 0.5,
            lr_decay_every: 10,
            batch_size: 32,
            epochs: 12,
            views_per_instance: 20,
            input_size: 32,
            channels: vec![16, 32, 32, 64],
            dim: 32,
            augment: FgAugmentConfig {
                out_size: 32,
                ..FgAugmentConfig::default()
            },
        }
    }
}

impl FgTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.lr_center, self.lr_decay];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("learning rates and decay must be positive"));
        }
        if !(self.lambda >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::invalid("lambda, momentum and weight decay must be non-negative"));
        }
        if self.lr_center > 1.0 {
            return Err(Error::invalid("center learning rate must lie in (0, 1]"));
        }
        if self.batch_size == 0 || self.lr_decay_every == 0 || self.views_per_instance == 0 {
            return Err(Error::invalid("batch size, decay period and views must be positive"));
        }
        if self.dim == 0 || self.channels.is_empty() || self.input_size < 4 {
            return Err(Error::invalid("invalid network dimensions"));
        }
        if self.input_size % (1 << (self.channels.len() - 1)) != 0 {
            return Err(Error::invalid("input size must be divisible by the pooling factor"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// losses

fn check_batch(rows: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    check_dim(rows.len(), labels.len())?;
    if rows.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    Ok(rows.len())
}

/// Mean cross-entropy of the softmax over classes, with its gradient with
/// respect to the logits.
pub fn softmax_loss_grad(logits: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    let m = check_batch(logits, labels)? as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (z, &y) in logits.iter().zip(labels) {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite logits"));
        }
        if y >= z.len() {
            return Err(Error::invalid(format!("label {y} out of range for {} classes", z.len())));
        }
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
        let lse = zmax + sum.ln();
        loss += lse - z[y];
        let mut g: Vec<f64> = z.iter().map(|v| (v - lse).exp() / m).collect();
        g[y] -= 1.0 / m;
        grad.push(g);
    }
    Ok((loss / m, grad))
}

pub fn softmax_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    softmax_loss_grad(logits, labels).map(|(l, _)| l)
}

/// `½ Σᵢ ‖xᵢ − c_{yᵢ}‖²` summed over the batch, with its gradient with
/// respect to the features.
pub fn center_loss_grad(x: &[Vec<f64>], labels: &[usize], centers: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    check_batch(x, labels)?;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(x.len());
    for (xi, &y) in x.iter().zip(labels) {
        let c = centers
            .get(y)
            .ok_or_else(|| Error::invalid(format!("no center for label {y}")))?;
        check_dim(c.len(), xi.len())?;
        let g: Vec<f64> = xi.iter().zip(c).map(|(a, b)| a - b).collect();
        loss += 0.5 * g.iter().map(|v| v * v).sum::<f64>();
        grad.push(g);
    }
    Ok((loss, grad))
}

pub fn center_loss(x: &[Vec<f64>], labels: &[usize], centers: &[Vec<f64>]) -> Result<f64> {
    center_loss_grad(x, labels, centers).map(|(l, _)| l)
}

/// One center step: `c_j -= α Σ_{yᵢ=j}(c_j − xᵢ) / (1 + n_j)` for the
/// classes present in the batch.
pub fn update_centers(centers: &[Vec<f64>], x: &[Vec<f64>], labels: &[usize], alpha: f64) -> Result<Vec<Vec<f64>>> {
    check_batch(x, labels)?;
    let mut sums: Vec<Vec<f64>> = centers.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut counts = vec![0usize; centers.len()];
    for (xi, &y) in x.iter().zip(labels) {
        let c = centers
            .get(y)
            .ok_or_else(|| Error::invalid(format!("no center for label {y}")))?;
        check_dim(c.len(), xi.len())?;
        counts[y] += 1;
        for ((s, cv), xv) in sums[y].iter_mut().zip(c).zip(xi) {
            *s += cv - xv;
        }
    }
    Ok(centers
        .iter()
        .enumerate()
        .map(|(j, c)| {
            if counts[j] == 0 {
                return c.clone();
            }
            let denom = 1.0 + counts[j] as f64;
            c.iter().zip(&sums[j]).map(|(cv, s)| cv - alpha * s / denom).collect()
        })
        .collect())
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FgLoss {
    pub softmax: f64,
    pub center: f64,
    pub total: f64,
}

/// `L_S + λ L_C` with gradients with respect to the logits and the
/// features (the feature gradient covers only the center term; the softmax
/// term reaches the features through the classifier).
pub fn total_fg_loss_grad(
    logits: &[Vec<f64>],
    x: &[Vec<f64>],
    labels: &[usize],
    centers: &[Vec<f64>],
    lambda: f64,
) -> Result<(FgLoss, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let (ls, gz) = softmax_loss_grad(logits, labels)?;
    let (lc, mut gx) = center_loss_grad(x, labels, centers)?;
    for g in gx.iter_mut().flatten() {
        *g *= lambda;
    }
    let loss = FgLoss {
        softmax: ls,
        center: lc,
        total: ls + lambda * lc,
    };
    Ok((loss, gz, gx))
}

pub fn total_fg_loss(logits: &[Vec<f64>], x: &[Vec<f64>], labels: &[usize], centers: &[Vec<f64>], lambda: f64) -> Result<f64> {
    total_fg_loss_grad(logits, x, labels, centers, lambda).map(|(l, _, _)| l.total)
}

// ---------------------------------------------------------------------------
// model

/// Converts a square foreground image into the network input tensor.
pub fn foreground_tensor(image: &Image, input_size: usize) -> Result<Vec<f32>> {
    if !image.is_square() {
        return Err(Error::invalid(format!(
            "foreground image must be square, got {}x{}",
            image.width(),
            image.height()
        )));
    }
    let fg = ForegroundInstance::new("", image.clone(), None)?;
    let view = apply_fg_augment(&fg, &FgAugmentParams::NONE, input_size)?;
    Ok(image_tensor(view.image()))
}

/// CHW tensor centered around zero.
pub(crate) fn image_tensor(image: &Image) -> Vec<f32> {
    image.to_chw().into_iter().map(|v| v - 0.5).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FgEncoder {
    pub config: FgTrainConfig,
    /// Class order of the classifier; sorted ascending.
    pub pattern_ids: Vec<String>,
    pub schema_hash: String,
    pub(crate) extractor: Network,
    pub(crate) classifier: Network,
    /// One center per pattern.
    pub(crate) centers: Vec<Vec<f64>>,
}

impl FgEncoder {
    /// Randomly initialized encoder with zero centers.
    pub fn init(config: &FgTrainConfig, pattern_ids: Vec<String>, schema_hash: &str, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = derive_rng(seed, "fg-init", 0);
        let extractor = Network::new(
            NetworkSpec::conv_extractor(config.input_size, &config.channels, config.dim),
            &mut rng,
        )?;
        let classifier = Network::new(NetworkSpec::mlp(&[config.dim, pattern_ids.len().max(1)]), &mut rng)?;
        Ok(Self {
            config: config.clone(),
            centers: vec![vec![0.0; config.dim]; pattern_ids.len()],
            pattern_ids,
            schema_hash: schema_hash.to_string(),
            extractor,
            classifier,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn num_patterns(&self) -> usize {
        self.pattern_ids.len()
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn extractor(&self) -> &Network {
        &self.extractor
    }

    /// Raw (unnormalized) feature of a preprocessed input tensor.
    pub fn feature_of_tensor(&self, input: &[f32]) -> Result<Vec<f32>> {
        self.extractor.infer(input)
    }

    pub fn feature(&self, image: &Image) -> Result<Vec<f32>> {
        self.feature_of_tensor(&foreground_tensor(image, self.config.input_size)?)
    }

    pub fn embed_tensor(&self, input: &[f32]) -> Result<Embedding> {
        Embedding::from_raw(&self.feature_of_tensor(input)?)
    }

    pub fn logits(&self, image: &Image) -> Result<Vec<f32>> {
        self.classifier.infer(&self.feature(image)?)
    }

    /// SHA-256 over all trainable weights (extractor then classifier).
    pub fn weights_checksum(&self) -> String {
        let mut all = self.extractor.params().to_vec();
        all.extend_from_slice(self.classifier.params());
        tensor_checksum(&all)
    }

    pub fn to_checkpoint(&self, config_hash: Option<&str>) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, &self.schema_hash);
        ck.config_hash = config_hash.map(str::to_string);
        ck.config = serde_json::to_value(&self.config).map_err(|e| Error::invalid(e.to_string()))?;
        ck.meta = serde_json::json!({
            "pattern_ids": self.pattern_ids,
            "extractor": self.extractor.spec(),
            "classifier": self.classifier.spec(),
        });
        ck.insert("extractor", vec![self.extractor.num_params()], self.extractor.params().to_vec());
        ck.insert("classifier", vec![self.classifier.num_params()], self.classifier.params().to_vec());
        let flat: Vec<f32> = self.centers.iter().flatten().map(|&v| v as f32).collect();
        ck.insert("centers", vec![self.centers.len(), self.dim()], flat);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        let bad = |e: &dyn std::fmt::Display| Error::corrupt(path, e.to_string());
        let config: FgTrainConfig = serde_json::from_value(ck.config.clone()).map_err(|e| bad(&e))?;
        let pattern_ids: Vec<String> = serde_json::from_value(ck.meta["pattern_ids"].clone()).map_err(|e| bad(&e))?;
        let ex_spec: NetworkSpec = serde_json::from_value(ck.meta["extractor"].clone()).map_err(|e| bad(&e))?;
        let cl_spec: NetworkSpec = serde_json::from_value(ck.meta["classifier"].clone()).map_err(|e| bad(&e))?;
        let extractor = Network::from_params(ex_spec, ck.tensor("extractor")?.to_vec()).map_err(|e| bad(&e))?;
        let classifier = Network::from_params(cl_spec, ck.tensor("classifier")?.to_vec()).map_err(|e| bad(&e))?;
        let flat = ck.tensor("centers")?;
        if flat.len() != pattern_ids.len() * config.dim {
            return Err(bad(&"center matrix has the wrong size"));
        }
        let centers = flat
            .chunks(config.dim.max(1))
            .map(|c| c.iter().map(|&v| v as f64).collect())
            .collect();
        Ok(Self {
            config,
            pattern_ids,
            schema_hash: ck.schema_hash.clone(),
            extractor,
            classifier,
            centers,
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

/// Unit-norm embedding of a foreground image.
pub fn embed_foreground(model: &FgEncoder, image: &Image) -> Result<Embedding> {
    Embedding::from_raw(&model.feature(image)?)
}

/// The `k` most likely patterns, best first; equal logits keep ascending
/// pattern-id order.
pub fn classify_pattern(model: &FgEncoder, image: &Image, k: usize) -> Result<Vec<String>> {
    if k == 0 || k > model.num_patterns() {
        return Err(Error::invalid(format!("k must lie in 1..={}, got {k}", model.num_patterns())));
    }
    let logits = model.logits(image)?;
    Ok(rank_logits(&logits, k).into_iter().map(|i| model.pattern_ids[i].clone()).collect())
}

pub(crate) fn rank_logits(logits: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // stable sort keeps ascending index (and pattern id) order on ties
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    order.truncate(k);
    order
}

/// Labels unannotated foregrounds with the attributes of their top-1 pattern.
/// Already-labelled instances are returned unchanged.
pub fn auto_label(model: &FgEncoder, instances: &[ForegroundInstance]) -> Result<Vec<ForegroundInstance>> {
    instances
        .iter()
        .map(|inst| {
            if inst.attributes().is_some() {
                return Ok(inst.clone());
            }
            let top = classify_pattern(model, inst.image(), 1)?;
            Ok(inst.clone().with_attributes(AttributeVector::from_key(&top[0])?))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// training

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FgEpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub softmax_loss: f64,
    pub center_loss: f64,
    pub total_loss: f64,
    /// Top-1 accuracy on held-out foregrounds, when any exist.
    pub val_top1: Option<f64>,
}

impl FgEpochMetrics {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} lr={:.6} L_S={:.6} L_C={:.6} L_f={:.6} val_top1={}",
            self.epoch,
            self.lr,
            self.softmax_loss,
            self.center_loss,
            self.total_loss,
            self.val_top1.map_or("n/a".to_string(), |v| format!("{v:.4}"))
        )
    }
}

/// Labelled training data prepared for the teacher.
pub(crate) struct FgTrainingSet {
    pub pattern_ids: Vec<String>,
    /// (input tensor, label)
    pub views: Vec<(Vec<f32>, usize)>,
    pub val: Vec<(Vec<f32>, usize)>,
}

pub(crate) fn prepare_training_set(corpus: &Corpus, cfg: &FgTrainConfig, seed: u64) -> Result<FgTrainingSet> {
    let train: Vec<&ForegroundInstance> = corpus
        .instances_in(Split::Train)
        .map(|r| &r.instance)
        .filter(|i| i.pattern_id().is_some())
        .collect();
    let mut pattern_ids: Vec<String> = train.iter().filter_map(|i| i.pattern_id().map(str::to_string)).collect();
    pattern_ids.sort();
    pattern_ids.dedup();
    if pattern_ids.len() < 2 {
        return Err(Error::degenerate("teacher training needs at least two labelled patterns"));
    }
    let label = |i: &ForegroundInstance| -> Option<usize> { i.pattern_id().and_then(|p| pattern_ids.binary_search(&p.to_string()).ok()) };
    let mut counts = vec![0usize; pattern_ids.len()];
    for inst in &train {
        counts[label(inst).expect("train pattern")] += 1;
    }
    if let Some(j) = counts.iter().position(|&c| c < 2) {
        return Err(Error::degenerate(format!("pattern {} has fewer than two training instances", pattern_ids[j])));
    }

    let views_per = cfg.views_per_instance;
    let mut views = Vec::with_capacity(train.len() * views_per);
    for (i, inst) in train.iter().enumerate() {
        let y = label(inst).expect("train pattern");
        for v in 0..views_per {
            let params = if v == 0 {
                FgAugmentParams::NONE
            } else {
                let mut rng = derive_rng(seed, "fg-view", (i * views_per + v) as u64);
                FgAugmentParams::sample(&cfg.augment, &mut rng)
            };
            let view = apply_fg_augment(inst, &params, cfg.augment.out_size)?;
            views.push((foreground_tensor(view.image(), cfg.input_size)?, y));
        }
    }
    let val = corpus
        .instances_in(Split::Test)
        .filter_map(|r| label(&r.instance).map(|y| (&r.instance, y)))
        .map(|(inst, y)| Ok((foreground_tensor(inst.image(), cfg.input_size)?, y)))
        .collect::<Result<Vec<_>>>()?;
    Ok(FgTrainingSet { pattern_ids, views, val })
}

/// Forward/backward of the teacher objective on one batch. Parameter
/// gradients are accumulated into `g_ex` / `g_cl`; returns the loss and the
/// raw features of the batch.
pub(crate) fn teacher_batch_step(
    model: &FgEncoder,
    inputs: &[&[f32]],
    labels: &[usize],
    lambda: f64,
    g_ex: &mut [f32],
    g_cl: &mut [f32],
) -> Result<(FgLoss, Vec<Vec<f64>>)> {
    let mut traces = Vec::with_capacity(inputs.len());
    let mut cls_traces = Vec::with_capacity(inputs.len());
    let mut feats = Vec::with_capacity(inputs.len());
    let mut logits = Vec::with_capacity(inputs.len());
    for input in inputs {
        let t = model.extractor.forward(input)?;
        let ct = model.classifier.forward(t.output())?;
        feats.push(t.output().iter().map(|&v| v as f64).collect::<Vec<f64>>());
        logits.push(ct.output().iter().map(|&v| v as f64).collect::<Vec<f64>>());
        traces.push(t);
        cls_traces.push(ct);
    }
    let (loss, gz, gx) = total_fg_loss_grad(&logits, &feats, labels, &model.centers, lambda)?;
    for i in 0..inputs.len() {
        let gz32: Vec<f32> = gz[i].iter().map(|&v| v as f32).collect();
        let dx = model.classifier.backward(&cls_traces[i], &gz32, g_cl, true)?;
        let dfeat: Vec<f32> = dx.iter().zip(&gx[i]).map(|(a, b)| a + *b as f32).collect();
        model.extractor.backward(&traces[i], &dfeat, g_ex, false)?;
    }
    Ok((loss, feats))
}

/// Rounds centers to the f32 precision used by checkpoints, so a reloaded
/// model is identical to the trained one.
pub(crate) fn f32_precision(centers: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    centers
        .into_iter()
        .map(|c| c.into_iter().map(|v| v as f32 as f64).collect())
        .collect()
}

pub(crate) fn top1_accuracy(model: &FgEncoder, val: &[(Vec<f32>, usize)]) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut hits = 0;
    for (x, y) in val {
        let logits = model.classifier.infer(&model.extractor.infer(x)?)?;
        if rank_logits(&logits, 1)[0] == *y {
            hits += 1;
        }
    }
    Ok(Some(hits as f64 / val.len() as f64))
}

/// Trains the teacher on the training split of `corpus`. Deterministic for a
/// fixed seed.
pub fn train_foreground_encoder(corpus: &Corpus, cfg: &FgTrainConfig, seed: u64) -> Result<(FgEncoder, Vec<FgEpochMetrics>)> {
    cfg.validate()?;
    let data = prepare_training_set(corpus, cfg, seed)?;
    let mut model = FgEncoder::init(cfg, data.pattern_ids.clone(), &corpus.schema_hash, seed)?;
    let mut opt_ex = Sgd::new(model.extractor.num_params(), cfg.lr as f32, cfg.momentum as f32, cfg.weight_decay as f32);
    let mut opt_cl = Sgd::new(model.classifier.num_params(), cfg.lr as f32, cfg.momentum as f32, cfg.weight_decay as f32);
    let mut g_ex = vec![0.0f32; model.extractor.num_params()];
    let mut g_cl = vec![0.0f32; model.classifier.num_params()];
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.views.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * cfg.lr_decay.powi((epoch / cfg.lr_decay_every) as i32);
        opt_ex.lr = lr as f32;
        opt_cl.lr = lr as f32;
        order.shuffle(&mut derive_rng(seed, "fg-epoch", epoch as u64));
        let (mut ls, mut lc, mut lt, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let inputs: Vec<&[f32]> = chunk.iter().map(|&i| data.views[i].0.as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.views[i].1).collect();
            g_ex.iter_mut().for_each(|g| *g = 0.0);
            g_cl.iter_mut().for_each(|g| *g = 0.0);
            let (loss, feats) = teacher_batch_step(&model, &inputs, &labels, cfg.lambda, &mut g_ex, &mut g_cl)?;
            if !loss.total.is_finite() {
                return Err(Error::degenerate(format!("teacher loss diverged at epoch {epoch}")));
            }
            opt_ex.step(model.extractor.params_mut(), &g_ex);
            opt_cl.step(model.classifier.params_mut(), &g_cl);
            model.centers = f32_precision(update_centers(&model.centers, &feats, &labels, cfg.lr_center)?);
            ls += loss.softmax;
            lc += loss.center;
            lt += loss.total;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let metrics = FgEpochMetrics {
            epoch,
            lr,
            softmax_loss: ls / n,
            center_loss: lc / n,
            total_loss: lt / n,
            val_top1: top1_accuracy(&model, &data.val)?,
        };
        log::info!("foreground {}", metrics.log_line());
        history.push(metrics);
    }
    Ok((model, history))
}

/// Mean over patterns of the average squared distance between a member's
/// unit-norm embedding and its pattern mean.
pub fn intra_pattern_variance(model: &FgEncoder, instances: &[&ForegroundInstance]) -> Result<f64> {
    let mut groups: std::collections::BTreeMap<&str, Vec<Vec<f32>>> = Default::default();
    for inst in instances {
        if let Some(p) = inst.pattern_id() {
            groups.entry(p).or_default().push(embed_foreground(model, inst.image())?.into_inner());
        }
    }
    if groups.is_empty() {
        return Err(Error::invalid("no labelled instances"));
    }
    let mut total = 0.0;
    for members in groups.values() {
        let d = members[0].len();
        let mut mean = vec![0.0f64; d];
        for m in members {
            for (a, &v) in mean.iter_mut().zip(m) {
                *a += v as f64 / members.len() as f64;
            }
        }
        let var: f64 = members
            .iter()
            .map(|m| m.iter().zip(&mean).map(|(&v, &c)| (v as f64 - c).powi(2)).sum::<f64>())
            .sum::<f64>()
            / members.len() as f64;
        total += var;
    }
    Ok(total / groups.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_corpus, SyntheticConfig};
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let l = softmax_loss(&[vec![0.3; 4]], &[2]).unwrap();
        assert!(close(l, 4f64.ln(), 1e-12));
        let l = softmax_loss(&[vec![0.0, 0.0]], &[0]).unwrap();
        assert!(close(l, 2f64.ln(), 1e-12));
        let l = softmax_loss(&[vec![800.0, 0.0, 0.0]], &[0]).unwrap();
        assert!(l >= 0.0 && l < 1e-12);
        assert!(softmax_loss(&[vec![f64::NAN, 0.0]], &[0]).is_err());
        assert!(softmax_loss(&[vec![0.0, 0.0]], &[2]).is_err());
    }

    #[test]
    fn center_examples() {
        let c = vec![vec![1.0, 2.0], vec![0.0, 0.0]];
        assert_eq!(center_loss(&c.clone(), &[0, 1], &c).unwrap(), 0.0);
        assert!(close(center_loss(&[vec![1.0, 0.0]], &[1], &c).unwrap(), 0.5, 1e-15));
        let x = [vec![1.0, 0.0], vec![0.0, 2.0]];
        assert!(close(center_loss(&x, &[1, 1], &c).unwrap(), 2.5, 1e-15));
        assert!(center_loss(&[vec![1.0]], &[1], &c).is_err());
    }

    #[test]
    fn center_update_examples() {
        let c = vec![vec![0.0], vec![5.0]];
        let out = update_centers(&c, &[vec![2.0]], &[0], 0.5).unwrap();
        assert_eq!(out, vec![vec![0.5], vec![5.0]]);
        let same = update_centers(&c, &[vec![0.0]], &[0], 0.5).unwrap();
        assert_eq!(same, c);
    }

    /// Single-class brute force: apply the update formula one sample at a
    /// time to the accumulated sum.
    #[test]
    fn center_update_matches_manual_sum() {
        let c = vec![vec![1.0, -1.0]];
        let x = [vec![3.0, 0.0], vec![-1.0, 2.0], vec![0.5, 0.5]];
        let out = update_centers(&c, &x, &[0, 0, 0], 0.3).unwrap();
        let mut sum = [0.0, 0.0];
        for xi in &x {
            sum[0] += c[0][0] - xi[0];
            sum[1] += c[0][1] - xi[1];
        }
        let expect = [c[0][0] - 0.3 * sum[0] / 4.0, c[0][1] - 0.3 * sum[1] / 4.0];
        assert!(close(out[0][0], expect[0], 1e-15) && close(out[0][1], expect[1], 1e-15));
    }

    #[test]
    fn total_loss_examples() {
        let z = vec![vec![0.1, 0.7, -0.3]];
        let x = vec![vec![1.0, 2.0]];
        let c = vec![vec![0.0, 0.0]; 3];
        let ls = softmax_loss(&z, &[1]).unwrap();
        assert_eq!(total_fg_loss(&z, &x, &[1], &c, 0.0).unwrap(), ls);
        assert_eq!(total_fg_loss(&z, &c[..1], &[1], &c, 0.005).unwrap(), ls);
        let lc = center_loss(&x, &[1], &c).unwrap();
        assert!(close(total_fg_loss(&z, &x, &[1], &c, 0.005).unwrap(), ls + 0.005 * lc, 1e-15));
    }

    proptest! {
        #[test]
        fn center_loss_nonnegative(xs in proptest::collection::vec(-5.0f64..5.0, 6), cs in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let x: Vec<Vec<f64>> = xs.chunks(3).map(|c| c.to_vec()).collect();
            let c: Vec<Vec<f64>> = cs.chunks(3).map(|c| c.to_vec()).collect();
            let l = center_loss(&x, &[0, 1], &c).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, x == c);
        }

        #[test]
        fn absent_centers_unchanged(xs in proptest::collection::vec(-5.0f64..5.0, 4), alpha in 0.01f64..1.0) {
            let c = vec![vec![1.0, 1.0], vec![-2.0, 3.0], vec![0.5, 0.0]];
            let x: Vec<Vec<f64>> = xs.chunks(2).map(|c| c.to_vec()).collect();
            let out = update_centers(&c, &x, &[0, 0], alpha).unwrap();
            prop_assert_eq!(&out[1], &c[1]);
            prop_assert_eq!(&out[2], &c[2]);
        }
    }

    fn tiny_corpus() -> Corpus {
        let cfg = SyntheticConfig {
            patterns: 3,
            per_pattern: 4,
            test_per_pattern: 1,
            train_queries: 3,
            test_queries: 0,
            ..Default::default()
        };
        generate_synthetic_corpus(&cfg, 1).unwrap()
    }

    fn tiny_config() -> FgTrainConfig {
        FgTrainConfig {
            epochs: 1,
            views_per_instance: 2,
            input_size: 16,
            channels: vec![4, 8],
            dim: 8,
            augment: FgAugmentConfig {
                out_size: 16,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = tiny_corpus();
        let (a, ha) = train_foreground_encoder(&corpus, &tiny_config(), 3).unwrap();
        let (b, hb) = train_foreground_encoder(&corpus, &tiny_config(), 3).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.weights_checksum(), b.weights_checksum());
    }

    #[test]
    fn embeddings_are_unit_and_sized() {
        let corpus = tiny_corpus();
        let (m, _) = train_foreground_encoder(&corpus, &tiny_config(), 3).unwrap();
        let img = corpus.instances[0].instance.image();
        let e = embed_foreground(&m, img).unwrap();
        assert_eq!(e.dim(), 8);
        assert!((crate::vector::norm(e.values()) - 1.0).abs() < 1e-6);
        assert_eq!(e, embed_foreground(&m, img).unwrap());
        assert!(embed_foreground(&m, &Image::filled(4, 3, [1.0; 3])).is_err());
    }

    #[test]
    fn classify_contract() {
        let corpus = tiny_corpus();
        let (m, _) = train_foreground_encoder(&corpus, &tiny_config(), 3).unwrap();
        let img = corpus.instances[0].instance.image();
        let all = classify_pattern(&m, img, 3).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, m.pattern_ids);
        assert!(classify_pattern(&m, img, 4).is_err());
        assert_eq!(rank_logits(&[0.0, 1.0, 0.0, 1.0], 4), vec![1, 3, 0, 2]);
        assert_eq!(rank_logits(&[0.0, 0.0, 9.0], 1), vec![2]);
    }

    #[test]
    fn auto_label_assigns_top1_attributes() {
        let corpus = tiny_corpus();
        let (m, _) = train_foreground_encoder(&corpus, &tiny_config(), 3).unwrap();
        let unlabelled = ForegroundInstance::new("u", corpus.instances[0].instance.image().clone(), None).unwrap();
        let out = auto_label(&m, &[unlabelled.clone()]).unwrap();
        let top = classify_pattern(&m, unlabelled.image(), 1).unwrap();
        assert_eq!(out[0].pattern_id(), Some(top[0].as_str()));
    }

    #[test]
    fn checkpoint_round_trip() {
        let corpus = tiny_corpus();
        let (m, _) = train_foreground_encoder(&corpus, &tiny_config(), 3).unwrap();
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("fg.ckpt");
        m.save(&p, Some("h")).unwrap();
        let back = FgEncoder::load(&p).unwrap();
        assert_eq!(back.weights_checksum(), m.weights_checksum());
        assert_eq!(back.pattern_ids, m.pattern_ids);
        assert_eq!(back.config, m.config);
    }

    #[test]
    fn degenerate_corpus_is_rejected() {
        let mut corpus = tiny_corpus();
        let keep = corpus.instances[0].instance.pattern_id().map(str::to_string);
        corpus.instances.retain(|r| r.instance.pattern_id() == keep.as_deref());
        assert!(matches!(
            train_foreground_encoder(&corpus, &tiny_config(), 0),
            Err(Error::Degenerate(_))
        ));
    }
}
