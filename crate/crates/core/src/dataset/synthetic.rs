//! Deterministic procedural corpus for desk-scale training and tests.
//!
//! Foreground patterns are silhouettes: the shape index fills the
//! `orientation` dimension and a bottom cut-off fills `truncation`. Colors
//! are random per instance and carry no label, so color jitter never changes
//! a pattern.
//!
//! Each query is rendered by compositing an instance of a source pattern onto
//! a striped background and decomposing the composite. Compatibility is a
//! fixed function of what the query shows:
//!
//! * rectangle aspect (tall / wide / square) must match the shape's aspect,
//! * stripe direction (horizontal / vertical) must match the shape's context,
//! * a rectangle touching the bottom border is compatible exactly with
//!   truncated patterns.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decompose::{decompose, AnnotatedComposite, DecomposeOptions, Mask};
use super::{Corpus, InstanceRecord, QueryRecord, Split};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::derive_rng;
use crate::schema::AttributeSchema;
use crate::types::{AttributeVector, ForegroundInstance};

pub const NUM_SHAPES: usize = 8;
pub const NUM_TRUNCATIONS: usize = 6;
pub const CATEGORY: &str = "synthetic-shapes";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aspect {
    Tall,
    Wide,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    VBar,
    HBar,
    Disk,
    Ring,
    TallEllipse,
    WideEllipse,
    Cross,
    TwinBars,
}

const SHAPES: [Shape; NUM_SHAPES] = [
    Shape::VBar,
    Shape::HBar,
    Shape::Disk,
    Shape::Ring,
    Shape::TallEllipse,
    Shape::WideEllipse,
    Shape::Cross,
    Shape::TwinBars,
];

impl Shape {
    fn aspect(self) -> Aspect {
        match self {
            Shape::VBar | Shape::TallEllipse | Shape::TwinBars => Aspect::Tall,
            Shape::HBar | Shape::WideEllipse => Aspect::Wide,
            Shape::Disk | Shape::Ring | Shape::Cross => Aspect::Square,
        }
    }

    /// Background stripe direction the shape belongs with (0 horizontal, 1 vertical).
    fn context(self) -> u32 {
        match self {
            Shape::VBar | Shape::HBar | Shape::Disk | Shape::TallEllipse => 0,
            Shape::Ring | Shape::WideEllipse | Shape::Cross | Shape::TwinBars => 1,
        }
    }

    /// Point test in box coordinates `(u, v)` in [0, 1]^2.
    fn contains(self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        let r2 = du * du + dv * dv;
        match self {
            Shape::VBar | Shape::HBar => true,
            Shape::Disk | Shape::TallEllipse | Shape::WideEllipse => r2 <= 0.25,
            Shape::Ring => r2 <= 0.25 && r2 >= 0.3 * 0.3,
            Shape::Cross => du.abs() <= 0.17 || dv.abs() <= 0.17,
            Shape::TwinBars => u <= 0.36 || u >= 0.64,
        }
    }
}

/// Compatibility class of a pattern: what a query must show to accept it.
fn compat_key(pattern: usize) -> (Aspect, u32, bool) {
    let shape = SHAPES[pattern % NUM_SHAPES];
    (shape.aspect(), shape.context(), pattern / NUM_SHAPES > 0)
}

fn pattern_attributes(pattern: usize) -> AttributeVector {
    AttributeVector::new((pattern % NUM_SHAPES) as u8, (pattern / NUM_SHAPES) as u8)
}

/// Fraction of the object cut off at the bottom for truncation level `t`.
fn cut_fraction(t: usize) -> f64 {
    0.06 * t as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub patterns: usize,
    pub per_pattern: usize,
    /// Trailing instances of each pattern assigned to the test split.
    pub test_per_pattern: usize,
    pub train_queries: usize,
    pub test_queries: usize,
    /// Side of the foreground squares.
    pub fg_size: usize,
    /// Background width and height (orientation is randomized per query).
    pub bg_width: usize,
    pub bg_height: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            patterns: 8,
            per_pattern: 30,
            test_per_pattern: 10,
            train_queries: 320,
            test_queries: 50,
            fg_size: 48,
            bg_width: 96,
            bg_height: 72,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patterns == 0 {
            return Err(Error::invalid("synthetic corpus needs at least one pattern"));
        }
        if self.patterns < 2 {
            return Err(Error::invalid("synthetic corpus needs at least two patterns so every query has a negative"));
        }
        if self.patterns > NUM_SHAPES * NUM_TRUNCATIONS {
            return Err(Error::invalid(format!(
                "at most {} synthetic patterns are available",
                NUM_SHAPES * NUM_TRUNCATIONS
            )));
        }
        if self.per_pattern == 0 || self.test_per_pattern > self.per_pattern {
            return Err(Error::invalid("per_pattern must be positive and at least test_per_pattern"));
        }
        if self.fg_size < 8 || self.bg_width.min(self.bg_height) < 16 {
            return Err(Error::invalid("synthetic images are too small"));
        }
        Ok(())
    }
}

fn random_color(rng: &mut ChaCha8Rng, val: (f32, f32)) -> [f32; 3] {
    let h = rng.gen_range(0.0f32..1.0);
    let s = rng.gen_range(0.45f32..1.0);
    let v = rng.gen_range(val.0..val.1);
    let h6 = h * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6.floor() as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Box size `(w, h)` in pixels for a shape of the given aspect.
fn box_size(aspect: Aspect, scale: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let ratio = rng.gen_range(2.0..2.6);
    match aspect {
        Aspect::Tall => (scale / ratio, scale),
        Aspect::Wide => (scale, scale / ratio),
        Aspect::Square => (scale * 0.8, scale * 0.8),
    }
}

/// Paints `shape` with its box at `(bx, by, bw, bh)` (pixels), clipping rows
/// below `clip_y`. Returns the painted mask.
#[allow(clippy::too_many_arguments)]
fn paint_shape(
    img: &mut Image,
    shape: Shape,
    bx: f64,
    by: f64,
    bw: f64,
    bh: f64,
    clip_y: f64,
    color: [f32; 3],
    rng: &mut ChaCha8Rng,
) -> Mask {
    let (w, h) = (img.width(), img.height());
    let mut mask = Mask::new(w, h);
    for y in 0..h {
        let py = y as f64 + 0.5;
        if py >= clip_y {
            continue;
        }
        let v = (py - by) / bh;
        if !(0.0..=1.0).contains(&v) {
            continue;
        }
        for x in 0..w {
            let u = (x as f64 + 0.5 - bx) / bw;
            if !(0.0..=1.0).contains(&u) || !shape.contains(u, v) {
                continue;
            }
            let shade = 0.8 + 0.2 * (1.0 - v as f32);
            let noise: f32 = rng.gen_range(-0.04..0.04);
            let px = [
                (color[0] * shade + noise).clamp(0.0, 0.95),
                (color[1] * shade + noise).clamp(0.0, 0.95),
                (color[2] * shade + noise).clamp(0.0, 0.95),
            ];
            img.set(x, y, px);
            mask.set(x, y, true);
        }
    }
    mask
}

fn render_instance(pattern: usize, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let shape = SHAPES[pattern % NUM_SHAPES];
    let cut = cut_fraction(pattern / NUM_SHAPES);
    let scale = rng.gen_range(0.6..0.85) * size as f64;
    let (bw, bh) = box_size(shape.aspect(), scale, rng);
    let visible = bh * (1.0 - cut);
    let bx = (size as f64 - bw) / 2.0;
    let by = (size as f64 - visible) / 2.0;
    let color = random_color(rng, (0.25, 0.85));
    let mut img = Image::white(size);
    paint_shape(&mut img, shape, bx, by, bw, bh, by + visible, color, rng);
    img.quantize();
    img
}

fn render_background(w: usize, h: usize, context: u32, rng: &mut ChaCha8Rng) -> Image {
    let a = random_color(rng, (0.15, 0.55));
    let b = random_color(rng, (0.6, 1.0));
    let period = rng.gen_range(8.0f64..16.0);
    let phase = rng.gen_range(0.0..period);
    let mut img = Image::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let t = if context == 0 { y } else { x } as f64;
            let blend = (0.5 + 0.5 * ((t + phase) * std::f64::consts::TAU / period).sin()) as f32;
            let noise: f32 = rng.gen_range(-0.03..0.03);
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                px[c] = (a[c] * blend + b[c] * (1.0 - blend) + noise).clamp(0.0, 1.0);
            }
            img.set(x, y, px);
        }
    }
    img.quantize();
    img
}

/// Renders query `index`: returns the record and its source pattern.
fn render_query(cfg: &SyntheticConfig, seed: u64, index: usize, split: Split) -> Result<(QueryRecord, usize)> {
    let mut rng = derive_rng(seed, "query", index as u64);
    let pattern = index % cfg.patterns;
    let shape = SHAPES[pattern % NUM_SHAPES];
    let truncation = pattern / NUM_SHAPES;
    let (w, h) = if rng.gen_bool(0.5) {
        (cfg.bg_width, cfg.bg_height)
    } else {
        (cfg.bg_height, cfg.bg_width)
    };
    let clean = render_background(w, h, shape.context(), &mut rng);

    let side = w.min(h) as f64;
    let scale = match shape.aspect() {
        Aspect::Square => rng.gen_range(0.38..0.55),
        _ => rng.gen_range(0.45..0.7),
    } * side;
    let (bw, bh) = box_size(shape.aspect(), scale, &mut rng);
    let bx = rng.gen_range(1.0..(w as f64 - bw - 1.0).max(1.5));
    let by = if truncation > 0 {
        h as f64 - bh * (1.0 - cut_fraction(truncation))
    } else {
        rng.gen_range(1.0..(h as f64 - bh - 2.0).max(1.5))
    };
    let mut composite = clean.clone();
    let color = random_color(&mut rng, (0.25, 0.85));
    let mask = paint_shape(&mut composite, shape, bx, by, bw, bh, h as f64, color, &mut rng);
    composite.quantize();

    let comp = AnnotatedComposite {
        id: format!("q-{index:04}"),
        image: composite,
        mask,
        category: CATEGORY.to_string(),
        attributes: Some(pattern_attributes(pattern)),
    };
    // the clean render is a perfect inpainting of the composite
    let oracle = |_: &Image, _: &Mask| -> Result<Image> { Ok(clean.clone()) };
    let opts = DecomposeOptions {
        min_area_fraction: 0.0,
        min_bbox_side: 1,
        margin_fraction: 0.1,
    };
    let (query, _) = decompose(&comp, &oracle, &opts)?;
    Ok((
        QueryRecord {
            query,
            split,
            scene_label: Some(shape.context()),
        },
        pattern,
    ))
}

/// Generates the full corpus. Every sample is seeded from `(seed, sample id)`.
pub fn generate_synthetic_corpus(cfg: &SyntheticConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut instances = Vec::with_capacity(cfg.patterns * cfg.per_pattern);
    for p in 0..cfg.patterns {
        for i in 0..cfg.per_pattern {
            let mut rng = derive_rng(seed, "instance", (p * cfg.per_pattern + i) as u64);
            let img = render_instance(p, cfg.fg_size, &mut rng);
            let instance = ForegroundInstance::new(format!("fg-{p:02}-{i:03}"), img, Some(pattern_attributes(p)))?;
            let split = if i >= cfg.per_pattern - cfg.test_per_pattern {
                Split::Test
            } else {
                Split::Train
            };
            instances.push(InstanceRecord { instance, split });
        }
    }

    let pattern_ids: Vec<String> = (0..cfg.patterns).map(|p| pattern_attributes(p).key()).collect();
    let mut queries = Vec::with_capacity(cfg.train_queries + cfg.test_queries);
    let mut compatibility = BTreeMap::new();
    for j in 0..cfg.train_queries + cfg.test_queries {
        let split = if j < cfg.train_queries { Split::Train } else { Split::Test };
        let (record, source) = render_query(cfg, seed, j, split)?;
        let key = compat_key(source);
        let mut compat: Vec<String> = (0..cfg.patterns)
            .filter(|&p| compat_key(p) == key)
            .map(|p| pattern_ids[p].clone())
            .collect();
        compat.sort();
        compatibility.insert(record.query.id.clone(), compat);
        queries.push(record);
    }

    Ok(Corpus {
        category: CATEGORY.to_string(),
        schema_hash: AttributeSchema::person().hash(),
        instances,
        queries,
        compatibility,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            patterns: 8,
            per_pattern: 4,
            test_per_pattern: 1,
            train_queries: 16,
            test_queries: 8,
            ..Default::default()
        }
    }

    #[test]
    fn counts_follow_config() {
        let cfg = SyntheticConfig {
            per_pattern: 30,
            train_queries: 8,
            test_queries: 0,
            ..small()
        };
        let c = generate_synthetic_corpus(&cfg, 1).unwrap();
        assert_eq!(c.instances.len(), 240);
        assert_eq!(c.patterns().len(), 8);
        assert!(c.patterns().iter().all(|p| p.member_ids.len() == 30));
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_synthetic_corpus(&small(), 5).unwrap();
        let b = generate_synthetic_corpus(&small(), 5).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(&small(), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn every_query_has_positive_and_negative_patterns() {
        for patterns in [2, 3, 8, 11, 20] {
            let cfg = SyntheticConfig { patterns, ..small() };
            let c = generate_synthetic_corpus(&cfg, 2).unwrap();
            c.validate().unwrap();
            for q in &c.queries {
                let n = c.compatible_patterns(&q.query.id).len();
                assert!(n >= 1 && n < patterns, "query {} has {n} of {patterns}", q.query.id);
                assert!(q.query.rect.is_inside_unit());
            }
        }
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        for patterns in [0, 1, 49] {
            let cfg = SyntheticConfig { patterns, ..small() };
            assert!(generate_synthetic_corpus(&cfg, 0).is_err());
        }
    }

    #[test]
    fn rect_aspect_matches_source_shape() {
        let c = generate_synthetic_corpus(&small(), 3).unwrap();
        for (j, q) in c.queries.iter().enumerate() {
            let shape = SHAPES[(j % 8) % NUM_SHAPES];
            let (w, h) = (q.query.rect.w * q.query.background.width() as f64, q.query.rect.h * q.query.background.height() as f64);
            match shape.aspect() {
                Aspect::Tall => assert!(h > 1.5 * w),
                Aspect::Wide => assert!(w > 1.5 * h),
                Aspect::Square => assert!((w / h - 1.0).abs() < 0.35),
            }
        }
    }

    #[test]
    fn instances_are_white_squares() {
        let c = generate_synthetic_corpus(&small(), 4).unwrap();
        for r in &c.instances {
            let im = r.instance.image();
            assert!(im.is_square());
            assert_eq!(im.get(0, 0), [1.0; 3]);
            assert!(im.pixels().any(|p| p != [1.0; 3]));
        }
    }

    #[test]
    fn pattern_pairs_expand_to_members() {
        let c = generate_synthetic_corpus(&small(), 7).unwrap();
        let pattern_pairs = c.pattern_pairs();
        let instance_pairs = c.instance_pairs();
        let sizes: BTreeMap<String, usize> = c.patterns().into_iter().map(|p| (p.pattern_id, p.member_ids.len())).collect();
        let expected: usize = pattern_pairs
            .iter()
            .map(|p| match &p.target {
                crate::dataset::CompatibleTarget::Pattern(id) => sizes[id],
                _ => 1,
            })
            .sum();
        assert_eq!(instance_pairs.len(), expected);
    }
}
