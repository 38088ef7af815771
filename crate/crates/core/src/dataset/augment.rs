//! Training-time augmentations for rectangles, query backgrounds and
//! foregrounds. Each augmentation splits into a parameter draw and a
//! deterministic application so tests can pin the parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::Image;
use crate::types::{ForegroundInstance, QueryInput, Rectangle};

/// Grows each side of `rect` by `grow_w * w` and `grow_h * h` about its
/// centroid, then clamps into the unit square.
pub fn grow_rectangle(rect: &Rectangle, grow_w: f64, grow_h: f64) -> Result<Rectangle> {
    Rectangle::new(rect.cx, rect.cy, rect.w * (1.0 + grow_w), rect.h * (1.0 + grow_h))
}

/// Random resize: each side grows by a uniform amount in `[0, side / 2]`.
pub fn augment_rectangle<R: Rng>(rect: &Rectangle, rng: &mut R) -> Result<Rectangle> {
    let gw = rng.gen_range(0.0..=0.5);
    let gh = rng.gen_range(0.0..=0.5);
    grow_rectangle(rect, gw, gh)
}

/// Largest zoom factor that keeps `rect` fully in view, capped at `max_zoom`.
pub fn max_zoom_for(rect: &Rectangle, max_zoom: f64) -> f64 {
    (1.0 / rect.w).min(1.0 / rect.h).min(max_zoom).max(1.0)
}

/// Zooms into the background by `zoom` (>= 1). The view window (`1/zoom` of
/// each side) is placed at fractions `(ox, oy)` of its feasible range, which
/// always keeps the whole rectangle visible. The view is resampled to the
/// original resolution.
pub fn zoom_query(query: &QueryInput, zoom: f64, ox: f64, oy: f64) -> Result<QueryInput> {
    let r = &query.rect;
    let zoom = zoom.clamp(1.0, max_zoom_for(r, f64::INFINITY));
    let view = 1.0 / zoom;
    let place = |lo_edge: f64, hi_edge: f64, frac: f64| {
        let lo = (hi_edge - view).max(0.0);
        let hi = lo_edge.min(1.0 - view).max(lo);
        lo + frac.clamp(0.0, 1.0) * (hi - lo)
    };
    let sx = place(r.x0(), r.x1(), ox);
    let sy = place(r.y0(), r.y1(), oy);
    let (w, h) = (query.background.width(), query.background.height());
    let background = if zoom == 1.0 {
        query.background.clone()
    } else {
        query
            .background
            .sample_window(sx * w as f64, sy * h as f64, view * w as f64, view * h as f64, w, h)
    };
    let rect = Rectangle::new((r.cx - sx) * zoom, (r.cy - sy) * zoom, r.w * zoom, r.h * zoom)?;
    Ok(QueryInput {
        id: query.id.clone(),
        background,
        rect,
    })
}

/// Random zoom with factor in `[1, z_max]`, where `z_max` is limited by the
/// rectangle size and `max_zoom`.
pub fn augment_zoom<R: Rng>(query: &QueryInput, max_zoom: f64, rng: &mut R) -> Result<QueryInput> {
    let z_max = max_zoom_for(&query.rect, max_zoom);
    let z = if z_max > 1.0 { rng.gen_range(1.0..=z_max) } else { 1.0 };
    zoom_query(query, z, rng.gen(), rng.gen())
}

/// Color jitter factors. Brightness, contrast and saturation are
/// multiplicative factors around 1; hue is a shift in turns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

impl ColorJitter {
    pub const IDENTITY: ColorJitter = ColorJitter {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };

    /// Draws factors from `[1 - m, 1 + m]` (hue from `[-m, m]`).
    pub fn sample<R: Rng>(magnitudes: [f32; 4], rng: &mut R) -> Self {
        let factor = |m: f32, rng: &mut R| if m > 0.0 { rng.gen_range((1.0 - m).max(0.0)..=1.0 + m) } else { 1.0 };
        Self {
            brightness: factor(magnitudes[0], rng),
            contrast: factor(magnitudes[1], rng),
            saturation: factor(magnitudes[2], rng),
            hue: if magnitudes[3] > 0.0 { rng.gen_range(-magnitudes[3]..=magnitudes[3]) } else { 0.0 },
        }
    }

    /// Applies brightness, contrast, saturation then hue. With
    /// `preserve_white`, pure-white pixels are left untouched so a white
    /// foreground canvas stays white.
    pub fn apply(&self, img: &mut Image, preserve_white: bool) {
        if *self == Self::IDENTITY {
            return;
        }
        let is_white = |p: &[f32]| p.iter().all(|&v| v >= 1.0);
        let data = img.data_mut();
        let active: Vec<bool> = data.chunks_exact(3).map(|p| !(preserve_white && is_white(p))).collect();
        let luma = |p: &[f32]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];

        for (px, &on) in data.chunks_exact_mut(3).zip(&active) {
            if on {
                px.iter_mut().for_each(|v| *v = (*v * self.brightness).clamp(0.0, 1.0));
            }
        }
        let (sum, n) = data
            .chunks_exact(3)
            .zip(&active)
            .filter(|(_, &on)| on)
            .fold((0.0f64, 0usize), |(s, n), (p, _)| (s + luma(p) as f64, n + 1));
        let mean = if n > 0 { (sum / n as f64) as f32 } else { 0.0 };
        for (px, &on) in data.chunks_exact_mut(3).zip(&active) {
            if !on {
                continue;
            }
            for v in px.iter_mut() {
                *v = ((*v - mean) * self.contrast + mean).clamp(0.0, 1.0);
            }
            let g = luma(px);
            for v in px.iter_mut() {
                *v = ((*v - g) * self.saturation + g).clamp(0.0, 1.0);
            }
            if self.hue != 0.0 {
                let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
                let (r, g, b) = hsv_to_rgb((h + self.hue).rem_euclid(1.0), s, v);
                px[0] = r;
                px[1] = g;
                px[2] = b;
            }
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Foreground augmentation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FgAugmentConfig {
    /// Output side length.
    pub out_size: usize,
    /// Maximum white padding per side as a fraction of the image side.
    pub max_pad: f64,
    /// Brightness, contrast, saturation, hue magnitudes.
    pub jitter: [f32; 4],
}

impl Default for FgAugmentConfig {
    fn default() -> Self {
        Self {
            out_size: 256,
            max_pad: 0.25,
            jitter: [0.4, 0.4, 0.4, 0.2],
        }
    }
}

/// Concrete draw of the foreground augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FgAugmentParams {
    /// Left, top, right, bottom padding as fractions of the side.
    pub pad: [f64; 4],
    pub jitter: ColorJitter,
}

impl FgAugmentParams {
    pub const NONE: FgAugmentParams = FgAugmentParams {
        pad: [0.0; 4],
        jitter: ColorJitter::IDENTITY,
    };

    pub fn sample<R: Rng>(cfg: &FgAugmentConfig, rng: &mut R) -> Self {
        let mut pad = [0.0; 4];
        for p in &mut pad {
            *p = if cfg.max_pad > 0.0 { rng.gen_range(0.0..=cfg.max_pad) } else { 0.0 };
        }
        Self {
            pad,
            jitter: ColorJitter::sample(cfg.jitter, rng),
        }
    }
}

/// White padding, re-squaring, resize to `out_size` and color jitter of the
/// non-white pixels.
pub fn apply_fg_augment(fg: &ForegroundInstance, params: &FgAugmentParams, out_size: usize) -> Result<ForegroundInstance> {
    let img = fg.image();
    let side = img.width() as f64;
    let px = |f: f64| (f * side).round() as usize;
    let (l, t, r, b) = (px(params.pad[0]), px(params.pad[1]), px(params.pad[2]), px(params.pad[3]));
    let (w, h) = (img.width() + l + r, img.height() + t + b);
    let s = w.max(h);
    // re-square by centering the padded canvas on a white square
    let ox = l + (s - w) / 2;
    let oy = t + (s - h) / 2;
    let square = img.crop_padded(-(ox as i64), -(oy as i64), s, s, [1.0; 3]);
    let mut out = square.resize(out_size, out_size);
    // resampling weights may leave white at 1 - ulp
    for v in out.data_mut() {
        if *v > 1.0 - 1e-5 {
            *v = 1.0;
        }
    }
    params.jitter.apply(&mut out, true);
    fg.with_image(out)
}

/// Random padding + color jitter + resize.
pub fn augment_foreground<R: Rng>(fg: &ForegroundInstance, cfg: &FgAugmentConfig, rng: &mut R) -> Result<ForegroundInstance> {
    let params = FgAugmentParams::sample(cfg, rng);
    apply_fg_augment(fg, &params, cfg.out_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use proptest::prelude::*;

    fn query(w: usize, h: usize, rect: Rectangle) -> QueryInput {
        let mut bg = Image::filled(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                bg.set(x, y, [x as f32 / w as f32, y as f32 / h as f32, ((x + y) % 3) as f32 / 3.0]);
            }
        }
        QueryInput {
            id: "q".into(),
            background: bg,
            rect,
        }
    }

    #[test]
    fn zero_growth_is_identity() {
        let r = Rectangle::new(0.3, 0.6, 0.2, 0.1).unwrap();
        assert_eq!(grow_rectangle(&r, 0.0, 0.0).unwrap(), r);
    }

    #[test]
    fn growth_is_bounded() {
        let r = Rectangle::new(0.5, 0.5, 0.4, 0.3).unwrap();
        let mut rng = derive_rng(0, "rect", 0);
        for _ in 0..200 {
            let g = augment_rectangle(&r, &mut rng).unwrap();
            assert!(g.w >= 0.4 - 1e-12 && g.w <= 0.6 + 1e-12);
            assert!(g.h >= 0.3 - 1e-12 && g.h <= 0.45 + 1e-12);
            assert!((g.cx - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn zoom_one_is_identity() {
        let q = query(20, 16, Rectangle::new(0.5, 0.5, 0.3, 0.3).unwrap());
        assert_eq!(zoom_query(&q, 1.0, 0.3, 0.9).unwrap(), q);
    }

    #[test]
    fn full_image_rect_only_allows_unit_zoom() {
        let r = Rectangle::new(0.5, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(max_zoom_for(&r, 4.0), 1.0);
        let q = query(10, 10, r);
        let mut rng = derive_rng(0, "z", 0);
        assert_eq!(augment_zoom(&q, 4.0, &mut rng).unwrap(), q);
    }

    #[test]
    fn jitter_factors_respect_magnitudes() {
        let mut rng = derive_rng(4, "j", 0);
        for _ in 0..100 {
            let j = ColorJitter::sample([0.4, 0.4, 0.4, 0.2], &mut rng);
            assert!((0.6..=1.4).contains(&j.brightness));
            assert!((0.6..=1.4).contains(&j.contrast));
            assert!((0.6..=1.4).contains(&j.saturation));
            assert!((-0.2..=0.2).contains(&j.hue));
        }
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2f32, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-5 && (g - g2).abs() < 1e-5 && (b - b2).abs() < 1e-5);
        }
    }

    fn fg() -> ForegroundInstance {
        let mut img = Image::white(40);
        for y in 10..30 {
            for x in 15..25 {
                img.set(x, y, [0.8, 0.2, 0.1]);
            }
        }
        ForegroundInstance::new("f", img, None).unwrap()
    }

    #[test]
    fn no_augmentation_is_plain_resize() {
        let f = fg();
        let out = apply_fg_augment(&f, &FgAugmentParams::NONE, 256).unwrap();
        let plain = f.image().resize(256, 256);
        for (a, b) in out.image().data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        let same = apply_fg_augment(&f, &FgAugmentParams::NONE, 40).unwrap();
        assert_eq!(same.image(), f.image());
    }

    #[test]
    fn augmented_foreground_shape_and_border() {
        let f = fg();
        let cfg = FgAugmentConfig::default();
        let mut rng = derive_rng(1, "fg", 0);
        for _ in 0..5 {
            let out = augment_foreground(&f, &cfg, &mut rng).unwrap();
            let im = out.image();
            assert_eq!((im.width(), im.height()), (256, 256));
            for i in 0..256 {
                assert_eq!(im.get(i, 0), [1.0; 3]);
                assert_eq!(im.get(0, i), [1.0; 3]);
                assert_eq!(im.get(i, 255), [1.0; 3]);
                assert_eq!(im.get(255, i), [1.0; 3]);
            }
        }
    }

    proptest! {
        #[test]
        fn rect_augmentation_stays_inside(cx in 0.0f64..1.0, cy in 0.0f64..1.0, w in 0.01f64..1.0, h in 0.01f64..1.0, seed in 0u64..1000) {
            let r = Rectangle::new(cx, cy, w, h).unwrap();
            let mut rng = derive_rng(seed, "p", 0);
            let g = augment_rectangle(&r, &mut rng).unwrap();
            prop_assert!(g.is_inside_unit());
            prop_assert!(g.w >= r.w - 1e-12 && g.h >= r.h - 1e-12);
        }

        #[test]
        fn zoom_keeps_rect_inside_and_enlarges_it(cx in 0.2f64..0.8, cy in 0.2f64..0.8, w in 0.05f64..0.4, h in 0.05f64..0.4, seed in 0u64..1000) {
            let q = query(24, 18, Rectangle::new(cx, cy, w, h).unwrap());
            let mut rng = derive_rng(seed, "zoom", 0);
            let z = augment_zoom(&q, 3.0, &mut rng).unwrap();
            prop_assert!(z.rect.is_inside_unit());
            prop_assert!(z.rect.area() >= q.rect.area() * (1.0 - 1e-9));
            prop_assert_eq!(z.background.width(), 24);
            prop_assert_eq!(z.background.height(), 18);
        }
    }
}
