//! Splitting an annotated image into a query (background + rectangle) and a
//! standardized foreground.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::types::{AttributeVector, ForegroundInstance, QueryInput, Rectangle};

/// Binary mask of one object, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(x, y);
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Tight bounding box `(x0, y0, x1, y1)` with exclusive upper bounds.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    b = Some(match b {
                        None => (x, y, x + 1, y + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                    });
                }
            }
        }
        b
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let img = Image::load(path)?;
        Ok(Self::from_fn(img.width(), img.height(), |x, y| img.get(x, y).iter().any(|&v| v > 0.5)))
    }
}

/// A pluggable hole-filling algorithm.
pub trait Inpainter {
    fn inpaint(&self, image: &Image, mask: &Mask) -> Result<Image>;
}

impl<F> Inpainter for F
where
    F: Fn(&Image, &Mask) -> Result<Image>,
{
    fn inpaint(&self, image: &Image, mask: &Mask) -> Result<Image> {
        self(image, mask)
    }
}

/// Default inpainter: replaces masked pixels by the per-channel mean of the
/// unmasked ones.
pub fn mean_fill_inpaint(image: &Image, mask: &Mask) -> Result<Image> {
    check_mask_bounds(image, mask)?;
    let mut acc = [0.0f64; 3];
    let mut n = 0usize;
    for y in 0..image.height() {
        for x in 0..image.width() {
            if !mask.get(x, y) {
                let p = image.get(x, y);
                for c in 0..3 {
                    acc[c] += p[c] as f64;
                }
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::invalid("mask covers the entire image; nothing to inpaint from"));
    }
    let mean = [(acc[0] / n as f64) as f32, (acc[1] / n as f64) as f32, (acc[2] / n as f64) as f32];
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if mask.get(x, y) {
                out.set(x, y, mean);
            }
        }
    }
    Ok(out)
}

fn check_mask_bounds(image: &Image, mask: &Mask) -> Result<()> {
    if mask.width() != image.width() || mask.height() != image.height() {
        return Err(Error::invalid(format!(
            "mask {}x{} does not match image {}x{}",
            mask.width(),
            mask.height(),
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

/// An image with a single annotated foreground object.
#[derive(Debug, Clone)]
pub struct AnnotatedComposite {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
    pub category: String,
    pub attributes: Option<AttributeVector>,
}

/// Exclusion thresholds and foreground framing.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecomposeOptions {
    /// Minimum mask area as a fraction of the image area.
    pub min_area_fraction: f64,
    /// Minimum side length of the mask bounding box, in pixels.
    pub min_bbox_side: usize,
    /// White margin on each side of the foreground, as a fraction of the
    /// larger bounding-box side.
    pub margin_fraction: f64,
}

impl Default for DecomposeOptions {
    fn default() -> Self {
        Self {
            min_area_fraction: 0.005,
            min_bbox_side: 32,
            margin_fraction: 0.1,
        }
    }
}

/// Decomposes an annotated image into a query (inpainted background plus the
/// mask's normalized bounding box) and a foreground pasted at the center of a
/// white square.
pub fn decompose(
    comp: &AnnotatedComposite,
    inpainter: &dyn Inpainter,
    opts: &DecomposeOptions,
) -> Result<(QueryInput, ForegroundInstance)> {
    check_mask_bounds(&comp.image, &comp.mask)?;
    let (x0, y0, x1, y1) = comp
        .mask
        .bbox()
        .ok_or_else(|| Error::invalid(format!("{}: empty mask", comp.id)))?;
    let (w, h) = (comp.image.width(), comp.image.height());
    let area_fraction = comp.mask.area() as f64 / (w * h) as f64;
    if area_fraction < opts.min_area_fraction {
        return Err(Error::invalid(format!(
            "{}: mask covers {:.4} of the image, below the {:.4} minimum",
            comp.id, area_fraction, opts.min_area_fraction
        )));
    }
    let (bw, bh) = (x1 - x0, y1 - y0);
    if bw.max(bh) < opts.min_bbox_side {
        return Err(Error::invalid(format!(
            "{}: object box {}x{} is smaller than {} px",
            comp.id, bw, bh, opts.min_bbox_side
        )));
    }

    let background = inpainter.inpaint(&comp.image, &comp.mask)?;
    let rect = Rectangle::from_pixel_box(x0, y0, x1, y1, w, h)?;
    let query = QueryInput {
        id: comp.id.clone(),
        background,
        rect,
    };

    let long = bw.max(bh);
    let margin = ((opts.margin_fraction * long as f64).round() as usize).max(1);
    let side = long + 2 * margin;
    let mut fg = Image::white(side);
    let ox = (side - bw) / 2;
    let oy = (side - bh) / 2;
    for y in y0..y1 {
        for x in x0..x1 {
            if comp.mask.get(x, y) {
                fg.set(ox + x - x0, oy + y - y0, comp.image.get(x, y));
            }
        }
    }
    let instance = ForegroundInstance::new(comp.id.clone(), fg, comp.attributes)?;
    Ok((query, instance))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn composite(image: Image, mask: Mask) -> AnnotatedComposite {
        AnnotatedComposite {
            id: "c".into(),
            image,
            mask,
            category: "person".into(),
            attributes: None,
        }
    }

    fn relaxed() -> DecomposeOptions {
        DecomposeOptions {
            min_bbox_side: 1,
            ..Default::default()
        }
    }

    #[test]
    fn mean_fill_on_uniform_image_is_uniform() {
        let img = Image::filled(40, 40, [0.5; 3]);
        let mask = Mask::from_fn(40, 40, |x, y| (10..30).contains(&x) && (10..30).contains(&y));
        let (q, _) = decompose(&composite(img.clone(), mask), &mean_fill_inpaint, &relaxed()).unwrap();
        assert_eq!(q.background, img);
    }

    #[test]
    fn rect_is_normalized_mask_box() {
        let img = Image::filled(100, 100, [0.2; 3]);
        let mask = Mask::from_fn(100, 100, |x, y| (10..30).contains(&x) && (20..60).contains(&y));
        let (q, fg) = decompose(&composite(img, mask), &mean_fill_inpaint, &relaxed()).unwrap();
        assert!((q.rect.cx - 0.20).abs() < 1e-12);
        assert!((q.rect.cy - 0.40).abs() < 1e-12);
        assert!((q.rect.w - 0.20).abs() < 1e-12);
        assert!((q.rect.h - 0.40).abs() < 1e-12);
        // side = 40 + 2 * round(0.1 * 40)
        assert_eq!(fg.image().width(), 48);
    }

    #[test]
    fn foreground_is_square_with_white_border() {
        let mut img = Image::filled(64, 48, [0.1, 0.3, 0.9]);
        img.set(20, 20, [0.0; 3]);
        let mask = Mask::from_fn(64, 48, |x, y| (12..50).contains(&x) && (5..20).contains(&y));
        let (_, fg) = decompose(&composite(img, mask), &mean_fill_inpaint, &relaxed()).unwrap();
        let im = fg.image();
        assert!(im.is_square());
        let s = im.width();
        for i in 0..s {
            for p in [im.get(i, 0), im.get(i, s - 1), im.get(0, i), im.get(s - 1, i)] {
                assert_eq!(p, [1.0; 3]);
            }
        }
    }

    #[test]
    fn empty_and_tiny_masks_are_rejected() {
        let img = Image::filled(100, 100, [0.2; 3]);
        let empty = Mask::new(100, 100);
        assert!(decompose(&composite(img.clone(), empty), &mean_fill_inpaint, &relaxed()).is_err());
        let tiny = Mask::from_fn(100, 100, |x, y| x < 2 && y < 2);
        assert!(decompose(&composite(img.clone(), tiny), &mean_fill_inpaint, &relaxed()).is_err());
        let small_box = Mask::from_fn(100, 100, |x, y| x < 10 && y < 10);
        assert!(decompose(&composite(img, small_box), &mean_fill_inpaint, &DecomposeOptions::default()).is_err());
    }

    #[test]
    fn mean_fill_examples() {
        let red = Image::filled(8, 8, [1.0, 0.0, 0.0]);
        let mask = Mask::from_fn(8, 8, |x, _| x < 3);
        assert_eq!(mean_fill_inpaint(&red, &mask).unwrap(), red);

        let mut half = Image::filled(8, 8, [1.0; 3]);
        for y in 0..8 {
            for x in 0..4 {
                half.set(x, y, [0.0; 3]);
            }
        }
        let black_half = Mask::from_fn(8, 8, |x, _| x < 4);
        let filled = mean_fill_inpaint(&half, &black_half).unwrap();
        assert!(filled.pixels().all(|p| p == [1.0; 3]));

        let full = Mask::from_fn(8, 8, |_, _| true);
        assert!(mean_fill_inpaint(&red, &full).is_err());
    }

    #[test]
    fn custom_inpainter_is_used() {
        let img = Image::filled(40, 40, [0.5; 3]);
        let mask = Mask::from_fn(40, 40, |x, y| (10..30).contains(&x) && (10..30).contains(&y));
        let black = |im: &Image, _: &Mask| -> Result<Image> { Ok(Image::filled(im.width(), im.height(), [0.0; 3])) };
        let (q, _) = decompose(&composite(img, mask), &black, &relaxed()).unwrap();
        assert!(q.background.pixels().all(|p| p == [0.0; 3]));
    }
}
