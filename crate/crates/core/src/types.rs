//! Domain types shared by every stage of the pipeline.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::schema::AttributeSchema;
use crate::vector;

/// Six-dimensional attribute labelling of a foreground. The two mandatory
/// dimensions can never be unspecified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AttributeVector {
    pub orientation: u8,
    pub truncation: u8,
    pub sport: Option<u8>,
    pub motion: Option<u8>,
    pub viewpoint: Option<u8>,
    pub state: Option<u8>,
}

impl AttributeVector {
    pub fn new(orientation: u8, truncation: u8) -> Self {
        Self {
            orientation,
            truncation,
            sport: None,
            motion: None,
            viewpoint: None,
            state: None,
        }
    }

    pub fn as_array(&self) -> [Option<u8>; 6] {
        [
            Some(self.orientation),
            Some(self.truncation),
            self.sport,
            self.motion,
            self.viewpoint,
            self.state,
        ]
    }

    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        for (dim, value) in self.as_array().iter().enumerate() {
            if let Some(v) = value {
                if *v as usize >= schema.cardinality(dim) {
                    return Err(Error::Schema(format!(
                        "value {v} out of range for dimension '{}'",
                        schema.dimensions()[dim].name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Canonical pattern key: six fixed-width fields, `--` for unspecified.
    /// Ascending key order is the tie-break order used everywhere.
    pub fn key(&self) -> String {
        let f = |v: Option<u8>| v.map_or_else(|| "--".to_string(), |v| format!("{v:02}"));
        self.as_array().iter().map(|&v| f(v)).collect::<Vec<_>>().join("/")
    }

    /// Inverse of [`AttributeVector::key`].
    pub fn from_key(key: &str) -> Result<Self> {
        let parts: Vec<&str> = key.split('/').collect();
        if parts.len() != 6 {
            return Err(Error::invalid(format!("malformed pattern key '{key}'")));
        }
        let parse = |s: &str| -> Result<Option<u8>> {
            if s == "--" {
                Ok(None)
            } else {
                s.parse::<u8>()
                    .map(Some)
                    .map_err(|_| Error::invalid(format!("malformed pattern key '{key}'")))
            }
        };
        let orientation = parse(parts[0])?.ok_or_else(|| Error::invalid("orientation is mandatory"))?;
        let truncation = parse(parts[1])?.ok_or_else(|| Error::invalid("truncation is mandatory"))?;
        Ok(Self {
            orientation,
            truncation,
            sport: parse(parts[2])?,
            motion: parse(parts[3])?,
            viewpoint: parse(parts[4])?,
            state: parse(parts[5])?,
        })
    }
}

impl fmt::Display for AttributeVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

/// A foreground standardized on a white square.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundInstance {
    id: String,
    image: Image,
    attributes: Option<AttributeVector>,
    pattern_id: Option<String>,
}

impl ForegroundInstance {
    pub fn new(id: impl Into<String>, image: Image, attributes: Option<AttributeVector>) -> Result<Self> {
        if !image.is_square() {
            return Err(Error::invalid(format!(
                "foreground image must be square, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        Ok(Self {
            id: id.into(),
            image,
            pattern_id: attributes.map(|a| a.key()),
            attributes,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn attributes(&self) -> Option<&AttributeVector> {
        self.attributes.as_ref()
    }

    pub fn pattern_id(&self) -> Option<&str> {
        self.pattern_id.as_deref()
    }

    pub fn with_image(&self, image: Image) -> Result<Self> {
        Self::new(self.id.clone(), image, self.attributes)
    }

    pub fn with_attributes(mut self, attributes: AttributeVector) -> Self {
        self.pattern_id = Some(attributes.key());
        self.attributes = Some(attributes);
        self
    }
}

/// Axis-aligned rectangle in normalized coordinates (centroid + size).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rectangle {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Rectangle {
    /// Builds a rectangle clamped into the unit square. Sizes are clamped to
    /// (0, 1] first, then any overhanging edge is cut back to the border.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("rectangle has non-finite coordinates"));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::invalid(format!("rectangle size must be positive, got {w}x{h}")));
        }
        let (cx, w) = clamp_axis(cx, w.min(1.0));
        let (cy, h) = clamp_axis(cy, h.min(1.0));
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::invalid("rectangle lies outside the unit square"));
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Strict constructor: rejects rectangles that are not already inside
    /// the unit square (used for user-supplied input).
    pub fn checked(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        const TOL: f64 = 1e-9;
        let inside = w > 0.0
            && h > 0.0
            && cx - w / 2.0 >= -TOL
            && cx + w / 2.0 <= 1.0 + TOL
            && cy - h / 2.0 >= -TOL
            && cy + h / 2.0 <= 1.0 + TOL;
        if !inside {
            return Err(Error::invalid(format!(
                "rectangle ({cx}, {cy}, {w}, {h}) is outside the unit square"
            )));
        }
        Self::new(cx, cy, w, h)
    }

    /// From a pixel box `[x0, x1) x [y0, y1)` inside a `width x height` image.
    pub fn from_pixel_box(x0: usize, y0: usize, x1: usize, y1: usize, width: usize, height: usize) -> Result<Self> {
        let (w, h) = (width as f64, height as f64);
        Self::new(
            (x0 + x1) as f64 / 2.0 / w,
            (y0 + y1) as f64 / 2.0 / h,
            (x1 - x0) as f64 / w,
            (y1 - y0) as f64 / h,
        )
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }
    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }
    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }
    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn is_inside_unit(&self) -> bool {
        const TOL: f64 = 1e-9;
        self.x0() >= -TOL && self.x1() <= 1.0 + TOL && self.y0() >= -TOL && self.y1() <= 1.0 + TOL
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

fn clamp_axis(c: f64, size: f64) -> (f64, f64) {
    if c - size / 2.0 >= 0.0 && c + size / 2.0 <= 1.0 {
        return (c, size);
    }
    let lo = (c - size / 2.0).max(0.0);
    let hi = (c + size / 2.0).min(1.0);
    ((lo + hi) / 2.0, (hi - lo).max(0.0))
}

/// A background with the foreground removed plus the desired placement.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryInput {
    pub id: String,
    pub background: Image,
    pub rect: Rectangle,
}

/// A group of interchangeable foregrounds sharing one attribute vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    pub pattern_id: String,
    pub attribute_key: AttributeVector,
    pub member_ids: Vec<String>,
}

/// Unit-norm vector in the shared latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn from_raw(values: &[f32]) -> Result<Self> {
        Ok(Self(vector::l2_normalize(values)?))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}
