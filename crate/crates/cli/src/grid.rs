//! Retrieval-grid image: the query on the left with its rectangle outlined,
//! retrieved foregrounds to the right. Pattern-level results get one column
//! per pattern with its members stacked below.

use fos_core::image::Image;
use fos_core::types::Rectangle;

const CELL: usize = 64;
const GAP: usize = 4;
const OUTLINE: [f32; 3] = [0.9, 0.1, 0.1];

fn blit(dst: &mut Image, src: &Image, x0: usize, y0: usize) {
    for y in 0..src.height() {
        for x in 0..src.width() {
            if x0 + x < dst.width() && y0 + y < dst.height() {
                dst.set(x0 + x, y0 + y, src.get(x, y));
            }
        }
    }
}

fn outline(img: &mut Image, rect: &Rectangle) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let x0 = (rect.x0() * w).round().clamp(0.0, w - 1.0) as usize;
    let x1 = (rect.x1() * w).round().clamp(0.0, w - 1.0) as usize;
    let y0 = (rect.y0() * h).round().clamp(0.0, h - 1.0) as usize;
    let y1 = (rect.y1() * h).round().clamp(0.0, h - 1.0) as usize;
    for x in x0..=x1 {
        img.set(x, y0, OUTLINE);
        img.set(x, y1, OUTLINE);
    }
    for y in y0..=y1 {
        img.set(x0, y, OUTLINE);
        img.set(x1, y, OUTLINE);
    }
}

/// `columns[c][r]` is the foreground in column `c`, row `r`. Columns may have
/// different lengths.
pub fn render(background: &Image, rect: &Rectangle, columns: &[Vec<Image>]) -> Image {
    let rows = columns.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let panel_h = rows * CELL + (rows - 1) * GAP;
    let panel_w = ((background.width() as f64 / background.height() as f64) * panel_h as f64).round().max(1.0) as usize;
    let mut query = background.resize(panel_w, panel_h);
    outline(&mut query, rect);
    let width = panel_w + columns.len() * (CELL + GAP) + GAP;
    let mut out = Image::filled(width, panel_h, [1.0; 3]);
    blit(&mut out, &query, 0, 0);
    for (c, col) in columns.iter().enumerate() {
        for (r, fg) in col.iter().enumerate() {
            blit(&mut out, &fg.resize(CELL, CELL), panel_w + GAP + c * (CELL + GAP), r * (CELL + GAP));
        }
    }
    out
}
