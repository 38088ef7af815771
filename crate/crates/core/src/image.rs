//! Minimal RGB float image used throughout the pipeline.
//!
//! Pixels are stored row-major, interleaved RGB, values nominally in [0, 1].

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn white(side: usize) -> Self {
        Self::filled(side, side, [1.0; 3])
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "image buffer of {} values does not match {width}x{height}x3",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(3)
    }

    pub fn mean_color(&self) -> [f32; 3] {
        let mut acc = [0.0f64; 3];
        for px in self.pixels() {
            for c in 0..3 {
                acc[c] += px[c] as f64;
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        [(acc[0] / n) as f32, (acc[1] / n) as f32, (acc[2] / n) as f32]
    }

    /// Copies the window `[x0, x0 + w) x [y0, y0 + h)`; pixels outside the
    /// image are filled with `pad`.
    pub fn crop_padded(&self, x0: i64, y0: i64, w: usize, h: usize, pad: [f32; 3]) -> Image {
        let mut out = Image::filled(w, h, pad);
        for y in 0..h {
            let sy = y0 + y as i64;
            if sy < 0 || sy >= self.height as i64 {
                continue;
            }
            for x in 0..w {
                let sx = x0 + x as i64;
                if sx < 0 || sx >= self.width as i64 {
                    continue;
                }
                out.set(x, y, self.get(sx as usize, sy as usize));
            }
        }
        out
    }

    /// Resamples to `width x height`. Each axis is box-filtered when shrinking
    /// and bilinearly interpolated when enlarging; equal sizes copy exactly.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let xw = axis_weights(self.width, width);
        let yw = axis_weights(self.height, height);
        // horizontal pass
        let mut tmp = vec![0.0f32; width * self.height * 3];
        for y in 0..self.height {
            for (x, taps) in xw.iter().enumerate() {
                let mut acc = [0.0f32; 3];
                for &(sx, wt) in taps {
                    let i = (y * self.width + sx) * 3;
                    for c in 0..3 {
                        acc[c] += wt * self.data[i + c];
                    }
                }
                let o = (y * width + x) * 3;
                tmp[o..o + 3].copy_from_slice(&acc);
            }
        }
        let mut data = vec![0.0f32; width * height * 3];
        for (y, taps) in yw.iter().enumerate() {
            for x in 0..width {
                let mut acc = [0.0f32; 3];
                for &(sy, wt) in taps {
                    let i = (sy * width + x) * 3;
                    for c in 0..3 {
                        acc[c] += wt * tmp[i + c];
                    }
                }
                let o = (y * width + x) * 3;
                data[o..o + 3].copy_from_slice(&acc);
            }
        }
        Image { width, height, data }
    }

    /// Samples the real-valued window starting at (`x0`, `y0`) with size
    /// `w x h` (source pixels) into an `out_w x out_h` image by bilinear
    /// interpolation at output pixel centers.
    pub fn sample_window(&self, x0: f64, y0: f64, w: f64, h: f64, out_w: usize, out_h: usize) -> Image {
        let sx = w / out_w as f64;
        let sy = h / out_h as f64;
        let mut out = Image::filled(out_w, out_h, [0.0; 3]);
        for y in 0..out_h {
            let fy = y0 + (y as f64 + 0.5) * sy - 0.5;
            for x in 0..out_w {
                let fx = x0 + (x as f64 + 0.5) * sx - 0.5;
                out.set(x, y, self.bilinear(fx, fy));
            }
        }
        out
    }

    fn bilinear(&self, fx: f64, fy: f64) -> [f32; 3] {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let fx = fx.clamp(0.0, max_x);
        let fy = fy.clamp(0.0, max_y);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = (fx - x0 as f64) as f32;
        let ay = (fy - y0 as f64) as f32;
        if ax == 0.0 && ay == 0.0 {
            return self.get(x0, y0);
        }
        let p00 = self.get(x0, y0);
        let p10 = self.get(x1, y0);
        let p01 = self.get(x0, y1);
        let p11 = self.get(x1, y1);
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - ax) + p10[c] * ax;
            let bot = p01[c] * (1.0 - ax) + p11[c] * ax;
            out[c] = top * (1.0 - ay) + bot * ay;
        }
        out
    }

    /// Planar CHW copy, the layout the networks consume.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0f32; plane * 3];
        for (i, px) in self.pixels().enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c];
            }
        }
        out
    }

    /// Rounds every channel to the nearest multiple of 1/255 so the image
    /// survives an 8-bit PNG round trip bit-exactly.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn clamp(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in self.pixels().enumerate() {
            let x = (i % self.width) as u32;
            let y = (i / self.width) as u32;
            let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(x, y, image::Rgb([q(px[0]), q(px[1]), q(px[2])]));
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Image> {
        if !path.exists() {
            return Err(Error::Missing(format!("image {}", path.display())));
        }
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Image::from_raw(w as usize, h as usize, data)
    }
}

/// Per-output-pixel source taps `(index, weight)` along one axis.
fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            if scale > 1.0 {
                // box filter over [o*scale, (o+1)*scale)
                let lo = o as f64 * scale;
                let hi = lo + scale;
                let mut taps = Vec::new();
                let mut s = lo.floor() as usize;
                while (s as f64) < hi && s < src {
                    let cover = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                    if cover > 0.0 {
                        taps.push((s, (cover / scale) as f32));
                    }
                    s += 1;
                }
                taps
            } else {
                let f = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = f.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                let a = (f - i0 as f64) as f32;
                if a == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - a), (i1, a)]
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        let mut img = Image::filled(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, [x as f32 / w as f32, y as f32 / h as f32, 0.5]);
            }
        }
        img
    }

    #[test]
    fn resize_same_size_is_exact() {
        let img = ramp(7, 5);
        assert_eq!(img.resize(7, 5), img);
    }

    #[test]
    fn downscale_by_two_averages_blocks() {
        let mut img = Image::filled(4, 4, [0.0; 3]);
        img.set(0, 0, [1.0, 1.0, 1.0]);
        let small = img.resize(2, 2);
        assert!((small.get(0, 0)[0] - 0.25).abs() < 1e-6);
        assert_eq!(small.get(1, 1), [0.0; 3]);
    }

    #[test]
    fn resize_preserves_uniform_color() {
        let img = Image::filled(9, 6, [0.2, 0.4, 0.6]);
        for (w, h) in [(3, 2), (20, 13), (6, 6)] {
            let r = img.resize(w, h);
            for px in r.pixels() {
                assert!((px[0] - 0.2).abs() < 1e-5 && (px[2] - 0.6).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn full_window_sampling_is_identity() {
        let img = ramp(6, 6);
        assert_eq!(img.sample_window(0.0, 0.0, 6.0, 6.0, 6, 6), img);
    }

    #[test]
    fn crop_padded_fills_outside() {
        let img = Image::filled(2, 2, [0.0; 3]);
        let c = img.crop_padded(-1, 0, 3, 2, [1.0, 0.0, 0.0]);
        assert_eq!(c.get(0, 0), [1.0, 0.0, 0.0]);
        assert_eq!(c.get(1, 0), [0.0; 3]);
    }

    #[test]
    fn png_round_trip_after_quantize() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ramp(5, 3);
        img.quantize();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load(&p).unwrap(), img);
    }
}
