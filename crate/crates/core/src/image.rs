//! RGB images in [0,1], the ROMI binary format, and crop/resize sampling.
//!
//! In-memory layout is interleaved (y, x, channel). On disk ROMI is planar
//! 8-bit with a 16-byte little-endian header: magic "ROMI", u32 height,
//! u32 width, u32 reserved.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const ROMI_MAGIC: &[u8; 4] = b"ROMI";

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    /// interleaved rgb, length h * w * 3
    data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            data: vec![0.0; h * w * 3],
        }
    }

    pub fn from_data(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * 3 {
            return Err(Error::geometry(format!(
                "image data length {} != {h}x{w}x3",
                data.len()
            )));
        }
        Ok(Image { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.w + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.w + x) * 3 + c] = v;
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                m[c] += px[c];
            }
        }
        let n = (self.h * self.w) as f64;
        [m[0] / n, m[1] / n, m[2] / n]
    }

    pub fn clamp_01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = Image::new(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..3 {
                    out.set(y, x, c, self.get(y, self.w - 1 - x, c));
                }
            }
        }
        out
    }

    pub fn scale_brightness(&self, factor: f64) -> Image {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = (*v * factor).clamp(0.0, 1.0);
        }
        out
    }

    /// 2x box-filter downsample; both extents must be even.
    pub fn downsample2(&self) -> Result<Image> {
        if self.h % 2 != 0 || self.w % 2 != 0 {
            return Err(Error::geometry("downsample2 requires even extents"));
        }
        let (oh, ow) = (self.h / 2, self.w / 2);
        let mut out = Image::new(oh, ow);
        for y in 0..oh {
            for x in 0..ow {
                for c in 0..3 {
                    let s = self.get(2 * y, 2 * x, c)
                        + self.get(2 * y, 2 * x + 1, c)
                        + self.get(2 * y + 1, 2 * x, c)
                        + self.get(2 * y + 1, 2 * x + 1, c);
                    out.set(y, x, c, s / 4.0);
                }
            }
        }
        Ok(out)
    }

    /// Bilinear sample at continuous (x, y); pixels outside the frame take
    /// `fill`. Returns the rgb triple and the fraction of bilinear mass that
    /// came from the fill value.
    pub fn sample_bilinear(&self, x: f64, y: f64, fill: [f64; 3]) -> ([f64; 3], f64) {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let mut rgb = [0.0; 3];
        let mut fill_mass = 0.0;
        for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                let wgt = wy * wx;
                if wgt == 0.0 {
                    continue;
                }
                let sy = y0 as isize + dy;
                let sx = x0 as isize + dx;
                if sy < 0 || sy >= self.h as isize || sx < 0 || sx >= self.w as isize {
                    for c in 0..3 {
                        rgb[c] += wgt * fill[c];
                    }
                    fill_mass += wgt;
                } else {
                    for c in 0..3 {
                        rgb[c] += wgt * self.get(sy as usize, sx as usize, c);
                    }
                }
            }
        }
        (rgb, fill_mass)
    }

    /// Resample the square window centered at `(cx, cy)` with side `side`
    /// (frame pixels) into an `out_side` image. Out-of-frame content takes
    /// the frame's channel means. Returns the image and the average fill mass.
    pub fn crop_resize(&self, cx: f64, cy: f64, side: f64, out_side: usize) -> (Image, f64) {
        let fill = self.channel_means();
        let mut out = Image::new(out_side, out_side);
        let left = cx - side / 2.0;
        let top = cy - side / 2.0;
        let step = side / out_side as f64;
        let mut fill_total = 0.0;
        for oy in 0..out_side {
            let sy = top + (oy as f64 + 0.5) * step - 0.5;
            for ox in 0..out_side {
                let sx = left + (ox as f64 + 0.5) * step - 0.5;
                let (rgb, fm) = self.sample_bilinear(sx, sy, fill);
                fill_total += fm;
                for c in 0..3 {
                    out.set(oy, ox, c, rgb[c]);
                }
            }
        }
        (out, fill_total / (out_side * out_side) as f64)
    }

    pub fn save_romi(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(ROMI_MAGIC)?;
        f.write_all(&(self.h as u32).to_le_bytes())?;
        f.write_all(&(self.w as u32).to_le_bytes())?;
        f.write_all(&0u32.to_le_bytes())?;
        let mut plane = vec![0u8; self.h * self.w];
        for c in 0..3 {
            for (i, px) in self.data.chunks_exact(3).enumerate() {
                plane[i] = (px[c].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            f.write_all(&plane)?;
        }
        Ok(())
    }

    pub fn load_romi(path: &Path) -> Result<Image> {
        let mut f = std::fs::File::open(path)?;
        let mut header = [0u8; 16];
        f.read_exact(&mut header)?;
        if &header[0..4] != ROMI_MAGIC {
            return Err(Error::geometry(format!("bad ROMI magic in {path:?}")));
        }
        let h = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let mut planes = vec![0u8; h * w * 3];
        f.read_exact(&mut planes).map_err(|e| {
            Error::geometry(format!("truncated ROMI payload in {path:?}: {e}"))
        })?;
        let mut img = Image::new(h, w);
        for c in 0..3 {
            let plane = &planes[c * h * w..(c + 1) * h * w];
            for (i, &b) in plane.iter().enumerate() {
                img.data[i * 3 + c] = b as f64 / 255.0;
            }
        }
        Ok(img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(h: usize, w: usize) -> Image {
        let mut img = Image::new(h, w);
        for y in 0..h {
            for x in 0..w {
                img.set(y, x, 0, (y as f64) / h as f64);
                img.set(y, x, 1, (x as f64) / w as f64);
                img.set(y, x, 2, ((y + x) % 2) as f64);
            }
        }
        img
    }

    #[test]
    fn romi_roundtrip_is_exact_at_8bit() {
        let dir = std::env::temp_dir().join("romi_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.romi");
        let img = test_image(6, 8);
        img.save_romi(&path).unwrap();
        let back = Image::load_romi(&path).unwrap();
        assert_eq!(back.height(), 6);
        assert_eq!(back.width(), 8);
        // quantization error bounded by half a step
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        // second save is byte-identical
        let path2 = dir.join("t2.romi");
        back.save_romi(&path2).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(&path2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn identity_crop_copies_pixels() {
        let img = test_image(8, 8);
        let (crop, fill) = img.crop_resize(4.0, 4.0, 8.0, 8);
        assert_eq!(fill, 0.0);
        for (a, b) in img.data().iter().zip(crop.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = test_image(5, 7);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn half_out_crop_has_half_fill_mass() {
        let img = test_image(16, 16);
        // crop centered on the left edge: half the window is outside
        let (_, fill) = img.crop_resize(0.0, 8.0, 16.0, 32);
        assert!((fill - 0.5).abs() < 0.01, "fill mass {fill}");
    }
}
