//! Planar float images and PNG I/O.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

/// ITU-R BT.601 luma weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Channel-planar (CHW) image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "image buffer size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn clamp_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Single-channel luma; single-channel inputs are returned as-is.
    pub fn luma(&self) -> Vec<f32> {
        if self.channels == 1 {
            return self.data.clone();
        }
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((&r, &g), &b)| LUMA[0] * r + LUMA[1] * g + LUMA[2] * b)
            .collect()
    }

    /// Copies a single channel into three.
    pub fn gray_to_rgb(&self) -> Self {
        assert_eq!(self.channels, 1);
        let mut data = Vec::with_capacity(3 * self.data.len());
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        Self::new(3, self.height, self.width, data)
    }

    /// Bilinear resample of the crop `[top, top+crop_h) x [left, left+crop_w)` to `out_h x out_w`.
    pub fn resized_crop(&self, top: f64, left: f64, crop_h: f64, crop_w: f64, out_h: usize, out_w: usize) -> Self {
        let (h, w) = (self.height, self.width);
        let taps = |src_len: usize, start: f64, len: f64, out: usize| -> Vec<(usize, usize, f32)> {
            (0..out)
                .map(|i| {
                    let s = (start + (i as f64 + 0.5) * len / out as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
                    let i0 = s.floor() as usize;
                    let i1 = (i0 + 1).min(src_len - 1);
                    (i0, i1, (s - i0 as f64) as f32)
                })
                .collect()
        };
        let ty = taps(h, top, crop_h, out_h);
        let tx = taps(w, left, crop_w, out_w);
        let mut data = Vec::with_capacity(self.channels * out_h * out_w);
        for c in 0..self.channels {
            let p = self.plane(c);
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                    let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                    data.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        Self::new(self.channels, out_h, out_w, data)
    }

    pub fn resized(&self, out_h: usize, out_w: usize) -> Self {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        self.resized_crop(0.0, 0.0, self.height as f64, self.width as f64, out_h, out_w)
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(3, h, w, |c, y, x| img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let px = |c: usize, y: usize, x: usize| (self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            if self.channels == 1 {
                let v = px(0, y, x);
                Rgb([v, v, v])
            } else {
                Rgb([px(0, y, x), px(1, y, x), px(2, y, x)])
            }
        })
    }

    /// Decodes any supported file into a 3-channel image resized to `size x size`.
    pub fn load(path: &Path, size: usize) -> Result<Self> {
        let decoded = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb8(&decoded.to_rgb8()).resized(size, size))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Writes a single-channel `[0, 1]` map as an 8-bit grayscale PNG.
pub fn save_gray_png(values: &[f32], height: usize, width: usize, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        Luma([(values[y as usize * width + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_frame_crop_is_identity() {
        let img = Image::from_fn(3, 5, 7, |c, y, x| ((c * 31 + y * 7 + x) % 13) as f32 / 13.0);
        assert_eq!(img.resized_crop(0.0, 0.0, 5.0, 7.0, 5, 7), img);
    }

    #[test]
    fn png_round_trip_quantizes_to_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Image::from_fn(3, 4, 4, |c, y, x| ((c + y + x) * 17 % 256) as f32 / 255.0);
        img.save_png(&path).unwrap();
        let back = Image::load(&path, 4).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
