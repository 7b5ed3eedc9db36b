use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::edges::{convolve_separable, gaussian_kernel};
use crate::image::Image;
use crate::rng;

/// Stochastic view recipe. Defaults follow the usual MoCo v2 set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    /// Blur kernel size as a fraction of image side, rounded up to odd.
    pub blur_kernel_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
            blur_kernel_frac: 0.1,
        }
    }
}

impl AugmentConfig {
    /// Every transform off and the crop pinned to the full frame.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            ..Self::default()
        }
    }
}

fn uniform(r: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        r.random_range(lo..hi)
    } else {
        lo
    }
}

/// Integer crop box `(top, left, h, w)` sampled as torchvision does: ten
/// attempts at a random area and log-uniform aspect, then a center fallback.
fn crop_box(r: &mut impl Rng, h: usize, w: usize, cfg: &AugmentConfig) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let log_ratio = (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(r, cfg.crop_scale);
        let aspect = uniform(r, log_ratio).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = r.random_range(0..=h - ch);
            let left = r.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < cfg.crop_ratio.0 {
        (((w as f64) / cfg.crop_ratio.0).round() as usize, w)
    } else if in_ratio > cfg.crop_ratio.1 {
        (h, ((h as f64) * cfg.crop_ratio.1).round() as usize)
    } else {
        (h, w)
    };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

fn gray_plane(img: &Image) -> Vec<f32> {
    img.luma()
}

fn adjust_brightness(img: &mut Image, f: f32) {
    img.data_mut().iter_mut().for_each(|v| *v *= f);
    img.clamp_unit();
}

fn adjust_contrast(img: &mut Image, f: f32) {
    let g = gray_plane(img);
    let mean = g.iter().sum::<f32>() / g.len() as f32;
    img.data_mut().iter_mut().for_each(|v| *v = mean + f * (*v - mean));
    img.clamp_unit();
}

fn adjust_saturation(img: &mut Image, f: f32) {
    let g = gray_plane(img);
    for c in 0..3 {
        for (v, &gv) in img.plane_mut(c).iter_mut().zip(&g) {
            *v = gv + f * (*v - gv);
        }
    }
    img.clamp_unit();
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let mx = r.max(g).max(b);
    let mn = r.min(g).min(b);
    let d = mx - mn;
    let h = if d == 0.0 {
        0.0
    } else if mx == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if mx == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if mx == 0.0 { 0.0 } else { d / mx };
    (h, s, mx)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn adjust_hue(img: &mut Image, shift: f32) {
    let n = img.height() * img.width();
    for i in 0..n {
        let (r, g, b) = (img.plane(0)[i], img.plane(1)[i], img.plane(2)[i]);
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        img.plane_mut(0)[i] = r;
        img.plane_mut(1)[i] = g;
        img.plane_mut(2)[i] = b;
    }
    img.clamp_unit();
}

fn to_grayscale(img: &mut Image) {
    let g = gray_plane(img);
    for c in 0..3 {
        img.plane_mut(c).copy_from_slice(&g);
    }
}

fn blur(img: &mut Image, sigma: f64, frac: f64) {
    let side = img.height().min(img.width());
    let mut k = ((side as f64 * frac).ceil() as usize).max(3);
    if k % 2 == 0 {
        k += 1;
    }
    let kernel = gaussian_kernel(k, sigma).expect("odd kernel, positive sigma");
    let (h, w) = (img.height(), img.width());
    for c in 0..img.channels() {
        let plane: Vec<f64> = img.plane(c).iter().map(|&v| v as f64).collect();
        let out = convolve_separable(&plane, h, w, &kernel);
        img.plane_mut(c).iter_mut().zip(out).for_each(|(d, s)| *d = s as f32);
    }
    img.clamp_unit();
}

/// One stochastic view of `image`, fully determined by `seed`.
pub fn augment(image: &Image, cfg: &AugmentConfig, seed: u64) -> Image {
    assert_eq!(image.channels(), 3, "augment expects RGB input");
    let mut r = rng::stream(&[seed]);
    let (h, w) = (image.height(), image.width());
    let (top, left, ch, cw) = crop_box(&mut r, h, w, cfg);
    let mut out = image.resized_crop(top as f64, left as f64, ch as f64, cw as f64, h, w);
    if r.random_bool(cfg.flip_p) {
        for c in 0..3 {
            out.plane_mut(c).chunks_mut(w).for_each(|row| row.reverse());
        }
    }
    if r.random_bool(cfg.jitter_p) {
        let mut order = [0usize, 1, 2, 3];
        order.shuffle(&mut r);
        let b = uniform(&mut r, ((1.0 - cfg.brightness).max(0.0), 1.0 + cfg.brightness)) as f32;
        let c = uniform(&mut r, ((1.0 - cfg.contrast).max(0.0), 1.0 + cfg.contrast)) as f32;
        let s = uniform(&mut r, ((1.0 - cfg.saturation).max(0.0), 1.0 + cfg.saturation)) as f32;
        let hshift = uniform(&mut r, (-cfg.hue, cfg.hue)) as f32;
        for op in order {
            match op {
                0 => adjust_brightness(&mut out, b),
                1 => adjust_contrast(&mut out, c),
                2 => adjust_saturation(&mut out, s),
                _ => adjust_hue(&mut out, hshift),
            }
        }
    }
    if r.random_bool(cfg.grayscale_p) {
        to_grayscale(&mut out);
    }
    if r.random_bool(cfg.blur_p) {
        let sigma = uniform(&mut r, cfg.blur_sigma);
        blur(&mut out, sigma, cfg.blur_kernel_frac);
    }
    out.clamp_unit();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{render, Style};

    #[test]
    fn identity_config_is_identity() {
        let img = render(Style::Photo, 2, 0, 32, 5);
        assert_eq!(augment(&img, &AugmentConfig::identity(), 99), img);
    }

    #[test]
    fn same_seed_same_view() {
        let img = render(Style::Clipart, 1, 0, 32, 5);
        let cfg = AugmentConfig::default();
        assert_eq!(augment(&img, &cfg, 7), augment(&img, &cfg, 7));
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = AugmentConfig::default();
        let mut differing = 0;
        for i in 0..100 {
            let img = render(Style::ALL[i % 4], i % 10, i, 32, 3);
            if augment(&img, &cfg, 2 * i as u64) != augment(&img, &cfg, 2 * i as u64 + 1) {
                differing += 1;
            }
        }
        assert_eq!(differing, 100);
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.1, 0.5, 0.9), (0.9, 0.2, 0.2), (0.3, 0.3, 0.3), (0.0, 1.0, 0.5)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-6 && (g - g2).abs() < 1e-6 && (b - b2).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_boxes_stay_inside() {
        let cfg = AugmentConfig::default();
        let mut r = rng::stream(&[1]);
        for _ in 0..500 {
            let (t, l, h, w) = crop_box(&mut r, 40, 30, &cfg);
            assert!(h > 0 && w > 0 && t + h <= 40 && l + w <= 30);
        }
    }
}
