//! Fixed edge mappings and the small image transforms the bridge losses use.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::image::{Image, LUMA};

pub const CANNY_LOW: f32 = 0.1;
pub const CANNY_HIGH: f32 = 0.2;
const CANNY_SMOOTH_SIGMA: f64 = 1.0;
const CANNY_SMOOTH_KERNEL: usize = 5;

/// Single-channel map with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl EdgeMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), height * width, "edge map buffer size");
        Self { height, width, values }
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Self::new(height, width, vec![v; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn in_unit_range(&self) -> bool {
        self.values.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn to_image(&self) -> Image {
        Image::new(1, self.height, self.width, self.values.clone())
    }
}

/// Mirror index without repeating the border sample (`-1 -> 1`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Normalized 1-D Gaussian taps of odd length `k`.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Result<Vec<f64>> {
    if k % 2 == 0 {
        return Err(Error::EvenKernel(k));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let r = (k / 2) as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Separable convolution of one plane with `kernel`, reflect padding.
pub fn convolve_separable(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, &k)| k * row[reflect(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, &k)| k * tmp[reflect(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

pub fn gaussian_blur(map: &EdgeMap, kernel_size: usize, sigma: f64) -> Result<EdgeMap> {
    let kernel = gaussian_kernel(kernel_size, sigma)?;
    let plane: Vec<f64> = map.values.iter().map(|&v| v as f64).collect();
    let out = convolve_separable(&plane, map.height, map.width, &kernel);
    Ok(EdgeMap::new(
        map.height,
        map.width,
        out.into_iter().map(|v| (v as f32).clamp(0.0, 1.0)).collect(),
    ))
}

/// Affine stretch onto `[0, 1]`; a constant map becomes all zeros.
pub fn stretch_to_unit(map: &EdgeMap) -> EdgeMap {
    let (lo, hi) = map
        .values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let values = if hi > lo {
        let inv = 1.0 / (hi - lo);
        map.values.iter().map(|&v| (v - lo) * inv).collect()
    } else {
        vec![0.0; map.values.len()]
    };
    EdgeMap::new(map.height, map.width, values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Direction {
    Horizontal,
    Diagonal,
    Vertical,
    AntiDiagonal,
}

impl Direction {
    /// Quantizes a gradient to one of four axes. Uses only `|gx|`, `|gy|` and
    /// the sign of `gx * gy`, so negating the gradient never changes the bin.
    fn of(gx: f64, gy: f64) -> Self {
        const TAN_22_5: f64 = 0.414_213_562_373_095_1;
        const TAN_67_5: f64 = 2.414_213_562_373_095;
        let (ax, ay) = (gx.abs(), gy.abs());
        if ay <= ax * TAN_22_5 {
            Direction::Horizontal
        } else if ay >= ax * TAN_67_5 {
            Direction::Vertical
        } else if (gx > 0.0) == (gy > 0.0) {
            Direction::Diagonal
        } else {
            Direction::AntiDiagonal
        }
    }

    /// Offsets `(dy, dx)` of the neighbor on the positive side of the gradient axis.
    fn step(self) -> (isize, isize) {
        match self {
            Direction::Horizontal => (0, 1),
            Direction::Diagonal => (1, 1),
            Direction::Vertical => (1, 0),
            Direction::AntiDiagonal => (1, -1),
        }
    }
}

/// Smoothed Sobel gradients of the luma channel; magnitude is scaled so a
/// unit step yields 1 before smoothing.
fn gradients(image: &Image) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, w) = (image.height(), image.width());
    // Centering makes the pipeline exactly odd under `1 - I`, since every
    // later step is linear until the magnitude.
    let gray: Vec<f64> = if image.channels() == 1 {
        image.plane(0).iter().map(|&v| v as f64 - 0.5).collect()
    } else {
        (0..h * w)
            .map(|i| (0..3).map(|c| LUMA[c] as f64 * (image.plane(c)[i] as f64 - 0.5)).sum())
            .collect()
    };
    let kernel = gaussian_kernel(CANNY_SMOOTH_KERNEL, CANNY_SMOOTH_SIGMA).expect("odd kernel");
    let s = convolve_separable(&gray, h, w, &kernel);
    let at = |y: isize, x: isize| s[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let (mut gx, mut gy, mut mag) = (vec![0.0; h * w], vec![0.0; h * w], vec![0.0; h * w]);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let dx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let dy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let i = y as usize * w + x as usize;
            gx[i] = dx;
            gy[i] = dy;
            mag[i] = dx.hypot(dy) / 4.0;
        }
    }
    (gx, gy, mag)
}

/// Binary Canny edges: luma, Gaussian smoothing, Sobel, non-maximum
/// suppression and 8-connected hysteresis.
pub fn canny(image: &Image, low: f32, high: f32) -> EdgeMap {
    assert!(0.0 <= low && low < high, "canny thresholds need 0 <= low < high, got {low}, {high}");
    let (h, w) = (image.height(), image.width());
    let (gx, gy, mag) = gradients(image);
    let m = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (dy, dx) = Direction::of(gx[i], gy[i]).step();
            let (yi, xi) = (y as isize, x as isize);
            let (prev, next) = (m(yi - dy, xi - dx), m(yi + dy, xi + dx));
            // Strict on one side only, so a plateau two pixels wide keeps exactly one.
            if mag[i] > prev && mag[i] >= next {
                thin[i] = mag[i];
            }
        }
    }
    let (low, high) = (low as f64, high as f64);
    let mut out = vec![0.0f32; h * w];
    let mut frontier: VecDeque<usize> = (0..h * w).filter(|&i| thin[i] >= high).collect();
    frontier.iter().for_each(|&i| out[i] = 1.0);
    while let Some(i) = frontier.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for ny in y - 1..=y + 1 {
            for nx in x - 1..=x + 1 {
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out[j] == 0.0 && thin[j] >= low && thin[j] > 0.0 {
                    out[j] = 1.0;
                    frontier.push_back(j);
                }
            }
        }
    }
    EdgeMap::new(h, w, out)
}
