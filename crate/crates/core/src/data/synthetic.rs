//! Procedural multi-domain shape corpus.
//!
//! Every style renders the same signed-distance shapes, so contours carry the
//! class while color, texture and stroke vary by domain.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{write_manifest, Dataset, DomainCatalog, DomainSample, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::image::{Image, LUMA};
use crate::rng;

pub const SHAPES: [&str; 10] = [
    "circle", "square", "triangle", "star", "cross", "crescent", "arrow", "heart", "hexagon", "ring",
];

/// Minimum luma gap between a shape and its background.
pub const MIN_CONTRAST: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Style {
    Photo,
    Clipart,
    Sketch,
    NoisyGray,
}

impl Style {
    pub const ALL: [Style; 4] = [Style::Photo, Style::Clipart, Style::Sketch, Style::NoisyGray];

    /// Fixed id used for seeding, independent of how many styles are generated.
    pub fn id(self) -> u64 {
        self as u64
    }

    pub fn name(self) -> &'static str {
        match self {
            Style::Photo => "photo",
            Style::Clipart => "clipart",
            Style::Sketch => "sketch",
            Style::NoisyGray => "noisy-gray",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub n_domains: usize,
    pub n_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if !(2..=Style::ALL.len()).contains(&self.n_domains) {
            return Err(Error::InvalidArgument(format!("n_domains must be in 2..=4, got {}", self.n_domains)));
        }
        if self.n_classes > SHAPES.len() {
            return Err(Error::TooManyClasses {
                requested: self.n_classes,
                available: SHAPES.len(),
            });
        }
        if self.n_classes == 0 || self.per_class == 0 {
            return Err(Error::InvalidArgument("n_classes and per_class must be positive".into()));
        }
        if self.image_size < 8 {
            return Err(Error::InvalidArgument(format!("image_size {} is too small to draw shapes", self.image_size)));
        }
        Ok(())
    }

    pub fn styles(&self) -> &'static [Style] {
        &Style::ALL[..self.n_domains]
    }
}

type P = (f64, f64);

fn sub(a: P, b: P) -> P {
    (a.0 - b.0, a.1 - b.1)
}

fn dot(a: P, b: P) -> f64 {
    a.0 * b.0 + a.1 * b.1
}

fn len(a: P) -> f64 {
    dot(a, a).sqrt()
}

/// Exact signed distance to a simple polygon, negative inside.
fn sd_polygon(p: P, v: &[P]) -> f64 {
    let mut d = f64::INFINITY;
    let mut inside = false;
    let mut j = v.len() - 1;
    for i in 0..v.len() {
        let e = sub(v[j], v[i]);
        let w = sub(p, v[i]);
        let t = (dot(w, e) / dot(e, e)).clamp(0.0, 1.0);
        d = d.min(len(sub(w, (e.0 * t, e.1 * t))));
        if (v[i].1 > p.1) != (v[j].1 > p.1) && p.0 < (v[j].0 - v[i].0) * (p.1 - v[i].1) / (v[j].1 - v[i].1) + v[i].0 {
            inside = !inside;
        }
        j = i;
    }
    if inside {
        -d
    } else {
        d
    }
}

fn regular(n: usize, r: f64, phase: f64) -> Vec<P> {
    (0..n)
        .map(|i| {
            let a = phase + 2.0 * PI * i as f64 / n as f64;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

fn star_vertices() -> Vec<P> {
    (0..10)
        .map(|i| {
            let r = if i % 2 == 0 { 1.0 } else { 0.42 };
            let a = -PI / 2.0 + PI * i as f64 / 5.0;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

/// Signed distance in shape units (outer radius about 1), negative inside.
pub fn shape_sdf(shape: usize, p: P) -> f64 {
    let circle = |c: P, r: f64| len(sub(p, c)) - r;
    match SHAPES[shape] {
        "circle" => circle((0.0, 0.0), 0.9),
        "square" => sd_polygon(p, &[(-0.75, -0.75), (0.75, -0.75), (0.75, 0.75), (-0.75, 0.75)]),
        "triangle" => sd_polygon(p, &regular(3, 1.0, -PI / 2.0)),
        "star" => sd_polygon(p, &star_vertices()),
        "cross" => sd_polygon(
            p,
            &[
                (-0.3, -0.9),
                (0.3, -0.9),
                (0.3, -0.3),
                (0.9, -0.3),
                (0.9, 0.3),
                (0.3, 0.3),
                (0.3, 0.9),
                (-0.3, 0.9),
                (-0.3, 0.3),
                (-0.9, 0.3),
                (-0.9, -0.3),
                (-0.3, -0.3),
            ],
        ),
        "crescent" => circle((0.0, 0.0), 0.9).max(-circle((0.45, -0.15), 0.75)),
        "arrow" => sd_polygon(
            p,
            &[(-0.9, -0.25), (0.1, -0.25), (0.1, -0.65), (0.95, 0.0), (0.1, 0.65), (0.1, 0.25), (-0.9, 0.25)],
        ),
        "heart" => circle((-0.42, -0.3), 0.48)
            .min(circle((0.42, -0.3), 0.48))
            .min(sd_polygon(p, &[(-0.88, -0.15), (0.88, -0.15), (0.0, 0.92)])),
        "hexagon" => sd_polygon(p, &regular(6, 0.9, 0.0)),
        "ring" => (len(p) - 0.72).abs() - 0.2,
        other => unreachable!("unknown shape {other}"),
    }
}

/// Pose of one shape instance in pixel coordinates.
#[derive(Clone, Copy, Debug)]
struct Pose {
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
}

impl Pose {
    fn sample(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let radius = size * rng.random_range(0.22..0.36);
        let margin = radius * 1.05;
        Self {
            cx: rng.random_range(margin..size - margin),
            cy: rng.random_range(margin..size - margin),
            radius,
            angle: rng.random_range(0.0..2.0 * PI),
        }
    }

    /// Signed distance in pixels from pixel center `(x, y)`.
    fn distance(&self, shape: usize, x: usize, y: usize) -> f64 {
        let (dx, dy) = ((x as f64 + 0.5 - self.cx) / self.radius, (y as f64 + 0.5 - self.cy) / self.radius);
        let (s, c) = self.angle.sin_cos();
        shape_sdf(shape, (c * dx + s * dy, -s * dx + c * dy)) * self.radius
    }
}

fn luma(c: [f64; 3]) -> f64 {
    c.iter().zip(LUMA).map(|(v, w)| v * w as f64).sum()
}

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

/// Draws a foreground/background color pair whose lumas differ by at least [`MIN_CONTRAST`].
fn contrasting_pair(rng: &mut ChaCha8Rng, fg: (f64, f64), bg: (f64, f64)) -> ([f64; 3], [f64; 3]) {
    loop {
        let (f, b) = (random_color(rng, fg.0, fg.1), random_color(rng, bg.0, bg.1));
        if (luma(f) - luma(b)).abs() >= MIN_CONTRAST {
            return (f, b);
        }
    }
}

fn coverage(d: f64) -> f64 {
    (0.5 - d).clamp(0.0, 1.0)
}

fn stroke(d: f64, width: f64) -> f64 {
    (0.5 * width + 0.5 - d.abs()).clamp(0.0, 1.0)
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Renders one image; the stream is keyed only by style, shape and index.
pub fn render(style: Style, shape: usize, idx: usize, size: usize, seed: u64) -> Image {
    let mut r = rng::stream(&[seed, style.id(), shape as u64, idx as u64]);
    let pose = Pose::sample(&mut r, size as f64);
    let mut px = vec![[0.0f64; 3]; size * size];
    match style {
        Style::Photo => {
            let (fg, bg) = contrasting_pair(&mut r, (0.0, 1.0), (0.0, 1.0));
            let (bg2, tex) = (random_color(&mut r, 0.0, 1.0), random_color(&mut r, 0.0, 1.0));
            let (f1, f2) = (r.random_range(1.0..3.0), r.random_range(4.0..9.0));
            let (p1, p2, dir) = (r.random_range(0.0..2.0 * PI), r.random_range(0.0..2.0 * PI), r.random_range(0.0..PI));
            let light = r.random_range(0.0..2.0 * PI);
            for y in 0..size {
                for x in 0..size {
                    let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
                    let along = u * dir.cos() + v * dir.sin();
                    let wash = 0.5 + 0.5 * (2.0 * PI * f1 * along + p1).sin();
                    let grain = 0.5 + 0.5 * (2.0 * PI * f2 * (u * dir.sin() - v * dir.cos()) + p2).sin();
                    let back = lerp(lerp(bg, bg2, 0.12 * wash), tex, 0.08 * grain);
                    let shade = 0.1 * ((u - 0.5) * light.cos() + (v - 0.5) * light.sin());
                    let front = fg.map(|c| c + shade);
                    let a = coverage(pose.distance(shape, x, y));
                    px[y * size + x] = lerp(back, front, a);
                }
            }
        }
        Style::Clipart => {
            let (fg, bg) = contrasting_pair(&mut r, (0.15, 1.0), (0.75, 1.0));
            let line = random_color(&mut r, 0.0, 0.2);
            let width = r.random_range(1.5..2.5);
            for y in 0..size {
                for x in 0..size {
                    let d = pose.distance(shape, x, y);
                    let c = lerp(bg, fg, coverage(d));
                    px[y * size + x] = lerp(c, line, stroke(d, width));
                }
            }
        }
        Style::Sketch => {
            let (ink, paper) = contrasting_pair(&mut r, (0.0, 0.35), (0.85, 1.0));
            let width = r.random_range(1.0..1.8);
            let (wobble, freq, phase) = (r.random_range(0.2..0.6), r.random_range(5.0..11.0), r.random_range(0.0..2.0 * PI));
            for y in 0..size {
                for x in 0..size {
                    let a = (y as f64 - pose.cy).atan2(x as f64 - pose.cx);
                    let d = pose.distance(shape, x, y) + wobble * (freq * a + phase).sin();
                    px[y * size + x] = lerp(paper, ink, stroke(d, width));
                }
            }
        }
        Style::NoisyGray => {
            let (fg, bg) = loop {
                let (f, b) = (r.random_range(0.0..1.0), r.random_range(0.0..1.0));
                if f64::abs(f - b) >= MIN_CONTRAST + 0.05 {
                    break (f, b);
                }
            };
            let noise = Normal::new(0.0, r.random_range(0.03..0.08)).expect("positive sigma");
            for y in 0..size {
                for x in 0..size {
                    let g = bg + (fg - bg) * coverage(pose.distance(shape, x, y));
                    let roll: f64 = r.random();
                    let v = if roll < 0.02 {
                        0.0
                    } else if roll < 0.04 {
                        1.0
                    } else {
                        g + noise.sample(&mut r)
                    };
                    px[y * size + x] = [v; 3];
                }
            }
        }
    }
    // Quantize to 8 bits so in-memory images match what a PNG round trip yields.
    Image::from_fn(3, size, size, |c, y, x| (px[y * size + x][c].clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0)
}

fn stem(shape: usize, idx: usize) -> String {
    format!("{}_{idx:04}", SHAPES[shape])
}

/// Builds the corpus in memory, in the same order [`super::ingest_directory`]
/// would produce from the written tree.
pub fn render_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut styles = spec.styles().to_vec();
    styles.sort_by_key(|s| s.name());
    let mut classes: Vec<usize> = (0..spec.n_classes).collect();
    classes.sort_by_key(|&c| SHAPES[c]);
    let mut samples = Vec::new();
    for (domain_id, style) in styles.iter().enumerate() {
        for (class_id, &shape) in classes.iter().enumerate() {
            for idx in 0..spec.per_class {
                samples.push(DomainSample {
                    image: render(*style, shape, idx, spec.image_size, spec.seed),
                    domain_id,
                    class_id: Some(class_id),
                    sample_id: format!("{}/{}/{}", style.name(), SHAPES[shape], stem(shape, idx)),
                });
            }
        }
    }
    let catalog = DomainCatalog {
        domains: styles.iter().map(|s| s.name().to_string()).collect(),
        per_domain_counts: vec![spec.n_classes * spec.per_class; styles.len()],
        class_names: Some(classes.iter().map(|&c| SHAPES[c].to_string()).collect()),
    };
    Dataset::new(catalog, samples, spec.image_size)
}

/// Writes `root/<domain>/<class>/<class>_<idx>.png` plus the manifest.
pub fn make_synthetic(root: &Path, spec: &SyntheticSpec) -> Result<Dataset> {
    let ds = render_synthetic(spec)?;
    let manifest = ds.manifest();
    for (s, entry) in ds.samples().iter().zip(&manifest) {
        let path = root.join(&entry.path);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        s.image.save_png(&path)?;
    }
    write_manifest(&root.join(MANIFEST_FILE), &manifest)?;
    Ok(ds)
}
