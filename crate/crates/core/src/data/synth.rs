//! Procedural shapes-world generator.
//!
//! Every class is a (shape family, texture family) pair. Colors are drawn per
//! sample, so neither color nor any single cue identifies a class. Within each
//! quarter of the class range the pairs form a Latin square, so held-out
//! classes are unseen combinations of seen shapes and textures.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassId, Mask};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SHAPE_FAMILIES: [&str; 6] = ["ellipse", "rectangle", "triangle", "cross", "ring", "star"];
pub const TEXTURE_FAMILIES: [&str; 6] = ["flat", "stripes", "checker", "dots", "gradient", "speckle"];

/// Foreground area bounds as a fraction of the image.
const MIN_FG_FRACTION: f64 = 0.05;
const MAX_FG_FRACTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_classes: 16,
            images_per_class: 50,
            image_size: 64,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be a positive multiple of 4, got {}",
                self.num_classes
            )));
        }
        if self.num_classes > 4 * SHAPE_FAMILIES.len() {
            return Err(Error::InvalidConfig(format!(
                "at most {} classes can be generated, got {}",
                4 * SHAPE_FAMILIES.len(),
                self.num_classes
            )));
        }
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(Error::InvalidConfig(format!(
                "image_size must be a positive multiple of 8, got {}",
                self.image_size
            )));
        }
        if self.image_size < 32 {
            return Err(Error::InvalidConfig(format!("image_size must be at least 32, got {}", self.image_size)));
        }
        if self.images_per_class < 2 {
            return Err(Error::InvalidConfig("images_per_class must be at least 2".into()));
        }
        Ok(())
    }
}

/// Shape and texture family of `class_id` for a dataset with `num_classes` classes.
pub fn class_families(num_classes: usize, class_id: ClassId) -> (usize, usize) {
    let quarter = num_classes / 4;
    let families = quarter.max(4);
    let u = class_id as usize - 1;
    let (split, i) = (u / quarter, u % quarter);
    (i % families, (i + split) % families)
}

/// One image with its dense label map. Exactly one foreground class is present.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: usize,
    /// `3 × H × W`, values quantized to multiples of 1/255 in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label_map: Mask,
    pub class_id: ClassId,
}

impl ImageSample {
    pub fn class_ids_present(&self) -> BTreeSet<ClassId> {
        self.label_map.data().iter().copied().filter(|&v| v != 0).collect()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.label_map.count_nonzero() as f64 / self.label_map.data().len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub samples: Vec<ImageSample>,
    by_class: BTreeMap<ClassId, Vec<usize>>,
}

impl Dataset {
    pub fn new(config: GenConfig, samples: Vec<ImageSample>) -> Self {
        let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_class.entry(s.class_id).or_default().push(i);
        }
        Self {
            config,
            samples,
            by_class,
        }
    }

    /// Positions (into `samples`) of every image of `class_id`.
    pub fn indices_of(&self, class_id: ClassId) -> &[usize] {
        self.by_class.get(&class_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn generate_dataset(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let mut samples = Vec::with_capacity(config.num_classes * config.images_per_class);
    for class in 1..=config.num_classes as ClassId {
        for j in 0..config.images_per_class {
            let id = samples.len();
            let seed = mix_seed(config.seed, class as u64, j as u64);
            samples.push(render_sample(config, class, id, &mut ChaCha8Rng::seed_from_u64(seed)));
        }
    }
    Ok(Dataset::new(*config, samples))
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug)]
struct Placement {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
}

impl Placement {
    /// Pixel center to shape-local coordinates.
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        (self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy)
    }
}

#[derive(Clone, Debug)]
enum Shape {
    Ellipse { a: f64, b: f64 },
    Rectangle { a: f64, b: f64 },
    Polygon(Vec<(f64, f64)>),
    Cross { arm: f64, half_width: f64 },
    Ring { outer: f64, inner: f64 },
}

impl Shape {
    fn sample<R: Rng>(family: usize, size: f64, rng: &mut R) -> (Shape, f64) {
        let s = |lo: f64, hi: f64, rng: &mut R| rng.random_range(lo * size..hi * size);
        match family {
            0 => {
                let (a, b) = (s(0.14, 0.30, rng), s(0.14, 0.30, rng));
                (Shape::Ellipse { a, b }, a.max(b))
            }
            1 => {
                let (a, b) = (s(0.12, 0.25, rng), s(0.12, 0.25, rng));
                (Shape::Rectangle { a, b }, (a * a + b * b).sqrt())
            }
            2 => {
                let r = s(0.22, 0.36, rng);
                let verts = (0..3)
                    .map(|i| {
                        let ang = i as f64 * 2.0 * PI / 3.0 + rng.random_range(-0.25..0.25);
                        let rad = r * rng.random_range(0.85..1.0);
                        (rad * ang.cos(), rad * ang.sin())
                    })
                    .collect();
                (Shape::Polygon(verts), r)
            }
            3 => {
                let arm = s(0.20, 0.33, rng);
                let half_width = s(0.07, 0.11, rng);
                (Shape::Cross { arm, half_width }, arm * std::f64::consts::SQRT_2)
            }
            4 => {
                let outer = s(0.20, 0.33, rng);
                let inner = outer * rng.random_range(0.45..0.6);
                (Shape::Ring { outer, inner }, outer)
            }
            _ => {
                let r = s(0.24, 0.37, rng);
                let verts = (0..10)
                    .map(|i| {
                        let ang = i as f64 * PI / 5.0;
                        let rad = if i % 2 == 0 { r } else { 0.45 * r };
                        (rad * ang.cos(), rad * ang.sin())
                    })
                    .collect();
                (Shape::Polygon(verts), r)
            }
        }
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        match self {
            Shape::Ellipse { a, b } => (u / a).powi(2) + (v / b).powi(2) <= 1.0,
            Shape::Rectangle { a, b } => u.abs() <= *a && v.abs() <= *b,
            Shape::Cross { arm, half_width } => {
                (u.abs() <= *arm && v.abs() <= *half_width) || (u.abs() <= *half_width && v.abs() <= *arm)
            }
            Shape::Ring { outer, inner } => {
                let r2 = u * u + v * v;
                r2 <= outer * outer && r2 >= inner * inner
            }
            Shape::Polygon(verts) => point_in_polygon(verts, u, v),
        }
    }
}

fn point_in_polygon(verts: &[(f64, f64)], u: f64, v: f64) -> bool {
    let mut inside = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

type Rgb = [f64; 3];

struct Texture {
    family: usize,
    primary: Rgb,
    secondary: Rgb,
    period: f64,
    cos: f64,
    sin: f64,
    phase: f64,
    extent: f64,
    seed: u64,
}

impl Texture {
    fn color_at(&self, u: f64, v: f64, px: usize, py: usize) -> Rgb {
        let t = self.cos * u + self.sin * v;
        let n = self.cos * v - self.sin * u;
        match self.family {
            0 => self.primary,
            1 => {
                if ((t / self.period + self.phase).rem_euclid(1.0)) < 0.5 {
                    self.primary
                } else {
                    self.secondary
                }
            }
            2 => {
                let a = (t / self.period + self.phase).floor() as i64;
                let b = (n / self.period + self.phase).floor() as i64;
                if (a + b).rem_euclid(2) == 0 {
                    self.primary
                } else {
                    self.secondary
                }
            }
            3 => {
                let fu = (t / self.period + self.phase).rem_euclid(1.0) - 0.5;
                let fv = (n / self.period + self.phase).rem_euclid(1.0) - 0.5;
                if fu * fu + fv * fv < 0.09 {
                    self.secondary
                } else {
                    self.primary
                }
            }
            4 => {
                let w = ((t / self.extent) * 0.5 + 0.5).clamp(0.0, 1.0);
                lerp(self.primary, self.secondary, w)
            }
            _ => {
                let h = mix_seed(self.seed, px as u64, py as u64);
                if h & 1 == 0 {
                    self.primary
                } else {
                    self.secondary
                }
            }
        }
    }
}

fn lerp(a: Rgb, b: Rgb, w: f64) -> Rgb {
    [
        a[0] + (b[0] - a[0]) * w,
        a[1] + (b[1] - a[1]) * w,
        a[2] + (b[2] - a[2]) * w,
    ]
}

fn max_channel_diff(a: Rgb, b: Rgb) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max)
}

fn random_color<R: Rng>(rng: &mut R) -> Rgb {
    [rng.random(), rng.random(), rng.random()]
}

/// A color at least `min_diff` (max-channel) away from every color in `avoid`.
fn distinct_color<R: Rng>(rng: &mut R, avoid: &[Rgb], min_diff: f64) -> Rgb {
    for _ in 0..64 {
        let c = random_color(rng);
        if avoid.iter().all(|&a| max_channel_diff(a, c) >= min_diff) {
            return c;
        }
    }
    // Fall back to the complement of the first constraint.
    let a = avoid[0];
    [1.0 - a[0], 1.0 - a[1], 1.0 - a[2]]
}

fn render_sample<R: Rng>(config: &GenConfig, class: ClassId, id: usize, rng: &mut R) -> ImageSample {
    let size = config.image_size;
    let sf = size as f64;
    let (shape_family, texture_family) = class_families(config.num_classes, class);
    let mut pixels = vec![[0.0f64; 3]; size * size];

    // background: flat gray-ish tone with low-amplitude noise
    let bg: Rgb = [
        rng.random_range(0.3..0.7),
        rng.random_range(0.3..0.7),
        rng.random_range(0.3..0.7),
    ];
    for p in &mut pixels {
        for (ch, v) in p.iter_mut().enumerate() {
            *v = bg[ch] + rng.random_range(-0.06..0.06);
        }
    }

    // distractor clutter: thin line segments and small specks
    let clutter = rng.random_range(2..=5);
    for _ in 0..clutter {
        let color = random_color(rng);
        if rng.random_bool(0.5) {
            let (x0, y0) = (rng.random_range(0.0..sf), rng.random_range(0.0..sf));
            let ang = rng.random_range(0.0..PI);
            let len = rng.random_range(0.12 * sf..0.32 * sf);
            let steps = (len * 2.0) as usize;
            for k in 0..=steps {
                let t = k as f64 / 2.0;
                let (x, y) = (x0 + t * ang.cos(), y0 + t * ang.sin());
                if x >= 0.0 && y >= 0.0 && (x as usize) < size && (y as usize) < size {
                    pixels[y as usize * size + x as usize] = color;
                }
            }
        } else {
            let (cx, cy) = (rng.random_range(0.0..sf), rng.random_range(0.0..sf));
            let r = rng.random_range(1.0..2.5);
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if dx * dx + dy * dy <= r * r {
                        pixels[y * size + x] = color;
                    }
                }
            }
        }
    }

    // object: resample geometry until the foreground area is in range
    let area = (size * size) as f64;
    let mut label = Mask::zeros(size, size);
    let mut placement = Placement {
        cx: sf / 2.0,
        cy: sf / 2.0,
        cos: 1.0,
        sin: 0.0,
    };
    let mut radius = 0.2 * sf;
    for attempt in 0..200 {
        let (s, r) = Shape::sample(shape_family, sf, rng);
        let margin = (r * 0.8).min(sf / 2.0 - 1.0);
        let theta = rng.random_range(0.0..2.0 * PI);
        let p = Placement {
            cx: rng.random_range(margin..sf - margin),
            cy: rng.random_range(margin..sf - margin),
            cos: theta.cos(),
            sin: theta.sin(),
        };
        let m = Mask::from_fn(size, size, |y, x| {
            let (u, v) = p.local(x as f64 + 0.5, y as f64 + 0.5);
            u8::from(s.contains(u, v))
        });
        let frac = m.count_nonzero() as f64 / area;
        if (MIN_FG_FRACTION..=MAX_FG_FRACTION).contains(&frac) || attempt == 199 {
            label = m;
            placement = p;
            radius = r;
            break;
        }
    }

    let primary = distinct_color(rng, &[bg], 0.3);
    let secondary = distinct_color(rng, &[primary], 0.35);
    let tex_angle = rng.random_range(0.0..PI);
    let texture = Texture {
        family: texture_family,
        primary,
        secondary,
        period: rng.random_range(0.08 * sf..0.13 * sf),
        cos: tex_angle.cos(),
        sin: tex_angle.sin(),
        phase: rng.random(),
        extent: radius.max(1.0),
        seed: rng.random(),
    };
    let flat_noise = if texture_family == 0 { 0.04 } else { 0.0 };
    for y in 0..size {
        for x in 0..size {
            if label.get(y, x) == 0 {
                continue;
            }
            let (u, v) = placement.local(x as f64 + 0.5, y as f64 + 0.5);
            let mut c = texture.color_at(u, v, x, y);
            if flat_noise > 0.0 {
                for ch in &mut c {
                    *ch += rng.random_range(-flat_noise..flat_noise);
                }
            }
            pixels[y * size + x] = c;
        }
    }

    for y in 0..size {
        for x in 0..size {
            if label.get(y, x) != 0 {
                label.set(y, x, class);
            }
        }
    }

    let image = Tensor::from_fn(3, size, size, |c, y, x| {
        let v = (pixels[y * size + x][c] + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0);
        quantize(v)
    });
    ImageSample {
        id,
        image,
        label_map: label,
        class_id: class,
    }
}

/// Rounds to the nearest 8-bit level so images survive a PNG round trip exactly.
fn quantize(v: f64) -> f32 {
    (v * 255.0).round() as u8 as f32 / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            num_classes: 16,
            images_per_class: 6,
            image_size: 64,
            seed: 7,
        }
    }

    #[test]
    fn default_config_yields_800_single_class_samples() {
        let ds = generate_dataset(&GenConfig::default()).unwrap();
        assert_eq!(ds.len(), 800);
        for s in &ds.samples {
            let present = s.class_ids_present();
            assert_eq!(present.len(), 1);
            assert!(present.contains(&s.class_id));
            assert!(s.label_map.data().iter().all(|&v| v == 0 || v == s.class_id));
            let frac = s.foreground_fraction();
            assert!((0.05..=0.5).contains(&frac), "sample {} fraction {frac}", s.id);
        }
        for c in 1..=16 {
            assert_eq!(ds.indices_of(c).len(), 50);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&GenConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.samples[0].image, c.samples[0].image);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(generate_dataset(&GenConfig { image_size: 63, ..small() }).is_err());
        assert!(generate_dataset(&GenConfig { num_classes: 18, ..small() }).is_err());
        assert!(generate_dataset(&GenConfig { num_classes: 28, ..small() }).is_err());
    }

    #[test]
    fn class_families_are_unique_and_latin_within_quarters() {
        for n in [4usize, 8, 12, 16, 20, 24] {
            let pairs: BTreeSet<_> = (1..=n as u8).map(|c| class_families(n, c)).collect();
            assert_eq!(pairs.len(), n, "{n} classes");
        }
        // 16 classes: each quarter uses every shape and every texture once
        for q in 0..4u8 {
            let fams: Vec<_> = (1..=4).map(|i| class_families(16, q * 4 + i)).collect();
            let shapes: BTreeSet<_> = fams.iter().map(|f| f.0).collect();
            let textures: BTreeSet<_> = fams.iter().map(|f| f.1).collect();
            assert_eq!(shapes.len(), 4);
            assert_eq!(textures.len(), 4);
        }
    }

    #[test]
    fn image_values_are_8bit_levels() {
        let ds = generate_dataset(&small()).unwrap();
        for v in ds.samples[3].image.data() {
            assert!((0.0..=1.0).contains(v));
            let level = v * 255.0;
            assert!((level - level.round()).abs() < 1e-3);
        }
    }
}
