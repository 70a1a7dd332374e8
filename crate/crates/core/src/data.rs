//! Procedural image/caption corpora.
//!
//! Classes are (color, shape) pairs named like `"red circle"`; captions use
//! the template `"a photo of a <name>"`. A [`Style`] controls background,
//! fill texture and jitter, so the same classes can be drawn in a clean
//! pretraining style and in a shifted benchmark style.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: u32 = 0;
pub const PAD_WORD: &str = "<pad>";
pub const TEMPLATE: &str = "a photo of a";
pub const IMAGE_SIZE: usize = 32;
pub const DEFAULT_SHOTS: usize = 16;

pub const COLORS: [(&str, [f32; 3]); 10] = [
    ("red", [0.90, 0.12, 0.12]),
    ("orange", [0.96, 0.55, 0.08]),
    ("yellow", [0.95, 0.90, 0.15]),
    ("green", [0.15, 0.75, 0.20]),
    ("blue", [0.15, 0.30, 0.95]),
    ("teal", [0.05, 0.60, 0.60]),
    ("purple", [0.58, 0.20, 0.80]),
    ("pink", [0.98, 0.50, 0.75]),
    ("brown", [0.50, 0.30, 0.12]),
    ("white", [0.95, 0.95, 0.95]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Circle,
        Shape::Square,
        Shape::Triangle,
        Shape::Ring,
        Shape::Cross,
        Shape::Diamond,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Ring => "ring",
            Shape::Cross => "cross",
            Shape::Diamond => "diamond",
        }
    }

    /// Membership test in shape-local coordinates scaled so the shape's
    /// outer radius is 1.
    fn contains(self, x: f32, y: f32) -> bool {
        match self {
            Shape::Circle => x * x + y * y <= 1.0,
            Shape::Ring => {
                let r2 = x * x + y * y;
                (0.3..=1.0).contains(&r2)
            }
            Shape::Square => x.abs().max(y.abs()) <= 0.8,
            Shape::Diamond => x.abs() + y.abs() <= 1.0,
            Shape::Triangle => y <= 0.5 && x.abs() <= (y + 1.0) / 3f32.sqrt(),
            Shape::Cross => {
                (x.abs() <= 0.3 && y.abs() <= 1.0) || (y.abs() <= 0.3 && x.abs() <= 1.0)
            }
        }
    }
}

// ---- vocabulary -------------------------------------------------------------

/// Word-level vocabulary. Id 0 is the pad token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut v = Self {
            words: Vec::new(),
            index: HashMap::new(),
        };
        v.push(PAD_WORD);
        for w in words {
            v.push(w.as_ref());
        }
        v
    }

    fn push(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_string(), self.words.len() as u32);
            self.words.push(w.to_string());
        }
    }

    /// Template words, every color and every shape.
    pub fn standard() -> Self {
        let template = TEMPLATE.split_whitespace();
        let colors = COLORS.iter().map(|(n, _)| *n);
        let shapes = Shape::ALL.iter().map(|s| s.name());
        Self::new(template.chain(colors).chain(shapes))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Vocabulary(word.to_string()))
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let words: Vec<&str> = ids
            .iter()
            .map(|&i| {
                self.words
                    .get(i as usize)
                    .map(String::as_str)
                    .ok_or_else(|| Error::Vocabulary(format!("id {i}")))
            })
            .collect::<Result<_>>()?;
        Ok(words.join(" "))
    }

    /// `"a photo of a <name>"`
    pub fn caption(&self, name: &str) -> Result<Vec<u32>> {
        self.tokenize(&format!("{TEMPLATE} {name}"))
    }

    pub fn template_len() -> usize {
        TEMPLATE.split_whitespace().count()
    }
}

// ---- classes and rendering --------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptClass {
    pub id: u32,
    pub name: String,
    pub color: [f32; 3],
    pub shape: Shape,
    /// Outer radius range as a fraction of the image side.
    pub size: (f32, f32),
}

impl ConceptClass {
    pub fn new(id: u32, color: &str, shape: Shape) -> Result<Self> {
        let rgb = COLORS
            .iter()
            .find(|(n, _)| *n == color)
            .map(|(_, c)| *c)
            .ok_or_else(|| Error::Vocabulary(color.to_string()))?;
        Ok(Self {
            id,
            name: format!("{color} {}", shape.name()),
            color: rgb,
            shape,
            size: (0.22, 0.34),
        })
    }
}

fn classes_from(colors: &[&str], shapes: &[Shape]) -> Vec<ConceptClass> {
    let mut out = Vec::new();
    for c in colors {
        for &s in shapes {
            let id = out.len() as u32;
            out.push(ConceptClass::new(id, c, s).expect("built-in color"));
        }
    }
    out
}

/// Every color/shape combination: the pretraining world.
pub fn world_classes() -> Vec<ConceptClass> {
    let colors: Vec<&str> = COLORS.iter().map(|(n, _)| *n).collect();
    classes_from(&colors, &Shape::ALL)
}

/// The 20-class benchmark dataset.
pub fn benchmark_classes() -> Vec<ConceptClass> {
    classes_from(
        &["red", "orange", "yellow", "green", "blue"],
        &[Shape::Circle, Shape::Square, Shape::Triangle, Shape::Ring],
    )
}

/// A 16-class transfer target sharing no color with the benchmark.
pub fn transfer_classes() -> Vec<ConceptClass> {
    classes_from(
        &["teal", "purple", "pink", "brown"],
        &[Shape::Cross, Shape::Diamond, Shape::Circle, Shape::Square],
    )
}

/// Rendering style.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Style {
    /// Per-channel uniform jitter applied to the class color.
    pub color_jitter: f32,
    /// Background is a two-color gradient instead of a dark plain field.
    pub busy_background: bool,
    /// Fill the shape with stripes that let the background through.
    pub striped: bool,
    /// Maximum rotation in radians.
    pub max_rotation: f32,
    /// Std of additive pixel noise.
    pub pixel_noise: f32,
    /// Multiplier on the class size range.
    pub scale: f32,
}

impl Style {
    pub const CLEAN: Style = Style {
        color_jitter: 0.05,
        busy_background: false,
        striped: false,
        max_rotation: 0.3,
        pixel_noise: 0.02,
        scale: 1.0,
    };

    pub const SHIFTED: Style = Style {
        color_jitter: 0.12,
        busy_background: false,
        striped: true,
        max_rotation: 0.8,
        pixel_noise: 0.05,
        scale: 0.8,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `32 x 32 x 3`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub class: u32,
    pub caption: Vec<u32>,
}

/// Mixes a base seed with a path of integers (splitmix64 finaliser).
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut h = seed ^ 0x5851_f42d_4c95_7f2d;
    for &p in path {
        h = h.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// Draws one image of `class`. Deterministic in `(class, style, seed)`.
pub fn render(class: &ConceptClass, style: &Style, vocab: &Vocabulary, seed: u64) -> Result<Sample> {
    let caption = vocab.caption(&class.name)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = IMAGE_SIZE;
    let (lo, hi) = class.size;
    let radius = rng.random_range(lo..hi) * style.scale * s as f32;
    let margin = radius / s as f32;
    let cx = rng.random_range(margin.min(0.45)..(1.0 - margin).max(0.55)) * s as f32;
    let cy = rng.random_range(margin.min(0.45)..(1.0 - margin).max(0.55)) * s as f32;
    let angle = rng.random_range(-style.max_rotation..=style.max_rotation);
    let (sin, cos) = angle.sin_cos();
    let mut fg = class.color;
    for c in &mut fg {
        *c = (*c + rng.random_range(-style.color_jitter..=style.color_jitter)).clamp(0.0, 1.0);
    }
    let (bg_a, bg_b) = if style.busy_background {
        let a: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.8));
        let b: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.8));
        (a, b)
    } else {
        let v = rng.random_range(0.08..0.22);
        ([v; 3], [v; 3])
    };
    let stripe_period = rng.random_range(3.0..5.0f32);
    let stripe_phase = rng.random_range(0.0..stripe_period);
    let mut px = vec![0.0f32; s * s * 3];
    for y in 0..s {
        for x in 0..s {
            let fx = x as f32 + 0.5 - cx;
            let fy = y as f32 + 0.5 - cy;
            let lx = (cos * fx + sin * fy) / radius;
            let ly = (-sin * fx + cos * fy) / radius;
            let t = (x + y) as f32 / (2 * s) as f32;
            let bg: [f32; 3] = std::array::from_fn(|c| bg_a[c] * (1.0 - t) + bg_b[c] * t);
            let inside = class.shape.contains(lx, ly);
            let on_stripe = !style.striped
                || ((lx * radius + stripe_phase).rem_euclid(stripe_period) < 0.6 * stripe_period);
            let base = (y * s + x) * 3;
            for c in 0..3 {
                let v = if inside && on_stripe { fg[c] } else { bg[c] };
                let n: f32 = StandardNormal.sample(&mut rng);
                px[base + c] = (v + style.pixel_noise * n).clamp(0.0, 1.0);
            }
        }
    }
    Ok(Sample {
        image: Tensor::new(vec![s, s, 3], px)?,
        class: class.id,
        caption,
    })
}

// ---- datasets and splits ----------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Class id to class-name token ids, recovered from the captions.
    pub fn class_names(&self) -> BTreeMap<u32, Vec<u32>> {
        let skip = Vocabulary::template_len();
        let mut out = BTreeMap::new();
        for s in &self.samples {
            out.entry(s.class)
                .or_insert_with(|| s.caption[skip.min(s.caption.len())..].to_vec());
        }
        out
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.class_names().into_keys().collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

/// `per_class` renders of every class, grouped by class in input order.
pub fn make_dataset(
    classes: &[ConceptClass],
    per_class: usize,
    style: &Style,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(classes.len() * per_class);
    for c in classes {
        for k in 0..per_class {
            let s = derive_seed(seed, &[c.id as u64, k as u64]);
            samples.push(render(c, style, vocab, s)?);
        }
    }
    Ok(Dataset { samples })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub base: Vec<u32>,
    pub novel: Vec<u32>,
    pub shots: usize,
    pub seed: u64,
}

impl SplitSpec {
    /// Shuffles `classes` with `seed` and takes the first `n_base` as base.
    pub fn random(classes: &[u32], n_base: usize, shots: usize, seed: u64) -> Result<Self> {
        if n_base == 0 || n_base >= classes.len() {
            return Err(Error::Parameter(format!(
                "need 0 < base classes < {}, got {n_base}",
                classes.len()
            )));
        }
        let mut ids = classes.to_vec();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xba5e])));
        let novel = ids.split_off(n_base);
        ids.sort_unstable();
        let mut novel = novel;
        novel.sort_unstable();
        Ok(Self {
            base: ids,
            novel,
            shots,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::Parameter("shots must be positive".into()));
        }
        if self.base.iter().any(|c| self.novel.contains(c)) {
            return Err(Error::Parameter("base and novel classes overlap".into()));
        }
        Ok(())
    }
}

/// Sample indices into the source dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub base_train: Vec<usize>,
    pub base_test: Vec<usize>,
    pub novel_test: Vec<usize>,
}

pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class.entry(s.class).or_default().push(i);
    }
    let mut out = Split {
        base_train: Vec::new(),
        base_test: Vec::new(),
        novel_test: Vec::new(),
    };
    for &c in &spec.base {
        let mut idx = by_class.get(&c).cloned().unwrap_or_default();
        if idx.len() < spec.shots {
            return Err(Error::Insufficient(format!(
                "class {c} has {} samples, {} shots requested",
                idx.len(),
                spec.shots
            )));
        }
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[c as u64])));
        let test = idx.split_off(spec.shots);
        idx.sort_unstable();
        out.base_train.extend(idx);
        out.base_test.extend(test);
    }
    out.base_test.sort_unstable();
    for &c in &spec.novel {
        out.novel_test.extend(by_class.get(&c).into_iter().flatten());
    }
    out.novel_test.sort_unstable();
    Ok(out)
}

// ---- domain shifts ----------------------------------------------------------

/// Label-preserving pixel transforms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shift {
    Identity,
    /// Additive N(0, sigma^2) noise, sigma in `[0, 1]`.
    GaussianNoise { sigma: f32, seed: u64 },
    /// Rotation of RGB about the gray axis, degrees in `[0, 360]`.
    HueRotate { degrees: f32 },
    /// Sobel edge magnitude replicated over channels.
    Sketch,
    /// Box blur, radius in `0..=4`.
    Blur { radius: usize },
}

impl Shift {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Shift::GaussianNoise { sigma, .. } if !(0.0..=1.0).contains(&sigma) => Err(
                Error::Parameter(format!("noise sigma {sigma} outside [0, 1]")),
            ),
            Shift::HueRotate { degrees } if !(0.0..=360.0).contains(&degrees) => Err(
                Error::Parameter(format!("hue rotation {degrees} outside [0, 360]")),
            ),
            Shift::Blur { radius } if radius > 4 => {
                Err(Error::Parameter(format!("blur radius {radius} outside 0..=4")))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Shift::Identity => "identity".into(),
            Shift::GaussianNoise { sigma, .. } => format!("noise{sigma}"),
            Shift::HueRotate { degrees } => format!("hue{degrees}"),
            Shift::Sketch => "sketch".into(),
            Shift::Blur { radius } => format!("blur{radius}"),
        }
    }
}

/// Applies `shift` to a copy of `sample`. `index` decorrelates noise across
/// samples.
pub fn domain_shift(sample: &Sample, shift: &Shift, index: u64) -> Result<Sample> {
    shift.validate()?;
    let shape = sample.image.shape().to_vec();
    let (h, w) = (shape[0], shape[1]);
    let src = sample.image.data();
    let data: Vec<f32> = match *shift {
        Shift::Identity => src.to_vec(),
        Shift::GaussianNoise { sigma, seed } => {
            if sigma == 0.0 {
                src.to_vec()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[index]));
                src.iter()
                    .map(|&v| {
                        let n: f32 = StandardNormal.sample(&mut rng);
                        (v + sigma * n).clamp(0.0, 1.0)
                    })
                    .collect()
            }
        }
        Shift::HueRotate { degrees } => hue_rotate(src, degrees),
        Shift::Sketch => sketch(src, h, w),
        Shift::Blur { radius } => blur(src, h, w, radius),
    };
    Ok(Sample {
        image: Tensor::new(shape, data)?,
        class: sample.class,
        caption: sample.caption.clone(),
    })
}

/// Rodrigues rotation about `(1,1,1)/sqrt(3)`.
fn hue_rotate(src: &[f32], degrees: f32) -> Vec<f32> {
    let t = (degrees as f64).to_radians();
    let (s, c) = t.sin_cos();
    let k = 1.0 / 3f64.sqrt();
    let one_third = (1.0 - c) / 3.0;
    // R = c I + s [k]x + (1 - c) k kᵀ
    let m = [
        [c + one_third, one_third - s * k, one_third + s * k],
        [one_third + s * k, c + one_third, one_third - s * k],
        [one_third - s * k, one_third + s * k, c + one_third],
    ];
    let mut out = Vec::with_capacity(src.len());
    for px in src.chunks(3) {
        for row in &m {
            let v: f64 = row.iter().zip(px).map(|(a, &b)| a * b as f64).sum();
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    out
}

fn gray(src: &[f32], h: usize, w: usize) -> Vec<f32> {
    (0..h * w)
        .map(|i| (src[i * 3] + src[i * 3 + 1] + src[i * 3 + 2]) / 3.0)
        .collect()
}

fn sketch(src: &[f32], h: usize, w: usize) -> Vec<f32> {
    let g = gray(src, h, w);
    let at = |y: isize, x: isize| -> f32 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        g[y * w + x]
    };
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1);
            let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1);
            // dark strokes on a white page
            let v = (1.0 - (gx * gx + gy * gy).sqrt() / 4.0).clamp(0.0, 1.0);
            out.extend([v; 3]);
        }
    }
    out
}

fn blur(src: &[f32], h: usize, w: usize, r: usize) -> Vec<f32> {
    if r == 0 {
        return src.to_vec();
    }
    let r = r as isize;
    let mut out = vec![0.0; src.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = [0.0f32; 3];
            let mut n = 0.0;
            for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                    let i = (yy as usize * w + xx as usize) * 3;
                    for c in 0..3 {
                        acc[c] += src[i + c];
                    }
                    n += 1.0;
                }
            }
            let o = (y as usize * w + x as usize) * 3;
            for c in 0..3 {
                out[o + c] = acc[c] / n;
            }
        }
    }
    out
}

// ---- MPDS file format -------------------------------------------------------

pub const MPDS_MAGIC: &[u8; 4] = b"MPDS";
pub const MPDS_VERSION: u32 = 1;

/// Layout (little-endian): magic, version, sample count, height, width,
/// channels; then per sample the class id, caption length, caption ids and
/// `height * width * channels` f32 pixels.
pub fn write_dataset<W: Write>(out: &mut W, ds: &Dataset) -> Result<()> {
    let (h, w, c) = match ds.samples.first() {
        Some(s) => (s.image.shape()[0], s.image.shape()[1], s.image.shape()[2]),
        None => (IMAGE_SIZE, IMAGE_SIZE, 3),
    };
    let mut buf = Vec::new();
    buf.extend_from_slice(MPDS_MAGIC);
    for v in [MPDS_VERSION, ds.len() as u32, h as u32, w as u32, c as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for s in &ds.samples {
        if s.image.shape() != [h, w, c] {
            return Err(Error::shape("dataset image", s.image.shape(), &[h, w, c]));
        }
        buf.extend_from_slice(&s.class.to_le_bytes());
        buf.extend_from_slice(&(s.caption.len() as u32).to_le_bytes());
        for t in &s.caption {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        for v in s.image.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "{} truncated at byte {} (wanted {n} more)",
                self.what, self.pos
            ))),
        }
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| {
            Error::Format(format!("{} length overflow", self.what))
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "{} has {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )))
        }
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let m = self.take(4).map_err(|_| {
            Error::Format(format!("{} too short for a header", self.what))
        })?;
        if m != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let found = self.u32()?;
        if found != version {
            return Err(Error::Version {
                found,
                expected: version,
            });
        }
        Ok(())
    }
}

pub fn read_dataset<R: Read>(input: &mut R) -> Result<Dataset> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut cur = Cursor::new(&buf, "dataset file");
    cur.magic(MPDS_MAGIC, MPDS_VERSION)?;
    let n = cur.u32()? as usize;
    let (h, w, c) = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Format(format!("zero image dimension {h}x{w}x{c}")));
    }
    let mut samples = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let class = cur.u32()?;
        let len = cur.u32()? as usize;
        let mut caption = Vec::with_capacity(len.min(1 << 10));
        for _ in 0..len {
            caption.push(cur.u32()?);
        }
        let px = cur.f32s(h * w * c)?;
        samples.push(Sample {
            image: Tensor::new(vec![h, w, c], px)?,
            class,
            caption,
        });
    }
    cur.finish()?;
    Ok(Dataset { samples })
}

pub fn save_dataset(path: &std::path::Path, ds: &Dataset) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(&mut f, ds)?;
    f.flush()?;
    Ok(())
}

pub fn load_dataset(path: &std::path::Path) -> Result<Dataset> {
    read_dataset(&mut std::fs::File::open(path)?)
}
