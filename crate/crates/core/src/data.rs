//! Procedural 16x16 images with structured attributes, an oracle that reads
//! the attributes back from pixels, and dataset persistence.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::prompt::{Group, Prompt, Vocabulary, MAX_PROMPT_LEN, VOCAB_SIZE};
use crate::rng::{stream, Rng};

pub const SIDE: usize = 16;
pub const PIXELS: usize = SIDE * SIDE;

const MARK_VALUE: f32 = 0.8;
const SPECKLE_VALUE: f32 = 1.0;
const SPECKLE_COUNT: usize = 12;
const HOLE: usize = 4;
const NOISE_STD: f32 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Cross,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Size {
    Small,
    Medium,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Intensity {
    Dim,
    Medium,
    Bright,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Texture {
    Solid,
    Striped,
    Noisy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Background {
    Dark,
    Grey,
}

pub const SHAPES: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Cross, Shape::Triangle];
pub const SIZES: [Size; 3] = [Size::Small, Size::Medium, Size::Large];

/// Border marks in vocabulary order: four edge bars then four corners.
pub const MARKS: usize = 8;
const MARK_BASE: usize = 16;
const CORRUPTION_BASE: usize = 11;

impl Shape {
    fn token(self) -> usize {
        self as usize
    }
}

impl Size {
    fn radius(self) -> f32 {
        match self {
            Size::Small => 2.5,
            Size::Medium => 3.5,
            Size::Large => 4.5,
        }
    }
}

impl Intensity {
    pub fn value(self) -> f32 {
        match self {
            Intensity::Dim => 0.3,
            Intensity::Medium => 0.55,
            Intensity::Bright => 0.8,
        }
    }
}

impl Background {
    pub fn value(self) -> f32 {
        match self {
            Background::Dark => -0.8,
            Background::Grey => -0.3,
        }
    }
}

/// Everything needed to render one image, up to instance randomness.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Attributes {
    pub shape: Shape,
    pub size: Size,
    pub intensity: Intensity,
    pub texture: Texture,
    pub background: Background,
    pub marks: [bool; MARKS],
    /// blur, speckle, hole
    pub corruptions: [bool; 3],
}

impl Default for Attributes {
    fn default() -> Self {
        Self {
            shape: Shape::Circle,
            size: Size::Medium,
            intensity: Intensity::Medium,
            texture: Texture::Solid,
            background: Background::Dark,
            marks: [false; MARKS],
            corruptions: [false; 3],
        }
    }
}

fn id(name: &str) -> usize {
    Vocabulary::index(name).expect("phrase table")
}

impl Attributes {
    /// Canonical caption: shape, optional size and intensity (medium is
    /// implicit), texture, background, marks, corruptions.
    pub fn prompt(&self) -> Result<Prompt> {
        let mut t = vec![self.shape.token()];
        match self.size {
            Size::Small => t.push(id("small")),
            Size::Large => t.push(id("large")),
            Size::Medium => {}
        }
        match self.intensity {
            Intensity::Dim => t.push(id("dim")),
            Intensity::Bright => t.push(id("bright")),
            Intensity::Medium => {}
        }
        t.push(match self.texture {
            Texture::Solid => id("solid"),
            Texture::Striped => id("striped"),
            Texture::Noisy => id("noisy"),
        });
        t.push(match self.background {
            Background::Dark => id("dark"),
            Background::Grey => id("grey"),
        });
        t.extend((0..MARKS).filter(|&m| self.marks[m]).map(|m| MARK_BASE + m));
        t.extend((0..3).filter(|&c| self.corruptions[c]).map(|c| CORRUPTION_BASE + c));
        Prompt::new(t.into_iter().map(|x| x as u8).collect())
    }

    /// Reads attributes from a prompt. Missing groups take their defaults;
    /// two phrases from one exclusive group are rejected.
    pub fn from_prompt(prompt: &Prompt) -> Result<Self> {
        let mut a = Attributes::default();
        let mut seen: Vec<Group> = Vec::new();
        for &tok in prompt.tokens() {
            let tok = tok as usize;
            let group = Vocabulary::group(tok);
            let exclusive = !matches!(group, Group::Mark | Group::Corruption);
            if exclusive && seen.contains(&group) {
                return Err(Error::Prompt(format!(
                    "`{prompt}` names more than one {group:?} phrase"
                )));
            }
            seen.push(group);
            match Vocabulary::name(tok) {
                "circle" => a.shape = Shape::Circle,
                "square" => a.shape = Shape::Square,
                "cross" => a.shape = Shape::Cross,
                "triangle" => a.shape = Shape::Triangle,
                "small" => a.size = Size::Small,
                "large" => a.size = Size::Large,
                "dim" => a.intensity = Intensity::Dim,
                "bright" => a.intensity = Intensity::Bright,
                "solid" => a.texture = Texture::Solid,
                "striped" => a.texture = Texture::Striped,
                "noisy" => a.texture = Texture::Noisy,
                "dark" => a.background = Background::Dark,
                "grey" => a.background = Background::Grey,
                _ if group == Group::Mark => a.marks[tok - MARK_BASE] = true,
                _ => a.corruptions[tok - CORRUPTION_BASE] = true,
            }
        }
        Ok(a)
    }
}

/// Shape mask before texture, `true` where the shape covers a pixel.
pub fn shape_mask(shape: Shape, size: Size) -> [bool; PIXELS] {
    let r = size.radius();
    let mut m = [false; PIXELS];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let dx = x as f32 - 7.5;
            let dy = y as f32 - 7.5;
            m[y * SIDE + x] = match shape {
                Shape::Circle => dx * dx + dy * dy <= (r + 0.3) * (r + 0.3),
                Shape::Square => dx.abs() <= r - 0.5 && dy.abs() <= r - 0.5,
                Shape::Cross => (dx.abs() - dy.abs()).abs() <= 1.0 && dx.abs() <= r && dy.abs() <= r,
                Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0 + 0.3,
            };
        }
    }
    m
}

/// Pixel rectangles `(y0, y1, x0, x1)` (inclusive) of the eight marks.
pub fn mark_region(mark: usize) -> (usize, usize, usize, usize) {
    match mark {
        0 => (0, 1, 4, 11),
        1 => (14, 15, 4, 11),
        2 => (4, 11, 0, 1),
        3 => (4, 11, 14, 15),
        4 => (0, 1, 0, 1),
        5 => (0, 1, 14, 15),
        6 => (14, 15, 0, 1),
        7 => (14, 15, 14, 15),
        _ => panic!("mark index {mark} out of range"),
    }
}

/// Rows rendered at reduced contrast in the striped texture.
pub fn is_stripe_row(y: usize) -> bool {
    (y / 2) % 2 == 1
}

/// Renders one image. Instance randomness (noise, speckle positions, hole
/// placement) comes from `rng`.
pub fn render(a: &Attributes, rng: &mut Rng) -> Vec<f32> {
    let bg = a.background.value();
    let fg = a.intensity.value();
    let mask = shape_mask(a.shape, a.size);
    let noise = Normal::new(0.0f32, NOISE_STD).expect("valid std");
    let mut img = vec![bg; PIXELS];
    for (i, px) in img.iter_mut().enumerate() {
        if !mask[i] {
            continue;
        }
        *px = match a.texture {
            Texture::Solid => fg,
            Texture::Striped if is_stripe_row(i / SIDE) => bg + 0.25 * (fg - bg),
            Texture::Striped => fg,
            Texture::Noisy => (fg + noise.sample(rng)).clamp(-0.9, 0.9),
        };
    }
    for m in (0..MARKS).filter(|&m| a.marks[m]) {
        let (y0, y1, x0, x1) = mark_region(m);
        for y in y0..=y1 {
            for x in x0..=x1 {
                img[y * SIDE + x] = MARK_VALUE;
            }
        }
    }
    if a.corruptions[0] {
        img = blur(&img);
    }
    if a.corruptions[1] {
        let mut placed = 0;
        while placed < SPECKLE_COUNT {
            let i = rng.gen_range(0..PIXELS);
            if img[i] != SPECKLE_VALUE {
                img[i] = SPECKLE_VALUE;
                placed += 1;
            }
        }
    }
    if a.corruptions[2] {
        let y0 = rng.gen_range(3..=13 - HOLE);
        let x0 = rng.gen_range(3..=13 - HOLE);
        for y in y0..y0 + HOLE {
            for x in x0..x0 + HOLE {
                img[y * SIDE + x] = 0.0;
            }
        }
    }
    img
}

/// Separable `[1, 2, 1] / 4` blur with edge replication.
pub fn blur(img: &[f32]) -> Vec<f32> {
    let pass = |src: &[f32], dy: isize, dx: isize| -> Vec<f32> {
        let at = |y: isize, x: isize| {
            let y = y.clamp(0, SIDE as isize - 1) as usize;
            let x = x.clamp(0, SIDE as isize - 1) as usize;
            src[y * SIDE + x]
        };
        let mut out = vec![0.0; PIXELS];
        for y in 0..SIDE as isize {
            for x in 0..SIDE as isize {
                out[y as usize * SIDE + x as usize] =
                    0.25 * at(y - dy, x - dx) + 0.5 * at(y, x) + 0.25 * at(y + dy, x + dx);
            }
        }
        out
    };
    pass(&pass(img, 0, 1), 1, 0)
}

/// Dataset-level sampling knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub corruption_prob: f64,
    pub mark_prob: f64,
    /// Marks are capped so every caption fits the prompt length.
    pub max_marks: usize,
    pub style: Style,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corruption_prob: 0.3,
            mark_prob: 0.1,
            max_marks: 2,
            style: Style::Base,
        }
    }
}

/// Rendering style. Non-base styles keep captions unchanged, which is what
/// makes a teacher fine-tuned on them a shifted host.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Style {
    Base,
    /// Pixel values negated.
    Inverted,
    /// Every shape drawn with stripes, whatever the caption says.
    Striped,
}

impl std::str::FromStr for Style {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Style::Base),
            "inverted" => Ok(Style::Inverted),
            "striped" => Ok(Style::Striped),
            _ => Err(Error::Usage(format!("unknown style `{s}` (base|inverted|striped)"))),
        }
    }
}

pub fn sample_attributes(cfg: &DataConfig, rng: &mut Rng) -> Attributes {
    let mut a = Attributes {
        shape: SHAPES[rng.gen_range(0..4)],
        size: SIZES[rng.gen_range(0..3)],
        intensity: [Intensity::Dim, Intensity::Medium, Intensity::Bright][rng.gen_range(0..3)],
        texture: [Texture::Solid, Texture::Striped, Texture::Noisy][rng.gen_range(0..3)],
        background: [Background::Dark, Background::Grey][rng.gen_range(0..2)],
        ..Attributes::default()
    };
    let mut marks = 0;
    for m in 0..MARKS {
        if rng.gen_bool(cfg.mark_prob) && marks < cfg.max_marks {
            a.marks[m] = true;
            marks += 1;
        }
    }
    if rng.gen_bool(cfg.corruption_prob) {
        a.corruptions[rng.gen_range(0..3)] = true;
    }
    a
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub attributes: Attributes,
    pub prompt: Prompt,
    pub pixels: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

/// Generates `count` examples; example `i` depends only on `(seed, i)`.
pub fn make_dataset(count: usize, seed: u64, cfg: &DataConfig) -> Result<Dataset> {
    let examples = (0..count)
        .map(|i| {
            let mut rng = stream(seed, "data", i as u64);
            let attributes = sample_attributes(cfg, &mut rng);
            let prompt = attributes.prompt()?;
            let mut drawn = attributes.clone();
            if cfg.style == Style::Striped {
                drawn.texture = Texture::Striped;
            }
            let mut pixels = render(&drawn, &mut rng);
            if cfg.style == Style::Inverted {
                pixels.iter_mut().for_each(|v| *v = -*v);
            }
            Ok(Example {
                attributes,
                prompt,
                pixels,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { examples })
}

const MAGIC: &[u8; 8] = b"SUNDATA1";

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Binary layout: magic, record count (u64 LE), then per record a
    /// length byte, eight token bytes and 256 LE f32 pixels. Attributes are
    /// rebuilt from the caption on load.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.examples.len() as u64).to_le_bytes())?;
        for ex in &self.examples {
            let mut tok = [0u8; MAX_PROMPT_LEN];
            tok[..ex.prompt.len()].copy_from_slice(ex.prompt.tokens());
            w.write_all(&[ex.prompt.len() as u8])?;
            w.write_all(&tok)?;
            for v in &ex.pixels {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let mut n = [0u8; 8];
        r.read_exact(&mut n)?;
        let n = u64::from_le_bytes(n) as usize;
        let mut examples = Vec::with_capacity(n.min(1 << 20));
        let mut rec = vec![0u8; 1 + MAX_PROMPT_LEN + 4 * PIXELS];
        for _ in 0..n {
            r.read_exact(&mut rec)?;
            let len = rec[0] as usize;
            if len > MAX_PROMPT_LEN {
                return Err(Error::Format(format!("prompt length {len} in dataset record")));
            }
            let prompt = Prompt::new(rec[1..1 + len].to_vec())?;
            let pixels: Vec<f32> = rec[1 + MAX_PROMPT_LEN..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if pixels.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format("non-finite pixel in dataset record".into()));
            }
            examples.push(Example {
                attributes: Attributes::from_prompt(&prompt)?,
                prompt,
                pixels,
            });
        }
        Ok(Self { examples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Binary PGM of a row-major image in `[-1, 1]`, optionally upscaled.
pub fn write_pgm(path: &Path, pixels: &[f32], side: usize, scale: usize) -> Result<()> {
    let out = side * scale;
    let mut buf = format!("P5\n{out} {out}\n255\n").into_bytes();
    for y in 0..out {
        for x in 0..out {
            let v = pixels[(y / scale) * side + x / scale];
            buf.push((((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8);
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Lays out images in a grid and writes one PGM.
pub fn write_pgm_grid(path: &Path, images: &[Vec<f32>], cols: usize, scale: usize) -> Result<()> {
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols).max(1);
    let (w, h) = (cols * (SIDE + 1) - 1, rows * (SIDE + 1) - 1);
    let mut canvas = vec![-1.0f32; w * h];
    for (i, img) in images.iter().enumerate() {
        let (oy, ox) = ((i / cols) * (SIDE + 1), (i % cols) * (SIDE + 1));
        for y in 0..SIDE {
            for x in 0..SIDE {
                canvas[(oy + y) * w + ox + x] = img[y * SIDE + x];
            }
        }
    }
    let (ow, oh) = (w * scale, h * scale);
    let mut buf = format!("P5\n{ow} {oh}\n255\n").into_bytes();
    for y in 0..oh {
        for x in 0..ow {
            let v = canvas[(y / scale) * w + x / scale];
            buf.push((((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8);
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Attribute oracle

fn percentile(values: &mut [f32], q: f32) -> f32 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let i = ((values.len() - 1) as f32 * q).round() as usize;
    values[i]
}

const INTENSITIES: [Intensity; 3] = [Intensity::Dim, Intensity::Medium, Intensity::Bright];
const BACKGROUNDS: [Background; 2] = [Background::Dark, Background::Grey];

/// One noise-free reference rendering of the shape area.
struct Template {
    shape: usize,
    size: usize,
    intensity: usize,
    striped: bool,
    mask: [bool; PIXELS],
    pixels: Vec<f32>,
}

/// Reference renderings for every (shape, size, intensity, solid|striped,
/// background), sharp and blurred.
fn templates(blurred: bool) -> &'static [Template] {
    static SETS: std::sync::OnceLock<[Vec<Template>; 2]> = std::sync::OnceLock::new();
    let sets = SETS.get_or_init(|| {
        let build = |blurred: bool| {
            let mut out = Vec::new();
            let mut rng = stream(0, "templates", 0);
            for (si, &shape) in SHAPES.iter().enumerate() {
                for (zi, &size) in SIZES.iter().enumerate() {
                    for (ii, &intensity) in INTENSITIES.iter().enumerate() {
                        for striped in [false, true] {
                            for &background in &BACKGROUNDS {
                                let a = Attributes {
                                    shape,
                                    size,
                                    intensity,
                                    texture: if striped { Texture::Striped } else { Texture::Solid },
                                    background,
                                    corruptions: [blurred, false, false],
                                    ..Attributes::default()
                                };
                                out.push(Template {
                                    shape: si,
                                    size: zi,
                                    intensity: ii,
                                    striped,
                                    mask: shape_mask(shape, size),
                                    pixels: render(&a, &mut rng),
                                });
                            }
                        }
                    }
                }
            }
            out
        };
        [build(false), build(true)]
    });
    &sets[blurred as usize]
}

/// Raw image statistics the oracle scores are computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurements {
    pub background: f32,
    pub speckles: usize,
    /// Fraction of near-zero pixels in the most zero-like 4x4 window.
    pub hole_fraction: f32,
    /// Best template error in the shape area, sharp and blurred references.
    pub fit_sharp: f32,
    pub fit_blurred: f32,
    pub mark_contrast: [f32; MARKS],
    /// Best template error per shape, size, intensity and solid/striped.
    pub shape_fit: [f32; 4],
    pub size_fit: [f32; 3],
    pub intensity_fit: [f32; 3],
    pub stripe_fit: [f32; 2],
    /// RMS residual against the best template inside its shape.
    pub residual: f32,
}

impl Measurements {
    pub fn blurred(&self) -> bool {
        self.fit_blurred < self.fit_sharp
    }
}

const HOLE_TOL: f32 = 0.12;
const SPECKLE_MIN: f32 = 0.95;
const SPECKLE_RISE: f32 = 0.4;

pub fn measure(img: &[f32]) -> Measurements {
    assert_eq!(img.len(), PIXELS, "oracle expects a 16x16 image");
    let at = |y: usize, x: usize| img[y * SIDE + x];
    let background = percentile(&mut img.to_vec(), 0.1);

    let mut ignore = [false; PIXELS];
    let mut speckles = 0;
    for y in 0..SIDE {
        for x in 0..SIDE {
            let v = at(y, x);
            if v < SPECKLE_MIN {
                continue;
            }
            let (mut sum, mut n) = (0.0, 0.0);
            for ny in y.saturating_sub(1)..=(y + 1).min(SIDE - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(SIDE - 1) {
                    if (ny, nx) != (y, x) {
                        sum += at(ny, nx);
                        n += 1.0;
                    }
                }
            }
            if v - sum / n > SPECKLE_RISE {
                ignore[y * SIDE + x] = true;
                speckles += 1;
            }
        }
    }

    let mut best = (0.0f32, 0, 0);
    for y0 in 3..=13 - HOLE {
        for x0 in 3..=13 - HOLE {
            let mut n = 0;
            for y in y0..y0 + HOLE {
                for x in x0..x0 + HOLE {
                    n += (at(y, x).abs() < HOLE_TOL) as usize;
                }
            }
            let frac = n as f32 / (HOLE * HOLE) as f32;
            if frac > best.0 {
                best = (frac, y0, x0);
            }
        }
    }
    let hole_fraction = best.0;
    if hole_fraction >= HOLE_PRESENT {
        for y in best.1..best.1 + HOLE {
            for x in best.2..best.2 + HOLE {
                ignore[y * SIDE + x] = true;
            }
        }
    }

    let mut mark_contrast = [0.0; MARKS];
    for (m, c) in mark_contrast.iter_mut().enumerate() {
        let (y0, y1, x0, x1) = mark_region(m);
        let (mut sum, mut n) = (0.0, 0.0);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if !ignore[y * SIDE + x] {
                    sum += at(y, x);
                    n += 1.0;
                }
            }
        }
        if n > 0.0 {
            *c = (sum / n - background) / (MARK_VALUE - background).max(0.1);
        }
    }

    // Template fits over the shape area, which marks never reach.
    let area: Vec<usize> = (3..=12)
        .flat_map(|y| (3..=12).map(move |x| y * SIDE + x))
        .filter(|&i| !ignore[i])
        .collect();
    let fit = |t: &Template| {
        area.iter().map(|&i| (img[i] - t.pixels[i]).powi(2)).sum::<f32>() / area.len().max(1) as f32
    };
    let best_of = |set: &'static [Template]| {
        set.iter()
            .map(|t| (fit(t), t))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("template set is not empty")
    };
    let (fit_sharp, _) = best_of(templates(false));
    let (fit_blurred, _) = best_of(templates(true));
    let set = templates(fit_blurred < fit_sharp);
    let mut shape_fit = [f32::INFINITY; 4];
    let mut size_fit = [f32::INFINITY; 3];
    let mut intensity_fit = [f32::INFINITY; 3];
    let mut stripe_fit = [f32::INFINITY; 2];
    let mut winner = (f32::INFINITY, &set[0]);
    for t in set {
        let e = fit(t);
        shape_fit[t.shape] = shape_fit[t.shape].min(e);
        size_fit[t.size] = size_fit[t.size].min(e);
        intensity_fit[t.intensity] = intensity_fit[t.intensity].min(e);
        stripe_fit[t.striped as usize] = stripe_fit[t.striped as usize].min(e);
        if e < winner.0 {
            winner = (e, t);
        }
    }
    let inside: Vec<usize> = area.iter().copied().filter(|&i| winner.1.mask[i]).collect();
    let residual = (inside.iter().map(|&i| (img[i] - winner.1.pixels[i]).powi(2)).sum::<f32>()
        / inside.len().max(1) as f32)
        .sqrt();

    Measurements {
        background,
        speckles,
        hole_fraction,
        fit_sharp,
        fit_blurred,
        mark_contrast,
        shape_fit,
        size_fit,
        intensity_fit,
        stripe_fit,
        residual,
    }
}

/// Per-phrase presence scores in `[0, 1]`; a phrase is present when its score
/// exceeds [`ORACLE_THRESHOLD`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeReport {
    pub scores: [f32; VOCAB_SIZE],
    pub measurements: Measurements,
}

pub const ORACLE_THRESHOLD: f32 = 0.5;

// Decision points, calibrated on clean and corrupted renders.
const HOLE_PRESENT: f32 = 0.85;
const GREY_SPLIT: f32 = -0.55;
const NOISE_SPLIT: f32 = 0.07;
const NOISE_SPLIT_BLURRED: f32 = 0.03;
const SPECKLE_SPLIT: f32 = 3.0;
const MARK_SPLIT: f32 = 0.5;
/// Temperature of the softmin over template errors.
const FIT_TEMPERATURE: f32 = 0.004;

/// Maps a measurement to a score that crosses 0.5 exactly at `split`.
fn ramp(value: f32, split: f32, width: f32) -> f32 {
    ((value - split) / width + 0.5).clamp(0.0, 1.0)
}

/// Softmin over errors, so the best alternative scores above one half
/// exactly when it wins by a clear margin.
fn softmin<const N: usize>(errors: [f32; N]) -> [f32; N] {
    let lo = errors.iter().cloned().fold(f32::INFINITY, f32::min);
    let w = errors.map(|e| (-(e - lo) / FIT_TEMPERATURE).exp());
    let z: f32 = w.iter().sum();
    w.map(|v| v / z)
}

impl AttributeReport {
    pub fn present(&self, phrase: usize) -> bool {
        self.scores[phrase] > ORACLE_THRESHOLD
    }

    pub fn detected(&self) -> Vec<usize> {
        (0..VOCAB_SIZE).filter(|&i| self.present(i)).collect()
    }

    /// True when every phrase of `prompt` is detected.
    pub fn covers(&self, prompt: &Prompt) -> bool {
        prompt.tokens().iter().all(|&t| self.present(t as usize))
    }

    /// True when the detected set equals the phrases of `prompt`.
    pub fn matches(&self, prompt: &Prompt) -> bool {
        self.covers(prompt) && self.detected().iter().all(|&d| prompt.contains(d))
    }
}

/// Reads attributes back from pixels.
pub fn attribute_oracle(img: &[f32]) -> AttributeReport {
    let m = measure(img);
    let mut s = [0.0f32; VOCAB_SIZE];
    let grey = ramp(m.background, GREY_SPLIT, 0.25);
    s[id("grey")] = grey;
    s[id("dark")] = 1.0 - grey;
    s[id("speckle")] = ramp(m.speckles as f32, SPECKLE_SPLIT, 4.0);
    s[id("hole")] = ramp(m.hole_fraction, HOLE_PRESENT - 0.03, 0.5);
    s[id("blur")] = softmin([m.fit_sharp, m.fit_blurred])[1];
    for (k, &c) in m.mark_contrast.iter().enumerate() {
        s[MARK_BASE + k] = ramp(c, MARK_SPLIT, 0.5);
    }
    s[..4].copy_from_slice(&softmin(m.shape_fit));
    let size = softmin(m.size_fit);
    s[id("small")] = size[0];
    s[id("large")] = size[2];
    let intensity = softmin(m.intensity_fit);
    s[id("dim")] = intensity[0];
    s[id("bright")] = intensity[2];
    let split = if m.blurred() { NOISE_SPLIT_BLURRED } else { NOISE_SPLIT };
    let noisy = ramp(m.residual, split, split);
    let stripes = softmin(m.stripe_fit);
    s[id("noisy")] = noisy;
    s[id("striped")] = stripes[1].min(1.0 - noisy);
    s[id("solid")] = stripes[0].min(1.0 - noisy);
    AttributeReport { scores: s, measurements: m }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn accuracy(corruption_prob: f64, n: u64) -> f64 {
        let cfg = DataConfig {
            corruption_prob,
            ..Default::default()
        };
        let ok = (0..n)
            .filter(|&i| {
                let mut rng = stream(5, "oracle-test", i);
                let a = sample_attributes(&cfg, &mut rng);
                attribute_oracle(&render(&a, &mut rng)).matches(&a.prompt().unwrap())
            })
            .count();
        ok as f64 / n as f64
    }

    #[test]
    fn oracle_reads_clean_renders() {
        assert!(accuracy(0.0, 600) >= 0.99);
    }

    #[test]
    fn oracle_reads_corrupted_renders() {
        assert!(accuracy(1.0, 600) >= 0.90);
    }

    #[test]
    fn renders_stay_in_range_and_are_deterministic() {
        let ds = make_dataset(64, 9, &DataConfig::default()).unwrap();
        let again = make_dataset(64, 9, &DataConfig::default()).unwrap();
        assert_eq!(ds, again);
        for ex in &ds.examples {
            assert_eq!(ex.pixels.len(), PIXELS);
            assert!(ex.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!(ex.prompt.len() <= MAX_PROMPT_LEN);
            assert_eq!(Attributes::from_prompt(&ex.prompt).unwrap(), ex.attributes);
        }
    }

    #[test]
    fn example_depends_only_on_its_index() {
        let small = make_dataset(5, 3, &DataConfig::default()).unwrap();
        let large = make_dataset(20, 3, &DataConfig::default()).unwrap();
        assert_eq!(small.examples[..], large.examples[..5]);
    }

    #[test]
    fn conflicting_prompt_is_rejected() {
        let p = Prompt::parse("circle square").unwrap();
        assert!(Attributes::from_prompt(&p).is_err());
        let p = Prompt::parse("circle topbar leftbar blur hole").unwrap();
        let a = Attributes::from_prompt(&p).unwrap();
        assert!(a.marks[0] && a.marks[2] && a.corruptions[0] && a.corruptions[2]);
    }

    #[test]
    fn styles_change_pixels_not_captions() {
        let base = make_dataset(8, 1, &DataConfig::default()).unwrap();
        let inv = make_dataset(8, 1, &DataConfig { style: Style::Inverted, ..Default::default() }).unwrap();
        for (a, b) in base.examples.iter().zip(&inv.examples) {
            assert_eq!(a.prompt, b.prompt);
            assert!(a.pixels.iter().zip(&b.pixels).all(|(x, y)| *x == -*y));
        }
    }

    #[test]
    fn dataset_round_trips_through_bytes() {
        let ds = make_dataset(10, 2, &DataConfig::default()).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        assert_eq!(Dataset::read_from(&buf[..]).unwrap(), ds);
        assert!(Dataset::read_from(&buf[..20]).is_err());
        buf[0] = b'X';
        assert!(matches!(Dataset::read_from(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = vec![0.3f32; PIXELS];
        assert!(blur(&img).iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn suppressible_content_is_detected_when_added() {
        for phrase in Vocabulary::suppressible() {
            let base = Prompt::parse("square large solid dark").unwrap();
            let prompt = if Vocabulary::group(phrase) == Group::Texture {
                Prompt::parse(&format!("square large {} dark", Vocabulary::name(phrase))).unwrap()
            } else {
                base.with(phrase).unwrap()
            };
            let a = Attributes::from_prompt(&prompt).unwrap();
            let r = attribute_oracle(&render(&a, &mut stream(0, "s", phrase as u64)));
            assert!(r.present(phrase), "{prompt}");
            let clean = attribute_oracle(&render(&Attributes::from_prompt(&base).unwrap(), &mut stream(0, "s", 0)));
            assert!(!clean.present(phrase), "{prompt}");
        }
    }
}
