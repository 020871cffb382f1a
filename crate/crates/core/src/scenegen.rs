//! Procedural two-domain landscape scenes with paintings, masks and tokens.
//!
//! A scene's geometry (horizon, object shapes, base colors) is drawn from a
//! stream seeded only by the scene seed and object set, so the "photo" and
//! "flat" renderings of the same seed share every region boundary. Photo
//! rendering adds vertical color gradients, 2px feathered edges and
//! per-pixel Gaussian texture (σ = 0.03); flat rendering fills each region
//! with its constant base color.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::painting;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
pub const MAX_TOKENS: usize = 8;
pub const PAD: usize = 0;
pub const MIN_MASK_AREA: usize = 16;
pub const TEXTURE_SIGMA: f64 = 0.03;
const FEATHER: usize = 2;
const LAYOUT_ATTEMPTS: usize = 64;

/// Token strings; token id = position + 1 (id 0 is padding).
pub const VOCABULARY: [&str; 16] = [
    "photo", "flat", "sky", "ground", "sun", "moon", "river", "waterfall", "hut", "castle", "tree",
    "grass", "mountain", "rock", "lake", "field",
];

/// Number of embedding rows, padding included.
pub const EMBEDDING_ROWS: usize = VOCABULARY.len() + 1;

pub fn token_id(name: &str) -> Result<usize> {
    VOCABULARY
        .iter()
        .position(|&v| v == name)
        .map(|i| i + 1)
        .ok_or_else(|| Error::UnknownToken { token: name.to_owned(), valid: VOCABULARY.join(", ") })
}

pub fn token_name(id: usize) -> Option<&'static str> {
    id.checked_sub(1).and_then(|i| VOCABULARY.get(i).copied())
}

pub fn parse_tokens<S: AsRef<str>>(names: &[S]) -> Result<Vec<usize>> {
    names.iter().map(|n| token_id(n.as_ref())).collect()
}

pub fn is_semantic(id: usize) -> bool {
    (3..=VOCABULARY.len()).contains(&id)
}

/// Pads a token sequence to [`MAX_TOKENS`] with [`PAD`].
pub fn pad_tokens(ids: &[usize]) -> Result<Vec<usize>> {
    if ids.len() > MAX_TOKENS {
        return Err(Error::PromptOverflow { count: ids.len(), max: MAX_TOKENS });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i > VOCABULARY.len()) {
        return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
    }
    let mut out = ids.to_vec();
    out.resize(MAX_TOKENS, PAD);
    Ok(out)
}

/// The all-padding sequence used for unconditional predictions.
pub fn null_tokens() -> Vec<usize> {
    vec![PAD; MAX_TOKENS]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Photo,
    Flat,
}

impl Domain {
    pub fn token(self) -> usize {
        match self {
            Domain::Photo => 1,
            Domain::Flat => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Photo => "photo",
            Domain::Flat => "flat",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectMask {
    pub token: usize,
    /// `[64, 64]`, values in {0, 1}.
    pub mask: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    pub domain: Domain,
    /// `[3, 64, 64]` in `[0, 1]`.
    pub image: Tensor,
    /// Metric painting of `image`.
    pub painting: Tensor,
    pub masks: Vec<ObjectMask>,
    /// Domain token followed by object tokens in vocabulary order.
    pub tokens: Vec<usize>,
}

impl SceneSample {
    pub fn mask_of(&self, token: usize) -> Option<&Tensor> {
        self.masks.iter().find(|m| m.token == token).map(|m| &m.mask)
    }

    /// The object tokens, without the domain token.
    pub fn objects(&self) -> &[usize] {
        &self.tokens[1..]
    }
}

fn id(name: &str) -> usize {
    token_id(name).expect("static vocabulary name")
}

/// Back-to-front paint order.
const PAINT_ORDER: [&str; 14] = [
    "sky", "ground", "mountain", "field", "grass", "lake", "river", "waterfall", "rock", "hut",
    "castle", "tree", "sun", "moon",
];

fn base_color(name: &str) -> [f64; 3] {
    match name {
        "sky" => [0.45, 0.65, 0.92],
        "ground" => [0.36, 0.58, 0.26],
        "sun" => [0.98, 0.84, 0.22],
        "moon" => [0.88, 0.88, 0.78],
        "river" => [0.18, 0.38, 0.82],
        "waterfall" => [0.74, 0.86, 0.95],
        "hut" => [0.55, 0.34, 0.18],
        "castle" => [0.62, 0.6, 0.64],
        "tree" => [0.1, 0.38, 0.12],
        "grass" => [0.32, 0.78, 0.2],
        "mountain" => [0.48, 0.42, 0.46],
        "rock" => [0.42, 0.4, 0.37],
        "lake" => [0.14, 0.46, 0.66],
        "field" => [0.86, 0.74, 0.3],
        _ => [0.5, 0.5, 0.5],
    }
}

#[derive(Clone, Debug)]
enum Shape {
    Rows { from: i32, to: i32 },
    Disc { cx: f64, cy: f64, r: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { x0: i32, y0: i32, x1: i32, y1: i32 },
    /// Isosceles triangle with apex above a horizontal base.
    Peak { ax: f64, ay: f64, base_y: f64, half_width: f64 },
    River { top: i32, x0: f64, amp: f64, period: f64, phase: f64, drift: f64, half_width: f64 },
}

impl Shape {
    fn contains(&self, x: i32, y: i32) -> bool {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        match *self {
            Shape::Rows { from, to } => (from..to).contains(&y),
            Shape::Disc { cx, cy, r } => (fx - cx).powi(2) + (fy - cy).powi(2) <= r * r,
            Shape::Ellipse { cx, cy, rx, ry } => ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2) <= 1.0,
            Shape::Rect { x0, y0, x1, y1 } => (x0..x1).contains(&x) && (y0..y1).contains(&y),
            Shape::Peak { ax, ay, base_y, half_width } => {
                fy <= base_y && fy >= ay && (fx - ax).abs() <= half_width * (fy - ay) / (base_y - ay)
            }
            Shape::River { top, x0, amp, period, phase, drift, half_width } => {
                if y < top {
                    return false;
                }
                let d = fy - top as f64;
                let frac = d / (IMAGE_SIZE as f64 - top as f64);
                let center = x0 + amp * (std::f64::consts::TAU * d / period + phase).sin() + drift * d;
                (fx - center).abs() <= half_width * (0.6 + 0.6 * frac)
            }
        }
    }
}

fn check_object_set(objects: &[usize]) -> Result<()> {
    for &o in objects {
        if !is_semantic(o) {
            let name = token_name(o).map(str::to_owned).unwrap_or_else(|| format!("#{o}"));
            return Err(Error::UnknownToken {
                token: name,
                valid: VOCABULARY[2..].join(", "),
            });
        }
    }
    let has = |n: &str| objects.contains(&id(n));
    if !has("sky") && !has("ground") {
        return Err(Error::Layout("scene needs sky or ground".into()));
    }
    for n in ["sun", "moon", "mountain"] {
        if has(n) && !has("sky") {
            return Err(Error::Layout(format!("{n} needs sky")));
        }
    }
    for n in ["mountain", "river", "waterfall", "hut", "castle", "tree", "grass", "rock", "lake", "field"] {
        if has(n) && !has("ground") {
            return Err(Error::Layout(format!("{n} needs ground")));
        }
    }
    Ok(())
}

fn place(name: &str, horizon: i32, rng: &mut ChaCha8Rng) -> Vec<Shape> {
    let s = IMAGE_SIZE as i32;
    let hz = horizon as f64;
    let mut f = |lo: f64, hi: f64| rng.random_range(lo..hi);
    match name {
        "sky" => vec![Shape::Rows { from: 0, to: horizon }],
        "ground" => vec![Shape::Rows { from: horizon, to: s }],
        "mountain" => {
            let h = f(10.0, 18.0);
            vec![Shape::Peak { ax: f(12.0, 52.0), ay: hz - h, base_y: hz + 1.0, half_width: f(12.0, 20.0) }]
        }
        "sun" | "moon" => {
            let r = if name == "sun" { f(6.0, 8.0) } else { f(5.5, 7.5) };
            let cy_hi = (hz - r - 1.0).max(r + 1.5);
            vec![Shape::Disc { cx: f(r + 2.0, 62.0 - r), cy: f(r + 1.0, cy_hi), r }]
        }
        "field" => {
            let top = horizon + f(1.0, 4.0) as i32;
            vec![Shape::Rows { from: top, to: top + f(6.0, 10.0) as i32 }]
        }
        "grass" => vec![Shape::Rows { from: s - f(6.0, 10.0) as i32, to: s }],
        "lake" => {
            let (rx, ry) = (f(9.0, 14.0), f(4.0, 6.5));
            vec![Shape::Ellipse { cx: f(rx + 1.0, 63.0 - rx), cy: f((hz + ry + 1.0).min(60.0 - ry), 63.0 - ry), rx, ry }]
        }
        "river" => vec![Shape::River {
            top: horizon,
            x0: f(14.0, 50.0),
            amp: f(2.0, 6.0),
            period: f(20.0, 40.0),
            phase: f(0.0, std::f64::consts::TAU),
            drift: f(-0.4, 0.4),
            half_width: f(4.0, 6.0),
        }],
        "waterfall" => {
            let (x0, w) = (f(4.0, 52.0) as i32, f(6.0, 9.0) as i32);
            vec![Shape::Rect { x0, y0: horizon, x1: x0 + w, y1: (horizon + f(14.0, 22.0) as i32).min(s) }]
        }
        "rock" => {
            let (rx, ry) = (f(4.0, 6.0), f(3.0, 4.5));
            vec![Shape::Ellipse { cx: f(rx + 1.0, 63.0 - rx), cy: f((hz + ry + 1.0).min(62.0 - ry), 63.0 - ry), rx, ry }]
        }
        "hut" => {
            let (w, h) = (f(12.0, 16.0) as i32, f(8.0, 11.0) as i32);
            let x0 = f(1.0, (s - w - 1) as f64) as i32;
            let base = f((horizon + h + 6).min(s - 2) as f64, (s - 1) as f64) as i32;
            let top = base - h;
            vec![
                Shape::Rect { x0, y0: top, x1: x0 + w, y1: base },
                Shape::Peak {
                    ax: x0 as f64 + w as f64 / 2.0,
                    ay: top as f64 - f(5.0, 7.0),
                    base_y: top as f64 + 0.5,
                    half_width: w as f64 / 2.0 + 2.0,
                },
            ]
        }
        "castle" => {
            let (w, h) = (f(15.0, 21.0) as i32, f(12.0, 16.0) as i32);
            let x0 = f(1.0, (s - w - 1) as f64) as i32;
            let base = f((horizon + h + 4).min(s - 1) as f64, s as f64) as i32;
            let top = base - h;
            let mut shapes = vec![Shape::Rect { x0, y0: top, x1: x0 + w, y1: base }];
            for m in [x0, x0 + w / 2 - 1, x0 + w - 3] {
                shapes.push(Shape::Rect { x0: m, y0: top - 3, x1: m + 3, y1: top });
            }
            shapes
        }
        "tree" => {
            let r = f(5.0, 7.5);
            let cx = f(r + 1.0, 63.0 - r);
            let base = f((horizon + 12).min(s - 2) as f64, (s - 1) as f64) as i32;
            let trunk_top = base - 6;
            vec![
                Shape::Rect { x0: cx as i32 - 1, y0: trunk_top, x1: cx as i32 + 2, y1: base },
                Shape::Disc { cx, cy: trunk_top as f64 - r + 2.0, r },
            ]
        }
        _ => vec![],
    }
}

/// Per-pixel label (index into `names`) after painting back to front.
struct Layout {
    names: Vec<&'static str>,
    labels: Vec<usize>,
    colors: Vec<[f64; 3]>,
}

impl Layout {
    fn area(&self, k: usize) -> usize {
        self.labels.iter().filter(|&&l| l == k).count()
    }
}

fn sample_layout(objects: &[usize], rng: &mut ChaCha8Rng) -> Result<Layout> {
    let names: Vec<&'static str> = PAINT_ORDER
        .iter()
        .copied()
        .filter(|n| objects.contains(&id(n)))
        .collect();
    let has = |n: &str| names.contains(&n);
    let n = IMAGE_SIZE;
    for _ in 0..LAYOUT_ATTEMPTS {
        let horizon = match (has("sky"), has("ground")) {
            (true, true) => rng.random_range(22..37),
            (true, false) => n as i32,
            _ => 0,
        };
        let shapes: Vec<Vec<Shape>> = names.iter().map(|nm| place(nm, horizon, rng)).collect();
        let colors: Vec<[f64; 3]> = names
            .iter()
            .map(|nm| base_color(nm).map(|c| (c + rng.random_range(-0.06..0.06)).clamp(0.02, 0.98)))
            .collect();
        let mut labels = vec![usize::MAX; n * n];
        for (k, sh) in shapes.iter().enumerate() {
            for y in 0..n {
                for x in 0..n {
                    if sh.iter().any(|s| s.contains(x as i32, y as i32)) {
                        labels[y * n + x] = k;
                    }
                }
            }
        }
        let layout = Layout { names: names.clone(), labels, colors };
        let covered = layout.labels.iter().all(|&l| l != usize::MAX);
        if covered && (0..names.len()).all(|k| layout.area(k) >= MIN_MASK_AREA) {
            return Ok(layout);
        }
    }
    Err(Error::Layout(format!(
        "no layout with every object visible (≥{MIN_MASK_AREA} px) after {LAYOUT_ATTEMPTS} attempts for {names:?}"
    )))
}

fn box_blur_replicate(plane: &[f64], n: usize, r: usize) -> Vec<f64> {
    let ri = r as isize;
    let clamp = |v: isize| v.clamp(0, n as isize - 1) as usize;
    let area = ((2 * r + 1) * (2 * r + 1)) as f64;
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut s = 0.0;
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    s += plane[clamp(y as isize + dy) * n + clamp(x as isize + dx)];
                }
            }
            out[y * n + x] = s / area;
        }
    }
    out
}

fn render(layout: &Layout, domain: Domain, texture_seed: u64) -> Tensor {
    let n = IMAGE_SIZE;
    let plane = n * n;
    let mut img = vec![0.0; 3 * plane];
    match domain {
        Domain::Flat => {
            for (i, &l) in layout.labels.iter().enumerate() {
                for c in 0..3 {
                    img[c * plane + i] = layout.colors[l][c];
                }
            }
        }
        Domain::Photo => {
            let mut rng = ChaCha8Rng::seed_from_u64(texture_seed);
            let gradients: Vec<f64> = layout.names.iter().map(|_| rng.random_range(-0.3..0.3)).collect();
            for k in 0..layout.names.len() {
                let onehot: Vec<f64> = layout.labels.iter().map(|&l| (l == k) as u8 as f64).collect();
                let soft = box_blur_replicate(&onehot, n, FEATHER);
                for (i, &w) in soft.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let shade = 1.0 + gradients[k] * ((i / n) as f64 / (n - 1) as f64 - 0.5);
                    for c in 0..3 {
                        img[c * plane + i] += w * layout.colors[k][c] * shade;
                    }
                }
            }
            let noise = Normal::new(0.0, TEXTURE_SIGMA).expect("valid sigma");
            for v in img.iter_mut() {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[3, n, n], img).expect("image shape")
}

pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders one scene. `objects` are semantic token ids; order is ignored.
pub fn generate_scene(seed: u64, domain: Domain, objects: &[usize]) -> Result<SceneSample> {
    check_object_set(objects)?;
    let mut sorted = objects.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() + 1 > MAX_TOKENS {
        return Err(Error::PromptOverflow { count: sorted.len() + 1, max: MAX_TOKENS });
    }
    let set_key = sorted.iter().fold(0u64, |acc, &t| acc | (1 << t));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, set_key));
    let layout = sample_layout(&sorted, &mut rng)?;
    let image = render(&layout, domain, mix_seed(seed, 0x7e57));
    let painting = painting::paint_sdedit(&image)?;
    let masks = sorted
        .iter()
        .map(|&t| {
            let k = layout.names.iter().position(|&n| id(n) == t).expect("object in layout");
            let m = layout.labels.iter().map(|&l| (l == k) as u8 as f64).collect();
            ObjectMask { token: t, mask: Tensor::new(&[IMAGE_SIZE, IMAGE_SIZE], m).expect("mask shape") }
        })
        .collect();
    let mut tokens = vec![domain.token()];
    tokens.extend(&sorted);
    Ok(SceneSample { seed, domain, image, painting, masks, tokens })
}

pub fn generate_scene_named(seed: u64, domain: Domain, objects: &[&str]) -> Result<SceneSample> {
    generate_scene(seed, domain, &parse_tokens(objects)?)
}

/// Mean over channels and pixels of the 3×3 local variance.
pub fn local_variance(image: &Tensor) -> f64 {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let vals: Vec<f64> = (0..9)
                    .map(|k| d[c * h * w + (y + k / 3 - 1) * w + x + k % 3 - 1])
                    .collect();
                let mean = vals.iter().sum::<f64>() / 9.0;
                total += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
                count += 1;
            }
        }
    }
    total / count as f64
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

impl Dataset {
    pub fn all(&self) -> impl Iterator<Item = &SceneSample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const EXTRAS: [&str; 12] = [
    "sun", "moon", "river", "waterfall", "hut", "castle", "tree", "grass", "mountain", "rock", "lake", "field",
];
const MAX_EXTRAS: usize = MAX_TOKENS - 3;

fn dataset_sample(index: usize, seed: u64) -> SceneSample {
    for attempt in 0u64.. {
        let s = mix_seed(seed, (index as u64) << 8 | attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let domain = if index < 2 {
            [Domain::Photo, Domain::Flat][index]
        } else if rng.random_bool(0.5) {
            Domain::Photo
        } else {
            Domain::Flat
        };
        let mut chosen: Vec<&str> = Vec::new();
        if index < EXTRAS.len() / 2 {
            chosen.extend([EXTRAS[2 * index], EXTRAS[2 * index + 1]]);
        }
        let k = rng.random_range(chosen.len()..=MAX_EXTRAS);
        let mut pool: Vec<&str> = EXTRAS.iter().copied().filter(|e| !chosen.contains(e)).collect();
        while chosen.len() < k {
            let j = rng.random_range(0..pool.len());
            chosen.push(pool.swap_remove(j));
        }
        let mut names = vec!["sky", "ground"];
        names.extend(chosen);
        if let Ok(scene) = generate_scene_named(s, domain, &names) {
            return scene;
        }
    }
    unreachable!("attempt counter is unbounded")
}

/// Generates `n` scenes and splits them by `ratios` (train, val, test).
pub fn make_dataset(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::invalid(format!("need at least 10 scenes to cover the vocabulary, got {n}")));
    }
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let samples: Vec<SceneSample> = {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(|i| dataset_sample(i, seed)).collect()
    };
    let n_train = (n as f64 * a).round() as usize;
    let n_val = ((n as f64 * b).round() as usize).min(n - n_train);
    let mut it = samples.into_iter();
    let train: Vec<_> = it.by_ref().take(n_train).collect();
    let val: Vec<_> = it.by_ref().take(n_val).collect();
    let test: Vec<_> = it.collect();
    Ok(Dataset { train, val, test })
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskEntry {
    label: String,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    split: String,
    index: usize,
    seed: u64,
    domain: Domain,
    tokens: Vec<String>,
    image: String,
    painting: String,
    masks: Vec<MaskEntry>,
}

/// Writes one PNG per image, painting and mask, plus a JSON sidecar per
/// sample.
pub fn write_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (split, samples) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        for (i, s) in samples.iter().enumerate() {
            let stem = format!("{split}_{i:05}");
            let image = format!("{stem}_image.png");
            let painting = format!("{stem}_painting.png");
            imageio::save_png(dir.join(&image), &s.image)?;
            imageio::save_png(dir.join(&painting), &s.painting)?;
            let mut masks = Vec::new();
            for m in &s.masks {
                let label = token_name(m.token).expect("mask token").to_owned();
                let file = format!("{stem}_mask_{label}.png");
                std::fs::write(dir.join(&file), imageio::encode_mask_png(&m.mask)?)?;
                masks.push(MaskEntry { label, file });
            }
            let sidecar = Sidecar {
                split: split.into(),
                index: i,
                seed: s.seed,
                domain: s.domain,
                tokens: s.tokens.iter().map(|&t| token_name(t).expect("token").to_owned()).collect(),
                image,
                painting,
                masks,
            };
            std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&sidecar)?)?;
        }
    }
    Ok(())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut sidecars: Vec<Sidecar> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let is_sample = ["train_", "val_", "test_"].iter().any(|p| stem.starts_with(p));
        if is_sample && path.extension().is_some_and(|e| e == "json") {
            sidecars.push(serde_json::from_slice(&std::fs::read(&path)?)?);
        }
    }
    sidecars.sort_by(|a, b| (a.split.as_str(), a.index).cmp(&(b.split.as_str(), b.index)));
    let mut data = Dataset::default();
    for sc in sidecars {
        let masks = sc
            .masks
            .iter()
            .map(|m| {
                Ok(ObjectMask { token: token_id(&m.label)?, mask: imageio::load_mask_png(dir.join(&m.file))? })
            })
            .collect::<Result<Vec<_>>>()?;
        let sample = SceneSample {
            seed: sc.seed,
            domain: sc.domain,
            image: imageio::load_png(dir.join(&sc.image))?,
            painting: imageio::load_png(dir.join(&sc.painting))?,
            masks,
            tokens: parse_tokens(&sc.tokens)?,
        };
        match sc.split.as_str() {
            "train" => data.train.push(sample),
            "val" => data.val.push(sample),
            "test" => data.test.push(sample),
            other => return Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
    if data.is_empty() {
        return Err(Error::invalid(format!("no samples found in {}", dir.display())));
    }
    Ok(data)
}
