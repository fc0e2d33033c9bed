//! Seeded toy image-text corpus: 2×2 grids of palette colors with noisy web-style
//! captions, a template captioner producing clean captions, and a frozen
//! "palette" teacher whose image and text embeddings share one feature space.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentPolicy, RasterImage};
use crate::drstore::providers::{
    gaussian_matrix, normalize, words, CaptionProvider, EmbedTarget, ProviderError, TeacherProvider,
};
use crate::drstore::{
    reinforce, PlainPair, ReinforceConfig, ReinforceSummary, StoreError, StoreManifest, StoreWriter,
};
use crate::numerics::Matrix;
use crate::util::mix_seed;

pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [220, 30, 30]),
    ("green", [30, 200, 40]),
    ("blue", [30, 40, 220]),
    ("yellow", [230, 220, 30]),
    ("cyan", [30, 210, 220]),
    ("magenta", [210, 40, 210]),
    ("white", [240, 240, 240]),
    ("black", [15, 15, 15]),
];

pub const CELLS: usize = 4;
const FEATURES: usize = CELLS * PALETTE.len();
/// Squared norm of a fully specified centered feature vector.
const FEATURE_NORM2: f64 = CELLS as f64 * (1.0 - 1.0 / PALETTE.len() as f64);
pub const DEFAULT_TEACHER_MARGIN: f64 = 0.02;
const NOISE_WORDS: [&str; 12] = [
    "nice",
    "cool",
    "wallpaper",
    "stock",
    "free",
    "download",
    "hd",
    "design",
    "pattern",
    "art",
    "new",
    "best",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub count: usize,
    pub image_size: u32,
    /// Probability that a color word in the real caption is wrong.
    pub caption_error: f64,
    /// Probability that the real caption drops one color.
    pub caption_drop: f64,
    /// Per-channel pixel noise amplitude.
    pub pixel_noise: u8,
    /// Cosine drop per mismatched cell for the palette teachers.
    pub teacher_margin: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            count: 1000,
            image_size: 32,
            caption_error: 0.15,
            caption_drop: 0.2,
            pixel_noise: 12,
            teacher_margin: DEFAULT_TEACHER_MARGIN,
            seed: 0,
        }
    }
}

/// Palette index of each cell, in reading order (top left, top right, bottom left, bottom right).
pub type Cells = [usize; CELLS];

pub fn render(cells: &Cells, size: u32, noise: u8, rng: &mut ChaCha8Rng) -> RasterImage {
    let half = size / 2;
    RasterImage::from_fn(size, size, |x, y| {
        let cell = (y >= half) as usize * 2 + (x >= half) as usize;
        let base = PALETTE[cells[cell]].1;
        base.map(|c| {
            let n = if noise > 0 {
                rng.gen_range(-(noise as i16)..=noise as i16)
            } else {
                0
            };
            (c as i16 + n).clamp(0, 255) as u8
        })
    })
}

pub fn clean_caption(cells: &Cells, template: usize) -> String {
    let [a, b, c, d] = cells.map(|i| PALETTE[i].0);
    match template % 5 {
        0 => format!("top left {a}, top right {b}, bottom left {c}, bottom right {d}"),
        1 => format!("a grid showing {a} {b} {c} {d} tiles"),
        2 => format!(
            "upper left {a} tile, upper right {b} tile, lower left {c} tile, lower right {d} tile"
        ),
        3 => format!("a picture of {a} and {b} on top, {c} and {d} on the bottom"),
        _ => format!("tiles colored {a} {b} {c} {d} from top left to bottom right"),
    }
}

fn noisy_caption(cells: &Cells, cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> String {
    let mut colors: Vec<&str> = cells
        .iter()
        .map(|&i| {
            if rng.gen_bool(cfg.caption_error) {
                PALETTE[(i + rng.gen_range(1..PALETTE.len())) % PALETTE.len()].0
            } else {
                PALETTE[i].0
            }
        })
        .collect();
    if rng.gen_bool(cfg.caption_drop) {
        colors.remove(rng.gen_range(0..CELLS));
    }
    let mut out = format!("a photo of {} tiles", colors.join(" "));
    for _ in 0..rng.gen_range(0..3) {
        out.push(' ');
        out.push_str(NOISE_WORDS.choose(rng).unwrap());
    }
    out
}

/// Generated pairs with their true cell colors.
pub fn generate(cfg: &CorpusConfig) -> Vec<(PlainPair, Cells)> {
    (0..cfg.count as u64)
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[id]));
            let cells: Cells = std::array::from_fn(|_| rng.gen_range(0..PALETTE.len()));
            let image = render(&cells, cfg.image_size, cfg.pixel_noise, &mut rng);
            let caption = noisy_caption(&cells, cfg, &mut rng);
            (PlainPair { id, image, caption }, cells)
        })
        .collect()
}

fn nearest_color(rgb: [f64; 3]) -> usize {
    (0..PALETTE.len())
        .min_by(|&a, &b| dist2(rgb, PALETTE[a].1).total_cmp(&dist2(rgb, PALETTE[b].1)))
        .unwrap()
}

fn dist2(a: [f64; 3], b: [u8; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c] as f64).powi(2)).sum()
}

/// Mean color of each quadrant.
pub fn cell_means(img: &RasterImage) -> [[f64; 3]; CELLS] {
    let (w, h) = (img.width(), img.height());
    let mut sums = [[0f64; 3]; CELLS];
    let mut counts = [0f64; CELLS];
    for y in 0..h {
        for x in 0..w {
            let cell = (2 * y >= h) as usize * 2 + (2 * x >= w) as usize;
            let p = img.pixel(x, y);
            for c in 0..3 {
                sums[cell][c] += p[c] as f64;
            }
            counts[cell] += 1.0;
        }
    }
    std::array::from_fn(|i| sums[i].map(|s| s / counts[i].max(1.0)))
}

/// Nearest palette color per quadrant.
pub fn analyze(img: &RasterImage) -> Cells {
    cell_means(img).map(nearest_color)
}

fn color_index(word: &str) -> Option<usize> {
    PALETTE.iter().position(|(name, _)| *name == word)
}

/// Cell colors mentioned by a caption. A "top/upper/bottom/lower" + "left/right"
/// phrase targets the following color; otherwise colors fill cells in reading order.
pub fn parse_caption(text: &str) -> [Option<usize>; CELLS] {
    let mut out = [None; CELLS];
    let tokens: Vec<String> = words(text).collect();
    let mut pending: Option<usize> = None;
    let mut next = 0usize;
    for (i, w) in tokens.iter().enumerate() {
        let row = match w.as_str() {
            "top" | "upper" => Some(0),
            "bottom" | "lower" => Some(1),
            _ => None,
        };
        if let (Some(r), Some(col)) = (row, tokens.get(i + 1)) {
            match col.as_str() {
                "left" => pending = Some(r * 2),
                "right" => pending = Some(r * 2 + 1),
                _ => {}
            }
            continue;
        }
        if let Some(c) = color_index(w) {
            let cell = match pending.take() {
                Some(cell) => cell,
                None => {
                    while next < CELLS && out[next].is_some() {
                        next += 1;
                    }
                    if next == CELLS {
                        continue;
                    }
                    next
                }
            };
            out[cell] = Some(c);
        }
    }
    out
}

/// Describes each image with clean templated captions, like an offline captioner.
#[derive(Clone, Debug, Default)]
pub struct TemplateCaptioner;

impl CaptionProvider for TemplateCaptioner {
    fn captions(
        &self,
        _: u64,
        image: &RasterImage,
        _: &str,
        count: usize,
    ) -> Result<Vec<String>, ProviderError> {
        let cells = analyze(image);
        Ok((0..count).map(|t| clean_caption(&cells, t)).collect())
    }
}

/// Gram-Schmidt over rows, making the projection an isometry when it has at
/// least as many columns as rows. Dependent rows are left as they are.
fn orthonormal_rows(mut m: Matrix<f32>) -> Matrix<f32> {
    let (rows, cols) = m.shape();
    if cols < rows {
        return m.scale(1.0 / (cols as f32).sqrt());
    }
    for i in 0..rows {
        let mut v: Vec<f64> = m.row(i).iter().map(|&x| x as f64).collect();
        for j in 0..i {
            let u = m.row(j);
            let d: f64 = v.iter().zip(u).map(|(a, &b)| a * b as f64).sum();
            v.iter_mut().zip(u).for_each(|(a, &b)| *a -= d * b as f64);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        m.row_mut(i)
            .iter_mut()
            .zip(&v)
            .for_each(|(o, x)| *o = (x / n) as f32);
    }
    m
}

/// Frozen teacher over per-cell palette features, projected by a seeded Gaussian matrix.
pub struct PaletteTeacher {
    dim: usize,
    seed: u64,
    temperature: f64,
    sharpness: f64,
    /// Weight of the constant feature shared by every input.
    shared: f32,
    proj: Matrix<f32>,
}

impl PaletteTeacher {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            temperature: crate::losses::DEFAULT_TEACHER_TEMP,
            sharpness: 1.0 / (2.0 * 60.0f64.powi(2)),
            shared: Self::shared_weight(DEFAULT_TEACHER_MARGIN),
            proj: orthonormal_rows(gaussian_matrix(mix_seed(seed, &[0x7a]), FEATURES + 1, dim)),
        }
    }

    fn shared_weight(margin: f64) -> f32 {
        (1.0 / margin - FEATURE_NORM2).max(0.0).sqrt() as f32
    }

    /// Cosine drop per mismatched cell; smaller values give softer affinities.
    pub fn with_margin(mut self, margin: f64) -> Self {
        self.shared = Self::shared_weight(margin);
        self
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    fn project(&self, mut features: Vec<f32>) -> Result<Vec<f32>, ProviderError> {
        features.push(self.shared);
        let x = Matrix::new(1, FEATURES + 1, features).expect("feature width");
        normalize(x.matmul(&self.proj).expect("projection shape").into_data())
    }

    /// Centered soft palette assignment per cell.
    pub fn image_features(&self, img: &RasterImage) -> Vec<f32> {
        let mut f = Vec::with_capacity(FEATURES);
        for mean in cell_means(img) {
            let logits: Vec<f64> = PALETTE
                .iter()
                .map(|(_, c)| -dist2(mean, *c) * self.sharpness)
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            f.extend(
                exps.iter()
                    .map(|e| (e / z - 1.0 / PALETTE.len() as f64) as f32),
            );
        }
        f
    }

    pub fn text_features(&self, text: &str) -> Vec<f32> {
        let mut f = vec![0f32; FEATURES];
        for (cell, color) in parse_caption(text).iter().enumerate() {
            if let Some(c) = color {
                for k in 0..PALETTE.len() {
                    f[cell * PALETTE.len() + k] =
                        if k == *c { 1.0 } else { 0.0 } - 1.0 / PALETTE.len() as f32;
                }
            }
        }
        f
    }
}

impl TeacherProvider for PaletteTeacher {
    fn name(&self) -> String {
        format!("palette(seed={})", self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }

    fn embed_image(
        &self,
        _: u64,
        _: usize,
        image: &RasterImage,
    ) -> Result<Vec<f32>, ProviderError> {
        self.project(self.image_features(image))
    }

    fn embed_text(&self, _: u64, _: EmbedTarget, text: &str) -> Result<Vec<f32>, ProviderError> {
        self.project(self.text_features(text))
    }
}

/// Seed of the `k`-th palette teacher; fixed so that every store shares the same teachers.
pub fn palette_teacher_seed(k: usize) -> u64 {
    mix_seed(0x7eac_4e75, &[k as u64])
}

/// Generates a corpus and reinforces it into a new store with palette teachers.
pub fn write_reinforced_corpus(
    cfg: &CorpusConfig,
    path: impl AsRef<Path>,
    views: usize,
    captions: usize,
    teacher_dims: &[usize],
    policy: AugmentPolicy,
) -> Result<ReinforceSummary, StoreError> {
    let manifest = StoreManifest::new(teacher_dims.to_vec(), views, captions);
    let teachers: Vec<PaletteTeacher> = teacher_dims
        .iter()
        .enumerate()
        .map(|(k, &d)| {
            PaletteTeacher::new(d, palette_teacher_seed(k)).with_margin(cfg.teacher_margin)
        })
        .collect();
    let refs: Vec<&dyn TeacherProvider> =
        teachers.iter().map(|t| t as &dyn TeacherProvider).collect();
    let mut writer = StoreWriter::create(path, manifest)?;
    let summary = reinforce(
        generate(cfg).into_iter().map(|(p, _)| p),
        Some(&TemplateCaptioner),
        &refs,
        &ReinforceConfig {
            policy,
            seed: mix_seed(cfg.seed, &[0xa6]),
        },
        &mut writer,
    )?;
    writer.finish()?;
    Ok(summary)
}

/// Zero-shot classes: the color of the top-left cell.
pub fn zero_shot_prompts() -> Vec<Vec<String>> {
    PALETTE
        .iter()
        .map(|(name, _)| {
            vec![
                format!("top left {name}"),
                format!("upper left {name} tile"),
            ]
        })
        .collect()
}

pub fn zero_shot_label(cells: &Cells) -> usize {
    cells[0]
}
