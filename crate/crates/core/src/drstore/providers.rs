//! Sources of synthetic captions and teacher embeddings used by [`super::reinforce`].

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

use super::StoreError;
use crate::augment::{apply_augmentation, AugmentationParams, RasterImage};
use crate::numerics::mmeb::EmbeddingFile;
use crate::numerics::Matrix;
use crate::util::{fnv1a64, mix_seed};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{0}")]
pub struct ProviderError(pub String);

/// Which input of a sample an embedding belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EmbedTarget {
    /// Augmented image view `j`.
    ImageView(usize),
    RealCaption,
    /// Synthetic caption `s`.
    SynCaption(usize),
}

impl EmbedTarget {
    /// Row id used in MMEB teacher files: `sample_id << 16 | kind << 12 | index`,
    /// with kind 0 = image view, 1 = real caption, 2 = synthetic caption.
    pub fn row_id(self, sample_id: u64) -> u64 {
        let (kind, index) = match self {
            EmbedTarget::ImageView(j) => (0u64, j as u64),
            EmbedTarget::RealCaption => (1, 0),
            EmbedTarget::SynCaption(s) => (2, s as u64),
        };
        debug_assert!(sample_id < 1 << 48 && index < 1 << 12);
        sample_id << 16 | kind << 12 | index
    }

    pub fn from_row_id(row: u64) -> Option<(u64, Self)> {
        let index = (row & 0xfff) as usize;
        let target = match (row >> 12) & 0xf {
            0 => EmbedTarget::ImageView(index),
            1 if index == 0 => EmbedTarget::RealCaption,
            2 => EmbedTarget::SynCaption(index),
            _ => return None,
        };
        Some((row >> 16, target))
    }
}

pub trait CaptionProvider: Send + Sync {
    /// Returns exactly `count` synthetic captions for the sample.
    fn captions(
        &self,
        id: u64,
        image: &RasterImage,
        real_caption: &str,
        count: usize,
    ) -> Result<Vec<String>, ProviderError>;
}

/// A frozen teacher producing unit-norm embeddings.
pub trait TeacherProvider: Send + Sync {
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn temperature(&self) -> f64 {
        crate::losses::DEFAULT_TEACHER_TEMP
    }
    /// Embeds augmented view `j` of sample `id`.
    fn embed_image(
        &self,
        id: u64,
        j: usize,
        image: &RasterImage,
    ) -> Result<Vec<f32>, ProviderError>;
    fn embed_text(
        &self,
        id: u64,
        target: EmbedTarget,
        text: &str,
    ) -> Result<Vec<f32>, ProviderError>;
}

/// Captions read from JSONL lines `{"id": u64, "captions": [..]}`.
#[derive(Debug, Default)]
pub struct JsonlCaptions {
    by_id: HashMap<u64, Vec<String>>,
}

#[derive(Deserialize)]
struct CaptionLine {
    id: u64,
    captions: Vec<String>,
}

impl JsonlCaptions {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        let mut by_id = HashMap::new();
        for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: CaptionLine = serde_json::from_str(&line)
                .map_err(|e| StoreError::Input(format!("{}:{}: {e}", path.display(), n + 1)))?;
            by_id.insert(parsed.id, parsed.captions);
        }
        Ok(Self { by_id })
    }

    pub fn from_map(by_id: HashMap<u64, Vec<String>>) -> Self {
        Self { by_id }
    }
}

impl CaptionProvider for JsonlCaptions {
    fn captions(
        &self,
        id: u64,
        _: &RasterImage,
        _: &str,
        count: usize,
    ) -> Result<Vec<String>, ProviderError> {
        let all = self
            .by_id
            .get(&id)
            .ok_or_else(|| ProviderError(format!("no captions for sample {id}")))?;
        if all.len() < count {
            return Err(ProviderError(format!(
                "sample {id} has {} captions, need {count}",
                all.len()
            )));
        }
        Ok(all[..count].to_vec())
    }
}

/// Precomputed teacher embeddings from one MMEB file (rank 2, f32 or bf16).
pub struct MmebTeacher {
    name: String,
    temperature: f64,
    file: EmbeddingFile,
    rows: HashMap<u64, usize>,
}

impl MmebTeacher {
    /// Fails with `EmbeddingDimMismatch` naming the file when its row width differs from `expected_dim`.
    pub fn open(
        path: impl AsRef<Path>,
        expected_dim: Option<usize>,
        temperature: f64,
    ) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        let file = EmbeddingFile::from_bytes(&bytes)
            .map_err(|e| StoreError::Input(format!("{}: {e}", path.display())))?;
        if file.dims.len() != 2 {
            return Err(StoreError::Input(format!(
                "{}: expected a rank-2 tensor",
                path.display()
            )));
        }
        if let Some(d) = expected_dim {
            if file.row_width() != d {
                return Err(StoreError::EmbeddingDimMismatch {
                    source_name: path.display().to_string(),
                    expected: d,
                    got: file.row_width(),
                });
            }
        }
        let rows = file
            .row_ids
            .iter()
            .enumerate()
            .map(|(i, &r)| (r, i))
            .collect();
        Ok(Self {
            name: path.display().to_string(),
            temperature,
            file,
            rows,
        })
    }

    fn lookup(&self, id: u64, target: EmbedTarget) -> Result<Vec<f32>, ProviderError> {
        let row = self.rows.get(&target.row_id(id)).ok_or_else(|| {
            ProviderError(format!("{}: no row for sample {id} {target:?}", self.name))
        })?;
        Ok(self.file.row(*row))
    }
}

impl TeacherProvider for MmebTeacher {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn dim(&self) -> usize {
        self.file.row_width()
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }

    fn embed_image(&self, id: u64, j: usize, _: &RasterImage) -> Result<Vec<f32>, ProviderError> {
        self.lookup(id, EmbedTarget::ImageView(j))
    }

    fn embed_text(&self, id: u64, target: EmbedTarget, _: &str) -> Result<Vec<f32>, ProviderError> {
        self.lookup(id, target)
    }
}

pub fn normalize(mut v: Vec<f32>) -> Result<Vec<f32>, ProviderError> {
    let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if !(norm > 1e-12 && norm.is_finite()) {
        return Err(ProviderError(
            "embedding has zero or non-finite norm".into(),
        ));
    }
    v.iter_mut().for_each(|x| *x = (*x as f64 / norm) as f32);
    Ok(v)
}

pub fn gaussian_matrix(seed: u64, rows: usize, cols: usize) -> Matrix<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f32, _>(StandardNormal))
}

/// Lowercased alphanumeric words.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

const PROJ_SIDE: u16 = 8;

/// Seeded random projection of a downsampled image / of hashed caption words.
///
/// Not semantically aligned across modalities; useful for pipeline tests.
pub struct RandomProjectionTeacher {
    dim: usize,
    seed: u64,
    temperature: f64,
    image_proj: Matrix<f32>,
}

impl RandomProjectionTeacher {
    pub fn new(dim: usize, seed: u64) -> Self {
        let features = PROJ_SIDE as usize * PROJ_SIDE as usize * 3;
        Self {
            dim,
            seed,
            temperature: crate::losses::DEFAULT_TEACHER_TEMP,
            image_proj: gaussian_matrix(mix_seed(seed, &[0]), features, dim),
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }
}

impl TeacherProvider for RandomProjectionTeacher {
    fn name(&self) -> String {
        format!("random-projection(seed={})", self.seed)
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
        let mut p = AugmentationParams::identity(image.width() as u16, image.height() as u16);
        p.out_size = (PROJ_SIDE, PROJ_SIDE);
        let small = apply_augmentation(image, &p).map_err(|e| ProviderError(e.to_string()))?;
        let x: Vec<f32> = small
            .pixels()
            .iter()
            .map(|&b| b as f32 / 255.0 - 0.5)
            .collect();
        let x = Matrix::new(1, x.len(), x).expect("feature length");
        normalize(
            x.matmul(&self.image_proj)
                .expect("projection shape")
                .into_data(),
        )
    }

    fn embed_text(&self, _: u64, _: EmbedTarget, text: &str) -> Result<Vec<f32>, ProviderError> {
        let mut acc = vec![0f32; self.dim];
        let mut any = false;
        for w in words(text) {
            any = true;
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(self.seed, &[1, fnv1a64(w.as_bytes())]));
            for a in acc.iter_mut() {
                *a += rng.sample::<f32, _>(StandardNormal);
            }
        }
        if !any {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, &[2]));
            acc.iter_mut().for_each(|a| *a = rng.sample(StandardNormal));
        }
        normalize(acc)
    }
}
