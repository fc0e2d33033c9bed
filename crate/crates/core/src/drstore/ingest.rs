use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::providers::{CaptionProvider, EmbedTarget, ProviderError, TeacherProvider};
use super::record::UNIT_NORM_TOL_BF16;
use super::{ReinforcedRecord, StoreError, StoreWriter, TeacherEmbeddings};
use crate::augment::{apply_augmentation, sample_augmentation, AugmentPolicy, RasterImage};
use crate::numerics::bf16_roundtrip;
use crate::util::mix_seed;

/// An un-reinforced (image, caption) sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlainPair {
    pub id: u64,
    pub image: RasterImage,
    pub caption: String,
}

pub fn load_image(path: &Path) -> Result<RasterImage, StoreError> {
    let img = image::open(path)
        .map_err(|e| StoreError::Input(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(RasterImage::new(w, h, img.into_raw())?)
}

pub fn save_png(img: &RasterImage, path: &Path) -> Result<(), StoreError> {
    image::RgbImage::from_raw(img.width(), img.height(), img.pixels().to_vec())
        .expect("buffer matches dimensions")
        .save(path)
        .map_err(|e| StoreError::Input(format!("{}: {e}", path.display())))
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "ppm")
    )
}

#[derive(Deserialize)]
struct IndexLine {
    id: Option<u64>,
    image: PathBuf,
    caption: String,
}

/// Loads plain pairs from a directory of `NAME.{png,ppm}` + `NAME.txt` files, or
/// from a JSONL index of `{"id"?, "image", "caption"}` lines (paths relative to the index).
///
/// Directory ids are the numeric file stems when every stem is numeric, otherwise
/// positions in sorted file-name order.
pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<PlainPair>, StoreError> {
    let path = path.as_ref();
    if path.is_dir() {
        let mut images: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        images.sort();
        let stems: Vec<Option<u64>> = images
            .iter()
            .map(|p| {
                p.file_stem()
                    .and_then(|s| s.to_str())
                    .and_then(|s| s.parse().ok())
            })
            .collect();
        let numeric = stems.iter().all(Option::is_some);
        images
            .iter()
            .enumerate()
            .map(|(i, img_path)| {
                let cap_path = img_path.with_extension("txt");
                let caption = std::fs::read_to_string(&cap_path)
                    .map_err(|e| StoreError::Input(format!("{}: {e}", cap_path.display())))?;
                Ok(PlainPair {
                    id: if numeric { stems[i].unwrap() } else { i as u64 },
                    image: load_image(img_path)?,
                    caption: caption.trim_end_matches(['\n', '\r']).to_string(),
                })
            })
            .collect()
    } else {
        let base = path.parent().unwrap_or(Path::new("."));
        let text = std::fs::read_to_string(path)?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, line)| {
                let entry: IndexLine = serde_json::from_str(line)
                    .map_err(|e| StoreError::Input(format!("{}:{}: {e}", path.display(), n + 1)))?;
                Ok(PlainPair {
                    id: entry.id.unwrap_or(n as u64),
                    image: load_image(&base.join(&entry.image))?,
                    caption: entry.caption,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReinforceConfig {
    pub policy: AugmentPolicy,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub id: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReinforceSummary {
    pub written: u64,
    pub skipped: Vec<SkippedSample>,
}

enum Failure {
    Skip(String),
    Fatal(StoreError),
}

impl From<ProviderError> for Failure {
    fn from(e: ProviderError) -> Self {
        Failure::Skip(e.0)
    }
}

const CHUNK: usize = 64;

/// Reinforces plain pairs into `writer`: J augmentations, S synthetic captions and
/// K teacher embeddings per sample. Samples whose providers fail are skipped and logged.
pub fn reinforce(
    pairs: impl IntoIterator<Item = PlainPair>,
    captioner: Option<&dyn CaptionProvider>,
    teachers: &[&dyn TeacherProvider],
    cfg: &ReinforceConfig,
    writer: &mut StoreWriter,
) -> Result<ReinforceSummary, StoreError> {
    cfg.policy.validate()?;
    let manifest = writer.manifest().clone();
    if teachers.len() != manifest.teacher_count() {
        return Err(StoreError::ManifestMismatch(format!(
            "{} teachers supplied, store expects {}",
            teachers.len(),
            manifest.teacher_count()
        )));
    }
    for (k, t) in teachers.iter().enumerate() {
        if t.dim() != manifest.teacher_dims[k] {
            return Err(StoreError::EmbeddingDimMismatch {
                source_name: t.name(),
                expected: manifest.teacher_dims[k],
                got: t.dim(),
            });
        }
    }
    if manifest.num_syn_captions > 0 && captioner.is_none() {
        return Err(StoreError::Input(
            "synthetic captions requested but no caption provider given".into(),
        ));
    }

    let mut summary = ReinforceSummary::default();
    let mut pairs = pairs.into_iter().peekable();
    while pairs.peek().is_some() {
        let chunk: Vec<PlainPair> = pairs.by_ref().take(CHUNK).collect();
        let built: Vec<Result<ReinforcedRecord, Failure>> = chunk
            .par_iter()
            .map(|p| build_record(p, captioner, teachers, cfg, &manifest))
            .collect();
        for (pair, result) in chunk.iter().zip(built) {
            match result {
                Ok(rec) => {
                    writer.write_record(&rec)?;
                    summary.written += 1;
                }
                Err(Failure::Skip(reason)) => {
                    log::warn!("skipping sample {}: {reason}", pair.id);
                    summary.skipped.push(SkippedSample {
                        id: pair.id,
                        reason,
                    });
                }
                Err(Failure::Fatal(e)) => return Err(e),
            }
        }
    }
    Ok(summary)
}

fn checked(teacher: &dyn TeacherProvider, v: Vec<f32>, what: &str) -> Result<Vec<f32>, Failure> {
    if v.len() != teacher.dim() {
        return Err(Failure::Fatal(StoreError::EmbeddingDimMismatch {
            source_name: teacher.name(),
            expected: teacher.dim(),
            got: v.len(),
        }));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Failure::Skip(format!(
            "{}: non-finite {what} embedding",
            teacher.name()
        )));
    }
    let norm = bf16_roundtrip(&v).iter().map(|x| x * x).sum::<f32>().sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOL_BF16 {
        return Err(Failure::Skip(format!(
            "{}: {what} embedding has norm {norm}",
            teacher.name()
        )));
    }
    Ok(v)
}

fn build_record(
    pair: &PlainPair,
    captioner: Option<&dyn CaptionProvider>,
    teachers: &[&dyn TeacherProvider],
    cfg: &ReinforceConfig,
    manifest: &super::StoreManifest,
) -> Result<ReinforcedRecord, Failure> {
    let (w, h) = (pair.image.width(), pair.image.height());
    let mut aug_params = Vec::with_capacity(manifest.num_augmentations);
    let mut img_embeds = Vec::with_capacity(manifest.num_augmentations);
    for j in 0..manifest.num_augmentations {
        let seed = mix_seed(cfg.seed, &[pair.id, j as u64]);
        let params = sample_augmentation(seed, &cfg.policy, w, h)
            .map_err(|e| Failure::Skip(e.to_string()))?;
        let view =
            apply_augmentation(&pair.image, &params).map_err(|e| Failure::Skip(e.to_string()))?;
        let blocks = teachers
            .iter()
            .map(|t| checked(*t, t.embed_image(pair.id, j, &view)?, "image"))
            .collect::<Result<Vec<_>, _>>()?;
        aug_params.push(params);
        img_embeds.push(TeacherEmbeddings::encode(&blocks));
    }

    let syn_captions = match (manifest.num_syn_captions, captioner) {
        (0, _) | (_, None) => Vec::new(),
        (s, Some(c)) => {
            let caps = c.captions(pair.id, &pair.image, &pair.caption, s)?;
            if caps.len() != s {
                return Err(Failure::Skip(format!(
                    "caption provider returned {} captions, need {s}",
                    caps.len()
                )));
            }
            caps
        }
    };

    let embed_text = |target: EmbedTarget, text: &str| -> Result<TeacherEmbeddings, Failure> {
        let blocks = teachers
            .iter()
            .map(|t| checked(*t, t.embed_text(pair.id, target, text)?, "text"))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TeacherEmbeddings::encode(&blocks))
    };
    let txt_embed = embed_text(EmbedTarget::RealCaption, &pair.caption)?;
    let syn_embeds = syn_captions
        .iter()
        .enumerate()
        .map(|(s, c)| embed_text(EmbedTarget::SynCaption(s), c))
        .collect::<Result<Vec<_>, _>>()?;

    Ok(ReinforcedRecord {
        id: pair.id,
        image: pair.image.clone(),
        real_caption: pair.caption.clone(),
        syn_captions,
        aug_params,
        img_embeds,
        syn_embeds,
        txt_embed,
    })
}
