use crate::augment::{AugmentationParams, RasterImage};
use crate::numerics::bf16::{self, Bf16Rounding};

use super::{StoreError, StoreManifest};

/// Max deviation of a decoded teacher block's norm from 1.
pub const UNIT_NORM_TOL_BF16: f32 = 1.0 / 128.0;

/// One input's embeddings from all K teachers, stored as concatenated bf16 blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TeacherEmbeddings {
    bits: Vec<u16>,
}

impl TeacherEmbeddings {
    pub fn from_bits(bits: Vec<u16>) -> Self {
        Self { bits }
    }

    /// Encodes per-teacher blocks with round-to-nearest-even.
    pub fn encode<B: AsRef<[f32]>>(blocks: &[B]) -> Self {
        let mut bits = Vec::with_capacity(blocks.iter().map(|b| b.as_ref().len()).sum());
        for b in blocks {
            bits.extend(bf16::encode(b.as_ref(), Bf16Rounding::NearestEven));
        }
        Self { bits }
    }

    pub fn bits(&self) -> &[u16] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// All blocks, decoded and concatenated.
    pub fn decode(&self) -> Vec<f32> {
        bf16::decode(&self.bits)
    }

    /// Decoded block of teacher `k`.
    pub fn teacher(&self, manifest: &StoreManifest, k: usize) -> Vec<f32> {
        let off = manifest.teacher_offset(k);
        bf16::decode(&self.bits[off..off + manifest.teacher_dims[k]])
    }

    fn check(&self, manifest: &StoreManifest, what: &str) -> Result<(), StoreError> {
        if self.bits.len() != manifest.ensemble_dim() {
            return Err(StoreError::ManifestMismatch(format!(
                "{what}: {} values, expected {}",
                self.bits.len(),
                manifest.ensemble_dim()
            )));
        }
        for k in 0..manifest.teacher_count() {
            let v = self.teacher(manifest, k);
            if v.iter().any(|x| !x.is_finite()) {
                return Err(StoreError::InvalidEmbedding(format!(
                    "{what}: teacher {k} has non-finite values"
                )));
            }
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL_BF16 {
                return Err(StoreError::InvalidEmbedding(format!(
                    "{what}: teacher {k} has norm {norm}"
                )));
            }
        }
        Ok(())
    }
}

/// A plain sample plus everything reinforcement adds to it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReinforcedRecord {
    pub id: u64,
    pub image: RasterImage,
    pub real_caption: String,
    pub syn_captions: Vec<String>,
    pub aug_params: Vec<AugmentationParams>,
    /// One row per augmentation.
    pub img_embeds: Vec<TeacherEmbeddings>,
    /// One row per synthetic caption.
    pub syn_embeds: Vec<TeacherEmbeddings>,
    pub txt_embed: TeacherEmbeddings,
}

/// Section order inside a record frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Section {
    Image = 0,
    Caption = 1,
    SynCaptions = 2,
    AugParams = 3,
    TxtEmbeds = 4,
    ImgEmbeds = 5,
    SynEmbeds = 6,
}

pub const SECTIONS: [Section; 7] = [
    Section::Image,
    Section::Caption,
    Section::SynCaptions,
    Section::AugParams,
    Section::TxtEmbeds,
    Section::ImgEmbeds,
    Section::SynEmbeds,
];

impl Section {
    pub fn name(self) -> &'static str {
        match self {
            Section::Image => "images",
            Section::Caption => "captions",
            Section::SynCaptions => "syn_captions",
            Section::AugParams => "aug_params",
            Section::TxtEmbeds => "txt_embeds",
            Section::ImgEmbeds => "img_embeds",
            Section::SynEmbeds => "syn_embeds",
        }
    }
}

const IMAGE_CODEC_RAW_RGB8: u8 = 0;

impl ReinforcedRecord {
    pub fn validate(&self, manifest: &StoreManifest) -> Result<(), StoreError> {
        let mismatch = |m: String| {
            Err(StoreError::ManifestMismatch(format!(
                "record {}: {m}",
                self.id
            )))
        };
        if self.aug_params.len() != manifest.num_augmentations
            || self.img_embeds.len() != manifest.num_augmentations
        {
            return mismatch(format!(
                "{} augmentations / {} image rows, expected {}",
                self.aug_params.len(),
                self.img_embeds.len(),
                manifest.num_augmentations
            ));
        }
        if self.syn_captions.len() != manifest.num_syn_captions
            || self.syn_embeds.len() != manifest.num_syn_captions
        {
            return mismatch(format!(
                "{} synthetic captions / {} rows, expected {}",
                self.syn_captions.len(),
                self.syn_embeds.len(),
                manifest.num_syn_captions
            ));
        }
        if self.image.width() > u16::MAX as u32 || self.image.height() > u16::MAX as u32 {
            return mismatch("image too large".into());
        }
        for (j, p) in self.aug_params.iter().enumerate() {
            p.validate(self.image.width(), self.image.height())
                .map_err(|e| {
                    StoreError::ManifestMismatch(format!(
                        "record {} augmentation {j}: {e}",
                        self.id
                    ))
                })?;
        }
        self.txt_embed
            .check(manifest, &format!("record {} caption", self.id))?;
        for (j, e) in self.img_embeds.iter().enumerate() {
            e.check(manifest, &format!("record {} image view {j}", self.id))?;
        }
        for (s, e) in self.syn_embeds.iter().enumerate() {
            e.check(
                manifest,
                &format!("record {} synthetic caption {s}", self.id),
            )?;
        }
        Ok(())
    }

    /// Uncompressed bytes of every section, in [`SECTIONS`] order.
    pub(crate) fn encode_sections(&self) -> [Vec<u8>; 7] {
        let mut image = Vec::with_capacity(9 + self.image.pixels().len());
        image.extend_from_slice(&self.image.width().to_le_bytes());
        image.extend_from_slice(&self.image.height().to_le_bytes());
        image.push(IMAGE_CODEC_RAW_RGB8);
        image.extend_from_slice(self.image.pixels());

        let mut syn = Vec::new();
        syn.extend_from_slice(&(self.syn_captions.len() as u32).to_le_bytes());
        for c in &self.syn_captions {
            syn.extend_from_slice(&(c.len() as u32).to_le_bytes());
            syn.extend_from_slice(c.as_bytes());
        }

        let mut aug = Vec::new();
        aug.extend_from_slice(&(self.aug_params.len() as u32).to_le_bytes());
        for p in &self.aug_params {
            p.encode_into(&mut aug);
        }

        let rows = |rows: &[TeacherEmbeddings]| -> Vec<u8> {
            rows.iter()
                .flat_map(|r| bf16::bits_to_le_bytes(r.bits()))
                .collect()
        };

        [
            image,
            self.real_caption.as_bytes().to_vec(),
            syn,
            aug,
            bf16::bits_to_le_bytes(self.txt_embed.bits()),
            rows(&self.img_embeds),
            rows(&self.syn_embeds),
        ]
    }

    pub(crate) fn decode_sections(
        id: u64,
        sections: &[Vec<u8>],
        manifest: &StoreManifest,
    ) -> Result<Self, StoreError> {
        let corrupt = |m: &str| StoreError::Corrupt(format!("record {id}: {m}"));
        if sections.len() != SECTIONS.len() {
            return Err(corrupt("wrong section count"));
        }
        let img = &sections[Section::Image as usize];
        if img.len() < 9 || img[8] != IMAGE_CODEC_RAW_RGB8 {
            return Err(corrupt("bad image header"));
        }
        let w = u32::from_le_bytes(img[0..4].try_into().unwrap());
        let h = u32::from_le_bytes(img[4..8].try_into().unwrap());
        let image = RasterImage::new(w, h, img[9..].to_vec()).map_err(|_| corrupt("image size"))?;

        let real_caption = String::from_utf8(sections[Section::Caption as usize].clone())
            .map_err(|_| corrupt("caption not UTF-8"))?;

        let mut cur = Cursor(&sections[Section::SynCaptions as usize]);
        let n = cur.u32().ok_or_else(|| corrupt("syn caption count"))? as usize;
        let mut syn_captions = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let len = cur.u32().ok_or_else(|| corrupt("syn caption length"))? as usize;
            let bytes = cur.take(len).ok_or_else(|| corrupt("syn caption bytes"))?;
            syn_captions.push(
                String::from_utf8(bytes.to_vec()).map_err(|_| corrupt("syn caption not UTF-8"))?,
            );
        }

        let mut cur = Cursor(&sections[Section::AugParams as usize]);
        let n = cur.u32().ok_or_else(|| corrupt("augmentation count"))? as usize;
        let mut aug_params = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let (p, used) =
                AugmentationParams::decode(cur.0).map_err(|e| corrupt(&e.to_string()))?;
            aug_params.push(p);
            cur.0 = &cur.0[used..];
        }

        let d = manifest.ensemble_dim();
        let rows = |s: Section, expected: usize| -> Result<Vec<TeacherEmbeddings>, StoreError> {
            let bytes = &sections[s as usize];
            if bytes.len() != expected * d * 2 {
                return Err(corrupt(&format!(
                    "{} has {} bytes, expected {}",
                    s.name(),
                    bytes.len(),
                    expected * d * 2
                )));
            }
            let bits = bf16::bits_from_le_bytes(bytes).map_err(|e| corrupt(&e.to_string()))?;
            Ok(bits
                .chunks(d.max(1))
                .map(|c| TeacherEmbeddings::from_bits(c.to_vec()))
                .collect())
        };
        let txt_embed = rows(Section::TxtEmbeds, 1)?
            .pop()
            .ok_or_else(|| corrupt("caption embedding"))?;
        let img_embeds = rows(Section::ImgEmbeds, manifest.num_augmentations)?;
        let syn_embeds = rows(Section::SynEmbeds, manifest.num_syn_captions)?;
        Ok(Self {
            id,
            image,
            real_caption,
            syn_captions,
            aug_params,
            img_embeds,
            syn_embeds,
            txt_embed,
        })
    }
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let head = self.0.get(..n)?;
        self.0 = &self.0[n..];
        Some(head)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}
