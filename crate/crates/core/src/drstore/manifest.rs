use serde::{Deserialize, Serialize};

use super::StoreError;

/// Tags of the manifest TLV block. Unknown tags are skipped on read.
mod tag {
    pub const TEACHER_DIMS: u16 = 1;
    pub const TEACHER_TEMPS: u16 = 2;
    pub const NUM_AUGMENTATIONS: u16 = 3;
    pub const NUM_SYN_CAPTIONS: u16 = 4;
    pub const GZIP_LEVEL: u16 = 5;
    pub const EMBEDDING_DTYPE: u16 = 6;
    pub const TEACHER_NAMES: u16 = 7;
}

const DTYPE_BF16: u16 = 1;
pub const DEFAULT_GZIP_LEVEL: u32 = 6;
/// Augmentations and synthetic captions per sample in the recommended setup.
pub const RECOMMENDED_VIEWS: usize = 5;

/// Store-wide shape of every record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    /// Per-teacher embedding width d_k; K is the length.
    pub teacher_dims: Vec<usize>,
    /// Per-teacher softmax temperature τ_k used for distillation targets.
    pub teacher_temps: Vec<f64>,
    #[serde(default)]
    pub teacher_names: Vec<String>,
    /// J
    pub num_augmentations: usize,
    /// S
    pub num_syn_captions: usize,
    pub gzip_level: u32,
    /// Always "bf16"; kept for self-description.
    pub embedding_dtype: String,
    /// Filled from the index when a store is opened.
    #[serde(default)]
    pub sample_count: u64,
}

impl StoreManifest {
    pub fn new(
        teacher_dims: Vec<usize>,
        num_augmentations: usize,
        num_syn_captions: usize,
    ) -> Self {
        let k = teacher_dims.len();
        Self {
            teacher_dims,
            teacher_temps: vec![crate::losses::DEFAULT_TEACHER_TEMP; k],
            teacher_names: Vec::new(),
            num_augmentations,
            num_syn_captions,
            gzip_level: DEFAULT_GZIP_LEVEL,
            embedding_dtype: "bf16".into(),
            sample_count: 0,
        }
    }

    pub fn teacher_count(&self) -> usize {
        self.teacher_dims.len()
    }

    /// Σ d_k
    pub fn ensemble_dim(&self) -> usize {
        self.teacher_dims.iter().sum()
    }

    /// Byte offset of teacher `k`'s block inside one stored embedding row.
    pub fn teacher_offset(&self, k: usize) -> usize {
        self.teacher_dims[..k].iter().sum()
    }

    /// Uncompressed embedding bytes per sample: (J·K + S·K + K) blocks of d_k bf16 values.
    pub fn raw_embedding_bytes_per_sample(&self) -> u64 {
        ((self.num_augmentations + self.num_syn_captions + 1) * self.ensemble_dim() * 2) as u64
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let bad = |m: String| Err(StoreError::InvalidManifest(m));
        if self.teacher_dims.is_empty() {
            return bad("at least one teacher is required".into());
        }
        if self
            .teacher_dims
            .iter()
            .any(|&d| d == 0 || d > u32::MAX as usize)
        {
            return bad(format!("teacher dims {:?}", self.teacher_dims));
        }
        if self.teacher_temps.len() != self.teacher_dims.len() {
            return bad(format!(
                "{} temperatures for {} teachers",
                self.teacher_temps.len(),
                self.teacher_dims.len()
            ));
        }
        if self
            .teacher_temps
            .iter()
            .any(|t| !(t.is_finite() && *t > 0.0))
        {
            return bad(format!("teacher temperatures {:?}", self.teacher_temps));
        }
        if !self.teacher_names.is_empty() && self.teacher_names.len() != self.teacher_dims.len() {
            return bad("teacher name count differs from teacher count".into());
        }
        if self.num_augmentations == 0 || self.num_augmentations > u16::MAX as usize {
            return bad(format!("num_augmentations {}", self.num_augmentations));
        }
        if self.num_syn_captions > u16::MAX as usize {
            return bad(format!("num_syn_captions {}", self.num_syn_captions));
        }
        if self.gzip_level > 9 {
            return bad(format!("gzip level {}", self.gzip_level));
        }
        if self.embedding_dtype != "bf16" {
            return bad(format!("embedding dtype {}", self.embedding_dtype));
        }
        Ok(())
    }

    /// True when two manifests describe the same record shape.
    pub fn same_shape(&self, other: &Self) -> bool {
        self.teacher_dims == other.teacher_dims
            && self.num_augmentations == other.num_augmentations
            && self.num_syn_captions == other.num_syn_captions
    }

    pub(crate) fn to_tlv(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut put = |t: u16, value: Vec<u8>| {
            out.extend_from_slice(&t.to_le_bytes());
            out.extend_from_slice(&(value.len() as u32).to_le_bytes());
            out.extend_from_slice(&value);
        };
        put(
            tag::TEACHER_DIMS,
            self.teacher_dims
                .iter()
                .flat_map(|&d| (d as u32).to_le_bytes())
                .collect(),
        );
        put(
            tag::TEACHER_TEMPS,
            self.teacher_temps
                .iter()
                .flat_map(|t| t.to_le_bytes())
                .collect(),
        );
        put(
            tag::NUM_AUGMENTATIONS,
            (self.num_augmentations as u32).to_le_bytes().to_vec(),
        );
        put(
            tag::NUM_SYN_CAPTIONS,
            (self.num_syn_captions as u32).to_le_bytes().to_vec(),
        );
        put(tag::GZIP_LEVEL, vec![self.gzip_level as u8]);
        put(tag::EMBEDDING_DTYPE, DTYPE_BF16.to_le_bytes().to_vec());
        if !self.teacher_names.is_empty() {
            let mut v = Vec::new();
            for name in &self.teacher_names {
                v.extend_from_slice(&(name.len() as u32).to_le_bytes());
                v.extend_from_slice(name.as_bytes());
            }
            put(tag::TEACHER_NAMES, v);
        }
        out
    }

    pub(crate) fn from_tlv(mut bytes: &[u8]) -> Result<Self, StoreError> {
        let corrupt = |m: &str| StoreError::Corrupt(format!("manifest: {m}"));
        let mut m = StoreManifest::new(Vec::new(), 0, 0);
        m.teacher_temps.clear();
        let mut seen_dtype = false;
        while !bytes.is_empty() {
            if bytes.len() < 6 {
                return Err(corrupt("truncated TLV header"));
            }
            let t = u16::from_le_bytes([bytes[0], bytes[1]]);
            let len = u32::from_le_bytes(bytes[2..6].try_into().unwrap()) as usize;
            let value = bytes
                .get(6..6 + len)
                .ok_or_else(|| corrupt("truncated TLV value"))?;
            bytes = &bytes[6 + len..];
            let u32s = || -> Result<Vec<u32>, StoreError> {
                if value.len() % 4 != 0 {
                    return Err(corrupt("misaligned u32 list"));
                }
                Ok(value
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect())
            };
            let single_u32 = || -> Result<u32, StoreError> {
                let v = u32s()?;
                if v.len() != 1 {
                    return Err(corrupt("expected one u32"));
                }
                Ok(v[0])
            };
            match t {
                tag::TEACHER_DIMS => {
                    m.teacher_dims = u32s()?.into_iter().map(|d| d as usize).collect()
                }
                tag::TEACHER_TEMPS => {
                    if value.len() % 8 != 0 {
                        return Err(corrupt("misaligned f64 list"));
                    }
                    m.teacher_temps = value
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                }
                tag::NUM_AUGMENTATIONS => m.num_augmentations = single_u32()? as usize,
                tag::NUM_SYN_CAPTIONS => m.num_syn_captions = single_u32()? as usize,
                tag::GZIP_LEVEL => {
                    m.gzip_level = *value.first().ok_or_else(|| corrupt("empty gzip level"))? as u32
                }
                tag::EMBEDDING_DTYPE => {
                    if value != DTYPE_BF16.to_le_bytes() {
                        return Err(corrupt("unsupported embedding dtype"));
                    }
                    seen_dtype = true;
                }
                tag::TEACHER_NAMES => {
                    let mut rest = value;
                    while !rest.is_empty() {
                        let n = u32::from_le_bytes(
                            rest.get(..4)
                                .ok_or_else(|| corrupt("name length"))?
                                .try_into()
                                .unwrap(),
                        ) as usize;
                        let s = rest.get(4..4 + n).ok_or_else(|| corrupt("name bytes"))?;
                        m.teacher_names.push(
                            String::from_utf8(s.to_vec()).map_err(|_| corrupt("name not UTF-8"))?,
                        );
                        rest = &rest[4 + n..];
                    }
                }
                other => log::debug!("skipping unknown manifest tag {other}"),
            }
        }
        if !seen_dtype {
            return Err(corrupt("missing embedding dtype"));
        }
        m.validate()?;
        Ok(m)
    }
}
