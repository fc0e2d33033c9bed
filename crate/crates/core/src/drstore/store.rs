use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::record::{Section, SECTIONS};
use super::{ReinforcedRecord, StoreError, StoreManifest, TeacherEmbeddings};
use crate::augment::{apply_augmentation, RasterImage};

pub const MAGIC: &[u8; 4] = b"MDRS";
pub const VERSION: u16 = 1;
const INDEX_MAGIC: &[u8; 4] = b"MDRI";
const END_MAGIC: &[u8; 4] = b"MDRE";
const FOOTER_LEN: u64 = 12;
const INDEX_ENTRY_LEN: usize = 20;
const FRAME_HEADER_LEN: usize = 8 + 1 + SECTIONS.len() * 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: u64,
    pub offset: u64,
    pub len: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionBytes {
    pub raw: u64,
    pub compressed: u64,
}

impl std::ops::AddAssign for SectionBytes {
    fn add_assign(&mut self, o: Self) {
        self.raw += o.raw;
        self.compressed += o.compressed;
    }
}

/// Per-section byte totals over a store. `total` is the sum of the sections.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub sample_count: u64,
    pub images: SectionBytes,
    pub captions: SectionBytes,
    pub syn_captions: SectionBytes,
    pub aug_params: SectionBytes,
    pub txt_embeds: SectionBytes,
    pub img_embeds: SectionBytes,
    pub syn_embeds: SectionBytes,
    pub total: SectionBytes,
    /// Size of the store file including headers, frame headers and index.
    pub file_bytes: u64,
}

impl StoreStats {
    fn section_mut(&mut self, s: Section) -> &mut SectionBytes {
        match s {
            Section::Image => &mut self.images,
            Section::Caption => &mut self.captions,
            Section::SynCaptions => &mut self.syn_captions,
            Section::AugParams => &mut self.aug_params,
            Section::TxtEmbeds => &mut self.txt_embeds,
            Section::ImgEmbeds => &mut self.img_embeds,
            Section::SynEmbeds => &mut self.syn_embeds,
        }
    }

    pub fn section(&self, s: Section) -> SectionBytes {
        match s {
            Section::Image => self.images,
            Section::Caption => self.captions,
            Section::SynCaptions => self.syn_captions,
            Section::AugParams => self.aug_params,
            Section::TxtEmbeds => self.txt_embeds,
            Section::ImgEmbeds => self.img_embeds,
            Section::SynEmbeds => self.syn_embeds,
        }
    }

    /// Raw bytes of all three embedding sections.
    pub fn raw_embedding_bytes(&self) -> u64 {
        self.txt_embeds.raw + self.img_embeds.raw + self.syn_embeds.raw
    }
}

fn write_header(w: &mut impl Write, manifest: &StoreManifest) -> std::io::Result<u64> {
    let tlv = manifest.to_tlv();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tlv.len() as u32).to_le_bytes())?;
    w.write_all(&tlv)?;
    Ok(10 + tlv.len() as u64)
}

/// Appends records to a store file. Call [`StoreWriter::finish`] to write the index.
pub struct StoreWriter {
    path: PathBuf,
    out: BufWriter<File>,
    manifest: StoreManifest,
    entries: Vec<IndexEntry>,
    ids: HashSet<u64>,
    pos: u64,
    finished: bool,
}

impl StoreWriter {
    pub fn create(path: impl AsRef<Path>, manifest: StoreManifest) -> Result<Self, StoreError> {
        manifest.validate()?;
        let path = path.as_ref().to_path_buf();
        let mut out = BufWriter::new(File::create(&path)?);
        let pos = write_header(&mut out, &manifest)?;
        Ok(Self {
            path,
            out,
            manifest,
            entries: Vec::new(),
            ids: HashSet::new(),
            pos,
            finished: false,
        })
    }

    /// Reopens a finished store for appending; the old index is rewritten on finish.
    pub fn append(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let store = Store::open(&path)?;
        let (manifest, entries, index_offset) = (
            store.manifest.clone(),
            store.entries.clone(),
            store.index_offset,
        );
        drop(store);
        let mut file = OpenOptions::new().read(true).write(true).open(&path)?;
        file.set_len(index_offset)?;
        file.seek(SeekFrom::Start(index_offset))?;
        let ids = entries.iter().map(|e| e.id).collect();
        Ok(Self {
            path,
            out: BufWriter::new(file),
            manifest,
            entries,
            ids,
            pos: index_offset,
            finished: false,
        })
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Compresses and appends one record, returning its byte offset.
    pub fn write_record(&mut self, rec: &ReinforcedRecord) -> Result<u64, StoreError> {
        rec.validate(&self.manifest)?;
        if self.ids.contains(&rec.id) {
            return Err(StoreError::DuplicateId(rec.id));
        }
        let level = Compression::new(self.manifest.gzip_level);
        let raw = rec.encode_sections();
        let mut header = Vec::with_capacity(FRAME_HEADER_LEN);
        header.extend_from_slice(&rec.id.to_le_bytes());
        header.push(SECTIONS.len() as u8);
        let mut body = Vec::new();
        for section in &raw {
            let mut enc = GzEncoder::new(Vec::new(), level);
            enc.write_all(section)?;
            let compressed = enc.finish()?;
            header.extend_from_slice(&(section.len() as u32).to_le_bytes());
            header.extend_from_slice(&(compressed.len() as u32).to_le_bytes());
            body.extend_from_slice(&compressed);
        }
        let len = header.len() + body.len();
        if len > u32::MAX as usize {
            return Err(StoreError::ManifestMismatch(format!(
                "record {} exceeds 4 GiB",
                rec.id
            )));
        }
        self.out.write_all(&header)?;
        self.out.write_all(&body)?;
        let offset = self.pos;
        self.pos += len as u64;
        self.entries.push(IndexEntry {
            id: rec.id,
            offset,
            len: len as u32,
        });
        self.ids.insert(rec.id);
        Ok(offset)
    }

    /// Writes the index and footer; returns the record count.
    pub fn finish(mut self) -> Result<u64, StoreError> {
        self.finish_inner()
    }

    fn finish_inner(&mut self) -> Result<u64, StoreError> {
        if self.finished {
            return Ok(self.entries.len() as u64);
        }
        self.finished = true;
        let index_offset = self.pos;
        self.out.write_all(INDEX_MAGIC)?;
        self.out
            .write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            self.out.write_all(&e.id.to_le_bytes())?;
            self.out.write_all(&e.offset.to_le_bytes())?;
            self.out.write_all(&e.len.to_le_bytes())?;
        }
        self.out.write_all(&index_offset.to_le_bytes())?;
        self.out.write_all(END_MAGIC)?;
        self.out.flush()?;
        self.out.get_ref().sync_all()?;
        Ok(self.entries.len() as u64)
    }
}

impl Drop for StoreWriter {
    fn drop(&mut self) {
        if !self.finished {
            if let Err(e) = self.finish_inner() {
                log::error!("failed to finalize store {}: {e}", self.path.display());
            }
        }
    }
}

fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    #[cfg(unix)]
    {
        std::os::unix::fs::FileExt::read_exact_at(file, buf, offset)
    }
    #[cfg(windows)]
    {
        let mut done = 0;
        while done < buf.len() {
            let n = std::os::windows::fs::FileExt::seek_read(
                file,
                &mut buf[done..],
                offset + done as u64,
            )?;
            if n == 0 {
                return Err(std::io::ErrorKind::UnexpectedEof.into());
            }
            done += n;
        }
        Ok(())
    }
}

/// Read-only view of a store file. Safe to share across threads.
#[derive(Debug)]
pub struct Store {
    path: PathBuf,
    file: File,
    manifest: StoreManifest,
    entries: Vec<IndexEntry>,
    by_id: HashMap<u64, usize>,
    data_start: u64,
    index_offset: u64,
    file_len: u64,
}

struct Frame {
    id: u64,
    lens: Vec<(u32, u32)>,
    body: Vec<u8>,
}

impl Store {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path)?;
        let file_len = file.metadata()?.len();
        let mut head = [0u8; 10];
        file.read_exact(&mut head)
            .map_err(|_| StoreError::Corrupt("file shorter than header".into()))?;
        if &head[..4] != MAGIC {
            return Err(StoreError::Corrupt("bad magic".into()));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != VERSION {
            return Err(StoreError::Corrupt(format!(
                "unsupported version {version}"
            )));
        }
        let tlv_len = u32::from_le_bytes(head[6..10].try_into().unwrap()) as u64;
        if 10 + tlv_len + FOOTER_LEN > file_len {
            return Err(StoreError::Corrupt("manifest exceeds file".into()));
        }
        let mut tlv = vec![0u8; tlv_len as usize];
        file.read_exact(&mut tlv)?;
        let mut manifest = StoreManifest::from_tlv(&tlv)?;
        let data_start = 10 + tlv_len;

        let mut footer = [0u8; FOOTER_LEN as usize];
        read_exact_at(&file, &mut footer, file_len - FOOTER_LEN)?;
        if &footer[8..] != END_MAGIC {
            return Err(StoreError::Corrupt(
                "missing footer; the writer was not finished".into(),
            ));
        }
        let index_offset = u64::from_le_bytes(footer[..8].try_into().unwrap());
        if index_offset < data_start || index_offset + 12 > file_len - FOOTER_LEN {
            return Err(StoreError::Corrupt("index offset out of range".into()));
        }
        let mut index = vec![0u8; (file_len - FOOTER_LEN - index_offset) as usize];
        read_exact_at(&file, &mut index, index_offset)?;
        if &index[..4] != INDEX_MAGIC {
            return Err(StoreError::Corrupt("bad index magic".into()));
        }
        let count = u64::from_le_bytes(index[4..12].try_into().unwrap()) as usize;
        if index.len() != 12 + count * INDEX_ENTRY_LEN {
            return Err(StoreError::Corrupt(
                "index length disagrees with entry count".into(),
            ));
        }
        let mut entries = Vec::with_capacity(count);
        let mut by_id = HashMap::with_capacity(count);
        for (i, c) in index[12..].chunks_exact(INDEX_ENTRY_LEN).enumerate() {
            let e = IndexEntry {
                id: u64::from_le_bytes(c[..8].try_into().unwrap()),
                offset: u64::from_le_bytes(c[8..16].try_into().unwrap()),
                len: u32::from_le_bytes(c[16..20].try_into().unwrap()),
            };
            if e.offset < data_start || e.offset + e.len as u64 > index_offset {
                return Err(StoreError::Corrupt(format!("index entry {i} out of range")));
            }
            if by_id.insert(e.id, i).is_some() {
                return Err(StoreError::Corrupt(format!(
                    "duplicate id {} in index",
                    e.id
                )));
            }
            entries.push(e);
        }
        manifest.sample_count = count as u64;
        Ok(Self {
            path,
            file,
            manifest,
            entries,
            by_id,
            data_start,
            index_offset,
            file_len,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Record ids in write order.
    pub fn ids(&self) -> impl ExactSizeIterator<Item = u64> + '_ {
        self.entries.iter().map(|e| e.id)
    }

    pub fn contains(&self, id: u64) -> bool {
        self.by_id.contains_key(&id)
    }

    pub fn index(&self) -> &[IndexEntry] {
        &self.entries
    }

    fn entry(&self, id: u64) -> Result<IndexEntry, StoreError> {
        self.by_id
            .get(&id)
            .map(|&i| self.entries[i])
            .ok_or(StoreError::UnknownId(id))
    }

    fn read_frame_header(
        &self,
        offset: u64,
        limit: u64,
    ) -> Result<(u64, Vec<(u32, u32)>), StoreError> {
        if offset + FRAME_HEADER_LEN as u64 > limit {
            return Err(StoreError::Corrupt(format!("truncated frame at {offset}")));
        }
        let mut h = [0u8; FRAME_HEADER_LEN];
        read_exact_at(&self.file, &mut h, offset)?;
        let id = u64::from_le_bytes(h[..8].try_into().unwrap());
        if h[8] as usize != SECTIONS.len() {
            return Err(StoreError::Corrupt(format!(
                "frame at {offset} has {} sections",
                h[8]
            )));
        }
        let lens = h[9..]
            .chunks_exact(8)
            .map(|c| {
                (
                    u32::from_le_bytes(c[..4].try_into().unwrap()),
                    u32::from_le_bytes(c[4..].try_into().unwrap()),
                )
            })
            .collect::<Vec<_>>();
        Ok((id, lens))
    }

    fn read_frame(&self, e: IndexEntry) -> Result<Frame, StoreError> {
        let (id, lens) = self.read_frame_header(e.offset, self.index_offset)?;
        if id != e.id {
            return Err(StoreError::Corrupt(format!(
                "index says {} at {}, frame says {id}",
                e.id, e.offset
            )));
        }
        let body_len: u64 = lens.iter().map(|l| l.1 as u64).sum();
        if FRAME_HEADER_LEN as u64 + body_len != e.len as u64 {
            return Err(StoreError::Corrupt(format!(
                "frame {id} length disagrees with index"
            )));
        }
        let mut body = vec![0u8; body_len as usize];
        read_exact_at(&self.file, &mut body, e.offset + FRAME_HEADER_LEN as u64)?;
        Ok(Frame { id, lens, body })
    }

    pub fn read_record(&self, id: u64) -> Result<ReinforcedRecord, StoreError> {
        let frame = self.read_frame(self.entry(id)?)?;
        let mut sections = Vec::with_capacity(SECTIONS.len());
        let mut at = 0usize;
        for (s, &(raw_len, comp_len)) in SECTIONS.iter().zip(&frame.lens) {
            let member = &frame.body[at..at + comp_len as usize];
            at += comp_len as usize;
            let mut raw = Vec::with_capacity(raw_len as usize);
            GzDecoder::new(member).read_to_end(&mut raw).map_err(|e| {
                StoreError::Corrupt(format!("record {}: {} section: {e}", frame.id, s.name()))
            })?;
            if raw.len() != raw_len as usize {
                return Err(StoreError::Corrupt(format!(
                    "record {}: {} section length",
                    frame.id,
                    s.name()
                )));
            }
            sections.push(raw);
        }
        ReinforcedRecord::decode_sections(frame.id, &sections, &self.manifest)
    }

    /// Rebuilds the index by walking every frame from the start of the data region.
    pub fn scan_index(&self) -> Result<Vec<IndexEntry>, StoreError> {
        let mut entries = Vec::new();
        let mut offset = self.data_start;
        while offset < self.index_offset {
            let (id, lens) = self.read_frame_header(offset, self.index_offset)?;
            let len = FRAME_HEADER_LEN as u64 + lens.iter().map(|l| l.1 as u64).sum::<u64>();
            if offset + len > self.index_offset {
                return Err(StoreError::Corrupt(format!(
                    "frame {id} runs past the index"
                )));
            }
            entries.push(IndexEntry {
                id,
                offset,
                len: len as u32,
            });
            offset += len;
        }
        Ok(entries)
    }

    /// Checks that a full scan reproduces the stored index exactly.
    pub fn verify_index(&self) -> Result<(), StoreError> {
        let scanned = self.scan_index()?;
        if scanned != self.entries {
            return Err(StoreError::Corrupt(format!(
                "stored index has {} entries, scan found {} (or offsets differ)",
                self.entries.len(),
                scanned.len()
            )));
        }
        Ok(())
    }

    /// Per-section byte totals, read from frame headers only.
    pub fn stats(&self) -> Result<StoreStats, StoreError> {
        let mut stats = StoreStats {
            sample_count: self.entries.len() as u64,
            file_bytes: self.file_len,
            ..Default::default()
        };
        for e in &self.entries {
            let (_, lens) = self.read_frame_header(e.offset, self.index_offset)?;
            for (&s, &(raw, comp)) in SECTIONS.iter().zip(&lens) {
                let b = SectionBytes {
                    raw: raw as u64,
                    compressed: comp as u64,
                };
                *stats.section_mut(s) += b;
                stats.total += b;
            }
        }
        Ok(stats)
    }

    /// Loads one record and draws a training view from it.
    pub fn draw_training_view(&self, id: u64, rng_seed: u64) -> Result<TrainingView, StoreError> {
        TrainingView::from_record(&self.read_record(id)?, rng_seed)
    }
}

/// Picks `(j, s)` uniformly; `s` is `None` when there are no synthetic captions.
pub fn choose_view(
    rng_seed: u64,
    num_augmentations: usize,
    num_syn_captions: usize,
) -> (usize, Option<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let j = rng.gen_range(0..num_augmentations);
    let s = (num_syn_captions > 0).then(|| rng.gen_range(0..num_syn_captions));
    (j, s)
}

/// One randomized training sample with its stored teacher embeddings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingView {
    pub id: u64,
    pub j: usize,
    pub s: Option<usize>,
    /// Source image with augmentation `j` replayed.
    pub image: RasterImage,
    pub real_caption: String,
    pub syn_caption: Option<String>,
    pub img_embed: TeacherEmbeddings,
    pub txt_embed: TeacherEmbeddings,
    pub syn_embed: Option<TeacherEmbeddings>,
}

impl TrainingView {
    pub fn from_record(rec: &ReinforcedRecord, rng_seed: u64) -> Result<Self, StoreError> {
        let (j, s) = choose_view(rng_seed, rec.aug_params.len(), rec.syn_captions.len());
        Self::select(rec, j, s)
    }

    /// Builds the view for explicit indices.
    pub fn select(rec: &ReinforcedRecord, j: usize, s: Option<usize>) -> Result<Self, StoreError> {
        let params = rec.aug_params.get(j).ok_or_else(|| {
            StoreError::ManifestMismatch(format!("augmentation {j} of record {}", rec.id))
        })?;
        if let Some(s) = s {
            if s >= rec.syn_captions.len() {
                return Err(StoreError::ManifestMismatch(format!(
                    "synthetic caption {s} of record {}",
                    rec.id
                )));
            }
        }
        Ok(Self {
            id: rec.id,
            j,
            s,
            image: apply_augmentation(&rec.image, params)?,
            real_caption: rec.real_caption.clone(),
            syn_caption: s.map(|s| rec.syn_captions[s].clone()),
            img_embed: rec.img_embeds[j].clone(),
            txt_embed: rec.txt_embed.clone(),
            syn_embed: s.map(|s| rec.syn_embeds[s].clone()),
        })
    }
}
