//! C ABI over drclip.
//!
//! Every fallible function returns a [`DrStatus`]; on failure the message is
//! available from [`dr_last_error`] on the same thread until the next call.
//! Handles are opaque and must be released with their `_free` function.
//! Strings returned through `char **` are owned by the caller and released
//! with [`dr_string_free`].
//!
//! Matrices are dense, row-major `float` arrays. Buffers passed as `out` must
//! hold at least the number of elements stated on each function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use drclip::augment::{apply_augmentation, RasterImage};
use drclip::drstore::{Store, StoreError};
use drclip::losses::{self, BatchEmbeddings, LossConfig, LossError};
use drclip::models::{ensemble_embed, load_checkpoint, ClipModel, ModelError};
use drclip::numerics::bf16::{self, Bf16Rounding};
use drclip::numerics::{Matrix, NumericsError};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DrStatus {
    Ok = 0,
    /// Null pointer, zero size or other unusable argument.
    InvalidArgument = 1,
    /// Well-formed call rejected by a validation rule.
    Validation = 2,
    Io = 3,
    /// Non-finite value or other numeric failure.
    Numeric = 4,
    NotFound = 5,
    BufferTooSmall = 6,
    /// A Rust panic was caught at the boundary.
    Internal = 7,
}

#[derive(Debug, thiserror::Error)]
enum FfiError {
    #[error("{0}")]
    Argument(String),
    #[error("{0}")]
    Io(String),
    #[error("buffer holds {got} elements, need {need}")]
    BufferTooSmall { need: usize, got: usize },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Augment(#[from] drclip::augment::AugmentError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl FfiError {
    fn status(&self) -> DrStatus {
        match self {
            FfiError::Argument(_) => DrStatus::InvalidArgument,
            FfiError::BufferTooSmall { .. } => DrStatus::BufferTooSmall,
            FfiError::Io(_) => DrStatus::Io,
            FfiError::Store(StoreError::UnknownId(_)) => DrStatus::NotFound,
            FfiError::Store(StoreError::Io(_) | StoreError::Corrupt(_)) => DrStatus::Io,
            FfiError::Model(ModelError::Io(_) | ModelError::Checkpoint(_)) => DrStatus::Io,
            FfiError::Model(ModelError::Numerics(e))
            | FfiError::Numerics(e)
            | FfiError::Loss(LossError::Numerics(e)) => numerics_status(e),
            _ => DrStatus::Validation,
        }
    }
}

fn numerics_status(e: &NumericsError) -> DrStatus {
    match e {
        NumericsError::ZeroRow { .. } | NumericsError::NonScalarLoss { .. } => DrStatus::Numeric,
        NumericsError::Io(_) | NumericsError::Format(_) => DrStatus::Io,
        _ => DrStatus::Validation,
    }
}

type FfiResult<T> = Result<T, FfiError>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> DrStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DrStatus::Ok,
        Ok(Err(e)) => {
            set_last_error(e.to_string());
            e.status()
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("internal error: {msg}"));
            DrStatus::Internal
        }
    }
}

fn arg(msg: &str) -> FfiError {
    FfiError::Argument(msg.into())
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(arg(&format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(
    p: *mut T,
    len: usize,
    need: usize,
    name: &str,
) -> FfiResult<&'a mut [T]> {
    if len < need {
        return Err(FfiError::BufferTooSmall { need, got: len });
    }
    if need == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(arg(&format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn out_ref<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| arg(&format!("{name} is null")))
}

unsafe fn c_str<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(arg(&format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| arg(&format!("{name} is not UTF-8")))
}

fn give_string(s: String, out: &mut *mut c_char) -> FfiResult<()> {
    *out = CString::new(s)
        .map_err(|_| arg("string contains NUL"))?
        .into_raw();
    Ok(())
}

fn matrix(data: &[f32], rows: usize, cols: usize) -> FfiResult<Matrix<f64>> {
    Ok(Matrix::new(
        rows,
        cols,
        data.iter().map(|&x| x as f64).collect(),
    )?)
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next drclip call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn dr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn dr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Encodes `n` floats to bfloat16 bit patterns with round-to-nearest-even
/// (`truncate` = 0) or truncation.
///
/// # Safety
/// `values` holds `n` floats and `out` holds `n` uint16 values.
#[no_mangle]
pub unsafe extern "C" fn dr_bf16_encode(
    values: *const f32,
    n: usize,
    truncate: bool,
    out: *mut u16,
) -> DrStatus {
    guard(|| {
        let src = slice(values, n, "values")?;
        let dst = slice_mut(out, n, n, "out")?;
        let rounding = if truncate {
            Bf16Rounding::Truncate
        } else {
            Bf16Rounding::NearestEven
        };
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = bf16::f32_to_bf16_bits(v, rounding);
        }
        Ok(())
    })
}

/// # Safety
/// `bits` holds `n` values and `out` holds `n` floats.
#[no_mangle]
pub unsafe extern "C" fn dr_bf16_decode(bits: *const u16, n: usize, out: *mut f32) -> DrStatus {
    guard(|| {
        let src = slice(bits, n, "bits")?;
        let dst = slice_mut(out, n, n, "out")?;
        for (d, &b) in dst.iter_mut().zip(src) {
            *d = bf16::bf16_bits_to_f32(b);
        }
        Ok(())
    })
}

/// Loss terms of one batch.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DrLossParts {
    pub total: f64,
    pub clip: f64,
    /// NaN when no teachers were given.
    pub distill: f64,
}

/// Symmetric CLIP loss and multi-teacher distillation on one batch.
///
/// `student_img` and `student_txt` are `batch x dim` unit rows.
/// `teacher_img` and `teacher_txt` are the K teacher blocks laid out one after
/// another, block k being `batch x teacher_dims[k]`. `teacher_temps` has K
/// entries. With `k = 0` the teacher arrays may be NULL and `lambda` must be 0.
/// Computed in double precision.
///
/// # Safety
/// All arrays must hold the sizes described above; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dr_loss(
    student_img: *const f32,
    student_txt: *const f32,
    batch: usize,
    dim: usize,
    teacher_img: *const f32,
    teacher_txt: *const f32,
    teacher_dims: *const usize,
    teacher_temps: *const f64,
    k: usize,
    student_temp: f64,
    lambda: f64,
    out: *mut DrLossParts,
) -> DrStatus {
    guard(|| {
        if batch == 0 || dim == 0 {
            return Err(arg("batch and dim must be positive"));
        }
        let out = out_ref(out, "out")?;
        let si = matrix(slice(student_img, batch * dim, "student_img")?, batch, dim)?;
        let st = matrix(slice(student_txt, batch * dim, "student_txt")?, batch, dim)?;
        let dims = slice(teacher_dims, k, "teacher_dims")?;
        let temps = slice(teacher_temps, k, "teacher_temps")?.to_vec();
        let total_width: usize = dims.iter().sum();
        let ti = slice(teacher_img, batch * total_width, "teacher_img")?;
        let tt = slice(teacher_txt, batch * total_width, "teacher_txt")?;
        let (mut img_blocks, mut txt_blocks, mut off) =
            (Vec::with_capacity(k), Vec::with_capacity(k), 0);
        for &d in dims {
            let n = batch * d;
            img_blocks.push(matrix(&ti[off..off + n], batch, d)?);
            txt_blocks.push(matrix(&tt[off..off + n], batch, d)?);
            off += n;
        }
        let emb = BatchEmbeddings::new(si, st, img_blocks, txt_blocks)?;
        if k == 0 {
            if lambda != 0.0 {
                return Err(FfiError::Loss(LossError::InvalidConfig(
                    "lambda must be 0 without teachers".into(),
                )));
            }
            let clip = losses::clip_loss(&emb, student_temp)?;
            *out = DrLossParts {
                total: clip,
                clip,
                distill: f64::NAN,
            };
            return Ok(());
        }
        let cfg = LossConfig::new(lambda, student_temp, temps)?;
        let clip = losses::clip_loss(&emb, student_temp)?;
        let distill = losses::distill_loss(&emb, &cfg)?;
        let total = losses::total_loss(&emb, &cfg)?;
        *out = DrLossParts {
            total,
            clip,
            distill,
        };
        Ok(())
    })
}

/// Concatenates K unit vectors and scales by 1/sqrt(K). `vectors` holds the
/// blocks back to back; `out` receives `sum(dims)` floats.
///
/// # Safety
/// `vectors` and `out` hold `sum(dims)` floats; `dims` holds `k` entries.
#[no_mangle]
pub unsafe extern "C" fn dr_ensemble_embed(
    vectors: *const f32,
    dims: *const usize,
    k: usize,
    out: *mut f32,
    out_len: usize,
) -> DrStatus {
    guard(|| {
        let dims = slice(dims, k, "dims")?;
        let total: usize = dims.iter().sum();
        let src = slice(vectors, total, "vectors")?;
        let mut blocks = Vec::with_capacity(k);
        let mut off = 0;
        for &d in dims {
            blocks.push(&src[off..off + d]);
            off += d;
        }
        let e = ensemble_embed(&blocks)?;
        slice_mut(out, out_len, total, "out")?.copy_from_slice(&e);
        Ok(())
    })
}

/// Read-only handle to a reinforced store.
pub struct DrStore {
    inner: Store,
}

/// # Safety
/// `path` is a NUL-terminated UTF-8 string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dr_store_open(path: *const c_char, out: *mut *mut DrStore) -> DrStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let path = PathBuf::from(c_str(path, "path")?);
        let inner = Store::open(&path).map_err(|e| match e {
            StoreError::Io(io) => FfiError::Io(format!("{}: {io}", path.display())),
            e => e.into(),
        })?;
        *out = Box::into_raw(Box::new(DrStore { inner }));
        Ok(())
    })
}

/// # Safety
/// `store` comes from [`dr_store_open`] and is not used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn dr_store_free(store: *mut DrStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

unsafe fn store_ref<'a>(s: *const DrStore) -> FfiResult<&'a Store> {
    s.as_ref()
        .map(|s| &s.inner)
        .ok_or_else(|| arg("store is null"))
}

/// Shape of a store.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DrStoreInfo {
    pub records: usize,
    pub teachers: usize,
    /// Sum of the teacher widths.
    pub ensemble_dim: usize,
    pub augmentations: usize,
    pub syn_captions: usize,
}

/// # Safety
/// `store` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dr_store_info(store: *const DrStore, out: *mut DrStoreInfo) -> DrStatus {
    guard(|| {
        let s = store_ref(store)?;
        let m = s.manifest();
        *out_ref(out, "out")? = DrStoreInfo {
            records: s.len(),
            teachers: m.teacher_count(),
            ensemble_dim: m.ensemble_dim(),
            augmentations: m.num_augmentations,
            syn_captions: m.num_syn_captions,
        };
        Ok(())
    })
}

/// Writes record ids in storage order; `out` holds at least `records` ids.
///
/// # Safety
/// `out` holds `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn dr_store_ids(
    store: *const DrStore,
    out: *mut u64,
    out_len: usize,
) -> DrStatus {
    guard(|| {
        let s = store_ref(store)?;
        let dst = slice_mut(out, out_len, s.len(), "out")?;
        for (d, id) in dst.iter_mut().zip(s.ids()) {
            *d = id;
        }
        Ok(())
    })
}

/// Manifest as JSON; free with [`dr_string_free`].
///
/// # Safety
/// `store` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dr_store_manifest_json(
    store: *const DrStore,
    out: *mut *mut c_char,
) -> DrStatus {
    guard(|| {
        let s = store_ref(store)?;
        let json = serde_json::to_string(s.manifest()).map_err(|e| arg(&e.to_string()))?;
        give_string(json, out_ref(out, "out")?)
    })
}

/// Per-section byte totals as JSON; free with [`dr_string_free`].
///
/// # Safety
/// `store` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dr_store_stats_json(
    store: *const DrStore,
    out: *mut *mut c_char,
) -> DrStatus {
    guard(|| {
        let s = store_ref(store)?;
        let json = serde_json::to_string(&s.stats()?).map_err(|e| arg(&e.to_string()))?;
        give_string(json, out_ref(out, "out")?)
    })
}

/// Caption `index` of record `id`: 0 is the real caption, 1..=S the synthetic ones.
///
/// # Safety
/// `store` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dr_store_caption(
    store: *const DrStore,
    id: u64,
    index: usize,
    out: *mut *mut c_char,
) -> DrStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let r = store_ref(store)?.read_record(id)?;
        let text = match index {
            0 => r.real_caption,
            i => r
                .syn_captions
                .into_iter()
                .nth(i - 1)
                .ok_or_else(|| arg(&format!("caption index {i} out of range")))?,
        };
        give_string(text, out)
    })
}

/// Decoded ensemble embedding (all teachers, back to back) of record `id`.
/// `kind` 0: augmentation `index`; 1: caption `index` (0 real, 1..=S synthetic).
/// `out` holds `ensemble_dim` floats.
///
/// # Safety
/// `out` holds `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn dr_store_embedding(
    store: *const DrStore,
    id: u64,
    kind: u32,
    index: usize,
    out: *mut f32,
    out_len: usize,
) -> DrStatus {
    guard(|| {
        let s = store_ref(store)?;
        let r = s.read_record(id)?;
        let range = |len: usize| arg(&format!("index {index} out of range for {len}"));
        let e = match (kind, index) {
            (0, j) => r
                .img_embeds
                .get(j)
                .ok_or_else(|| range(r.img_embeds.len()))?,
            (1, 0) => &r.txt_embed,
            (1, i) => r
                .syn_embeds
                .get(i - 1)
                .ok_or_else(|| range(r.syn_embeds.len() + 1))?,
            _ => return Err(arg("kind must be 0 (image) or 1 (text)")),
        };
        let v = e.decode();
        slice_mut(out, out_len, v.len(), "out")?.copy_from_slice(&v);
        Ok(())
    })
}

/// Rebuilds augmented view `view` of record `id` from its stored parameters.
/// Writes RGB8 pixels and the view size; call with `out` NULL and `out_len` 0
/// to query the size (returns `BufferTooSmall` after filling width/height).
///
/// # Safety
/// `out` holds `out_len` bytes; `width` and `height` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dr_store_view(
    store: *const DrStore,
    id: u64,
    view: usize,
    out: *mut u8,
    out_len: usize,
    width: *mut u32,
    height: *mut u32,
) -> DrStatus {
    guard(|| {
        let (w, h) = (out_ref(width, "width")?, out_ref(height, "height")?);
        let r = store_ref(store)?.read_record(id)?;
        let params = r.aug_params.get(view).ok_or_else(|| {
            arg(&format!(
                "view {view} out of range for {}",
                r.aug_params.len()
            ))
        })?;
        *w = params.out_size.0 as u32;
        *h = params.out_size.1 as u32;
        let need = *w as usize * *h as usize * 3;
        let dst = slice_mut(out, out_len, need, "out")?;
        let img = apply_augmentation(&r.image, params)?;
        dst.copy_from_slice(img.pixels());
        Ok(())
    })
}

/// Inference handle for a trained student.
pub struct DrModel {
    inner: ClipModel<f32>,
}

/// # Safety
/// `path` is a NUL-terminated UTF-8 string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dr_model_load(path: *const c_char, out: *mut *mut DrModel) -> DrStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let inner = load_checkpoint(c_str(path, "path")?)?;
        *out = Box::into_raw(Box::new(DrModel { inner }));
        Ok(())
    })
}

/// Fresh randomly initialized student with the default configuration.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dr_model_new(seed: u64, out: *mut *mut DrModel) -> DrStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let inner = ClipModel::new(Default::default(), seed)?;
        *out = Box::into_raw(Box::new(DrModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` comes from this library and is not used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn dr_model_free(model: *mut DrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn model_ref<'a>(m: *const DrModel) -> FfiResult<&'a ClipModel<f32>> {
    m.as_ref()
        .map(|m| &m.inner)
        .ok_or_else(|| arg("model is null"))
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DrModelInfo {
    pub embed_dim: usize,
    pub image_size: u32,
    pub temperature: f64,
    pub reparameterized: bool,
}

/// # Safety
/// `model` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dr_model_info(model: *const DrModel, out: *mut DrModelInfo) -> DrStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out_ref(out, "out")? = DrModelInfo {
            embed_dim: m.cfg.image.proj_dim,
            image_size: m.cfg.image.image_size,
            temperature: m.temperature(),
            reparameterized: m.is_reparameterized(),
        };
        Ok(())
    })
}

/// Unit text embeddings, `n x embed_dim`.
///
/// # Safety
/// `texts` holds `n` NUL-terminated UTF-8 strings; `out` holds `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn dr_model_encode_texts(
    model: *const DrModel,
    texts: *const *const c_char,
    n: usize,
    out: *mut f32,
    out_len: usize,
) -> DrStatus {
    guard(|| {
        let m = model_ref(model)?;
        let ptrs = slice(texts, n, "texts")?;
        let strs = ptrs
            .iter()
            .map(|&p| c_str(p, "text"))
            .collect::<FfiResult<Vec<_>>>()?;
        if strs.is_empty() {
            return Ok(());
        }
        let e = m.text.encode_texts(&strs)?;
        slice_mut(out, out_len, e.len(), "out")?.copy_from_slice(e.data());
        Ok(())
    })
}

/// Unit image embeddings, `n x embed_dim`, from `n` RGB8 images of
/// `image_size x image_size` laid out back to back.
///
/// # Safety
/// `pixels` holds `n * image_size^2 * 3` bytes; `out` holds `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn dr_model_encode_images(
    model: *const DrModel,
    pixels: *const u8,
    n: usize,
    out: *mut f32,
    out_len: usize,
) -> DrStatus {
    guard(|| {
        let m = model_ref(model)?;
        let side = m.cfg.image.image_size;
        let per = side as usize * side as usize * 3;
        let src = slice(pixels, n * per, "pixels")?;
        if n == 0 {
            return Ok(());
        }
        let images = src
            .chunks_exact(per)
            .map(|c| RasterImage::new(side, side, c.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&RasterImage> = images.iter().collect();
        let e = m.image.encode(&refs)?;
        slice_mut(out, out_len, e.len(), "out")?.copy_from_slice(e.data());
        Ok(())
    })
}
