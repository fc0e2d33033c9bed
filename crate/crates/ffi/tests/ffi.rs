use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use drclip::augment::{apply_augmentation, AugmentPolicy};
use drclip::corpus::{write_reinforced_corpus, CorpusConfig};
use drclip::drstore::Store;
use drclip::models::{save_checkpoint, ClipConfig, ClipModel};
use drclip_ffi::*;

fn last_error() -> String {
    let p = dr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn unit_rows(seed: u64, rows: usize, cols: usize) -> Vec<f32> {
    let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let mut out = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row: Vec<f64> = (0..cols)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(row.iter().map(|x| (x / n) as f32));
    }
    out
}

fn softmax_rows(a: &[f32], b: &[f32], n: usize, d: usize, temp: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    (0..d)
                        .map(|c| a[i * d + c] as f64 * b[j * d + c] as f64)
                        .sum::<f64>()
                        / temp
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            logits.iter().map(|l| (l - m).exp() / z).collect()
        })
        .collect()
}

#[test]
fn bf16_round_trip_and_rounding() {
    let values = [1.0f32, 1.00390625, 1.01171875, -3.5, f32::INFINITY];
    let mut bits = [0u16; 5];
    assert_eq!(
        unsafe { dr_bf16_encode(values.as_ptr(), 5, false, bits.as_mut_ptr()) },
        DrStatus::Ok
    );
    assert_eq!(bits[0], 0x3f80);
    // 1 + 2^-8 is a tie and rounds to even; 1 + 3*2^-8 rounds up.
    assert_eq!(bits[1], 0x3f80);
    assert_eq!(bits[2], 0x3f82);
    let mut back = [0f32; 5];
    assert_eq!(
        unsafe { dr_bf16_decode(bits.as_ptr(), 5, back.as_mut_ptr()) },
        DrStatus::Ok
    );
    assert_eq!(back, [1.0, 1.0, 1.015625, -3.5, f32::INFINITY]);
    let mut t = [0u16; 5];
    assert_eq!(
        unsafe { dr_bf16_encode(values.as_ptr(), 5, true, t.as_mut_ptr()) },
        DrStatus::Ok
    );
    assert_eq!(t[2], 0x3f81);
    assert_eq!(
        unsafe { dr_bf16_encode(ptr::null(), 3, false, bits.as_mut_ptr()) },
        DrStatus::InvalidArgument
    );
    assert!(last_error().contains("values"));
}

#[test]
fn loss_matches_naive_oracle() {
    let (b, d, dims) = (5usize, 4usize, [3usize, 6]);
    let si = unit_rows(1, b, d);
    let st = unit_rows(2, b, d);
    let (ti0, ti1, tt0, tt1) = (
        unit_rows(3, b, 3),
        unit_rows(4, b, 6),
        unit_rows(5, b, 3),
        unit_rows(6, b, 6),
    );
    let ti: Vec<f32> = ti0.iter().chain(&ti1).copied().collect();
    let tt: Vec<f32> = tt0.iter().chain(&tt1).copied().collect();
    let temps = [0.01, 0.02];
    let (tau, lambda) = (0.07, 0.75);
    let mut parts = DrLossParts::default();
    let status = unsafe {
        dr_loss(
            si.as_ptr(),
            st.as_ptr(),
            b,
            d,
            ti.as_ptr(),
            tt.as_ptr(),
            dims.as_ptr(),
            temps.as_ptr(),
            2,
            tau,
            lambda,
            &mut parts,
        )
    };
    assert_eq!(status, DrStatus::Ok, "{}", last_error());

    let ce = |p: &[Vec<f64>]| -(0..b).map(|i| p[i][i].ln()).sum::<f64>() / b as f64;
    let clip =
        0.5 * (ce(&softmax_rows(&si, &st, b, d, tau)) + ce(&softmax_rows(&st, &si, b, d, tau)));
    let kl = |p: &[Vec<f64>], q: &[Vec<f64>]| {
        (0..b)
            .map(|i| {
                (0..b)
                    .map(|j| p[i][j] * (p[i][j] / q[i][j].max(1e-12)).ln())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / b as f64
    };
    let s_it = softmax_rows(&si, &st, b, d, tau);
    let s_ti = softmax_rows(&st, &si, b, d, tau);
    let mut distill = 0.0;
    for (k, (tik, ttk, dk)) in [(&ti0, &tt0, 3), (&ti1, &tt1, 6)].into_iter().enumerate() {
        let p_it = softmax_rows(tik, ttk, b, dk, temps[k]);
        let p_ti = softmax_rows(ttk, tik, b, dk, temps[k]);
        distill += 0.5 * (kl(&p_it, &s_it) + kl(&p_ti, &s_ti));
    }
    distill /= 2.0;
    let total = (1.0 - lambda) * clip + lambda * distill;
    assert!((parts.clip - clip).abs() < 1e-9, "{} vs {clip}", parts.clip);
    assert!(
        (parts.distill - distill).abs() < 1e-9,
        "{} vs {distill}",
        parts.distill
    );
    assert!((parts.total - total).abs() < 1e-9);
}

#[test]
fn loss_without_teachers_and_bad_arguments() {
    let (b, d) = (3usize, 4usize);
    let si = unit_rows(7, b, d);
    let mut parts = DrLossParts::default();
    let s = unsafe {
        dr_loss(
            si.as_ptr(),
            si.as_ptr(),
            b,
            d,
            ptr::null(),
            ptr::null(),
            ptr::null(),
            ptr::null(),
            0,
            0.07,
            0.0,
            &mut parts,
        )
    };
    assert_eq!(s, DrStatus::Ok);
    assert!(parts.distill.is_nan());
    assert_eq!(parts.total, parts.clip);
    let s = unsafe {
        dr_loss(
            si.as_ptr(),
            si.as_ptr(),
            b,
            d,
            ptr::null(),
            ptr::null(),
            ptr::null(),
            ptr::null(),
            0,
            -1.0,
            0.0,
            &mut parts,
        )
    };
    assert_eq!(s, DrStatus::Validation);
    let s = unsafe {
        dr_loss(
            si.as_ptr(),
            si.as_ptr(),
            b,
            d,
            ptr::null(),
            ptr::null(),
            ptr::null(),
            ptr::null(),
            0,
            0.07,
            2.0,
            &mut parts,
        )
    };
    assert_eq!(s, DrStatus::Validation, "{}", last_error());
    let s = unsafe {
        dr_loss(
            si.as_ptr(),
            si.as_ptr(),
            b,
            d,
            ptr::null(),
            ptr::null(),
            ptr::null(),
            ptr::null(),
            0,
            0.07,
            0.0,
            ptr::null_mut(),
        )
    };
    assert_eq!(s, DrStatus::InvalidArgument);
}

#[test]
fn ensemble_embed_scales_blocks() {
    let v = [0.6f32, 0.8, 1.0, 0.0, 0.0];
    let dims = [2usize, 3];
    let mut out = [0f32; 5];
    assert_eq!(
        unsafe { dr_ensemble_embed(v.as_ptr(), dims.as_ptr(), 2, out.as_mut_ptr(), 5) },
        DrStatus::Ok
    );
    let s = std::f32::consts::FRAC_1_SQRT_2;
    assert_eq!(out, [0.6 * s, 0.8 * s, s, 0.0, 0.0]);
    assert_eq!(
        unsafe { dr_ensemble_embed(v.as_ptr(), dims.as_ptr(), 2, out.as_mut_ptr(), 4) },
        DrStatus::BufferTooSmall
    );
    let bad = [0.5f32, 0.5, 1.0, 0.0, 0.0];
    assert_eq!(
        unsafe { dr_ensemble_embed(bad.as_ptr(), dims.as_ptr(), 2, out.as_mut_ptr(), 5) },
        DrStatus::Validation
    );
    assert!(last_error().contains("norm"));
}

fn store(dir: &Path) -> PathBuf {
    let path = dir.join("s.drs");
    let cfg = CorpusConfig {
        count: 6,
        image_size: 16,
        ..Default::default()
    };
    write_reinforced_corpus(
        &cfg,
        &path,
        2,
        3,
        &[16, 8],
        AugmentPolicy::moderate((16, 16)),
    )
    .unwrap();
    path
}

#[test]
fn store_handle_reads_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = store(dir.path());
    let reference = Store::open(&path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut h: *mut DrStore = ptr::null_mut();
    assert_eq!(
        unsafe { dr_store_open(cpath.as_ptr(), &mut h) },
        DrStatus::Ok
    );

    let mut info = DrStoreInfo::default();
    assert_eq!(unsafe { dr_store_info(h, &mut info) }, DrStatus::Ok);
    assert_eq!(
        (
            info.records,
            info.teachers,
            info.ensemble_dim,
            info.augmentations,
            info.syn_captions
        ),
        (6, 2, 24, 2, 3)
    );

    let mut ids = vec![0u64; 6];
    assert_eq!(
        unsafe { dr_store_ids(h, ids.as_mut_ptr(), 5) },
        DrStatus::BufferTooSmall
    );
    assert_eq!(
        unsafe { dr_store_ids(h, ids.as_mut_ptr(), 6) },
        DrStatus::Ok
    );
    assert_eq!(ids, reference.ids().collect::<Vec<_>>());

    let rec = reference.read_record(ids[2]).unwrap();
    let mut s: *mut std::ffi::c_char = ptr::null_mut();
    assert_eq!(
        unsafe { dr_store_caption(h, ids[2], 0, &mut s) },
        DrStatus::Ok
    );
    assert_eq!(
        unsafe { CStr::from_ptr(s) }.to_str().unwrap(),
        rec.real_caption
    );
    unsafe { dr_string_free(s) };
    assert_eq!(
        unsafe { dr_store_caption(h, ids[2], 3, &mut s) },
        DrStatus::Ok
    );
    assert_eq!(
        unsafe { CStr::from_ptr(s) }.to_str().unwrap(),
        rec.syn_captions[2]
    );
    unsafe { dr_string_free(s) };
    assert_eq!(
        unsafe { dr_store_caption(h, ids[2], 4, &mut s) },
        DrStatus::InvalidArgument
    );

    let mut e = vec![0f32; 24];
    assert_eq!(
        unsafe { dr_store_embedding(h, ids[2], 0, 1, e.as_mut_ptr(), 24) },
        DrStatus::Ok
    );
    assert_eq!(e, rec.img_embeds[1].decode());
    assert_eq!(
        unsafe { dr_store_embedding(h, ids[2], 1, 0, e.as_mut_ptr(), 24) },
        DrStatus::Ok
    );
    assert_eq!(e, rec.txt_embed.decode());
    assert_eq!(
        unsafe { dr_store_embedding(h, ids[2], 1, 2, e.as_mut_ptr(), 24) },
        DrStatus::Ok
    );
    assert_eq!(e, rec.syn_embeds[1].decode());
    assert_eq!(
        unsafe { dr_store_embedding(h, 999_999, 1, 0, e.as_mut_ptr(), 24) },
        DrStatus::NotFound
    );

    let (mut w, mut hh) = (0u32, 0u32);
    assert_eq!(
        unsafe { dr_store_view(h, ids[2], 1, ptr::null_mut(), 0, &mut w, &mut hh) },
        DrStatus::BufferTooSmall
    );
    assert_eq!((w, hh), (16, 16));
    let mut px = vec![0u8; 16 * 16 * 3];
    assert_eq!(
        unsafe { dr_store_view(h, ids[2], 1, px.as_mut_ptr(), px.len(), &mut w, &mut hh) },
        DrStatus::Ok
    );
    assert_eq!(
        px,
        apply_augmentation(&rec.image, &rec.aug_params[1])
            .unwrap()
            .pixels()
    );

    for f in [dr_store_manifest_json, dr_store_stats_json] {
        assert_eq!(unsafe { f(h, &mut s) }, DrStatus::Ok);
        let v: serde_json::Value =
            serde_json::from_str(unsafe { CStr::from_ptr(s) }.to_str().unwrap()).unwrap();
        assert!(v.is_object());
        unsafe { dr_string_free(s) };
    }
    unsafe { dr_store_free(h) };

    let missing = CString::new(dir.path().join("nope.drs").to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { dr_store_open(missing.as_ptr(), &mut h) },
        DrStatus::Io
    );
    assert!(h.is_null());
    assert!(last_error().contains("nope.drs"));
}

#[test]
fn model_handle_encodes() {
    let dir = tempfile::tempdir().unwrap();
    let model: ClipModel<f32> = ClipModel::new(ClipConfig::small(), 3).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut h: *mut DrModel = ptr::null_mut();
    assert_eq!(
        unsafe { dr_model_load(cpath.as_ptr(), &mut h) },
        DrStatus::Ok
    );
    let mut info = DrModelInfo::default();
    assert_eq!(unsafe { dr_model_info(h, &mut info) }, DrStatus::Ok);
    assert_eq!(info.embed_dim, 32);
    assert!((info.temperature - 0.07).abs() < 1e-6);

    let texts = [
        CString::new("top left red").unwrap(),
        CString::new("a grid of blue tiles").unwrap(),
    ];
    let ptrs: Vec<_> = texts.iter().map(|t| t.as_ptr()).collect();
    let mut out = vec![0f32; 64];
    assert_eq!(
        unsafe { dr_model_encode_texts(h, ptrs.as_ptr(), 2, out.as_mut_ptr(), 64) },
        DrStatus::Ok
    );
    let expected = model
        .text
        .encode_texts(&["top left red", "a grid of blue tiles"])
        .unwrap();
    assert_eq!(out, expected.data());

    let side = info.image_size as usize;
    let px: Vec<u8> = (0..2 * side * side * 3)
        .map(|i| (i * 37 % 251) as u8)
        .collect();
    assert_eq!(
        unsafe { dr_model_encode_images(h, px.as_ptr(), 2, out.as_mut_ptr(), 64) },
        DrStatus::Ok
    );
    for row in out.chunks(32) {
        let n: f32 = row.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-4);
    }
    assert_eq!(
        unsafe { dr_model_encode_images(h, px.as_ptr(), 2, out.as_mut_ptr(), 63) },
        DrStatus::BufferTooSmall
    );
    unsafe { dr_model_free(h) };

    let bad = CString::new(dir.path().join("missing.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dr_model_load(bad.as_ptr(), &mut h) }, DrStatus::Io);
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/drclip.h")
}

#[test]
fn header_compiles_as_c_and_cpp() {
    for (lang, std) in [("c", "-std=c99"), ("c++", "-std=c++11")] {
        let status = Command::new("cc")
            .args(["-fsyntax-only", "-Wall", "-Werror", std, "-x", lang])
            .arg(header())
            .status()
            .expect("run cc");
        assert!(status.success(), "{lang}");
    }
}

const C_PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include <string.h>
#include "drclip.h"

int main(void) {
    float v[3] = {1.0f, 1.00390625f, -2.0f};
    uint16_t bits[3];
    if (dr_bf16_encode(v, 3, false, bits) != DR_STATUS_OK) return 1;
    if (bits[0] != 0x3f80 || bits[1] != 0x3f80 || bits[2] != 0xc000) return 2;
    float img[4] = {1, 0, 0, 1}, txt[4] = {1, 0, 0, 1};
    DrLossParts parts;
    if (dr_loss(img, txt, 2, 2, NULL, NULL, NULL, NULL, 0, 0.5, 0.0, &parts) != DR_STATUS_OK) return 3;
    double want = log(1.0 + exp(-2.0));
    if (fabs(parts.clip - want) > 1e-12) return 4;
    DrStore *store = NULL;
    if (dr_store_open("/nonexistent/store.drs", &store) != DR_STATUS_IO) return 5;
    if (store != NULL || strstr(dr_last_error(), "store.drs") == NULL) return 6;
    printf("ok %s\n", dr_version());
    return 0;
}
"#;

#[test]
fn c_program_links_against_the_static_library() {
    // Test builds refresh the archive under deps/ without copying it up.
    let exe = std::env::current_exe().unwrap();
    let lib = exe.parent().unwrap().join("libdrclip_ffi.a");
    assert!(lib.is_file(), "{} missing", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let bin = dir.path().join("main");
    let out = Command::new("cc")
        .arg("-std=c99")
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&src)
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&bin)
        .output()
        .expect("run cc");
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
