mod common;

use std::collections::HashMap;

use common::{random_image, random_record};
use drclip::augment::{apply_augmentation, AugmentPolicy, AugmentationParams, RasterImage};
use drclip::drstore::{
    choose_view, reinforce, CaptionProvider, EmbedTarget, MmebTeacher, PlainPair, ProviderError,
    RandomProjectionTeacher, ReinforceConfig, Store, StoreError, StoreManifest, StoreWriter,
    TeacherEmbeddings, TeacherProvider, TrainingView, SECTIONS,
};
use drclip::numerics::bf16::{bf16_bits_to_f32, Bf16Rounding};
use drclip::numerics::mmeb::EmbeddingFile;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write_store(
    path: &std::path::Path,
    m: &StoreManifest,
    n: u64,
    seed: u64,
) -> Vec<drclip::drstore::ReinforcedRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = StoreWriter::create(path, m.clone()).unwrap();
    let recs: Vec<_> = (0..n)
        .map(|i| random_record(&mut rng, i * 7 + 3, m))
        .collect();
    for r in &recs {
        w.write_record(r).unwrap();
    }
    assert_eq!(w.finish().unwrap(), n);
    recs
}

#[test]
fn single_record_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.mdrs");
    let m = StoreManifest::new(vec![4], 1, 1);
    let recs = write_store(&path, &m, 1, 1);
    let store = Store::open(&path).unwrap();
    assert_eq!(store.len(), 1);
    assert_eq!(store.manifest().sample_count, 1);
    assert_eq!(store.read_record(recs[0].id).unwrap(), recs[0]);
}

#[test]
fn shuffled_reads_of_hundred_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("many.mdrs");
    let m = StoreManifest::new(vec![8, 4], 3, 2);
    let mut recs = write_store(&path, &m, 100, 2);
    let store = Store::open(&path).unwrap();
    recs.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    for r in &recs {
        let back = store.read_record(r.id).unwrap();
        assert_eq!(&back, r);
        for (a, b) in back.img_embeds.iter().zip(&r.img_embeds) {
            assert_eq!(a.bits(), b.bits());
        }
    }
    store.verify_index().unwrap();
    assert!(matches!(
        store.read_record(1),
        Err(StoreError::UnknownId(1))
    ));
}

#[test]
fn zero_synthetic_captions_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s0.mdrs");
    let m = StoreManifest::new(vec![4], 2, 0);
    let recs = write_store(&path, &m, 3, 3);
    let store = Store::open(&path).unwrap();
    let v = store.draw_training_view(recs[0].id, 5).unwrap();
    assert_eq!(v.s, None);
    assert!(v.syn_caption.is_none() && v.syn_embed.is_none());
    assert_eq!(store.stats().unwrap().syn_embeds.raw, 0);
}

#[test]
fn manifest_mismatch_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = StoreManifest::new(vec![4], 2, 1);
    let mut w = StoreWriter::create(dir.path().join("x.mdrs"), m.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let other = StoreManifest::new(vec![4], 3, 1);
    let rec = random_record(&mut rng, 1, &other);
    assert!(matches!(
        w.write_record(&rec),
        Err(StoreError::ManifestMismatch(_))
    ));
    let wide = StoreManifest::new(vec![5], 2, 1);
    let rec = random_record(&mut rng, 2, &wide);
    assert!(matches!(
        w.write_record(&rec),
        Err(StoreError::ManifestMismatch(_))
    ));
    let mut rec = random_record(&mut rng, 3, &m);
    rec.txt_embed = TeacherEmbeddings::encode(&[vec![0.5f32, 0.0, 0.0, 0.0]]);
    assert!(matches!(
        w.write_record(&rec),
        Err(StoreError::InvalidEmbedding(_))
    ));
    let rec = random_record(&mut rng, 4, &m);
    w.write_record(&rec).unwrap();
    assert!(matches!(
        w.write_record(&rec),
        Err(StoreError::DuplicateId(4))
    ));
    assert_eq!(w.finish().unwrap(), 1);
}

#[test]
fn append_extends_index_and_scan_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.mdrs");
    let m = StoreManifest::new(vec![4], 1, 1);
    let first = write_store(&path, &m, 5, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut w = StoreWriter::append(&path).unwrap();
    let extra: Vec<_> = (100..104)
        .map(|id| random_record(&mut rng, id, &m))
        .collect();
    for r in &extra {
        w.write_record(r).unwrap();
    }
    assert!(matches!(
        w.write_record(&first[0]),
        Err(StoreError::DuplicateId(_))
    ));
    w.finish().unwrap();
    let store = Store::open(&path).unwrap();
    assert_eq!(store.len(), 9);
    store.verify_index().unwrap();
    for r in first.iter().chain(&extra) {
        assert_eq!(&store.read_record(r.id).unwrap(), r);
    }
}

#[test]
fn dropped_writer_still_finalizes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.mdrs");
    let m = StoreManifest::new(vec![4], 1, 0);
    {
        let mut w = StoreWriter::create(&path, m.clone()).unwrap();
        w.write_record(&random_record(&mut ChaCha8Rng::seed_from_u64(1), 1, &m))
            .unwrap();
    }
    assert_eq!(Store::open(&path).unwrap().len(), 1);
}

#[test]
fn corrupt_files_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.mdrs");
    write_store(&path, &StoreManifest::new(vec![4], 1, 0), 2, 6);
    let bytes = std::fs::read(&path).unwrap();
    let bad = dir.path().join("bad.mdrs");
    std::fs::write(&bad, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(Store::open(&bad), Err(StoreError::Corrupt(_))));
    let mut flipped = bytes.clone();
    flipped[0] = b'X';
    std::fs::write(&bad, &flipped).unwrap();
    assert!(matches!(Store::open(&bad), Err(StoreError::Corrupt(_))));
    // damage the first gzip member's payload
    let mut damaged = bytes.clone();
    let store = Store::open(&path).unwrap();
    let e = store.index()[0];
    let at = (e.offset + 9 + 56 + 12) as usize;
    damaged[at] ^= 0xff;
    std::fs::write(&bad, &damaged).unwrap();
    assert!(Store::open(&bad).unwrap().read_record(e.id).is_err());
}

#[test]
fn stats_match_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.mdrs");
    let m = StoreManifest::new(vec![6, 10], 3, 2);
    let recs = write_store(&path, &m, 11, 7);
    let stats = Store::open(&path).unwrap().stats().unwrap();
    assert_eq!(stats.sample_count, 11);
    assert_eq!(
        stats.raw_embedding_bytes(),
        11 * (3 * 2 + 2 * 2 + 2) * 8 * 2
    );
    assert_eq!(stats.img_embeds.raw, 11 * 3 * 16 * 2);
    let pixels: u64 = recs.iter().map(|r| r.image.pixels().len() as u64 + 9).sum();
    assert_eq!(stats.images.raw, pixels);
    let captions: u64 = recs.iter().map(|r| r.real_caption.len() as u64).sum();
    assert_eq!(stats.captions.raw, captions);
    let mut raw = 0;
    let mut comp = 0;
    for s in SECTIONS {
        raw += stats.section(s).raw;
        comp += stats.section(s).compressed;
    }
    assert_eq!((raw, comp), (stats.total.raw, stats.total.compressed));
    assert!(stats.file_bytes > stats.total.compressed);
}

#[test]
fn reference_configuration_image_embedding_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ref.mdrs");
    let m = StoreManifest::new(vec![768, 768], 30, 0);
    write_store(&path, &m, 1, 8);
    let stats = Store::open(&path).unwrap().stats().unwrap();
    assert_eq!(stats.img_embeds.raw, 92_160);
}

#[test]
fn empty_store_stats_are_zero() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.mdrs");
    StoreWriter::create(&path, StoreManifest::new(vec![4], 1, 0))
        .unwrap()
        .finish()
        .unwrap();
    let store = Store::open(&path).unwrap();
    assert!(store.is_empty());
    let stats = store.stats().unwrap();
    assert_eq!(stats.sample_count, 0);
    for s in SECTIONS {
        assert_eq!(stats.section(s), Default::default());
    }
    assert_eq!(stats.total, Default::default());
}

#[test]
fn singleton_views_ignore_seed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.mdrs");
    let recs = write_store(&path, &StoreManifest::new(vec![4], 1, 1), 1, 9);
    let store = Store::open(&path).unwrap();
    let a = store.draw_training_view(recs[0].id, 1).unwrap();
    let b = store.draw_training_view(recs[0].id, 987654).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.j, a.s), (0, Some(0)));
}

#[test]
fn views_are_deterministic_and_use_stored_slices() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.mdrs");
    let recs = write_store(&path, &StoreManifest::new(vec![4, 4], 5, 3), 4, 10);
    let store = Store::open(&path).unwrap();
    for r in &recs {
        for seed in 0..20 {
            let a = store.draw_training_view(r.id, seed).unwrap();
            assert_eq!(a, store.draw_training_view(r.id, seed).unwrap());
            let s = a.s.unwrap();
            assert_eq!(a.img_embed.bits(), r.img_embeds[a.j].bits());
            assert_eq!(a.syn_embed.as_ref().unwrap().bits(), r.syn_embeds[s].bits());
            assert_eq!(a.txt_embed.bits(), r.txt_embed.bits());
            assert_eq!(a.syn_caption.as_deref(), Some(r.syn_captions[s].as_str()));
            assert_eq!(
                a.image,
                apply_augmentation(&r.image, &r.aug_params[a.j]).unwrap()
            );
        }
    }
}

#[test]
fn view_choice_is_uniform() {
    let (j_count, s_count, n) = (5usize, 3usize, 10_000usize);
    let mut js = vec![0usize; j_count];
    let mut ss = vec![0usize; s_count];
    for seed in 0..n as u64 {
        let (j, s) = choose_view(seed, j_count, s_count);
        js[j] += 1;
        ss[s.unwrap()] += 1;
    }
    for (counts, k) in [(&js, j_count), (&ss, s_count)] {
        let p = 1.0 / k as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in counts.iter() {
            assert!((c as f64 - n as f64 * p).abs() <= 5.0 * sigma, "{counts:?}");
        }
    }
}

struct Echo;

impl CaptionProvider for Echo {
    fn captions(
        &self,
        id: u64,
        _: &RasterImage,
        real: &str,
        count: usize,
    ) -> Result<Vec<String>, ProviderError> {
        if id == 13 {
            return Err(ProviderError("captioner offline".into()));
        }
        Ok((0..count).map(|s| format!("{real} variant {s}")).collect())
    }
}

fn pairs(n: u64, seed: u64) -> Vec<PlainPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|id| PlainPair {
            id,
            image: random_image(&mut rng, 12, 12),
            caption: format!("pair number {id}"),
        })
        .collect()
}

#[test]
fn reinforce_pipeline_with_random_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.mdrs");
    let teacher = RandomProjectionTeacher::new(16, 77);
    let mut w = StoreWriter::create(&path, StoreManifest::new(vec![16], 2, 2)).unwrap();
    let cfg = ReinforceConfig {
        policy: AugmentPolicy::strong((8, 8)),
        seed: 1,
    };
    let summary = reinforce(pairs(32, 1), Some(&Echo), &[&teacher], &cfg, &mut w).unwrap();
    w.finish().unwrap();
    assert_eq!(summary.written, 31);
    assert_eq!(summary.skipped.len(), 1);
    assert_eq!(summary.skipped[0].id, 13);
    let store = Store::open(&path).unwrap();
    assert_eq!(store.len(), 31);
    store.verify_index().unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let r = store.read_record(id).unwrap();
        r.validate(store.manifest()).unwrap();
        for (j, p) in r.aug_params.iter().enumerate() {
            let view = apply_augmentation(&r.image, p).unwrap();
            let expect = TeacherEmbeddings::encode(&[teacher.embed_image(id, j, &view).unwrap()]);
            assert_eq!(r.img_embeds[j], expect);
        }
        assert_eq!(r.syn_captions[1], format!("pair number {id} variant 1"));
    }
}

#[test]
fn identity_policy_embeds_source_image() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("i.mdrs");
    let teacher = RandomProjectionTeacher::new(8, 5);
    let mut w = StoreWriter::create(&path, StoreManifest::new(vec![8], 1, 0)).unwrap();
    let cfg = ReinforceConfig {
        policy: AugmentPolicy::identity((12, 12)),
        seed: 3,
    };
    let input = pairs(4, 2);
    reinforce(input.clone(), None, &[&teacher], &cfg, &mut w).unwrap();
    w.finish().unwrap();
    let store = Store::open(&path).unwrap();
    for p in &input {
        let r = store.read_record(p.id).unwrap();
        assert_eq!(
            r.aug_params[0].crop,
            AugmentationParams::identity(12, 12).crop
        );
        let direct = teacher.embed_image(p.id, 0, &p.image).unwrap();
        assert_eq!(r.img_embeds[0], TeacherEmbeddings::encode(&[direct]));
    }
}

#[test]
fn mmeb_teacher_feeds_reinforce_and_checks_width() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let m = StoreManifest::new(vec![6], 2, 0);
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    let mut expected = HashMap::new();
    for id in 0..3u64 {
        for t in [
            EmbedTarget::ImageView(0),
            EmbedTarget::ImageView(1),
            EmbedTarget::RealCaption,
        ] {
            let v = common::unit_vector(&mut rng, 6);
            expected.insert(t.row_id(id), v.clone());
            ids.push(t.row_id(id));
            rows.push(v);
        }
    }
    let mmeb = dir.path().join("teacher.mmeb");
    std::fs::write(
        &mmeb,
        EmbeddingFile::from_rows_bf16(ids, &rows, Bf16Rounding::NearestEven)
            .unwrap()
            .to_bytes()
            .unwrap(),
    )
    .unwrap();

    match MmebTeacher::open(&mmeb, Some(8), 0.01) {
        Err(StoreError::EmbeddingDimMismatch {
            source_name,
            expected,
            got,
        }) => {
            assert!(source_name.contains("teacher.mmeb"));
            assert_eq!((expected, got), (8, 6));
        }
        other => panic!("unexpected {:?}", other.err()),
    }
    let teacher = MmebTeacher::open(&mmeb, Some(6), 0.01).unwrap();
    let path = dir.path().join("m.mdrs");
    let mut w = StoreWriter::create(&path, m.clone()).unwrap();
    let cfg = ReinforceConfig {
        policy: AugmentPolicy::strong((8, 8)),
        seed: 0,
    };
    let summary = reinforce(pairs(4, 3), None, &[&teacher], &cfg, &mut w).unwrap();
    w.finish().unwrap();
    // sample 3 has no rows in the file
    assert_eq!(summary.written, 3);
    assert_eq!(summary.skipped[0].id, 3);
    let store = Store::open(&path).unwrap();
    let r = store.read_record(1).unwrap();
    let stored: Vec<f32> = r.img_embeds[1]
        .bits()
        .iter()
        .map(|&b| bf16_bits_to_f32(b))
        .collect();
    let want = &expected[&EmbedTarget::ImageView(1).row_id(1)];
    for (a, b) in stored.iter().zip(want) {
        assert!((a - b).abs() <= b.abs() / 128.0);
    }
}

#[test]
fn teacher_width_checked_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = RandomProjectionTeacher::new(8, 0);
    let mut w = StoreWriter::create(
        dir.path().join("w.mdrs"),
        StoreManifest::new(vec![16], 1, 0),
    )
    .unwrap();
    let cfg = ReinforceConfig {
        policy: AugmentPolicy::strong((8, 8)),
        seed: 0,
    };
    let err = reinforce(pairs(2, 0), None, &[&teacher], &cfg, &mut w).unwrap_err();
    assert!(matches!(
        err,
        StoreError::EmbeddingDimMismatch {
            expected: 16,
            got: 8,
            ..
        }
    ));
    assert!(w.is_empty());
}

#[test]
fn training_view_select_bounds() {
    let m = StoreManifest::new(vec![4], 2, 1);
    let r = random_record(&mut ChaCha8Rng::seed_from_u64(20), 1, &m);
    assert!(TrainingView::select(&r, 2, None).is_err());
    assert!(TrainingView::select(&r, 1, Some(1)).is_err());
    assert_eq!(TrainingView::select(&r, 1, Some(0)).unwrap().j, 1);
}

#[test]
fn plain_pairs_load_from_dir_and_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let imgs: Vec<_> = (0..3).map(|_| random_image(&mut rng, 5, 4)).collect();
    for (i, img) in imgs.iter().enumerate() {
        drclip::drstore::save_png(img, &dir.path().join(format!("{}.png", 10 + i))).unwrap();
        std::fs::write(
            dir.path().join(format!("{}.txt", 10 + i)),
            format!("caption {i}\n"),
        )
        .unwrap();
    }
    let loaded = drclip::drstore::load_pairs(dir.path()).unwrap();
    assert_eq!(loaded.len(), 3);
    assert_eq!(loaded[1].id, 11);
    assert_eq!(loaded[1].caption, "caption 1");
    assert_eq!(loaded[1].image, imgs[1]);

    let index = dir.path().join("index.jsonl");
    std::fs::write(&index, "{\"id\": 5, \"image\": \"12.png\", \"caption\": \"x\"}\n\n{\"image\": \"10.png\", \"caption\": \"y\"}\n").unwrap();
    let loaded = drclip::drstore::load_pairs(&index).unwrap();
    assert_eq!(loaded.iter().map(|p| p.id).collect::<Vec<_>>(), vec![5, 2]);
    assert_eq!(loaded[0].image, imgs[2]);

    let empty = tempfile::tempdir().unwrap();
    assert!(drclip::drstore::load_pairs(empty.path())
        .unwrap()
        .is_empty());
}
