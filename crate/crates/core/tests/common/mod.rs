#![allow(dead_code)]

use drclip::augment::{sample_augmentation, AugmentPolicy, RasterImage};
use drclip::drstore::{ReinforcedRecord, StoreManifest, TeacherEmbeddings};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 0.1 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn teacher_row(rng: &mut ChaCha8Rng, m: &StoreManifest) -> TeacherEmbeddings {
    let blocks: Vec<Vec<f32>> = m
        .teacher_dims
        .iter()
        .map(|&d| unit_vector(rng, d))
        .collect();
    TeacherEmbeddings::encode(&blocks)
}

pub fn random_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> RasterImage {
    RasterImage::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()])
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    const WORDS: [&str; 8] = [
        "a",
        "red",
        "blue",
        "square",
        "on",
        "grid",
        "ünïcödé",
        "photo",
    ];
    (0..rng.gen_range(0..8))
        .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn random_record(rng: &mut ChaCha8Rng, id: u64, m: &StoreManifest) -> ReinforcedRecord {
    let (w, h) = (rng.gen_range(4..24), rng.gen_range(4..24));
    let policy = AugmentPolicy::strong((8, 8));
    ReinforcedRecord {
        id,
        image: random_image(rng, w, h),
        real_caption: random_text(rng),
        syn_captions: (0..m.num_syn_captions).map(|_| random_text(rng)).collect(),
        aug_params: (0..m.num_augmentations)
            .map(|_| sample_augmentation(rng.gen(), &policy, w, h).unwrap())
            .collect(),
        img_embeds: (0..m.num_augmentations)
            .map(|_| teacher_row(rng, m))
            .collect(),
        syn_embeds: (0..m.num_syn_captions)
            .map(|_| teacher_row(rng, m))
            .collect(),
        txt_embed: teacher_row(rng, m),
    }
}

/// Very small student over 16×16 images, for fast training tests.
pub fn tiny_clip() -> drclip::models::ClipConfig {
    use drclip::models::{ClipConfig, HybridTextEncoderConfig, ToyImageEncoderConfig};
    ClipConfig {
        text: HybridTextEncoderConfig {
            vocab_size: 128,
            embed_dim: 16,
            seq_len: 20,
            num_conv_blocks: 1,
            num_attn_blocks: 1,
            kernel_size: 3,
            proj_dim: 16,
            heads: 2,
            mlp_ratio: 2,
        },
        image: ToyImageEncoderConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            proj_dim: 16,
        },
        init_temperature: 0.07,
    }
}

/// Palette-corpus store of 16×16 images.
pub fn tiny_store(
    dir: &std::path::Path,
    name: &str,
    count: usize,
    views: usize,
    captions: usize,
    seed: u64,
) -> std::path::PathBuf {
    use drclip::corpus::{write_reinforced_corpus, CorpusConfig};
    let path = dir.join(name);
    let cfg = CorpusConfig {
        count,
        image_size: 16,
        seed,
        ..Default::default()
    };
    let policy = AugmentPolicy {
        rrc_scale: (0.5, 1.0),
        randaug: (1, 5),
        ..AugmentPolicy::strong((16, 16))
    };
    let summary = write_reinforced_corpus(&cfg, &path, views, captions, &[16, 8], policy).unwrap();
    assert_eq!(summary.written as usize, count);
    path
}
