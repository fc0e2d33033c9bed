use drclip::models::{
    ensemble_embed, load_checkpoint, save_checkpoint, BnMode, BranchKind, ClipConfig, ClipModel,
    ConvFfn, Ctx, HybridTextEncoder, HybridTextEncoderConfig, ModelError, Module, RepBlock,
};
use drclip::numerics::{Graph, Matrix, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random BN statistics/affines so that folding is non-trivial.
fn perturb<T: Scalar, M: Module<T>>(m: &mut M, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.visit_mut(&mut |p| {
        let (lo, hi) = if p.name.ends_with("running_var") {
            (0.2, 2.0)
        } else {
            (-0.5, 0.5)
        };
        if p.name.contains(".bn.") {
            p.value.data_mut().iter_mut().for_each(|v| {
                *v = T::from_f64(rng.gen_range(lo..hi))
                    + if p.name.ends_with("gamma") {
                        T::one()
                    } else {
                        T::zero()
                    }
            });
        }
    });
}

fn small_text_cfg() -> HybridTextEncoderConfig {
    HybridTextEncoderConfig {
        vocab_size: 128,
        embed_dim: 16,
        seq_len: 20,
        num_conv_blocks: 2,
        num_attn_blocks: 1,
        kernel_size: 5,
        proj_dim: 12,
        heads: 2,
        mlp_ratio: 2,
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: u32) -> Vec<Vec<u32>> {
    (0..n)
        .map(|_| {
            (0..rng.gen_range(0..25))
                .map(|_| rng.gen_range(0..vocab))
                .collect()
        })
        .collect()
}

#[test]
fn text_encoder_reparam_equivalence_f32_and_f64() {
    let mut enc =
        HybridTextEncoder::<f64>::new(small_text_cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    perturb(&mut enc, 2);
    let fused = enc.reparameterize().unwrap();
    assert!(fused.is_reparameterized() && !enc.is_reparameterized());
    assert!(fused.param_count() < enc.param_count());
    assert!(fused.op_count().unwrap() < enc.op_count().unwrap());
    let tokens = random_tokens(&mut ChaCha8Rng::seed_from_u64(3), 50, 128);
    let a = enc.encode_tokens(&tokens).unwrap();
    let b = fused.encode_tokens(&tokens).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-10, "{}", a.max_abs_diff(&b));

    let (enc32, fused32) = (
        enc.cast::<f32>(),
        enc.cast::<f32>().reparameterize().unwrap(),
    );
    let a = enc32.encode_tokens(&tokens).unwrap();
    let b = fused32.encode_tokens(&tokens).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-5, "{}", a.max_abs_diff(&b));
}

#[test]
fn identical_sequences_identical_embeddings() {
    let enc =
        HybridTextEncoder::<f32>::new(small_text_cfg(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let e = enc.encode_tokens(&[vec![5, 6, 7], vec![5, 6, 7]]).unwrap();
    assert_eq!(e.row(0), e.row(1));
}

#[test]
fn conv_ffn_and_mixer_reparam() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ffn = ConvFfn::<f32>::new("f", 8, 11, 2, &mut rng).unwrap();
    let mut mixer = RepBlock::<f32>::new(
        "m",
        8,
        11,
        &[BranchKind::ConvBn, BranchKind::Identity],
        &mut rng,
    )
    .unwrap();
    perturb(&mut ffn, 6);
    perturb(&mut mixer, 7);
    let (ffn_f, mixer_f) = (
        ffn.reparameterize().unwrap(),
        mixer.merge_branches().unwrap(),
    );
    assert!(ffn_f.param_count() < ffn.param_count());
    assert!(mixer_f.param_count() < mixer.param_count());
    for _ in 0..100 {
        let x = Matrix::from_fn(3 * 13, 8, |_, _| rng.gen_range(-2.0f32..2.0));
        let run =
            |f: &dyn Fn(&mut Ctx<f32>, drclip::numerics::NodeId) -> drclip::numerics::NodeId| {
                let mut g = Graph::inference();
                let mut ctx = Ctx::new(&mut g, BnMode::Running);
                let xi = ctx.constant(x.clone());
                let y = f(&mut ctx, xi);
                g.value(y).clone()
            };
        let a = run(&|c, x| ffn.forward(c, x, 13).unwrap());
        let b = run(&|c, x| ffn_f.forward(c, x, 13).unwrap());
        assert!(a.max_abs_diff(&b) <= 1e-5);
        let a = run(&|c, x| mixer.forward(c, x, 13).unwrap());
        let b = run(&|c, x| mixer_f.forward(c, x, 13).unwrap());
        assert!(a.max_abs_diff(&b) <= 1e-5);
    }
}

#[test]
fn reference_config_roundtrips_through_checkpoint() {
    let cfg = ClipConfig::default();
    assert_eq!(
        (
            cfg.text.num_conv_blocks,
            cfg.text.num_attn_blocks,
            cfg.text.kernel_size
        ),
        (2, 4, 11)
    );
    let mut model = ClipModel::<f32>::new(cfg, 9).unwrap();
    perturb(&mut model, 10);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, model);

    let fused = model.reparameterize().unwrap();
    let fpath = dir.path().join("f.ckpt");
    save_checkpoint(&fused, &fpath).unwrap();
    let fback = load_checkpoint(&fpath).unwrap();
    assert!(fback.is_reparameterized());
    let texts = ["a red tile on the top left", "blue", ""];
    let a = model.text.encode_texts(&texts).unwrap();
    let b = fback.text.encode_texts(&texts).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-5);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 1);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(ModelError::Checkpoint(_))
    ));
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

#[test]
fn ensemble_of_three_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let vs: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, 7)).collect();
    let refs: Vec<&[f64]> = vs.iter().map(|v| v.as_slice()).collect();
    let e = ensemble_embed(&refs).unwrap();
    assert!((e.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() <= 1e-6);
    for (k, v) in vs.iter().enumerate() {
        for (i, x) in v.iter().enumerate() {
            assert!((e[k * 7 + i] - x / 3f64.sqrt()).abs() <= 1e-15);
        }
    }
    // K copies of x point along x's self-concatenation
    let x = unit(&mut rng, 5);
    let copies = ensemble_embed(&[&x[..], &x[..], &x[..], &x[..]]).unwrap();
    let cat: Vec<f64> = (0..4).flat_map(|_| x.clone()).collect();
    let cos = copies.iter().zip(&cat).map(|(a, b)| a * b).sum::<f64>()
        / cat.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((cos - 1.0).abs() <= 1e-12);
}
