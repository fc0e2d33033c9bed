use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{AttnBlock, LayerNormAffine};
use super::rep::{BranchKind, ConvFfn, RepBlock};
use super::{trunc_normal, BnMode, Ctx, ModelError, Module, Param, ParamKind, INIT_STD};
use crate::drstore::providers::words;
use crate::numerics::{Graph, Matrix, NodeId, Scalar};
use crate::util::fnv1a64;

pub const PAD: u32 = 0;
pub const SOT: u32 = 1;
pub const EOT: u32 = 2;
pub const UNK: u32 = 3;
const FIRST_WORD: u32 = 4;

/// Words with reserved ids; everything else is hashed into the remaining slots.
pub const DEFAULT_LEXICON: &[&str] = &[
    "a", "an", "the", "of", "in", "on", "at", "with", "and", "is", "are", "this", "that", "there",
    "some", "photo", "picture", "image", "showing", "tile", "tiles", "square", "squares", "grid",
    "quadrant", "top", "bottom", "left", "right", "upper", "lower", "corner", "red", "green",
    "blue", "yellow", "cyan", "magenta", "white", "black", "color", "colors", "colored", "patch",
    "block", "mostly", "mixed", "bright", "dark",
];

/// Lowercased word tokenizer with a fixed lexicon and hashed overflow buckets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub vocab_size: usize,
    pub lexicon: Vec<String>,
}

impl Tokenizer {
    pub fn new(vocab_size: usize) -> Self {
        let room = vocab_size.saturating_sub(FIRST_WORD as usize);
        Self {
            vocab_size,
            lexicon: DEFAULT_LEXICON
                .iter()
                .take(room)
                .map(|s| s.to_string())
                .collect(),
        }
    }

    fn buckets(&self) -> usize {
        self.vocab_size
            .saturating_sub(FIRST_WORD as usize + self.lexicon.len())
    }

    pub fn token(&self, word: &str) -> u32 {
        if let Some(i) = self.lexicon.iter().position(|w| w == word) {
            return FIRST_WORD + i as u32;
        }
        match self.buckets() {
            0 => UNK,
            n => {
                FIRST_WORD
                    + self.lexicon.len() as u32
                    + (fnv1a64(word.as_bytes()) % n as u64) as u32
            }
        }
    }

    /// Word ids without start/end markers.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        words(text).map(|w| self.token(&w)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridTextEncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub seq_len: usize,
    pub num_conv_blocks: usize,
    pub num_attn_blocks: usize,
    pub kernel_size: usize,
    pub proj_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for HybridTextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            embed_dim: 64,
            seq_len: 77,
            num_conv_blocks: 2,
            num_attn_blocks: 4,
            kernel_size: 11,
            proj_dim: 64,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl HybridTextEncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel size {} must be odd", self.kernel_size));
        }
        if self.seq_len < 3 {
            return bad("sequence length must leave room for start and end tokens".into());
        }
        if self.vocab_size <= FIRST_WORD as usize {
            return bad(format!("vocabulary of {} is too small", self.vocab_size));
        }
        if self.embed_dim == 0 || self.proj_dim == 0 || self.mlp_ratio == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "{} heads do not divide width {}",
                self.heads, self.embed_dim
            ));
        }
        Ok(())
    }
}

/// Token embedding → [RepMixer + ConvFFN] × n_conv → [attention block] × n_attn →
/// end-token state → projection → l2 normalization. Attention is causal.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridTextEncoder<T: Scalar = f32> {
    pub cfg: HybridTextEncoderConfig,
    pub tokenizer: Tokenizer,
    pub tok_embed: Param<T>,
    pub pos_embed: Param<T>,
    pub conv_blocks: Vec<(RepBlock<T>, ConvFfn<T>)>,
    pub attn_blocks: Vec<AttnBlock<T>>,
    pub ln_final: LayerNormAffine<T>,
    pub proj: Param<T>,
}

impl<T: Scalar> HybridTextEncoder<T> {
    pub fn new(cfg: HybridTextEncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let conv_blocks = (0..cfg.num_conv_blocks)
            .map(|i| {
                Ok((
                    RepBlock::new(
                        &format!("text.conv{i}.mixer"),
                        c,
                        cfg.kernel_size,
                        &[BranchKind::ConvBn, BranchKind::Identity],
                        rng,
                    )?,
                    ConvFfn::new(
                        &format!("text.conv{i}.ffn"),
                        c,
                        cfg.kernel_size,
                        cfg.mlp_ratio,
                        rng,
                    )?,
                ))
            })
            .collect::<Result<_, ModelError>>()?;
        let attn_blocks = (0..cfg.num_attn_blocks)
            .map(|i| {
                AttnBlock::new(
                    &format!("text.attn{i}"),
                    c,
                    cfg.heads,
                    cfg.mlp_ratio,
                    true,
                    rng,
                )
            })
            .collect();
        Ok(Self {
            tokenizer: Tokenizer::new(cfg.vocab_size),
            tok_embed: Param::new(
                "text.tok_embed",
                trunc_normal(rng, cfg.vocab_size, c, INIT_STD),
                ParamKind::NoDecay,
            ),
            pos_embed: Param::new(
                "text.pos_embed",
                trunc_normal(rng, cfg.seq_len, c, INIT_STD),
                ParamKind::NoDecay,
            ),
            conv_blocks,
            attn_blocks,
            ln_final: LayerNormAffine::new("text.ln_final", c),
            proj: Param::new(
                "text.proj",
                trunc_normal(rng, c, cfg.proj_dim, INIT_STD),
                ParamKind::Weight,
            ),
            cfg,
        })
    }

    pub fn tokenize(&self, texts: &[&str]) -> Vec<Vec<u32>> {
        texts.iter().map(|t| self.tokenizer.encode(t)).collect()
    }

    /// Wraps each sequence in start/end markers, truncating and padding to `seq_len`.
    /// Returns flat token ids and the flat row index of each end token.
    fn prepare(&self, tokens: &[Vec<u32>]) -> Result<(Vec<usize>, Vec<usize>), ModelError> {
        let s = self.cfg.seq_len;
        let mut ids = Vec::with_capacity(tokens.len() * s);
        let mut ends = Vec::with_capacity(tokens.len());
        for (b, seq) in tokens.iter().enumerate() {
            if let Some(&t) = seq.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
                return Err(ModelError::TokenOutOfVocab {
                    token: t,
                    vocab: self.cfg.vocab_size,
                });
            }
            let body = &seq[..seq.len().min(s - 2)];
            ids.push(SOT as usize);
            ids.extend(body.iter().map(|&t| t as usize));
            ids.push(EOT as usize);
            ends.push(b * s + body.len() + 1);
            ids.resize((b + 1) * s, PAD as usize);
        }
        Ok((ids, ends))
    }

    /// Batch of unit-norm embeddings, one row per token sequence.
    pub fn forward(&self, ctx: &mut Ctx<T>, tokens: &[Vec<u32>]) -> Result<NodeId, ModelError> {
        let s = self.cfg.seq_len;
        let (ids, ends) = self.prepare(tokens)?;
        let positions: Vec<usize> = (0..ids.len()).map(|i| i % s).collect();
        let table = ctx.bind(&self.tok_embed);
        let pos = ctx.bind(&self.pos_embed);
        let x = ctx.g.gather_rows(table, Arc::new(ids))?;
        let p = ctx.g.gather_rows(pos, Arc::new(positions))?;
        let mut x = ctx.g.add(x, p)?;
        for (mixer, ffn) in &self.conv_blocks {
            x = mixer.forward(ctx, x, s)?;
            x = ffn.forward(ctx, x, s)?;
        }
        for block in &self.attn_blocks {
            x = block.forward(ctx, x, s)?;
        }
        let x = self.ln_final.forward(ctx, x)?;
        let x = ctx.g.gather_rows(x, Arc::new(ends))?;
        let proj = ctx.bind(&self.proj);
        let x = ctx.g.matmul(x, proj)?;
        Ok(ctx.g.l2_normalize_rows(x)?)
    }

    /// Inference with running batch-norm statistics.
    pub fn encode_tokens(&self, tokens: &[Vec<u32>]) -> Result<Matrix<T>, ModelError> {
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, BnMode::Running);
        let out = self.forward(&mut ctx, tokens)?;
        Ok(g.take_value(out))
    }

    pub fn encode_texts(&self, texts: &[&str]) -> Result<Matrix<T>, ModelError> {
        self.encode_tokens(&self.tokenize(texts))
    }

    /// Sequential ops for one inference forward of a single sequence.
    pub fn op_count(&self) -> Result<usize, ModelError> {
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, BnMode::Running);
        self.forward(&mut ctx, &[vec![]])?;
        Ok(ctx.op_count())
    }

    pub fn is_reparameterized(&self) -> bool {
        self.conv_blocks
            .iter()
            .all(|(m, f)| m.is_fused() && f.mixer.is_fused())
    }

    /// Inference form with every conv-BN/skip structure collapsed.
    pub fn reparameterize(&self) -> Result<Self, ModelError> {
        let mut out = self.clone();
        out.conv_blocks = self
            .conv_blocks
            .iter()
            .map(|(m, f)| Ok((m.merge_branches()?, f.reparameterize()?)))
            .collect::<Result<_, ModelError>>()?;
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> HybridTextEncoder<U> {
        HybridTextEncoder {
            cfg: self.cfg.clone(),
            tokenizer: self.tokenizer.clone(),
            tok_embed: self.tok_embed.cast(),
            pos_embed: self.pos_embed.cast(),
            conv_blocks: self
                .conv_blocks
                .iter()
                .map(|(m, f)| (m.cast(), f.cast()))
                .collect(),
            attn_blocks: self.attn_blocks.iter().map(AttnBlock::cast).collect(),
            ln_final: self.ln_final.cast(),
            proj: self.proj.cast(),
        }
    }
}

impl<T: Scalar> Module<T> for HybridTextEncoder<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.tok_embed);
        f(&self.pos_embed);
        for (m, ffn) in &self.conv_blocks {
            m.visit(f);
            ffn.visit(f);
        }
        for b in &self.attn_blocks {
            b.visit(f);
        }
        self.ln_final.visit(f);
        f(&self.proj);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.tok_embed);
        f(&mut self.pos_embed);
        for (m, ffn) in &mut self.conv_blocks {
            m.visit_mut(f);
            ffn.visit_mut(f);
        }
        for b in &mut self.attn_blocks {
            b.visit_mut(f);
        }
        self.ln_final.visit_mut(f);
        f(&mut self.proj);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn tokenizer_lexicon_and_hashing() {
        let t = Tokenizer::new(512);
        let ids = t.encode("A RED square, zebra!");
        assert_eq!(ids[0], FIRST_WORD);
        assert_eq!(ids[1], t.token("red"));
        assert!(ids[3] >= FIRST_WORD + DEFAULT_LEXICON.len() as u32 && (ids[3] as usize) < 512);
        assert_eq!(t.encode("zebra"), vec![ids[3]]);
        let tiny = Tokenizer::new(6);
        assert_eq!(tiny.lexicon.len(), 2);
        assert_eq!(tiny.token("zebra"), UNK);
    }

    fn small_cfg() -> HybridTextEncoderConfig {
        HybridTextEncoderConfig {
            vocab_size: 64,
            embed_dim: 8,
            seq_len: 10,
            num_conv_blocks: 1,
            num_attn_blocks: 1,
            kernel_size: 3,
            proj_dim: 6,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn prepare_wraps_truncates_and_pads() {
        let enc =
            HybridTextEncoder::<f64>::new(small_cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (ids, ends) = enc.prepare(&[vec![9, 9], (5..30).collect()]).unwrap();
        assert_eq!(&ids[..10], &[1, 9, 9, 2, 0, 0, 0, 0, 0, 0]);
        assert_eq!(ids[10], 1);
        assert_eq!(ids[19], 2);
        assert_eq!(ends, vec![3, 19]);
        assert!(matches!(
            enc.prepare(&[vec![64]]),
            Err(ModelError::TokenOutOfVocab {
                token: 64,
                vocab: 64
            })
        ));
    }

    #[test]
    fn embeddings_are_unit_and_pure() {
        let enc =
            HybridTextEncoder::<f64>::new(small_cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let e = enc
            .encode_texts(&["red tile", "red tile", "blue tile"])
            .unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert_ne!(e.row(0), e.row(2));
        for r in 0..3 {
            let n: f64 = e.row(r).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_cfg();
        c.kernel_size = 4;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.seq_len = 2;
        assert!(c.validate().is_err());
        assert!(HybridTextEncoderConfig::default().validate().is_ok());
    }
}
