use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{AttnBlock, LayerNormAffine, Linear};
use super::{trunc_normal, BnMode, Ctx, ModelError, Module, Param, ParamKind, INIT_STD};
use crate::augment::RasterImage;
use crate::numerics::{Graph, Matrix, NodeId, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyImageEncoderConfig {
    pub image_size: u32,
    pub patch_size: u32,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub proj_dim: usize,
}

impl Default for ToyImageEncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            proj_dim: 64,
        }
    }
}

impl ToyImageEncoderConfig {
    pub fn num_patches(&self) -> usize {
        let side = (self.image_size / self.patch_size) as usize;
        side * side
    }

    pub fn patch_features(&self) -> usize {
        (self.patch_size * self.patch_size * 3) as usize
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
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

/// Patchify → linear embed + learned positions → transformer blocks → mean pool →
/// projection → l2 normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyImageEncoder<T: Scalar = f32> {
    pub cfg: ToyImageEncoderConfig,
    pub patch_embed: Linear<T>,
    pub pos_embed: Param<T>,
    pub blocks: Vec<AttnBlock<T>>,
    pub ln_final: LayerNormAffine<T>,
    pub proj: Param<T>,
}

impl<T: Scalar> ToyImageEncoder<T> {
    pub fn new(cfg: ToyImageEncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        Ok(Self {
            patch_embed: Linear::new("image.patch_embed", cfg.patch_features(), c, rng),
            pos_embed: Param::new(
                "image.pos_embed",
                trunc_normal(rng, cfg.num_patches(), c, INIT_STD),
                ParamKind::NoDecay,
            ),
            blocks: (0..cfg.depth)
                .map(|i| {
                    AttnBlock::new(
                        &format!("image.block{i}"),
                        c,
                        cfg.heads,
                        cfg.mlp_ratio,
                        false,
                        rng,
                    )
                })
                .collect(),
            ln_final: LayerNormAffine::new("image.ln_final", c),
            proj: Param::new(
                "image.proj",
                trunc_normal(rng, c, cfg.proj_dim, INIT_STD),
                ParamKind::Weight,
            ),
            cfg,
        })
    }

    /// Row-major patches, pixel values mapped to [-0.5, 0.5].
    pub fn patchify(&self, images: &[&RasterImage]) -> Result<Matrix<T>, ModelError> {
        let (size, p) = (self.cfg.image_size, self.cfg.patch_size);
        let side = size / p;
        let feats = self.cfg.patch_features();
        let mut data = Vec::with_capacity(images.len() * self.cfg.num_patches() * feats);
        for img in images {
            if img.width() != size || img.height() != size {
                return Err(ModelError::DimMismatch {
                    expected: (size, size),
                    got: (img.width(), img.height()),
                });
            }
            for py in 0..side {
                for px in 0..side {
                    for y in 0..p {
                        for x in 0..p {
                            let pix = img.pixel(px * p + x, py * p + y);
                            data.extend(pix.iter().map(|&v| T::from_f64(v as f64 / 255.0 - 0.5)));
                        }
                    }
                }
            }
        }
        Ok(Matrix::new(
            images.len() * self.cfg.num_patches(),
            feats,
            data,
        )?)
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, images: &[&RasterImage]) -> Result<NodeId, ModelError> {
        let patches = self.patchify(images)?;
        self.forward_patches(ctx, patches, images.len())
    }

    /// Forward from an already patchified batch (`batch · num_patches` rows).
    pub fn forward_patches(
        &self,
        ctx: &mut Ctx<T>,
        patches: Matrix<T>,
        batch: usize,
    ) -> Result<NodeId, ModelError> {
        let n = self.cfg.num_patches();
        let x = ctx.constant(patches);
        let x = self.patch_embed.forward(ctx, x)?;
        let pos = ctx.bind(&self.pos_embed);
        let p = ctx
            .g
            .gather_rows(pos, Arc::new((0..batch * n).map(|i| i % n).collect()))?;
        let mut x = ctx.g.add(x, p)?;
        for block in &self.blocks {
            x = block.forward(ctx, x, n)?;
        }
        let x = self.ln_final.forward(ctx, x)?;
        let inv = T::from_f64(1.0 / n as f64);
        let pool = ctx.constant(Matrix::from_fn(batch, batch * n, |b, i| {
            if i / n == b {
                inv
            } else {
                T::zero()
            }
        }));
        let x = ctx.g.matmul(pool, x)?;
        let proj = ctx.bind(&self.proj);
        let x = ctx.g.matmul(x, proj)?;
        Ok(ctx.g.l2_normalize_rows(x)?)
    }

    pub fn encode(&self, images: &[&RasterImage]) -> Result<Matrix<T>, ModelError> {
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, BnMode::Running);
        let out = self.forward(&mut ctx, images)?;
        Ok(g.take_value(out))
    }

    pub fn cast<U: Scalar>(&self) -> ToyImageEncoder<U> {
        ToyImageEncoder {
            cfg: self.cfg.clone(),
            patch_embed: self.patch_embed.cast(),
            pos_embed: self.pos_embed.cast(),
            blocks: self.blocks.iter().map(AttnBlock::cast).collect(),
            ln_final: self.ln_final.cast(),
            proj: self.proj.cast(),
        }
    }
}

impl<T: Scalar> Module<T> for ToyImageEncoder<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.patch_embed.visit(f);
        f(&self.pos_embed);
        for b in &self.blocks {
            b.visit(f);
        }
        self.ln_final.visit(f);
        f(&self.proj);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.patch_embed.visit_mut(f);
        f(&mut self.pos_embed);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.ln_final.visit_mut(f);
        f(&mut self.proj);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn cfg() -> ToyImageEncoderConfig {
        ToyImageEncoderConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            proj_dim: 5,
        }
    }

    #[test]
    fn constant_image_is_deterministic() {
        let enc = ToyImageEncoder::<f32>::new(cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let img = RasterImage::from_fn(8, 8, |_, _| [200, 10, 40]);
        assert_eq!(enc.encode(&[&img]).unwrap(), enc.encode(&[&img]).unwrap());
    }

    #[test]
    fn outputs_unit_norm() {
        let enc = ToyImageEncoder::<f32>::new(cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let imgs: Vec<_> = (0..100)
            .map(|_| RasterImage::from_fn(8, 8, |_, _| [rng.gen(), rng.gen(), rng.gen()]))
            .collect();
        let refs: Vec<_> = imgs.iter().collect();
        let e = enc.encode(&refs).unwrap();
        for r in 0..100 {
            let n: f32 = e.row(r).iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn patch_order_matters() {
        let enc = ToyImageEncoder::<f64>::new(cfg(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let img = RasterImage::from_fn(8, 8, |x, y| {
            if x < 4 && y < 4 {
                [255, 0, 0]
            } else {
                [0, 0, 255]
            }
        });
        // same patches, swapped top-left and bottom-right
        let swapped = RasterImage::from_fn(8, 8, |x, y| {
            if x >= 4 && y >= 4 {
                [255, 0, 0]
            } else {
                [0, 0, 255]
            }
        });
        let a = enc.encode(&[&img]).unwrap();
        let b = enc.encode(&[&swapped]).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-9);
    }

    #[test]
    fn wrong_size_rejected() {
        let enc = ToyImageEncoder::<f32>::new(cfg(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let img = RasterImage::from_fn(9, 8, |_, _| [0; 3]);
        assert!(matches!(
            enc.encode(&[&img]),
            Err(ModelError::DimMismatch { .. })
        ));
        let mut bad = cfg();
        bad.image_size = 10;
        assert!(bad.validate().is_err());
    }
}
