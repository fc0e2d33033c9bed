use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{ToyImageEncoder, ToyImageEncoderConfig};
use super::text::{HybridTextEncoder, HybridTextEncoderConfig};
use super::{ModelError, Module, Param, ParamKind};
use crate::losses::{LogitScale, DEFAULT_STUDENT_TEMP};
use crate::numerics::{Matrix, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub text: HybridTextEncoderConfig,
    pub image: ToyImageEncoderConfig,
    /// Initial student temperature τ̂.
    pub init_temperature: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            text: HybridTextEncoderConfig::default(),
            image: ToyImageEncoderConfig::default(),
            init_temperature: DEFAULT_STUDENT_TEMP,
        }
    }
}

impl ClipConfig {
    /// Compact student for quick runs on one CPU core.
    pub fn small() -> Self {
        Self {
            text: HybridTextEncoderConfig {
                embed_dim: 32,
                seq_len: 24,
                num_conv_blocks: 1,
                num_attn_blocks: 1,
                kernel_size: 5,
                proj_dim: 32,
                heads: 2,
                mlp_ratio: 2,
                ..Default::default()
            },
            image: ToyImageEncoderConfig {
                embed_dim: 32,
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
                proj_dim: 32,
                ..Default::default()
            },
            init_temperature: DEFAULT_STUDENT_TEMP,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.text.validate()?;
        self.image.validate()?;
        if self.text.proj_dim != self.image.proj_dim {
            return Err(ModelError::InvalidConfig(format!(
                "text projection {} differs from image projection {}",
                self.text.proj_dim, self.image.proj_dim
            )));
        }
        if !(self.init_temperature > 0.0 && self.init_temperature.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "temperature {}",
                self.init_temperature
            )));
        }
        Ok(())
    }
}

/// Dual-encoder student with a trainable log logit scale `ln(1/τ̂)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipModel<T: Scalar = f32> {
    pub cfg: ClipConfig,
    pub text: HybridTextEncoder<T>,
    pub image: ToyImageEncoder<T>,
    pub logit_scale: Param<T>,
}

pub const LOGIT_SCALE_NAME: &str = "logit_scale";

impl<T: Scalar> ClipModel<T> {
    pub fn new(cfg: ClipConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = HybridTextEncoder::new(cfg.text.clone(), &mut rng)?;
        let image = ToyImageEncoder::new(cfg.image.clone(), &mut rng)?;
        let scale = LogitScale::from_temperature(cfg.init_temperature).0;
        Ok(Self {
            logit_scale: Param::new(
                LOGIT_SCALE_NAME,
                Matrix::scalar(T::from_f64(scale)),
                ParamKind::NoDecay,
            ),
            cfg,
            text,
            image,
        })
    }

    pub fn log_scale(&self) -> f64 {
        Scalar::to_f64(self.logit_scale.value.data()[0])
    }

    pub fn temperature(&self) -> f64 {
        LogitScale(self.log_scale()).temperature()
    }

    /// Keeps τ̂ at or above the minimum student temperature.
    pub fn clamp_logit_scale(&mut self) {
        let clamped = LogitScale(self.log_scale()).clamped().0;
        self.logit_scale.value.data_mut()[0] = T::from_f64(clamped);
    }

    pub fn is_reparameterized(&self) -> bool {
        self.text.is_reparameterized()
    }

    pub fn reparameterize(&self) -> Result<Self, ModelError> {
        Ok(Self {
            cfg: self.cfg.clone(),
            text: self.text.reparameterize()?,
            image: self.image.clone(),
            logit_scale: self.logit_scale.clone(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> ClipModel<U> {
        ClipModel {
            cfg: self.cfg.clone(),
            text: self.text.cast(),
            image: self.image.cast(),
            logit_scale: self.logit_scale.cast(),
        }
    }
}

impl<T: Scalar> Module<T> for ClipModel<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.text.visit(f);
        self.image.visit(f);
        f(&self.logit_scale);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.text.visit_mut(f);
        self.image.visit_mut(f);
        f(&mut self.logit_scale);
    }
}
