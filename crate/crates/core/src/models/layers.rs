use rand_chacha::ChaCha8Rng;

use super::{trunc_normal, BnMode, Ctx, ModelError, Module, Param, ParamKind, BN_EPS, INIT_STD};
use crate::numerics::{Matrix, NodeId, Scalar};

/// `x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Scalar = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(prefix: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Param::new(
                format!("{prefix}.weight"),
                trunc_normal(rng, d_in, d_out, INIT_STD),
                ParamKind::Weight,
            ),
            bias: Param::new(
                format!("{prefix}.bias"),
                Matrix::zeros(1, d_out),
                ParamKind::NoDecay,
            ),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: NodeId) -> Result<NodeId, ModelError> {
        let w = ctx.bind(&self.weight);
        let b = ctx.bind(&self.bias);
        let h = ctx.g.matmul(x, w)?;
        Ok(ctx.g.add_row(h, b)?)
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T: Scalar = f32> {
    pub prefix: String,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    /// γ = 1, β = 0, μ = 0, σ² = 1.
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            gamma: Param::new(
                format!("{prefix}.gamma"),
                Matrix::filled(1, channels, T::one()),
                ParamKind::NoDecay,
            ),
            beta: Param::new(
                format!("{prefix}.beta"),
                Matrix::zeros(1, channels),
                ParamKind::NoDecay,
            ),
            running_mean: Param::new(
                format!("{prefix}.running_mean"),
                Matrix::zeros(1, channels),
                ParamKind::Buffer,
            ),
            running_var: Param::new(
                format!("{prefix}.running_var"),
                Matrix::filled(1, channels, T::one()),
                ParamKind::Buffer,
            ),
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.cols()
    }

    /// Per-channel `(scale, shift)` of the running-statistics transform:
    /// `scale = γ/√(σ²+ε)`, `shift = β − μ·scale`.
    pub fn affine(&self) -> (Vec<T>, Vec<T>) {
        let eps = T::from_f64(self.eps);
        let scale: Vec<T> = self
            .gamma
            .value
            .data()
            .iter()
            .zip(self.running_var.value.data())
            .map(|(&g, &v)| g / (v + eps).sqrt())
            .collect();
        let shift = self
            .beta
            .value
            .data()
            .iter()
            .zip(self.running_mean.value.data())
            .zip(&scale)
            .map(|((&b, &m), &s)| b - m * s)
            .collect();
        (scale, shift)
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: NodeId) -> Result<NodeId, ModelError> {
        match ctx.bn {
            BnMode::Batch => {
                let g = ctx.bind(&self.gamma);
                let b = ctx.bind(&self.beta);
                let out = ctx.g.batch_norm(x, g, b, T::from_f64(self.eps))?;
                ctx.record_bn(&self.prefix, out);
                Ok(out)
            }
            BnMode::Running => {
                // Differentiable in γ and β through the bound parameters.
                let g = ctx.bind(&self.gamma);
                let b = ctx.bind(&self.beta);
                let eps = T::from_f64(self.eps);
                let inv_std = Matrix::from_fn(1, self.channels(), |_, c| {
                    T::one() / (self.running_var.value.data()[c] + eps).sqrt()
                });
                let neg_mean = self.running_mean.value.map(|m| -m);
                let neg_mean = ctx.constant(neg_mean);
                let inv_std = ctx.constant(inv_std);
                let centered = ctx.g.add_row(x, neg_mean)?;
                let normed = ctx.g.mul_row(centered, inv_std)?;
                let scaled = ctx.g.mul_row(normed, g)?;
                Ok(ctx.g.add_row(scaled, b)?)
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> BatchNorm<U> {
        BatchNorm {
            prefix: self.prefix.clone(),
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            eps: self.eps,
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormAffine<T: Scalar = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl<T: Scalar> LayerNormAffine<T> {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(
                format!("{prefix}.gamma"),
                Matrix::filled(1, channels, T::one()),
                ParamKind::NoDecay,
            ),
            beta: Param::new(
                format!("{prefix}.beta"),
                Matrix::zeros(1, channels),
                ParamKind::NoDecay,
            ),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: NodeId) -> Result<NodeId, ModelError> {
        let g = ctx.bind(&self.gamma);
        let b = ctx.bind(&self.beta);
        let n = ctx.g.layer_norm(x, T::from_f64(LN_EPS));
        let s = ctx.g.mul_row(n, g)?;
        Ok(ctx.g.add_row(s, b)?)
    }

    pub fn cast<U: Scalar>(&self) -> LayerNormAffine<U> {
        LayerNormAffine {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
        }
    }
}

impl<T: Scalar> Module<T> for LayerNormAffine<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnBlock<T: Scalar = f32> {
    pub ln1: LayerNormAffine<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    pub ln2: LayerNormAffine<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub heads: usize,
    pub causal: bool,
}

impl<T: Scalar> AttnBlock<T> {
    pub fn new(
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        causal: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            ln1: LayerNormAffine::new(&format!("{prefix}.ln1"), dim),
            q: Linear::new(&format!("{prefix}.q"), dim, dim, rng),
            k: Linear::new(&format!("{prefix}.k"), dim, dim, rng),
            v: Linear::new(&format!("{prefix}.v"), dim, dim, rng),
            out: Linear::new(&format!("{prefix}.out"), dim, dim, rng),
            ln2: LayerNormAffine::new(&format!("{prefix}.ln2"), dim),
            fc1: Linear::new(&format!("{prefix}.fc1"), dim, dim * mlp_ratio, rng),
            fc2: Linear::new(&format!("{prefix}.fc2"), dim * mlp_ratio, dim, rng),
            heads,
            causal,
        }
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx<T>,
        x: NodeId,
        seq_len: usize,
    ) -> Result<NodeId, ModelError> {
        let h = self.ln1.forward(ctx, x)?;
        let q = self.q.forward(ctx, h)?;
        let k = self.k.forward(ctx, h)?;
        let v = self.v.forward(ctx, h)?;
        let a = ctx.g.attention(q, k, v, self.heads, seq_len, self.causal)?;
        let a = self.out.forward(ctx, a)?;
        let x = ctx.g.add(x, a)?;
        let h = self.ln2.forward(ctx, x)?;
        let h = self.fc1.forward(ctx, h)?;
        let h = ctx.g.gelu(h);
        let h = self.fc2.forward(ctx, h)?;
        Ok(ctx.g.add(x, h)?)
    }

    pub fn cast<U: Scalar>(&self) -> AttnBlock<U> {
        AttnBlock {
            ln1: self.ln1.cast(),
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
            out: self.out.cast(),
            ln2: self.ln2.cast(),
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
            heads: self.heads,
            causal: self.causal,
        }
    }
}

impl<T: Scalar> Module<T> for AttnBlock<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.ln1.visit(f);
        self.q.visit(f);
        self.k.visit(f);
        self.v.visit(f);
        self.out.visit(f);
        self.ln2.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.ln1.visit_mut(f);
        self.q.visit_mut(f);
        self.k.visit_mut(f);
        self.v.visit_mut(f);
        self.out.visit_mut(f);
        self.ln2.visit_mut(f);
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}
