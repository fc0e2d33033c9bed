use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm, Linear};
use super::{trunc_normal, Ctx, ModelError, Module, Param, ParamKind, INIT_STD};
use crate::numerics::{Matrix, NodeId, Scalar};

/// Depthwise 1-D conv (C × k, odd k) followed by batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnBranch<T: Scalar = f32> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub bn: BatchNorm<T>,
}

impl<T: Scalar> ConvBnBranch<T> {
    pub fn new(prefix: &str, channels: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Param::new(
                format!("{prefix}.conv.weight"),
                trunc_normal(rng, channels, kernel, INIT_STD),
                ParamKind::Weight,
            ),
            bias: None,
            bn: BatchNorm::new(&format!("{prefix}.bn"), channels),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.cols()
    }

    fn forward(&self, ctx: &mut Ctx<T>, x: NodeId, seq_len: usize) -> Result<NodeId, ModelError> {
        let w = ctx.bind(&self.weight);
        let b = self.bias.as_ref().map(|b| ctx.bind(b));
        let y = ctx.g.depthwise_conv(x, w, b, seq_len)?;
        self.bn.forward(ctx, y)
    }

    fn cast<U: Scalar>(&self) -> ConvBnBranch<U> {
        ConvBnBranch {
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(Param::cast),
            bn: self.bn.cast(),
        }
    }
}

/// Folds running-statistics batch norm into the preceding conv:
/// `W' = W·γ/√(σ²+ε)`, `b' = β + (b − μ)·γ/√(σ²+ε)`.
pub fn fold_bn<T: Scalar>(branch: &ConvBnBranch<T>) -> (Matrix<T>, Vec<T>) {
    let (scale, _) = branch.bn.affine();
    let w = &branch.weight.value;
    let folded = Matrix::from_fn(w.rows(), w.cols(), |c, i| w.get(c, i) * scale[c]);
    let bias = (0..w.rows())
        .map(|c| {
            let b = branch
                .bias
                .as_ref()
                .map_or(T::zero(), |b| b.value.data()[c]);
            branch.bn.beta.value.data()[c] + (b - branch.bn.running_mean.value.data()[c]) * scale[c]
        })
        .collect();
    (folded, bias)
}

/// C × k kernel that passes its input through unchanged.
pub fn identity_kernel<T: Scalar>(channels: usize, kernel: usize) -> Matrix<T> {
    Matrix::from_fn(channels, kernel, |_, i| {
        if i == kernel / 2 {
            T::one()
        } else {
            T::zero()
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchKind {
    ConvBn,
    Identity,
    IdentityBn,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Branch<T: Scalar = f32> {
    ConvBn(ConvBnBranch<T>),
    /// Skip connection.
    Identity,
    /// Skip connection through batch norm.
    IdentityBn(BatchNorm<T>),
}

impl<T: Scalar> Branch<T> {
    fn cast<U: Scalar>(&self) -> Branch<U> {
        match self {
            Branch::ConvBn(b) => Branch::ConvBn(b.cast()),
            Branch::Identity => Branch::Identity,
            Branch::IdentityBn(bn) => Branch::IdentityBn(bn.cast()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RepForm<T: Scalar = f32> {
    /// Train-time form: output is the sum of the branches.
    Branches(Vec<Branch<T>>),
    /// Inference form: one depthwise conv with bias.
    Fused { weight: Param<T>, bias: Param<T> },
}

/// A sum of depthwise-conv/BN/skip branches that collapses to a single conv.
#[derive(Clone, Debug, PartialEq)]
pub struct RepBlock<T: Scalar = f32> {
    pub prefix: String,
    pub channels: usize,
    pub kernel: usize,
    pub form: RepForm<T>,
}

impl<T: Scalar> RepBlock<T> {
    pub fn new(
        prefix: &str,
        channels: usize,
        kernel: usize,
        kinds: &[BranchKind],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        if kernel % 2 == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "kernel size {kernel} must be odd"
            )));
        }
        let branches = kinds
            .iter()
            .enumerate()
            .map(|(i, kind)| match kind {
                BranchKind::ConvBn => Branch::ConvBn(ConvBnBranch::new(
                    &format!("{prefix}.b{i}"),
                    channels,
                    kernel,
                    rng,
                )),
                BranchKind::Identity => Branch::Identity,
                BranchKind::IdentityBn => {
                    Branch::IdentityBn(BatchNorm::new(&format!("{prefix}.b{i}.bn"), channels))
                }
            })
            .collect();
        Ok(Self {
            prefix: prefix.to_string(),
            channels,
            kernel,
            form: RepForm::Branches(branches),
        })
    }

    pub fn is_fused(&self) -> bool {
        matches!(self.form, RepForm::Fused { .. })
    }

    pub fn branches_mut(&mut self) -> Option<&mut Vec<Branch<T>>> {
        match &mut self.form {
            RepForm::Branches(b) => Some(b),
            RepForm::Fused { .. } => None,
        }
    }

    /// Collapses all branches into one conv; a fused block is returned unchanged.
    pub fn merge_branches(&self) -> Result<Self, ModelError> {
        let branches = match &self.form {
            RepForm::Fused { .. } => return Ok(self.clone()),
            RepForm::Branches(b) => b,
        };
        let (c, k) = (self.channels, self.kernel);
        let mut weight = Matrix::zeros(c, k);
        let mut bias = vec![T::zero(); c];
        for branch in branches {
            let (w, b) = match branch {
                Branch::ConvBn(cb) => {
                    if cb.kernel() != k {
                        return Err(ModelError::KernelExtentMismatch {
                            expected: k,
                            got: cb.kernel(),
                        });
                    }
                    fold_bn(cb)
                }
                Branch::Identity => (identity_kernel(c, k), vec![T::zero(); c]),
                Branch::IdentityBn(bn) => {
                    let (scale, shift) = bn.affine();
                    let w = Matrix::from_fn(
                        c,
                        k,
                        |ch, i| if i == k / 2 { scale[ch] } else { T::zero() },
                    );
                    (w, shift)
                }
            };
            weight.add_assign(&w);
            bias.iter_mut().zip(b).for_each(|(acc, v)| *acc = *acc + v);
        }
        Ok(Self {
            prefix: self.prefix.clone(),
            channels: c,
            kernel: k,
            form: RepForm::Fused {
                weight: Param::new(
                    format!("{}.fused.weight", self.prefix),
                    weight,
                    ParamKind::Weight,
                ),
                bias: Param::new(
                    format!("{}.fused.bias", self.prefix),
                    Matrix::new(1, c, bias)?,
                    ParamKind::NoDecay,
                ),
            },
        })
    }

    /// `x` is `batch · seq_len` rows of `channels` values.
    pub fn forward(
        &self,
        ctx: &mut Ctx<T>,
        x: NodeId,
        seq_len: usize,
    ) -> Result<NodeId, ModelError> {
        match &self.form {
            RepForm::Fused { weight, bias } => {
                let w = ctx.bind(weight);
                let b = ctx.bind(bias);
                Ok(ctx.g.depthwise_conv(x, w, Some(b), seq_len)?)
            }
            RepForm::Branches(branches) => {
                let mut acc: Option<NodeId> = None;
                for branch in branches {
                    let y = match branch {
                        Branch::ConvBn(cb) => cb.forward(ctx, x, seq_len)?,
                        Branch::Identity => x,
                        Branch::IdentityBn(bn) => bn.forward(ctx, x)?,
                    };
                    acc = Some(match acc {
                        None => y,
                        Some(a) => ctx.g.add(a, y)?,
                    });
                }
                acc.ok_or_else(|| {
                    ModelError::InvalidConfig(format!("{} has no branches", self.prefix))
                })
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> RepBlock<U> {
        RepBlock {
            prefix: self.prefix.clone(),
            channels: self.channels,
            kernel: self.kernel,
            form: match &self.form {
                RepForm::Branches(b) => RepForm::Branches(b.iter().map(Branch::cast).collect()),
                RepForm::Fused { weight, bias } => RepForm::Fused {
                    weight: weight.cast(),
                    bias: bias.cast(),
                },
            },
        }
    }
}

impl<T: Scalar> Module<T> for RepBlock<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        match &self.form {
            RepForm::Fused { weight, bias } => {
                f(weight);
                f(bias);
            }
            RepForm::Branches(branches) => {
                for b in branches {
                    match b {
                        Branch::ConvBn(cb) => {
                            f(&cb.weight);
                            if let Some(bias) = &cb.bias {
                                f(bias);
                            }
                            cb.bn.visit(f);
                        }
                        Branch::Identity => {}
                        Branch::IdentityBn(bn) => bn.visit(f),
                    }
                }
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match &mut self.form {
            RepForm::Fused { weight, bias } => {
                f(weight);
                f(bias);
            }
            RepForm::Branches(branches) => {
                for b in branches {
                    match b {
                        Branch::ConvBn(cb) => {
                            f(&mut cb.weight);
                            if let Some(bias) = &mut cb.bias {
                                f(bias);
                            }
                            cb.bn.visit_mut(f);
                        }
                        Branch::Identity => {}
                        Branch::IdentityBn(bn) => bn.visit_mut(f),
                    }
                }
            }
        }
    }
}

/// `x + fc2(GELU(fc1(DWConvBN(x))))`; the conv-BN collapses at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvFfn<T: Scalar = f32> {
    pub mixer: RepBlock<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> ConvFfn<T> {
    pub fn new(
        prefix: &str,
        channels: usize,
        kernel: usize,
        ratio: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            mixer: RepBlock::new(
                &format!("{prefix}.dw"),
                channels,
                kernel,
                &[BranchKind::ConvBn],
                rng,
            )?,
            fc1: Linear::new(&format!("{prefix}.fc1"), channels, channels * ratio, rng),
            fc2: Linear::new(&format!("{prefix}.fc2"), channels * ratio, channels, rng),
        })
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx<T>,
        x: NodeId,
        seq_len: usize,
    ) -> Result<NodeId, ModelError> {
        let h = self.mixer.forward(ctx, x, seq_len)?;
        let h = self.fc1.forward(ctx, h)?;
        let h = ctx.g.gelu(h);
        let h = self.fc2.forward(ctx, h)?;
        Ok(ctx.g.add(x, h)?)
    }

    pub fn reparameterize(&self) -> Result<Self, ModelError> {
        Ok(Self {
            mixer: self.mixer.merge_branches()?,
            fc1: self.fc1.clone(),
            fc2: self.fc2.clone(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> ConvFfn<U> {
        ConvFfn {
            mixer: self.mixer.cast(),
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
        }
    }
}

impl<T: Scalar> Module<T> for ConvFfn<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.mixer.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.mixer.visit_mut(f);
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::BnMode;
    use crate::numerics::Graph;
    use rand::{Rng, SeedableRng};

    fn randomize_bn<T: Scalar>(bn: &mut BatchNorm<T>, rng: &mut ChaCha8Rng) {
        for p in [&mut bn.gamma, &mut bn.beta, &mut bn.running_mean] {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = T::from_f64(rng.gen_range(-1.0..1.0)));
        }
        bn.running_var
            .value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = T::from_f64(rng.gen_range(0.1..2.0)));
    }

    fn randomize(block: &mut RepBlock<f64>, rng: &mut ChaCha8Rng) {
        for b in block.branches_mut().unwrap() {
            match b {
                Branch::ConvBn(cb) => {
                    cb.weight
                        .value
                        .data_mut()
                        .iter_mut()
                        .for_each(|v| *v = rng.gen_range(-1.0..1.0));
                    randomize_bn(&mut cb.bn, rng);
                }
                Branch::IdentityBn(bn) => randomize_bn(bn, rng),
                Branch::Identity => {}
            }
        }
    }

    fn run(block: &RepBlock<f64>, x: &Matrix<f64>, seq: usize) -> (Matrix<f64>, usize) {
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, BnMode::Running);
        let xi = ctx.constant(x.clone());
        let y = block.forward(&mut ctx, xi, seq).unwrap();
        let ops = ctx.op_count();
        (g.value(y).clone(), ops)
    }

    #[test]
    fn fold_identity_bn_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = ConvBnBranch::<f64>::new("t", 3, 5, &mut rng);
        b.bn.eps = 0.0;
        let (w, bias) = fold_bn(&b);
        assert_eq!(w, b.weight.value);
        assert_eq!(bias, vec![0.0; 3]);
    }

    #[test]
    fn fold_closed_form_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = ConvBnBranch::<f64>::new("t", 2, 3, &mut rng);
        b.bn.eps = 0.0;
        b.bn.gamma.value = Matrix::filled(1, 2, 2.0);
        b.bn.beta.value = Matrix::filled(1, 2, 1.0);
        let (w, bias) = fold_bn(&b);
        assert_eq!(w, b.weight.value.scale(2.0));
        assert_eq!(bias, vec![1.0, 1.0]);
    }

    #[test]
    fn fused_conv_bn_matches_unfused() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut block = RepBlock::<f64>::new("t", 4, 5, &[BranchKind::ConvBn], &mut rng).unwrap();
        randomize(&mut block, &mut rng);
        if let Some(Branch::ConvBn(cb)) = block.branches_mut().unwrap().first_mut() {
            cb.bias = Some(Param::new(
                "t.b0.conv.bias",
                Matrix::from_fn(1, 4, |_, c| c as f64 * 0.3),
                ParamKind::NoDecay,
            ));
        }
        let fused = block.merge_branches().unwrap();
        let Branch::ConvBn(cb) = &block.branches_mut().unwrap()[0].clone() else {
            unreachable!()
        };
        let (w, b) = fold_bn(cb);
        match &fused.form {
            RepForm::Fused { weight, bias } => {
                assert_eq!(weight.value, w);
                assert_eq!(bias.value.data(), &b[..]);
            }
            _ => panic!("not fused"),
        }
        for _ in 0..100 {
            let x = Matrix::from_fn(14, 4, |_, _| rng.gen_range(-2.0..2.0));
            let (a, _) = run(&block, &x, 7);
            let (f, _) = run(&fused, &x, 7);
            assert!(a.max_abs_diff(&f) <= 1e-12);
        }
    }

    #[test]
    fn skip_only_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = RepBlock::<f64>::new("t", 3, 7, &[BranchKind::Identity], &mut rng).unwrap();
        let fused = block.merge_branches().unwrap();
        let RepForm::Fused { weight, .. } = &fused.form else {
            panic!()
        };
        assert_eq!(weight.value, identity_kernel(3, 7));
        let x = Matrix::from_fn(10, 3, |_, _| rng.gen_range(-1.0..1.0));
        assert_eq!(run(&fused, &x, 5).0, x);
    }

    #[test]
    fn all_branch_kinds_merge_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kinds = [
            BranchKind::ConvBn,
            BranchKind::Identity,
            BranchKind::IdentityBn,
            BranchKind::ConvBn,
        ];
        let mut block = RepBlock::<f64>::new("t", 6, 3, &kinds, &mut rng).unwrap();
        randomize(&mut block, &mut rng);
        let fused = block.merge_branches().unwrap();
        assert!(fused.param_count() < block.param_count());
        for _ in 0..100 {
            let x = Matrix::from_fn(12, 6, |_, _| rng.gen_range(-3.0..3.0));
            let (a, ops_a) = run(&block, &x, 4);
            let (f, ops_f) = run(&fused, &x, 4);
            assert!(a.max_abs_diff(&f) <= 1e-10);
            assert!(ops_f < ops_a);
        }
    }

    #[test]
    fn kernel_extent_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut block = RepBlock::<f64>::new(
            "t",
            2,
            5,
            &[BranchKind::ConvBn, BranchKind::Identity],
            &mut rng,
        )
        .unwrap();
        block
            .branches_mut()
            .unwrap()
            .push(Branch::ConvBn(ConvBnBranch::new("t.extra", 2, 3, &mut rng)));
        assert!(matches!(
            block.merge_branches(),
            Err(ModelError::KernelExtentMismatch {
                expected: 5,
                got: 3
            })
        ));
        assert!(RepBlock::<f64>::new("t", 2, 4, &[BranchKind::Identity], &mut rng).is_err());
    }
}
