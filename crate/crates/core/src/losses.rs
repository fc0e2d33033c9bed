//! Contrastive and affinity-distillation objectives over a batch of
//! image/text embeddings.
//!
//! `S_τ(U, V)` is the row softmax of `U·Vᵀ / τ`. The distillation term
//! compares every teacher's `S_{τ_k}` with the student's `S_τ̂` by KL, in
//! both the image→text and text→image directions.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::numerics::matrix::kl_rows;
use crate::numerics::scalar::{s, Scalar};
use crate::numerics::{Graph, Matrix, NodeId, NumericsError};

/// Allowed deviation of a row norm from one for similarity inputs.
pub const UNIT_NORM_TOL: f64 = 1e-3;
/// Lower bound on the student temperature.
pub const MIN_STUDENT_TEMP: f64 = 0.01;
pub const DEFAULT_STUDENT_TEMP: f64 = 0.07;
pub const DEFAULT_TEACHER_TEMP: f64 = 0.01;
/// Distillation weight used by the reference recipe.
pub const DEFAULT_LAMBDA: f64 = 0.75;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("row {row} of {which} is not unit-norm (norm {norm})")]
    NonUnitRows {
        which: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("expected {expected} teachers, got {got}")]
    TeacherCountMismatch { expected: usize, got: usize },
    #[error("{0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Weight of the distillation term; `1 - lambda` weighs the CLIP term.
    pub lambda: f64,
    pub student_temp: f64,
    pub teacher_temps: Vec<f64>,
}

impl LossConfig {
    pub fn new(lambda: f64, student_temp: f64, teacher_temps: Vec<f64>) -> Result<Self, LossError> {
        let cfg = Self {
            lambda,
            student_temp,
            teacher_temps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_defaults(teacher_count: usize) -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            student_temp: DEFAULT_STUDENT_TEMP,
            teacher_temps: vec![DEFAULT_TEACHER_TEMP; teacher_count],
        }
    }

    pub fn teacher_count(&self) -> usize {
        self.teacher_temps.len()
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(LossError::InvalidConfig(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if !(self.student_temp > 0.0) {
            return Err(LossError::InvalidConfig(format!(
                "student temperature must be positive, got {}",
                self.student_temp
            )));
        }
        if self.teacher_temps.is_empty() {
            return Err(LossError::InvalidConfig(
                "at least one teacher is required".into(),
            ));
        }
        if let Some(t) = self.teacher_temps.iter().find(|&&t| !(t > 0.0)) {
            return Err(LossError::InvalidConfig(format!(
                "teacher temperature must be positive, got {t}"
            )));
        }
        Ok(())
    }
}

/// Trainable student temperature, stored as `log(1/τ̂)`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LogitScale(pub f64);

impl LogitScale {
    pub fn from_temperature(temp: f64) -> Self {
        Self((1.0 / temp).ln())
    }

    pub fn temperature(self) -> f64 {
        (-self.0).exp()
    }

    /// Largest log-scale allowed (τ̂ ≥ [`MIN_STUDENT_TEMP`]).
    pub fn max_log_scale() -> f64 {
        (1.0 / MIN_STUDENT_TEMP).ln()
    }

    pub fn clamped(self) -> Self {
        Self(self.0.min(Self::max_log_scale()))
    }
}

impl Default for LogitScale {
    fn default() -> Self {
        Self::from_temperature(DEFAULT_STUDENT_TEMP)
    }
}

/// Student and per-teacher embedding matrices for one batch.
///
/// Teacher matrices are only reachable through [`BatchEmbeddings::teachers`],
/// which counts accesses.
#[derive(Debug)]
pub struct BatchEmbeddings<T: Scalar = f32> {
    pub student_img: Matrix<T>,
    pub student_txt: Matrix<T>,
    teacher_img: Vec<Matrix<T>>,
    teacher_txt: Vec<Matrix<T>>,
    teacher_reads: AtomicUsize,
}

impl<T: Scalar> Clone for BatchEmbeddings<T> {
    fn clone(&self) -> Self {
        Self {
            student_img: self.student_img.clone(),
            student_txt: self.student_txt.clone(),
            teacher_img: self.teacher_img.clone(),
            teacher_txt: self.teacher_txt.clone(),
            teacher_reads: AtomicUsize::new(0),
        }
    }
}

impl<T: Scalar> BatchEmbeddings<T> {
    pub fn new(
        student_img: Matrix<T>,
        student_txt: Matrix<T>,
        teacher_img: Vec<Matrix<T>>,
        teacher_txt: Vec<Matrix<T>>,
    ) -> Result<Self, LossError> {
        let b = student_img.rows();
        let shape_err = |left: (usize, usize), right: (usize, usize)| {
            LossError::Numerics(NumericsError::ShapeMismatch {
                op: "BatchEmbeddings",
                left,
                right,
            })
        };
        if b == 0 {
            return Err(LossError::InvalidConfig(
                "batch must have at least one row".into(),
            ));
        }
        if student_txt.shape() != student_img.shape() {
            return Err(shape_err(student_img.shape(), student_txt.shape()));
        }
        if teacher_img.len() != teacher_txt.len() {
            return Err(LossError::TeacherCountMismatch {
                expected: teacher_img.len(),
                got: teacher_txt.len(),
            });
        }
        for (ti, tt) in teacher_img.iter().zip(&teacher_txt) {
            if ti.rows() != b || ti.shape() != tt.shape() {
                return Err(shape_err(ti.shape(), tt.shape()));
            }
        }
        Ok(Self {
            student_img,
            student_txt,
            teacher_img,
            teacher_txt,
            teacher_reads: AtomicUsize::new(0),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.student_img.rows()
    }

    pub fn teacher_count(&self) -> usize {
        self.teacher_img.len()
    }

    /// Per-teacher `(image, text)` embedding matrices.
    pub fn teachers(&self) -> (&[Matrix<T>], &[Matrix<T>]) {
        self.teacher_reads.fetch_add(1, Ordering::Relaxed);
        (&self.teacher_img, &self.teacher_txt)
    }

    /// Number of times teacher embeddings were read.
    pub fn teacher_reads(&self) -> usize {
        self.teacher_reads.load(Ordering::Relaxed)
    }

    /// The same batch with image and text roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            student_img: self.student_txt.clone(),
            student_txt: self.student_img.clone(),
            teacher_img: self.teacher_txt.clone(),
            teacher_txt: self.teacher_img.clone(),
            teacher_reads: AtomicUsize::new(0),
        }
    }
}

/// Row-stochastic affinity matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix<T: Scalar = f32> {
    pub probs: Matrix<T>,
}

fn check_unit_rows<T: Scalar>(m: &Matrix<T>, which: &'static str) -> Result<(), LossError> {
    for (row, r) in m.iter_rows().enumerate() {
        let norm = r.iter().map(|&v| v * v).sum::<T>().sqrt().to_f64();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(LossError::NonUnitRows { which, row, norm });
        }
    }
    Ok(())
}

/// `S_τ(U, V) = row_softmax(U·Vᵀ / τ)`.
pub fn similarity<T: Scalar>(
    u: &Matrix<T>,
    v: &Matrix<T>,
    temp: T,
) -> Result<SimilarityMatrix<T>, LossError> {
    u.expect_same_shape(v, "similarity")?;
    check_unit_rows(u, "u")?;
    check_unit_rows(v, "v")?;
    let logits = u.matmul_nt(v)?;
    Ok(SimilarityMatrix {
        probs: logits.row_softmax(temp)?,
    })
}

/// Mean negative log-likelihood of the diagonal of `row_softmax(logits / temp)`.
fn diagonal_cross_entropy<T: Scalar>(logits: &Matrix<T>, temp: T) -> T {
    let b = logits.rows();
    let mut total = T::zero();
    for (i, row) in logits.iter_rows().enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row
            .iter()
            .map(|&x| ((x - max) / temp).exp())
            .sum::<T>()
            .ln();
        total = total + lse - (row[i] - max) / temp;
    }
    total / s(b as f64)
}

/// Symmetric InfoNCE over the student embeddings, averaged over the batch.
pub fn clip_loss<T: Scalar>(emb: &BatchEmbeddings<T>, temp: T) -> Result<T, LossError> {
    if !(temp > T::zero()) {
        return Err(NumericsError::NonPositiveTemperature(temp.to_f64()).into());
    }
    check_unit_rows(&emb.student_img, "student_img")?;
    check_unit_rows(&emb.student_txt, "student_txt")?;
    let i2t = emb.student_img.matmul_nt(&emb.student_txt)?;
    let t2i = i2t.transpose();
    let half = s::<T>(0.5);
    Ok(half * (diagonal_cross_entropy(&i2t, temp) + diagonal_cross_entropy(&t2i, temp)))
}

/// Affinity distillation from every teacher, both directions.
pub fn distill_loss<T: Scalar>(emb: &BatchEmbeddings<T>, cfg: &LossConfig) -> Result<T, LossError> {
    cfg.validate()?;
    if emb.teacher_count() != cfg.teacher_count() {
        return Err(LossError::TeacherCountMismatch {
            expected: cfg.teacher_count(),
            got: emb.teacher_count(),
        });
    }
    let (t_img, t_txt) = emb.teachers();
    let student_temp = s::<T>(cfg.student_temp);
    let student_i2t = similarity(&emb.student_img, &emb.student_txt, student_temp)?;
    let student_t2i = similarity(&emb.student_txt, &emb.student_img, student_temp)?;
    let mut i2t = T::zero();
    let mut t2i = T::zero();
    for ((ti, tt), &tau) in t_img.iter().zip(t_txt).zip(&cfg.teacher_temps) {
        let tau = s::<T>(tau);
        i2t = i2t + kl_rows(&similarity(ti, tt, tau)?.probs, &student_i2t.probs)?;
        t2i = t2i + kl_rows(&similarity(tt, ti, tau)?.probs, &student_t2i.probs)?;
    }
    let norm = s::<T>((emb.batch_size() * cfg.teacher_count()) as f64);
    let half = s::<T>(0.5);
    Ok(half * i2t / norm + half * t2i / norm)
}

/// `(1 − λ)·clip + λ·distill`; the endpoints skip the unused term.
pub fn total_loss<T: Scalar>(emb: &BatchEmbeddings<T>, cfg: &LossConfig) -> Result<T, LossError> {
    cfg.validate()?;
    let temp = s::<T>(cfg.student_temp);
    if cfg.lambda == 0.0 {
        return clip_loss(emb, temp);
    }
    if cfg.lambda == 1.0 {
        return distill_loss(emb, cfg);
    }
    let lambda = s::<T>(cfg.lambda);
    let clip = clip_loss(emb, temp)?;
    let distill = distill_loss(emb, cfg)?;
    Ok((T::one() - lambda) * clip + lambda * distill)
}

/// Sum of the total loss over the real-caption and synthetic-caption batches.
pub fn reinforced_batch_loss<T: Scalar>(
    real_batch: &BatchEmbeddings<T>,
    syn_batch: &BatchEmbeddings<T>,
    cfg: &LossConfig,
) -> Result<T, LossError> {
    if real_batch.batch_size() != syn_batch.batch_size() {
        return Err(NumericsError::ShapeMismatch {
            op: "reinforced_batch_loss",
            left: real_batch.student_img.shape(),
            right: syn_batch.student_img.shape(),
        }
        .into());
    }
    Ok(total_loss(real_batch, cfg)? + total_loss(syn_batch, cfg)?)
}

/// Fixed teacher affinity targets for one batch, ready to feed a graph.
#[derive(Clone, Debug)]
pub struct AffinityTargets<T: Scalar> {
    /// `Σ_k S_{τ_k}(Ψ_img, Ψ_txt)`
    i2t_sum: Matrix<T>,
    /// `Σ_k S_{τ_k}(Ψ_txt, Ψ_img)`
    t2i_sum: Matrix<T>,
    /// `Σ_k Σ p·log p` over both directions.
    neg_entropy: T,
    teacher_count: usize,
}

impl<T: Scalar> AffinityTargets<T> {
    pub fn from_batch(emb: &BatchEmbeddings<T>, cfg: &LossConfig) -> Result<Self, LossError> {
        if emb.teacher_count() != cfg.teacher_count() {
            return Err(LossError::TeacherCountMismatch {
                expected: cfg.teacher_count(),
                got: emb.teacher_count(),
            });
        }
        let (t_img, t_txt) = emb.teachers();
        Self::from_teachers(t_img, t_txt, &cfg.teacher_temps)
    }

    pub fn from_teachers(
        t_img: &[Matrix<T>],
        t_txt: &[Matrix<T>],
        temps: &[f64],
    ) -> Result<Self, LossError> {
        if t_img.len() != temps.len() || t_txt.len() != temps.len() || temps.is_empty() {
            return Err(LossError::TeacherCountMismatch {
                expected: temps.len(),
                got: t_img.len(),
            });
        }
        let b = t_img[0].rows();
        let mut i2t_sum = Matrix::zeros(b, b);
        let mut t2i_sum = Matrix::zeros(b, b);
        let mut neg_entropy = T::zero();
        let plogp = |m: &Matrix<T>| {
            m.data()
                .iter()
                .filter(|&&p| p > T::zero())
                .map(|&p| p * p.ln())
                .sum::<T>()
        };
        for ((ti, tt), &tau) in t_img.iter().zip(t_txt).zip(temps) {
            let tau = s::<T>(tau);
            let a = similarity(ti, tt, tau)?.probs;
            let b_ = similarity(tt, ti, tau)?.probs;
            neg_entropy = neg_entropy + plogp(&a) + plogp(&b_);
            i2t_sum.add_assign(&a);
            t2i_sum.add_assign(&b_);
        }
        Ok(Self {
            i2t_sum,
            t2i_sum,
            neg_entropy,
            teacher_count: temps.len(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.i2t_sum.rows()
    }
}

/// Loss nodes of one batch inside a gradient graph.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub clip: Option<NodeId>,
    pub distill: Option<NodeId>,
}

/// Builds `(1 − λ)·clip + λ·distill` on a graph.
///
/// `img` and `txt` are unit-norm student rows; `log_scale` is the 1×1
/// trainable `log(1/τ̂)`. `targets` may be `None` only when `lambda == 0`.
pub fn total_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    img: NodeId,
    txt: NodeId,
    log_scale: NodeId,
    targets: Option<&AffinityTargets<T>>,
    lambda: f64,
) -> Result<LossNodes, LossError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(LossError::InvalidConfig(format!(
            "lambda {lambda} outside [0, 1]"
        )));
    }
    let b = g.value(img).rows();
    let txt_t = g.transpose(txt);
    let sims = g.matmul(img, txt_t)?;
    let scale = g.exp(log_scale);
    let logits = g.mul_scalar(sims, scale)?;
    let logits_t = g.transpose(logits);
    let ls_i2t = g.row_log_softmax(logits, T::one())?;
    let ls_t2i = g.row_log_softmax(logits_t, T::one())?;

    let clip = if lambda < 1.0 {
        let eye = g.constant(Matrix::identity(b));
        let a = g.mul(ls_i2t, eye)?;
        let c = g.mul(ls_t2i, eye)?;
        let both = g.add(a, c)?;
        let total = g.sum(both);
        Some(g.scale(total, s(-0.5 / b as f64)))
    } else {
        None
    };

    let distill = if lambda > 0.0 {
        let t = targets
            .ok_or_else(|| LossError::InvalidConfig("distillation needs teacher targets".into()))?;
        if t.batch_size() != b {
            return Err(NumericsError::ShapeMismatch {
                op: "total_loss_node",
                left: (b, b),
                right: t.i2t_sum.shape(),
            }
            .into());
        }
        let p_i2t = g.constant(t.i2t_sum.clone());
        let p_t2i = g.constant(t.t2i_sum.clone());
        let a = g.mul(p_i2t, ls_i2t)?;
        let c = g.mul(p_t2i, ls_t2i)?;
        let both = g.add(a, c)?;
        let cross = g.sum(both);
        let neg_cross = g.scale(cross, -T::one());
        let entropy = g.constant(Matrix::scalar(t.neg_entropy));
        let kl = g.add(neg_cross, entropy)?;
        Some(g.scale(kl, s(0.5 / (b * t.teacher_count) as f64)))
    } else {
        None
    };

    let total = match (clip, distill) {
        (Some(c), None) => c,
        (None, Some(d)) => d,
        (Some(c), Some(d)) => {
            let wc = g.scale(c, s(1.0 - lambda));
            let wd = g.scale(d, s(lambda));
            g.add(wc, wd)?
        }
        (None, None) => unreachable!("lambda in [0, 1] selects at least one term"),
    };
    Ok(LossNodes {
        total,
        clip,
        distill,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad::tests::check_fd;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
            .l2_normalize_rows()
            .unwrap()
    }

    fn random_batch(
        rng: &mut ChaCha8Rng,
        b: usize,
        d: usize,
        k: usize,
        dk: usize,
    ) -> BatchEmbeddings<f64> {
        BatchEmbeddings::new(
            unit_rows(rng, b, d),
            unit_rows(rng, b, d),
            (0..k).map(|_| unit_rows(rng, b, dk)).collect(),
            (0..k).map(|_| unit_rows(rng, b, dk)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn similarity_examples() {
        let eye = Matrix::<f64>::identity(2);
        let sim = similarity(&eye, &eye, 1.0).unwrap();
        let hi = std::f64::consts::E / (1.0 + std::f64::consts::E);
        assert!((sim.probs.get(0, 0) - hi).abs() < 1e-12);
        assert!((sim.probs.get(1, 0) - (1.0 - hi)).abs() < 1e-12);

        let one = Matrix::from_rows(&[[0.6, 0.8]]).unwrap();
        assert_eq!(similarity(&one, &one, 0.01).unwrap().probs.get(0, 0), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (u, v) = (unit_rows(&mut rng, 5, 3), unit_rows(&mut rng, 5, 3));
        let flat = similarity(&u, &v, 1e6).unwrap();
        assert!(flat.probs.data().iter().all(|p| (p - 0.2).abs() < 1e-6));
    }

    #[test]
    fn similarity_rejects_bad_inputs() {
        let eye = Matrix::<f64>::identity(2);
        let wide = Matrix::<f64>::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            similarity(&eye, &wide, 1.0),
            Err(LossError::Numerics(NumericsError::ShapeMismatch { .. }))
        ));
        let scaled = eye.scale(2.0);
        assert!(matches!(
            similarity(&eye, &scaled, 1.0),
            Err(LossError::NonUnitRows { row: 0, .. })
        ));
    }

    #[test]
    fn clip_loss_identity_pairs() {
        let eye = Matrix::<f64>::identity(2);
        let emb = BatchEmbeddings::new(eye.clone(), eye, vec![], vec![]).unwrap();
        let loss = clip_loss(&emb, 1.0).unwrap();
        let expected = -(std::f64::consts::E / (1.0 + std::f64::consts::E)).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.31326).abs() < 1e-5);
        // sharp temperature on orthonormal pairs drives the loss to zero
        assert!(clip_loss(&emb, 1e-3).unwrap() < 1e-12);
    }

    #[test]
    fn single_row_batch_has_zero_clip_loss() {
        let row = Matrix::<f64>::from_rows(&[[1.0, 0.0]]).unwrap();
        let emb = BatchEmbeddings::new(row.clone(), row, vec![], vec![]).unwrap();
        assert_eq!(clip_loss(&emb, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn distill_zero_when_student_matches_teacher() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (img, txt) = (unit_rows(&mut rng, 4, 6), unit_rows(&mut rng, 4, 6));
        let emb = BatchEmbeddings::new(img.clone(), txt.clone(), vec![img], vec![txt]).unwrap();
        let cfg = LossConfig::new(1.0, 0.05, vec![0.05]).unwrap();
        assert!(distill_loss(&emb, &cfg).unwrap().abs() < 1e-9);
    }

    #[test]
    fn duplicate_teachers_average_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let one = random_batch(&mut rng, 4, 5, 1, 6);
        let (ti, tt) = one.teachers();
        let two = BatchEmbeddings::new(
            one.student_img.clone(),
            one.student_txt.clone(),
            vec![ti[0].clone(), ti[0].clone()],
            vec![tt[0].clone(), tt[0].clone()],
        )
        .unwrap();
        let a = distill_loss(&one, &LossConfig::new(1.0, 0.1, vec![0.2]).unwrap()).unwrap();
        let b = distill_loss(&two, &LossConfig::new(1.0, 0.1, vec![0.2, 0.2]).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn teacher_count_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let emb = random_batch(&mut rng, 3, 4, 2, 4);
        let cfg = LossConfig::new(1.0, 0.1, vec![0.1]).unwrap();
        assert!(matches!(
            distill_loss(&emb, &cfg),
            Err(LossError::TeacherCountMismatch {
                expected: 1,
                got: 2
            })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::new(1.5, 0.1, vec![0.1]).is_err());
        assert!(LossConfig::new(0.5, 0.0, vec![0.1]).is_err());
        assert!(LossConfig::new(0.5, 0.1, vec![]).is_err());
        assert!(LossConfig::new(0.5, 0.1, vec![-1.0]).is_err());
        assert!(LossConfig::new(0.5, 0.1, vec![0.1, 0.2]).is_ok());
    }

    #[test]
    fn lambda_zero_reads_no_teachers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let emb = random_batch(&mut rng, 3, 4, 1, 4);
        let cfg = LossConfig::new(0.0, 0.1, vec![0.1]).unwrap();
        let c = total_loss(&emb, &cfg).unwrap();
        assert_eq!(c, clip_loss(&emb, 0.1).unwrap());
        assert_eq!(emb.teacher_reads(), 0);
    }

    #[test]
    fn logit_scale_clamps_temperature() {
        let ls = LogitScale::default();
        assert!((ls.temperature() - 0.07).abs() < 1e-12);
        let hot = LogitScale(10.0).clamped();
        assert!((hot.temperature() - MIN_STUDENT_TEMP).abs() < 1e-12);
    }

    fn graph_loss(
        batch: &BatchEmbeddings<f64>,
        cfg: &LossConfig,
    ) -> (f64, Option<f64>, Option<f64>) {
        let mut g = Graph::<f64>::new();
        let img = g.param(batch.student_img.clone());
        let txt = g.param(batch.student_txt.clone());
        let ls = g.param(Matrix::scalar(
            LogitScale::from_temperature(cfg.student_temp).0,
        ));
        let targets = AffinityTargets::from_batch(batch, cfg).unwrap();
        let nodes = total_loss_node(&mut g, img, txt, ls, Some(&targets), cfg.lambda).unwrap();
        (
            g.scalar_value(nodes.total).unwrap(),
            nodes.clip.map(|n| g.scalar_value(n).unwrap()),
            nodes.distill.map(|n| g.scalar_value(n).unwrap()),
        )
    }

    #[test]
    fn graph_loss_matches_direct_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for lambda in [0.0, 0.25, 0.75, 1.0] {
            let batch = random_batch(&mut rng, 5, 6, 2, 8);
            let cfg = LossConfig::new(lambda, 0.2, vec![0.1, 0.3]).unwrap();
            let (total, _, _) = graph_loss(&batch, &cfg);
            let direct = total_loss(&batch, &cfg).unwrap();
            assert!(
                (total - direct).abs() < 1e-10,
                "lambda {lambda}: {total} vs {direct}"
            );
        }
    }

    #[test]
    fn graph_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = random_batch(&mut rng, 4, 5, 2, 6);
        let cfg = LossConfig::new(0.75, 0.3, vec![0.1, 0.2]).unwrap();
        let targets = AffinityTargets::from_batch(&batch, &cfg).unwrap();
        let raw_img = Matrix::from_fn(4, 5, |_, _| rng.gen_range(-1.0..1.0));
        let raw_txt = Matrix::from_fn(4, 5, |_, _| rng.gen_range(-1.0..1.0));
        check_fd(&[raw_img, raw_txt, Matrix::scalar(1.2)], |g, ids| {
            let img = g.l2_normalize_rows(ids[0]).unwrap();
            let txt = g.l2_normalize_rows(ids[1]).unwrap();
            total_loss_node(g, img, txt, ids[2], Some(&targets), cfg.lambda)
                .unwrap()
                .total
        });
    }
}
