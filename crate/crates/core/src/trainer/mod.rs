//! Training over a reinforced store: batch assembly from stored views, AdamW
//! steps on the summed real/synthetic batch loss, evaluation and benchmarks.

mod bench;
mod eval;
mod optim;

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bench::{bench_step, BenchMode, BenchReport};
pub use eval::{evaluate, retrieval_recalls, EvalReport, Recalls, ZeroShot};
pub use optim::AdamW;

use crate::augment::RasterImage;
use crate::drstore::{ReinforcedRecord, Store, StoreError, StoreManifest, TrainingView};
use crate::losses::{total_loss_node, AffinityTargets, BatchEmbeddings, LossError};
use crate::models::{update_bn_running, BnMode, ClipModel, Ctx, ModelError, Module, BN_MOMENTUM};
use crate::numerics::{Graph, Matrix, NodeId, NumericsError, Scalar};
use crate::util::mix_seed;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}: loss {loss}, clip {clip}, distill {distill:?}, temperature {temperature}")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        clip: f64,
        distill: Option<f64>,
        temperature: f64,
    },
    #[error("evaluation needs at least 2 held-out pairs, got {0}")]
    EmptyEvalSet(usize),
    #[error("store has no records")]
    EmptyStore,
    #[error("model and store disagree: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    /// Final learning rate of the cosine schedule.
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to weight matrices only.
    pub weight_decay: f64,
    pub warmup: usize,
    pub lambda: f64,
    /// Overrides the manifest's teacher temperatures.
    pub teacher_temps: Option<Vec<f64>>,
    pub real_weight: f64,
    pub syn_weight: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            iterations: 2000,
            lr: 1e-3,
            min_lr: 1e-6,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.2,
            warmup: 100,
            lambda: crate::losses::DEFAULT_LAMBDA,
            teacher_temps: None,
            real_weight: 1.0,
            syn_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..=self.lr).contains(&self.min_lr) {
            return bad(format!("min_lr {} outside [0, lr]", self.min_lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        for (name, w) in [
            ("real_weight", self.real_weight),
            ("syn_weight", self.syn_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} {w}"));
            }
        }
        if let Some(t) = self.teacher_temps.iter().flatten().find(|&&t| !(t > 0.0)) {
            return bad(format!("teacher temperature must be positive, got {t}"));
        }
        Ok(())
    }

    /// Warmup then cosine decay from `lr` to `min_lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.iterations.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        self.min_lr
            + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn teacher_temps(&self, manifest: &StoreManifest) -> Result<Vec<f64>, TrainError> {
        let temps = self
            .teacher_temps
            .clone()
            .unwrap_or_else(|| manifest.teacher_temps.clone());
        if temps.len() != manifest.teacher_count() {
            return Err(TrainError::InvalidConfig(format!(
                "{} teacher temperatures for {} teachers",
                temps.len(),
                manifest.teacher_count()
            )));
        }
        Ok(temps)
    }
}

/// Per-teacher embedding matrices copied from stored views.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherRows<T: Scalar> {
    pub img: Vec<Matrix<T>>,
    pub txt: Vec<Matrix<T>>,
    pub syn: Option<Vec<Matrix<T>>>,
}

impl<T: Scalar> TeacherRows<T> {
    /// Rows rescaled to unit norm, removing the bf16 storage error.
    pub fn normalized(&self) -> Result<Self, NumericsError> {
        let norm = |ms: &[Matrix<T>]| {
            ms.iter()
                .map(Matrix::l2_normalize_rows)
                .collect::<Result<Vec<_>, _>>()
        };
        Ok(Self {
            img: norm(&self.img)?,
            txt: norm(&self.txt)?,
            syn: self.syn.as_deref().map(norm).transpose()?,
        })
    }
}

/// One training batch: replayed images, both caption sets and teacher rows.
#[derive(Debug)]
pub struct StepBatch<T: Scalar = f32> {
    pub ids: Vec<u64>,
    pub images: Vec<RasterImage>,
    pub real_captions: Vec<String>,
    pub syn_captions: Option<Vec<String>>,
    teachers: TeacherRows<T>,
    teacher_reads: AtomicUsize,
}

impl<T: Scalar> StepBatch<T> {
    /// The synthetic batch exists only if every view carries a synthetic caption.
    pub fn from_views(
        views: &[TrainingView],
        manifest: &StoreManifest,
    ) -> Result<Self, TrainError> {
        if views.is_empty() {
            return Err(TrainError::InvalidConfig("empty batch".into()));
        }
        let with_syn = views
            .iter()
            .all(|v| v.syn_caption.is_some() && v.syn_embed.is_some());
        let rows =
            |k: usize, pick: &dyn Fn(&TrainingView) -> Vec<f32>| -> Result<Matrix<T>, TrainError> {
                let d = manifest.teacher_dims[k];
                let mut data = Vec::with_capacity(views.len() * d);
                for v in views {
                    data.extend(pick(v).into_iter().map(|x| T::from_f64(x as f64)));
                }
                Ok(Matrix::new(views.len(), d, data)?)
            };
        let k = manifest.teacher_count();
        let img = (0..k)
            .map(|t| rows(t, &|v| v.img_embed.teacher(manifest, t)))
            .collect::<Result<_, _>>()?;
        let txt = (0..k)
            .map(|t| rows(t, &|v| v.txt_embed.teacher(manifest, t)))
            .collect::<Result<_, _>>()?;
        let syn = if with_syn {
            Some(
                (0..k)
                    .map(|t| rows(t, &|v| v.syn_embed.as_ref().unwrap().teacher(manifest, t)))
                    .collect::<Result<_, _>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            ids: views.iter().map(|v| v.id).collect(),
            images: views.iter().map(|v| v.image.clone()).collect(),
            real_captions: views.iter().map(|v| v.real_caption.clone()).collect(),
            syn_captions: with_syn.then(|| {
                views
                    .iter()
                    .map(|v| v.syn_caption.clone().unwrap())
                    .collect()
            }),
            teachers: TeacherRows { img, txt, syn },
            teacher_reads: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn teachers(&self) -> &TeacherRows<T> {
        self.teacher_reads.fetch_add(1, Ordering::Relaxed);
        &self.teachers
    }

    /// Number of times teacher rows were read.
    pub fn teacher_reads(&self) -> usize {
        self.teacher_reads.load(Ordering::Relaxed)
    }

    fn replace_teachers(&mut self, rows: TeacherRows<T>) {
        self.teachers = rows;
    }
}

/// Student embedding nodes for one batch; image rows are shared by both caption sets.
pub struct StudentNodes {
    pub img: NodeId,
    pub real_txt: NodeId,
    pub syn_txt: Option<NodeId>,
    /// Rows seen by text batch-norm layers.
    pub text_rows: usize,
}

pub fn forward_student<T: Scalar>(
    model: &ClipModel<T>,
    ctx: &mut Ctx<T>,
    batch: &StepBatch<T>,
) -> Result<StudentNodes, TrainError> {
    let images: Vec<&RasterImage> = batch.images.iter().collect();
    let img = model.image.forward(ctx, &images)?;
    let mut texts: Vec<&str> = batch.real_captions.iter().map(String::as_str).collect();
    if let Some(syn) = &batch.syn_captions {
        texts.extend(syn.iter().map(String::as_str));
    }
    let tokens = model.text.tokenize(&texts);
    let all = model.text.forward(ctx, &tokens)?;
    let b = batch.len();
    let (real_txt, syn_txt) = if batch.syn_captions.is_some() {
        let real = ctx.g.gather_rows(all, Arc::new((0..b).collect()))?;
        let syn = ctx.g.gather_rows(all, Arc::new((b..2 * b).collect()))?;
        (real, Some(syn))
    } else {
        (all, None)
    };
    Ok(StudentNodes {
        img,
        real_txt,
        syn_txt,
        text_rows: texts.len() * model.cfg.text.seq_len,
    })
}

/// Student embeddings by an inference forward, paired with the stored teacher rows.
pub fn assemble_batches<T: Scalar>(
    batch: &StepBatch<T>,
    model: &ClipModel<T>,
) -> Result<(BatchEmbeddings<T>, Option<BatchEmbeddings<T>>), TrainError> {
    let mut g = Graph::inference();
    let mut ctx = Ctx::new(&mut g, BnMode::Running);
    let nodes = forward_student(model, &mut ctx, batch)?;
    let img = g.value(nodes.img).clone();
    let t = batch.teachers().normalized()?;
    let real = BatchEmbeddings::new(
        img.clone(),
        g.value(nodes.real_txt).clone(),
        t.img.clone(),
        t.txt.clone(),
    )?;
    let syn = match (nodes.syn_txt, &t.syn) {
        (Some(n), Some(rows)) => Some(BatchEmbeddings::new(
            img,
            g.value(n).clone(),
            t.img.clone(),
            rows.clone(),
        )?),
        _ => None,
    };
    Ok((real, syn))
}

/// Loss settings for a single step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepConfig {
    pub lambda: f64,
    pub teacher_temps: Vec<f64>,
    pub real_weight: f64,
    pub syn_weight: f64,
}

impl StepConfig {
    pub fn from_trainer(cfg: &TrainerConfig, manifest: &StoreManifest) -> Result<Self, TrainError> {
        Ok(Self {
            lambda: cfg.lambda,
            teacher_temps: cfg.teacher_temps(manifest)?,
            real_weight: cfg.real_weight,
            syn_weight: cfg.syn_weight,
        })
    }
}

/// Loss values of one step. Components are weighted sums over both batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub clip_loss: f64,
    /// Absent when λ = 0; no teacher rows are touched then.
    pub distill_loss: Option<f64>,
    pub lr: f64,
    pub step_time_ms: f64,
}

/// Loss graph for a batch, with named parameter bindings.
pub struct LossGraph<T: Scalar> {
    pub graph: Graph<T>,
    pub total: NodeId,
    pub clip: NodeId,
    pub distill: Option<NodeId>,
    pub bindings: Vec<(String, Option<NodeId>)>,
    pub bn_nodes: Vec<(String, NodeId)>,
    pub text_rows: usize,
}

pub fn build_loss<T: Scalar>(
    model: &ClipModel<T>,
    batch: &StepBatch<T>,
    cfg: &StepConfig,
) -> Result<LossGraph<T>, TrainError> {
    let mut graph = Graph::new();
    let mut ctx = Ctx::new(&mut graph, BnMode::Batch);
    let nodes = forward_student(model, &mut ctx, batch)?;
    let log_scale = ctx.bind(&model.logit_scale);

    let targets = if cfg.lambda > 0.0 {
        let t = batch.teachers().normalized()?;
        let real = AffinityTargets::from_teachers(&t.img, &t.txt, &cfg.teacher_temps)?;
        let syn = match &t.syn {
            Some(rows) if nodes.syn_txt.is_some() => Some(AffinityTargets::from_teachers(
                &t.img,
                rows,
                &cfg.teacher_temps,
            )?),
            _ => None,
        };
        Some((real, syn))
    } else {
        None
    };

    let mut parts = vec![(
        nodes.real_txt,
        cfg.real_weight,
        targets.as_ref().map(|t| &t.0),
    )];
    if let Some(syn) = nodes.syn_txt {
        parts.push((
            syn,
            cfg.syn_weight,
            targets.as_ref().and_then(|t| t.1.as_ref()),
        ));
    }
    let mut totals = Vec::new();
    let mut clips = Vec::new();
    let mut distills = Vec::new();
    for (txt, w, tgt) in parts {
        let ln = total_loss_node(ctx.g, nodes.img, txt, log_scale, tgt, cfg.lambda)?;
        let clip = match ln.clip {
            Some(c) => c,
            None => total_loss_node(ctx.g, nodes.img, txt, log_scale, None, 0.0)?.total,
        };
        let w = T::from_f64(w);
        totals.push(ctx.g.scale(ln.total, w));
        clips.push(ctx.g.scale(clip, w));
        if let Some(d) = ln.distill {
            distills.push(ctx.g.scale(d, w));
        }
    }
    let sum = |g: &mut Graph<T>, xs: &[NodeId]| -> Result<NodeId, NumericsError> {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = g.add(acc, x)?;
        }
        Ok(acc)
    };
    let total = sum(ctx.g, &totals)?;
    let clip = sum(ctx.g, &clips)?;
    let distill = if distills.is_empty() {
        None
    } else {
        Some(sum(ctx.g, &distills)?)
    };

    let mut bindings = Vec::new();
    model.visit(&mut |p| {
        if p.trainable() {
            bindings.push((p.name.clone(), ctx.node_of(&p.name)));
        }
    });
    let bn_nodes = ctx.bn_nodes().to_vec();
    Ok(LossGraph {
        graph,
        total,
        clip,
        distill,
        bindings,
        bn_nodes,
        text_rows: nodes.text_rows,
    })
}

/// Gradient of the batch loss for every trainable parameter, by name.
pub fn gradients<T: Scalar>(
    model: &ClipModel<T>,
    batch: &StepBatch<T>,
    cfg: &StepConfig,
) -> Result<(f64, Vec<(String, Option<Matrix<T>>)>), TrainError> {
    let lg = build_loss(model, batch, cfg)?;
    let mut grads = lg.graph.backward(lg.total)?;
    let loss = lg.graph.value(lg.total).data()[0].to_f64();
    let out = lg
        .bindings
        .into_iter()
        .map(|(name, node)| {
            let g = node.and_then(|n| grads.take(n));
            (name, g)
        })
        .collect();
    Ok((loss, out))
}

/// One AdamW step at learning rate `lr`; errors before touching the model if the loss is not finite.
pub fn train_step<T: Scalar>(
    model: &mut ClipModel<T>,
    opt: &mut AdamW<T>,
    batch: &StepBatch<T>,
    cfg: &StepConfig,
    lr: f64,
    step: usize,
) -> Result<StepLog, TrainError> {
    let start = Instant::now();
    let lg = build_loss(model, batch, cfg)?;
    let value = |n: NodeId| lg.graph.value(n).data()[0].to_f64();
    let loss = value(lg.total);
    let clip = value(lg.clip);
    let distill = lg.distill.map(value);
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step,
            loss,
            clip,
            distill,
            temperature: model.temperature(),
        });
    }
    let mut grads = lg.graph.backward(lg.total)?;
    let named: Vec<(String, Option<Matrix<T>>)> = lg
        .bindings
        .iter()
        .map(|(name, node)| (name.clone(), node.and_then(|n| grads.take(n))))
        .collect();
    opt.step(model, named, lr)?;
    update_bn_running(model, &lg.graph, &lg.bn_nodes, lg.text_rows, BN_MOMENTUM);
    model.clamp_logit_scale();
    Ok(StepLog {
        step,
        loss,
        clip_loss: clip,
        distill_loss: distill,
        lr,
        step_time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Summary of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub final_temperature: f64,
    pub seconds: f64,
}

/// Training state over an in-memory copy of a store.
pub struct Trainer<T: Scalar = f32> {
    pub cfg: TrainerConfig,
    pub model: ClipModel<T>,
    opt: AdamW<T>,
    step_cfg: StepConfig,
    manifest: StoreManifest,
    records: Vec<ReinforcedRecord>,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    step: usize,
}

impl<T: Scalar> Trainer<T> {
    /// Loads every record into memory; the store is not touched afterwards.
    pub fn new(store: &Store, model: ClipModel<T>, cfg: TrainerConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        if store.is_empty() {
            return Err(TrainError::EmptyStore);
        }
        let manifest = store.manifest().clone();
        let records = store
            .ids()
            .map(|id| store.read_record(id))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_records(manifest, records, model, cfg)
    }

    pub fn from_records(
        manifest: StoreManifest,
        records: Vec<ReinforcedRecord>,
        model: ClipModel<T>,
        cfg: TrainerConfig,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if records.is_empty() {
            return Err(TrainError::EmptyStore);
        }
        let size = model.cfg.image.image_size as u32;
        if let Some(r) = records
            .iter()
            .flat_map(|r| &r.aug_params)
            .find(|p| p.out_size != (size as u16, size as u16))
        {
            return Err(TrainError::Mismatch(format!(
                "store views are {}x{}, image encoder expects {size}x{size}",
                r.out_size.0, r.out_size.1
            )));
        }
        let step_cfg = StepConfig::from_trainer(&cfg, &manifest)?;
        let opt = AdamW::new(&model, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
        let mut t = Self {
            cfg,
            model,
            opt,
            step_cfg,
            manifest,
            records,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            step: 0,
        };
        t.shuffle();
        Ok(t)
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, &[0x0e, self.epoch]));
        self.order = (0..self.records.len()).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn step_config(&self) -> &StepConfig {
        &self.step_cfg
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Next `b` views in the per-epoch permutation, wrapping into the next epoch.
    pub fn next_batch(&mut self) -> Result<StepBatch<T>, TrainError> {
        let mut picks = Vec::with_capacity(self.cfg.batch_size);
        while picks.len() < self.cfg.batch_size {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.shuffle();
            }
            picks.push((self.order[self.cursor], self.epoch));
            self.cursor += 1;
        }
        let seed = self.cfg.seed;
        let views = picks
            .par_iter()
            .map(|&(i, epoch)| {
                let rec = &self.records[i];
                TrainingView::from_record(rec, mix_seed(seed, &[0x71, epoch, rec.id]))
            })
            .collect::<Result<Vec<_>, _>>()?;
        StepBatch::from_views(&views, &self.manifest)
    }

    pub fn step(&mut self) -> Result<StepLog, TrainError> {
        let start = Instant::now();
        let batch = self.next_batch()?;
        let lr = self.cfg.lr_at(self.step);
        let mut log = train_step(
            &mut self.model,
            &mut self.opt,
            &batch,
            &self.step_cfg,
            lr,
            self.step,
        )?;
        log.step_time_ms = start.elapsed().as_secs_f64() * 1e3;
        self.step += 1;
        Ok(log)
    }

    /// Runs the remaining iterations, writing one JSON line per step to `log`.
    pub fn run(&mut self, mut log: Option<&mut dyn Write>) -> Result<TrainSummary, TrainError> {
        let start = Instant::now();
        let mut last = None;
        while self.step < self.cfg.iterations {
            let entry = self.step()?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &entry).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
            last = Some(entry.loss);
        }
        Ok(TrainSummary {
            steps: self.step,
            final_loss: last,
            final_temperature: self.model.temperature(),
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    pub fn into_model(self) -> ClipModel<T> {
        self.model
    }
}
