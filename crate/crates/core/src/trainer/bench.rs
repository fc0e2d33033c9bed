use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{train_step, TeacherRows, TrainError, Trainer, TrainerConfig};
use crate::augment::RasterImage;
use crate::drstore::Store;
use crate::models::ClipModel;
use crate::numerics::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMode {
    /// Teacher targets read from the store.
    Reinforced,
    /// Same batches and model with λ = 0: contrastive loss only, no teacher rows.
    PlainClip,
    /// Teacher targets recomputed every step by one frozen student-sized encoder pair per teacher.
    OnlineTeacherStub,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub steps: usize,
    pub batch_size: usize,
    pub median_step_seconds: Option<f64>,
    pub mean_step_seconds: Option<f64>,
    pub teacher_forwards: usize,
}

const WARMUP_STEPS: usize = 2;

/// Times `steps` full training steps (view drawing, forward, backward, update) after a short warmup.
pub fn bench_step<T: Scalar>(
    store: &Store,
    model: &ClipModel<T>,
    cfg: &TrainerConfig,
    mode: BenchMode,
    steps: usize,
) -> Result<BenchReport, TrainError> {
    let mut report = BenchReport {
        mode,
        steps,
        batch_size: cfg.batch_size,
        median_step_seconds: None,
        mean_step_seconds: None,
        teacher_forwards: 0,
    };
    if steps == 0 {
        return Ok(report);
    }
    let mut cfg = cfg.clone();
    if mode == BenchMode::PlainClip {
        cfg.lambda = 0.0;
    }
    cfg.iterations = steps + WARMUP_STEPS;
    let mut trainer = Trainer::new(store, model.clone(), cfg)?;
    let k = trainer.manifest().teacher_count();
    let teachers: Vec<ClipModel<T>> = if mode == BenchMode::OnlineTeacherStub {
        (0..k)
            .map(|i| ClipModel::new(model.cfg.clone(), 0x7eac_0000 + i as u64))
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    let mut step_cfg = trainer.step_config().clone();
    if mode == BenchMode::OnlineTeacherStub {
        step_cfg.teacher_temps = vec![crate::losses::DEFAULT_TEACHER_TEMP; k];
    }
    let mut times = Vec::with_capacity(steps);
    for i in 0..steps + WARMUP_STEPS {
        let start = Instant::now();
        let mut batch = trainer.next_batch()?;
        if !teachers.is_empty() {
            let images: Vec<&RasterImage> = batch.images.iter().collect();
            let real: Vec<&str> = batch.real_captions.iter().map(String::as_str).collect();
            let mut rows = TeacherRows {
                img: Vec::new(),
                txt: Vec::new(),
                syn: batch.syn_captions.as_ref().map(|_| Vec::new()),
            };
            for t in &teachers {
                rows.img.push(t.image.encode(&images)?);
                rows.txt.push(t.text.encode_texts(&real)?);
                if let (Some(out), Some(syn)) = (rows.syn.as_mut(), &batch.syn_captions) {
                    let syn: Vec<&str> = syn.iter().map(String::as_str).collect();
                    out.push(t.text.encode_texts(&syn)?);
                }
                if i >= WARMUP_STEPS {
                    report.teacher_forwards += 1;
                }
            }
            batch.replace_teachers(rows);
        }
        let lr = trainer.cfg.lr_at(i);
        train_step(
            &mut trainer.model,
            &mut trainer.opt,
            &batch,
            &step_cfg,
            lr,
            i,
        )?;
        if i >= WARMUP_STEPS {
            times.push(start.elapsed().as_secs_f64());
        }
    }
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median = if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    };
    report.median_step_seconds = Some(median);
    report.mean_step_seconds = Some(times.iter().sum::<f64>() / n as f64);
    Ok(report)
}
