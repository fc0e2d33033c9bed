use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::augment::RasterImage;
use crate::drstore::{ReinforcedRecord, Store, TrainingView};
use crate::losses::{distill_loss, BatchEmbeddings, LossConfig};
use crate::models::ClipModel;
use crate::numerics::{Matrix, Scalar};

use super::StepBatch;

/// Zero-shot classification task: prompt templates per class and a labeling rule.
pub struct ZeroShot<'a> {
    pub prompts: Vec<Vec<String>>,
    pub label: &'a (dyn Fn(&ReinforcedRecord) -> usize + Sync),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Recalls {
    pub i2t_at1: f64,
    pub i2t_at5: f64,
    pub t2i_at1: f64,
    pub t2i_at5: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub recall: Recalls,
    pub zero_shot_accuracy: Option<f64>,
    /// Mean distillation loss against the stored teachers over held-out batches.
    pub teacher_kl: f64,
    pub temperature: f64,
}

/// Rank of the diagonal entry in each row; ties with lower indices rank first.
fn diagonal_ranks<T: Scalar>(sims: &Matrix<T>) -> Vec<usize> {
    (0..sims.rows())
        .map(|i| {
            let row = sims.row(i);
            let d = row[i];
            row.iter()
                .enumerate()
                .filter(|&(j, &s)| j != i && (s > d || (s == d && j < i)))
                .count()
        })
        .collect()
}

/// Recall@1/@5 in both directions with the diagonal as ground truth.
pub fn retrieval_recalls<T: Scalar>(
    img: &Matrix<T>,
    txt: &Matrix<T>,
) -> Result<Recalls, TrainError> {
    let sims = img.matmul_nt(txt)?;
    let n = sims.rows() as f64;
    let at = |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n;
    let i2t = diagonal_ranks(&sims);
    let t2i = diagonal_ranks(&sims.transpose());
    Ok(Recalls {
        i2t_at1: at(&i2t, 1),
        i2t_at5: at(&i2t, 5),
        t2i_at1: at(&t2i, 1),
        t2i_at5: at(&t2i, 5),
    })
}

fn encode_chunks<T: Scalar>(
    model: &ClipModel<T>,
    images: &[&RasterImage],
    texts: &[&str],
    chunk: usize,
) -> Result<(Matrix<T>, Matrix<T>), TrainError> {
    let mut img_parts = Vec::new();
    let mut txt_parts = Vec::new();
    for (ims, txs) in images.chunks(chunk).zip(texts.chunks(chunk)) {
        img_parts.push(model.image.encode(ims)?);
        txt_parts.push(model.text.encode_texts(txs)?);
    }
    let stack = |parts: &[Matrix<T>]| Matrix::vstack(&parts.iter().collect::<Vec<_>>());
    Ok((stack(&img_parts)?, stack(&txt_parts)?))
}

/// Evaluates a student on held-out records with running batch-norm statistics.
///
/// Retrieval uses source images and real captions. The teacher KL uses the first
/// stored augmentation of each record, in batches of `batch` rows.
pub fn evaluate<T: Scalar>(
    store: &Store,
    model: &ClipModel<T>,
    zero_shot: Option<&ZeroShot>,
    batch: usize,
) -> Result<EvalReport, TrainError> {
    if store.len() < 2 {
        return Err(TrainError::EmptyEvalSet(store.len()));
    }
    let batch = batch.max(2);
    let manifest = store.manifest();
    let records = store
        .ids()
        .map(|id| store.read_record(id))
        .collect::<Result<Vec<_>, _>>()?;
    let images: Vec<&RasterImage> = records.iter().map(|r| &r.image).collect();
    let texts: Vec<&str> = records.iter().map(|r| r.real_caption.as_str()).collect();
    let (img, txt) = encode_chunks(model, &images, &texts, batch)?;
    let recall = retrieval_recalls(&img, &txt)?;

    let zero_shot_accuracy = match zero_shot {
        Some(task) => {
            let mut class_rows = Vec::with_capacity(task.prompts.len());
            for prompts in &task.prompts {
                let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
                let e = model.text.encode_texts(&refs)?;
                let mut mean = vec![T::zero(); e.cols()];
                for row in e.iter_rows() {
                    for (m, &x) in mean.iter_mut().zip(row) {
                        *m = *m + x;
                    }
                }
                class_rows.push(mean);
            }
            let classes = Matrix::from_rows(&class_rows)?.l2_normalize_rows()?;
            let scores = img.matmul_nt(&classes)?;
            let correct = records
                .iter()
                .enumerate()
                .filter(|(i, r)| {
                    let row = scores.row(*i);
                    let pred = (0..row.len())
                        .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                        .unwrap();
                    pred == (task.label)(r)
                })
                .count();
            Some(correct as f64 / records.len() as f64)
        }
        None => None,
    };

    let loss_cfg = LossConfig::new(1.0, model.temperature(), manifest.teacher_temps.clone())?;
    let mut kl_sum = 0.0;
    let mut kl_batches = 0usize;
    for chunk in records.chunks(batch) {
        if chunk.len() < 2 {
            continue;
        }
        let views = chunk
            .iter()
            .map(|r| TrainingView::select(r, 0, None))
            .collect::<Result<Vec<_>, _>>()?;
        let sb: StepBatch<T> = StepBatch::from_views(&views, manifest)?;
        let view_images: Vec<&RasterImage> = sb.images.iter().collect();
        let caps: Vec<&str> = sb.real_captions.iter().map(String::as_str).collect();
        let t = sb.teachers().normalized()?;
        let emb = BatchEmbeddings::new(
            model.image.encode(&view_images)?,
            model.text.encode_texts(&caps)?,
            t.img.clone(),
            t.txt.clone(),
        )?;
        kl_sum += distill_loss(&emb, &loss_cfg)?.to_f64();
        kl_batches += 1;
    }
    Ok(EvalReport {
        count: records.len(),
        recall,
        zero_shot_accuracy,
        teacher_kl: kl_sum / kl_batches.max(1) as f64,
        temperature: model.temperature(),
    })
}
