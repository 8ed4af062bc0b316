//! Macro AUC, test-time-augmented prediction and noise-robustness evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::nn::kernels::sigmoid;
use crate::nn::Tensor;
use crate::physio::{apply_physio_noise, NoiseLevel, PhysioParams};
use crate::record::{nonoverlapping_crops, snr_db, EcgRecord, Segment};
use crate::rng::{derive, record_stream};

/// Per-label AUCs (undefined where a label lacks positives or negatives)
/// and their mean over defined labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub macro_auc: f64,
    pub per_label: Vec<Option<f64>>,
}

impl AucReport {
    /// Indices of labels left out of the macro mean.
    pub fn excluded(&self) -> Vec<usize> {
        self.per_label
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_none())
            .map(|(i, _)| i)
            .collect()
    }
}

/// `P(score+ > score-) + 0.5 P(tie)` over all positive/negative pairs, or
/// `None` when one class is absent.
pub fn binary_auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "auc",
            format!("{} scores, {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("auc: NaN score"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the win count, so half credits stay integral
    let mut twice_wins: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_wins += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(Some(twice_wins as f64 / (2 * n_pos * n_neg) as f64))
}

/// `scores[i][l]`, `labels[i][l]` for sample `i`, label `l`.
pub fn macro_auc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<AucReport> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::shape(
            "macro_auc",
            format!("{} score rows, {} label rows", scores.len(), labels.len()),
        ));
    }
    let n_labels = scores[0].len();
    if scores.iter().any(|r| r.len() != n_labels) || labels.iter().any(|r| r.len() != n_labels) {
        return Err(Error::shape("macro_auc", "ragged score or label rows"));
    }
    let mut per_label = Vec::with_capacity(n_labels);
    for l in 0..n_labels {
        let s: Vec<f64> = scores.iter().map(|r| r[l]).collect();
        let y: Vec<bool> = labels.iter().map(|r| r[l]).collect();
        per_label.push(binary_auc(&s, &y)?);
    }
    let defined: Vec<f64> = per_label.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::invalid(
            "macro_auc: no label has both positive and negative samples",
        ));
    }
    Ok(AucReport {
        macro_auc: defined.iter().sum::<f64>() / defined.len() as f64,
        per_label,
    })
}

/// Stacks equal-length segments into `[batch, C, T]`.
pub fn stack_segments(segs: &[&Segment]) -> Result<Tensor> {
    let first = segs.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (c, t) = first.samples.shape();
    let mut data = Vec::with_capacity(segs.len() * c * t);
    for s in segs {
        if s.samples.shape() != (c, t) {
            return Err(Error::shape(
                "batch",
                format!("segment {:?} vs {:?}", s.samples.shape(), (c, t)),
            ));
        }
        data.extend_from_slice(s.samples.data());
    }
    Tensor::new(&[segs.len(), c, t], data)
}

/// Crops evaluated per forward pass.
const EVAL_CHUNK: usize = 64;

/// Sigmoid probabilities for each segment, all BN in eval mode.
pub fn predict_segments(model: &mut Model, segs: &[&Segment]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(segs.len());
    for chunk in segs.chunks(EVAL_CHUNK) {
        let x = stack_segments(chunk)?;
        let logits = model.predict_logits(&x)?;
        let n = logits.shape()[1];
        for i in 0..chunk.len() {
            out.push(
                logits.data()[i * n..(i + 1) * n]
                    .iter()
                    .map(|&v| sigmoid(v))
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Mean sigmoid probabilities over the non-overlapping crops of each record.
pub fn predict_tta(
    model: &mut Model,
    records: &[&EcgRecord],
    crop_s: f64,
) -> Result<Vec<Vec<f64>>> {
    let crops: Vec<Vec<Segment>> = records
        .iter()
        .map(|r| nonoverlapping_crops(r, crop_s))
        .collect::<Result<_>>()?;
    let flat: Vec<&Segment> = crops.iter().flatten().collect();
    let probs = predict_segments(model, &flat)?;
    let mut out = Vec::with_capacity(records.len());
    let mut at = 0;
    for c in &crops {
        let rows = &probs[at..at + c.len()];
        let n = rows[0].len();
        let mean = (0..n)
            .map(|l| rows.iter().map(|r| r[l]).sum::<f64>() / rows.len() as f64)
            .collect();
        out.push(mean);
        at += c.len();
    }
    Ok(out)
}

pub fn label_matrix(records: &[&EcgRecord], n_labels: usize) -> Vec<Vec<bool>> {
    records
        .iter()
        .map(|r| (0..n_labels).map(|l| r.labels.contains(&l)).collect())
        .collect()
}

/// TTA predictions scored with macro AUC.
pub fn evaluate(model: &mut Model, records: &[&EcgRecord], crop_s: f64) -> Result<AucReport> {
    let n_labels = model
        .n_labels()
        .ok_or_else(|| Error::invalid("evaluation needs a classification head"))?;
    let scores = predict_tta(model, records, crop_s)?;
    macro_auc(&scores, &label_matrix(records, n_labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseEval {
    pub key: String,
    pub auc: AucReport,
    /// Mean SNR over records with nonzero noise; `None` if all were silent.
    pub mean_snr_db: Option<f64>,
}

/// Evaluates on copies of `records` corrupted with `params`; the noise of
/// each record depends only on `(seed, key, record id)`.
pub fn evaluate_under_noise(
    model: &mut Model,
    records: &[&EcgRecord],
    params: &PhysioParams,
    key: &str,
    seed: u64,
    crop_s: f64,
) -> Result<NoiseEval> {
    let stream_seed = derive(seed, &format!("noise/{key}"));
    let mut noisy = Vec::with_capacity(records.len());
    let mut snrs = Vec::new();
    for r in records {
        let mut rng = record_stream(stream_seed, &r.id, 0);
        let out = apply_physio_noise(&r.as_segment(), params, &mut rng)?;
        let s = snr_db(&r.samples, &out.noise)?;
        if !s.noise_free {
            snrs.push(s.value);
        }
        let mut rec = (*r).clone();
        rec.samples = out.segment.samples;
        noisy.push(rec);
    }
    let refs: Vec<&EcgRecord> = noisy.iter().collect();
    let auc = evaluate(model, &refs, crop_s)?;
    let finite: Vec<f64> = snrs.iter().copied().filter(|v| v.is_finite()).collect();
    Ok(NoiseEval {
        key: key.to_string(),
        auc,
        mean_snr_db: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
    })
}

/// One evaluation per noise level.
pub fn noise_robustness_sweep(
    model: &mut Model,
    records: &[&EcgRecord],
    levels: &[NoiseLevel],
    seed: u64,
    crop_s: f64,
) -> Result<Vec<NoiseEval>> {
    levels
        .iter()
        .map(|l| {
            evaluate_under_noise(
                model,
                records,
                &l.params(),
                &format!("level={}", l.level),
                seed,
                crop_s,
            )
        })
        .collect()
}

/// Mean SNR of the noise ladder on a corpus, without any model.
pub fn noise_ladder_snr(records: &[&EcgRecord], seed: u64) -> Result<Vec<(u8, f64)>> {
    NoiseLevel::all()
        .into_iter()
        .map(|l| {
            let key = format!("level={}", l.level);
            let stream_seed = derive(seed, &format!("noise/{key}"));
            let mut vals = Vec::new();
            for r in records {
                let mut rng = record_stream(stream_seed, &r.id, 0);
                let out = apply_physio_noise(&r.as_segment(), &l.params(), &mut rng)?;
                let s = snr_db(&r.samples, &out.noise)?;
                if !s.noise_free && s.value.is_finite() {
                    vals.push(s.value);
                }
            }
            Ok((l.level, vals.iter().sum::<f64>() / vals.len().max(1) as f64))
        })
        .collect()
}
