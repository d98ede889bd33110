//! Metrics and trade-off-based checkpoint selection.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{HumanRating, RatingDimension, Triplet, ZeroShotTask};
use crate::error::{config_err, data_err, invalid, Result};
use crate::model::{DualEncoder, Tokenizer};
use crate::stats::{pearson, spearman};

/// Default weight of Desc>Cap accuracy in the checkpoint trade-off.
pub const DEFAULT_TRADEOFF_ALPHA: f64 = 0.9;

/// Percentage of `(description score, caption score)` pairs where the
/// description wins strictly. Ties are failures.
pub fn desc_gt_cap_from_scores(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(data_err("Desc>Cap rate of an empty set"));
    }
    let wins = pairs.iter().filter(|(d, c)| d > c).count();
    Ok(100.0 * wins as f64 / pairs.len() as f64)
}

/// `(score(image, description), score(image, caption))` for each triplet.
pub fn triplet_scores(model: &DualEncoder, tok: &Tokenizer, triplets: &[Triplet]) -> Result<Vec<(f64, f64)>> {
    let max = model.config().max_seq_len;
    triplets
        .iter()
        .map(|t| {
            let d = tok.encode(&t.description, max)?;
            let c = tok.encode(&t.caption, max)?;
            Ok((model.score(&t.image, d.active())?, model.score(&t.image, c.active())?))
        })
        .collect()
}

pub fn desc_gt_cap_rate(model: &DualEncoder, tok: &Tokenizer, triplets: &[Triplet]) -> Result<f64> {
    if triplets.is_empty() {
        return Err(data_err("Desc>Cap rate of an empty set"));
    }
    desc_gt_cap_from_scores(&triplet_scores(model, tok, triplets)?)
}

/// Percentage of images whose own description outscores the other
/// descriptions of its batch, over consecutive batches of `batch` triplets.
/// A trailing partial batch with fewer than 2 triplets is skipped.
pub fn retrieval_accuracy(model: &DualEncoder, tok: &Tokenizer, triplets: &[Triplet], batch: usize) -> Result<f64> {
    if batch < 2 {
        return Err(config_err("retrieval needs batches of at least 2"));
    }
    let max = model.config().max_seq_len;
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in triplets.chunks(batch).filter(|c| c.len() >= 2) {
        let texts: Vec<_> = chunk
            .iter()
            .map(|t| model.encode_text(tok.encode(&t.description, max)?.active()))
            .collect::<Result<_>>()?;
        for (i, t) in chunk.iter().enumerate() {
            let ie = model.encode_image(&t.image)?;
            let scores: Vec<f64> = texts.iter().map(|e| crate::tensor::dot(ie.data(), e.data())).collect();
            hits += usize::from(argmax(&scores) == i);
            total += 1;
        }
    }
    if total == 0 {
        return Err(data_err("retrieval over fewer than 2 triplets"));
    }
    Ok(100.0 * hits as f64 / total as f64)
}

/// Macro-averaged F1 in percent. Classes that never occur in either the
/// truth or the predictions are left out of the average.
pub fn macro_f1(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<f64> {
    if truth.len() != predicted.len() || truth.is_empty() {
        return Err(invalid("macro_f1: need equally many nonzero truths and predictions"));
    }
    if n_classes == 0 {
        return Err(data_err("macro_f1: empty label set"));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= n_classes || p >= n_classes {
            return Err(invalid("macro_f1: class index out of range"));
        }
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let mut sum = 0.0;
    let mut count = 0;
    for c in 0..n_classes {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom == 0 {
            continue;
        }
        sum += 2.0 * tp[c] as f64 / denom as f64;
        count += 1;
    }
    Ok(100.0 * sum / count as f64)
}

/// Argmax with ties going to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Zero-shot predictions: argmax over label prompts.
pub fn zero_shot_predictions(model: &DualEncoder, tok: &Tokenizer, task: &ZeroShotTask) -> Result<Vec<usize>> {
    task.validate()?;
    let max = model.config().max_seq_len;
    let prompts: Vec<Vec<u32>> = (0..task.labels.len())
        .map(|l| Ok(tok.encode(&task.prompt(l), max)?.active().to_vec()))
        .collect::<Result<_>>()?;
    let text_emb: Vec<_> = prompts
        .iter()
        .map(|p| model.encode_text(p))
        .collect::<Result<_>>()?;
    task.examples
        .iter()
        .map(|(img, _)| {
            let ie = model.encode_image(img)?;
            let scores: Vec<f64> = text_emb
                .iter()
                .map(|t| crate::tensor::dot(ie.data(), t.data()))
                .collect();
            Ok(argmax(&scores))
        })
        .collect()
}

pub fn zero_shot_f1(model: &DualEncoder, tok: &Tokenizer, task: &ZeroShotTask) -> Result<f64> {
    if task.examples.is_empty() {
        return Err(data_err(format!("zero-shot task {} has no examples", task.name)));
    }
    let preds = zero_shot_predictions(model, tok, task)?;
    let truth: Vec<usize> = task.examples.iter().map(|(_, l)| *l).collect();
    macro_f1(&truth, &preds, task.labels.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMethod {
    #[default]
    Pearson,
    Spearman,
}

impl CorrelationMethod {
    pub fn compute(self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self {
            CorrelationMethod::Pearson => pearson(x, y),
            CorrelationMethod::Spearman => spearman(x, y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson: f64,
    pub spearman: f64,
    pub n: usize,
}

/// Correlate two paired samples; at least 3 points, neither constant.
pub fn correlate(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() < 3 {
        return Err(data_err(format!("correlation needs at least 3 points, got {}", x.len())));
    }
    Ok(Correlation {
        pearson: pearson(x, y).map_err(|e| data_err(format!("{e}")))?,
        spearman: spearman(x, y).map_err(|e| data_err(format!("{e}")))?,
        n: x.len(),
    })
}

/// Correlation between model scores and one dimension of human ratings.
/// Records without that dimension are skipped.
pub fn correlate_scores(
    model: &DualEncoder,
    tok: &Tokenizer,
    records: &[HumanRating],
    dimension: RatingDimension,
) -> Result<Correlation> {
    let max = model.config().max_seq_len;
    let mut scores = Vec::new();
    let mut ratings = Vec::new();
    for r in records {
        let Some(v) = dimension.get(r) else { continue };
        let t = tok.encode(&r.text, max)?;
        scores.push(model.score(&r.image, t.active())?);
        ratings.push(v);
    }
    correlate(&scores, &ratings)
}

/// Metrics of one checkpoint as logged during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub id: String,
    pub epoch: usize,
    /// Desc>Cap percentage.
    pub desc_gt_cap: f64,
    /// Zero-shot macro-F1 per transfer task.
    pub transfer_f1: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub id: String,
    pub epoch: usize,
    pub recovery: BTreeMap<String, f64>,
    pub transfer_score: f64,
    pub accuracy: f64,
    pub tradeoff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub alpha: f64,
    pub selected: usize,
    pub rows: Vec<TradeoffRow>,
}

impl Selection {
    pub fn selected_row(&self) -> &TradeoffRow {
        &self.rows[self.selected]
    }
}

/// `recovery(task) = f1 / baseline_f1`.
pub fn recovery(f1: f64, baseline_f1: f64) -> Result<f64> {
    if baseline_f1 == 0.0 || !baseline_f1.is_finite() {
        return Err(data_err("baseline transfer score must be finite and nonzero"));
    }
    Ok(f1 / baseline_f1)
}

/// Mean recovery over the baseline's tasks.
pub fn transfer_score(f1: &BTreeMap<String, f64>, baseline: &BTreeMap<String, f64>) -> Result<(BTreeMap<String, f64>, f64)> {
    if baseline.is_empty() {
        return Err(data_err("baseline lists no transfer tasks"));
    }
    let mut rec = BTreeMap::new();
    for (task, &base) in baseline {
        let v = f1
            .get(task)
            .ok_or_else(|| data_err(format!("checkpoint lacks transfer task {task}")))?;
        rec.insert(task.clone(), recovery(*v, base)?);
    }
    let mean = rec.values().sum::<f64>() / rec.len() as f64;
    Ok((rec, mean))
}

/// `alpha * accuracy + (1 - alpha) * transfer`, both as fractions.
pub fn tradeoff(alpha: f64, accuracy: f64, transfer: f64) -> f64 {
    alpha * accuracy + (1.0 - alpha) * transfer
}

/// Pick the checkpoint with the best accuracy/transfer trade-off; ties go
/// to the earliest epoch.
pub fn select_checkpoint(
    checkpoints: &[CheckpointMetrics],
    baseline: &BTreeMap<String, f64>,
    alpha: f64,
) -> Result<Selection> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(config_err(format!("alpha {alpha} outside [0, 1]")));
    }
    if checkpoints.is_empty() {
        return Err(data_err("no checkpoints to select from"));
    }
    let mut rows = Vec::with_capacity(checkpoints.len());
    for c in checkpoints {
        let (rec, transfer) = transfer_score(&c.transfer_f1, baseline)?;
        let accuracy = c.desc_gt_cap / 100.0;
        rows.push(TradeoffRow {
            id: c.id.clone(),
            epoch: c.epoch,
            recovery: rec,
            transfer_score: transfer,
            accuracy,
            tradeoff: tradeoff(alpha, accuracy, transfer),
        });
    }
    let mut selected = 0;
    for (i, r) in rows.iter().enumerate() {
        let best = &rows[selected];
        if r.tradeoff > best.tradeoff || (r.tradeoff == best.tradeoff && r.epoch < best.epoch) {
            selected = i;
        }
    }
    Ok(Selection { alpha, selected, rows })
}
