use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{
    pretrain_loss_graph, triplet_loss_graph, Adam, AdamConfig, Adapter, Objective, PreparedTriplet,
};
use crate::autodiff::Graph;
use crate::error::{config_err, data_err, Error, Result};
use crate::intervention::InterventionSite;
use crate::model::{DualEncoder, LoraConfig, ParamId, TrainMode};
use crate::rng::{stream, Rng};

/// Runs independent per-example work, possibly in parallel. Results come
/// back in index order so the reduction that follows is deterministic no
/// matter how the work was scheduled.
pub trait BatchRunner {
    fn map<T, F>(&self, n: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl BatchRunner for Sequential {
    fn map<T, F>(&self, n: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync,
    {
        (0..n).map(f).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub adapter: Adapter,
    /// Weight of the interchange term; only read by the joint objective.
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Stop after this many epochs without a new best validation Desc>Cap.
    pub patience: Option<usize>,
    /// Draw counterfactual sources from a random other triplet instead of
    /// swapping the triplet's own texts.
    pub cross_image_sources: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Behavioral,
            adapter: Adapter::Lora,
            alpha: 0.5,
            learning_rate: 1e-4,
            batch_size: 12,
            epochs: 5,
            seed: 0,
            weight_decay: 0.0,
            patience: Some(3),
            cross_image_sources: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(config_err(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config_err("weight_decay must be non-negative"));
        }
        if self.patience == Some(0) {
            return Err(config_err("patience must be positive when set"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// The model being fine-tuned plus, for site-based objectives, the rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainee {
    pub model: DualEncoder,
    pub site: Option<InterventionSite>,
}

/// Attach adapters and an intervention site as `cfg` requires.
pub fn prepare_trainee(
    base: DualEncoder,
    cfg: &TrainConfig,
    lora: &LoraConfig,
    site_layer: Option<usize>,
    site_width: Option<usize>,
) -> Result<Trainee> {
    cfg.validate()?;
    let model = match (cfg.adapter, base.lora()) {
        (Adapter::Lora, None) => base.with_lora(lora.clone(), cfg.seed)?,
        _ => base,
    };
    let site = if cfg.objective.uses_site() {
        let c = model.config();
        let layer = site_layer.unwrap_or(c.n_layers - 1);
        let width = site_width.unwrap_or((c.d_model / 2).max(1));
        Some(InterventionSite::new(c, layer, width, cfg.seed)?)
    } else {
        None
    };
    Ok(Trainee { model, site })
}

/// Loss values and flattened gradients for one triplet. `grads` follows the
/// optimizer's parameter order, with the rotation last when it is trained.
#[derive(Debug, Clone)]
pub struct ExampleGrad {
    pub loss: f64,
    pub behavioral: f64,
    pub term_a: Option<f64>,
    pub term_b: Option<f64>,
    pub grads: Vec<Vec<f64>>,
}

/// Adam over the trainable parameters of a [`Trainee`], with the rotation
/// retracted onto the orthogonal group after every step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: TrainConfig,
    mode: TrainMode,
    ids: Vec<ParamId>,
    rotation: bool,
    adam: Adam,
}

/// Mean losses over one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub behavioral: f64,
    pub term_a: Option<f64>,
    pub term_b: Option<f64>,
}

impl Optimizer {
    pub fn new(trainee: &Trainee, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.objective.uses_site() && trainee.site.is_none() {
            return Err(config_err(format!(
                "objective {} needs an intervention site",
                config.objective.as_str()
            )));
        }
        let mode = config.adapter.train_mode();
        if mode == TrainMode::Adapters && trainee.model.lora().is_none() {
            return Err(config_err("adapter training requested on a model without LoRA adapters"));
        }
        let ids = trainee.model.trainable(mode);
        let rotation = config.objective.uses_site();
        let mut sizes: Vec<usize> = ids.iter().map(|id| trainee.model.params()[id.0].tensor.numel()).collect();
        if rotation {
            let d = trainee.model.config().d_model;
            sizes.push(d * d);
        }
        Ok(Self {
            config: config.clone(),
            mode,
            ids,
            rotation,
            adam: Adam::new(config.adam(), &sizes),
        })
    }

    pub fn trainable_ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn steps_taken(&self) -> u64 {
        self.adam.steps_taken()
    }

    /// Loss and gradients for one triplet.
    pub fn example_grad(
        &self,
        trainee: &Trainee,
        t: &PreparedTriplet,
        source: Option<&PreparedTriplet>,
        dropout: Option<Rng>,
    ) -> Result<ExampleGrad> {
        let mut g = Graph::new();
        let m = trainee.model.bind(&mut g, self.mode);
        if let Some(rng) = dropout {
            m.enable_dropout(rng);
        }
        let site = trainee.site.as_ref().map(|s| s.bind(&mut g, self.rotation));
        let l = triplet_loss_graph(
            &mut g,
            &m,
            site.as_ref(),
            t,
            source,
            self.config.objective,
            self.config.alpha,
        )?;
        let loss = g.value(l.total).item();
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite training loss {loss}")));
        }
        let mut grads = g.backward(l.total)?;
        let mut flat = Vec::with_capacity(self.ids.len() + 1);
        for id in &self.ids {
            let n = trainee.model.params()[id.0].tensor.numel();
            flat.push(grads.take(m.var(*id)).unwrap_or_else(|| vec![0.0; n]));
        }
        if self.rotation {
            let s = site.expect("site present when the rotation trains");
            let d = trainee.model.config().d_model;
            flat.push(grads.take(s.rotation).unwrap_or_else(|| vec![0.0; d * d]));
        }
        let val = |v: Option<crate::Var>| v.map(|v| g.value(v).item());
        Ok(ExampleGrad {
            loss,
            behavioral: g.value(l.behavioral).item(),
            term_a: val(l.term_a),
            term_b: val(l.term_b),
            grads: flat,
        })
    }

    /// Apply the mean of `examples` as one Adam step.
    pub fn apply(&mut self, trainee: &mut Trainee, examples: &[ExampleGrad]) -> Result<StepStats> {
        if examples.is_empty() {
            return Err(config_err("optimizer step over an empty batch"));
        }
        let scale = 1.0 / examples.len() as f64;
        let mut mean = examples[0].grads.clone();
        for e in &examples[1..] {
            for (acc, g) in mean.iter_mut().zip(&e.grads) {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
        }
        for g in mean.iter_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
        let views: Vec<&[f64]> = mean.iter().map(|g| g.as_slice()).collect();
        let Trainee { model, site } = trainee;
        let mut params = model.params_mut(&self.ids);
        if self.rotation {
            let site = site.as_mut().expect("site present when the rotation trains");
            params.push(&mut site.rotation);
            self.adam.step(&mut params, &views)?;
            site.retract();
        } else {
            self.adam.step(&mut params, &views)?;
        }
        let avg = |f: &dyn Fn(&ExampleGrad) -> Option<f64>| -> Option<f64> {
            let mut s = 0.0;
            for e in examples {
                s += f(e)?;
            }
            Some(s * scale)
        };
        Ok(StepStats {
            loss: avg(&|e| Some(e.loss)).unwrap_or(0.0),
            behavioral: avg(&|e| Some(e.behavioral)).unwrap_or(0.0),
            term_a: avg(&|e| e.term_a),
            term_b: avg(&|e| e.term_b),
        })
    }

    /// Compute the gradients of a batch with `runner` and take one step.
    /// `batch` pairs each triplet with an optional cross-image source.
    pub fn step<R: BatchRunner>(
        &mut self,
        trainee: &mut Trainee,
        batch: &[(&PreparedTriplet, Option<&PreparedTriplet>)],
        dropout_seed: Option<u64>,
        runner: &R,
    ) -> Result<StepStats> {
        let this = &*self;
        let t: &Trainee = trainee;
        let examples = runner.map(batch.len(), |i| {
            let rng = dropout_seed.map(|s| stream(s, i as u64));
            this.example_grad(t, batch[i].0, batch[i].1, rng)
        })?;
        self.apply(trainee, &examples)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_desc_gt_cap: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transfer_score: Option<f64>,
    pub train_behavioral: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_term_a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_term_b: Option<f64>,
}

pub struct TrainData<'a> {
    pub train: &'a [PreparedTriplet],
    pub val: &'a [PreparedTriplet],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    /// Epoch (1-based) with the best validation Desc>Cap.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Desc>Cap percentage on prepared triplets.
pub fn prepared_desc_gt_cap<R: BatchRunner>(model: &DualEncoder, data: &[PreparedTriplet], runner: &R) -> Result<f64> {
    let pairs = runner.map(data.len(), |i| {
        let t = &data[i];
        Ok((
            model.score(&t.image, t.description.active())?,
            model.score(&t.image, t.caption.active())?,
        ))
    })?;
    crate::eval::desc_gt_cap_from_scores(&pairs)
}

fn dropout_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    seed ^ ((epoch as u64) << 40) ^ ((step as u64) << 8) ^ 0x5eed_0000_0000_0000
}

/// Fine-tune `trainee` for up to `config.epochs` epochs. `on_epoch` sees
/// the trainee after each epoch and may fill in the transfer score or save
/// a checkpoint; its errors abort training.
pub fn train<R, F>(
    trainee: &mut Trainee,
    data: TrainData<'_>,
    config: &TrainConfig,
    runner: &R,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    R: BatchRunner,
    F: FnMut(&Trainee, &mut EpochRecord) -> Result<()>,
{
    config.validate()?;
    if data.train.is_empty() {
        return Err(data_err("training split is empty"));
    }
    if data.val.is_empty() {
        return Err(data_err("validation split is empty"));
    }
    if config.cross_image_sources && data.train.len() < 2 {
        return Err(data_err("cross-image sources need at least 2 training triplets"));
    }
    let mut opt = Optimizer::new(trainee, config)?;
    let dropout = trainee.model.lora().is_some_and(|l| l.dropout > 0.0);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let (mut best, mut best_epoch, mut since_best) = (f64::NEG_INFINITY, 0, 0);
    let mut stopped_early = false;
    for epoch in 1..=config.epochs {
        let mut rng = stream(config.seed, 0x7472_0000 + epoch as u64);
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut n = 0usize;
        let mut has_terms = false;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<(&PreparedTriplet, Option<&PreparedTriplet>)> = chunk
                .iter()
                .map(|&i| {
                    let src = config.cross_image_sources.then(|| {
                        let mut j = rng.random_range(0..data.train.len() - 1);
                        if j >= i {
                            j += 1;
                        }
                        &data.train[j]
                    });
                    (&data.train[i], src)
                })
                .collect();
            let seed = dropout.then(|| dropout_seed(config.seed, epoch, step));
            let s = opt.step(trainee, &batch, seed, runner)?;
            let w = batch.len() as f64;
            sums.0 += s.loss * w;
            sums.1 += s.behavioral * w;
            if let (Some(a), Some(b)) = (s.term_a, s.term_b) {
                has_terms = true;
                sums.2 += a * w;
                sums.3 += b * w;
            }
            n += batch.len();
        }
        let n = n as f64;
        let val = prepared_desc_gt_cap(&trainee.model, data.val, runner)?;
        let mut record = EpochRecord {
            epoch,
            train_loss: sums.0 / n,
            val_desc_gt_cap: val,
            transfer_score: None,
            train_behavioral: sums.1 / n,
            train_term_a: has_terms.then_some(sums.2 / n),
            train_term_b: has_terms.then_some(sums.3 / n),
        };
        on_epoch(trainee, &mut record)?;
        records.push(record);
        if val > best {
            best = val;
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if config.patience.is_some_and(|p| since_best >= p) && epoch < config.epochs {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        records,
        best_epoch,
        stopped_early,
    })
}

/// Which text of each triplet pretraining pairs with the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainTexts {
    Descriptions,
    Captions,
    /// Each epoch, each image draws its description or caption at random.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub texts: PretrainTexts,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 12,
            learning_rate: 2e-3,
            weight_decay: 0.0,
            texts: PretrainTexts::Mixed,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(config_err("pretraining batch_size must be at least 2"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err("learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config_err("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub train_loss: f64,
}

/// Contrastive pretraining of every base parameter. A trailing batch with
/// a single pair is folded into the previous one.
pub fn pretrain<F>(model: &mut DualEncoder, data: &[PreparedTriplet], config: &PretrainConfig, mut on_epoch: F) -> Result<Vec<PretrainRecord>>
where
    F: FnMut(&DualEncoder, &PretrainRecord) -> Result<()>,
{
    config.validate()?;
    if data.len() < 2 {
        return Err(data_err("pretraining needs at least 2 triplets"));
    }
    let ids = model.trainable(TrainMode::Full);
    let sizes: Vec<usize> = ids.iter().map(|id| model.params()[id.0].tensor.numel()).collect();
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
        &sizes,
    );
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut rng = stream(config.seed, 0x7072_0000 + epoch as u64);
        order.shuffle(&mut rng);
        let use_desc: Vec<bool> = (0..data.len())
            .map(|_| match config.texts {
                PretrainTexts::Descriptions => true,
                PretrainTexts::Captions => false,
                PretrainTexts::Mixed => rng.random_bool(0.5),
            })
            .collect();
        let mut batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
            batches.pop();
            let k = batches.len() - 1;
            batches[k] = &order[k * config.batch_size..];
        }
        let (mut total, mut count) = (0.0, 0.0);
        for batch in batches {
            let images: Vec<&[f64]> = batch.iter().map(|&i| data[i].image.as_slice()).collect();
            let texts: Vec<&[u32]> = batch
                .iter()
                .map(|&i| {
                    if use_desc[i] {
                        data[i].description.active()
                    } else {
                        data[i].caption.active()
                    }
                })
                .collect();
            let (loss, flat) = {
                let mut g = Graph::new();
                let m = model.bind(&mut g, TrainMode::Full);
                let l = pretrain_loss_graph(&mut g, &m, &images, &texts)?;
                let loss = g.value(l).item();
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!("non-finite pretraining loss {loss}")));
                }
                let mut grads = g.backward(l)?;
                let flat: Vec<Vec<f64>> = ids
                    .iter()
                    .zip(&sizes)
                    .map(|(id, &n)| grads.take(m.var(*id)).unwrap_or_else(|| vec![0.0; n]))
                    .collect();
                (loss, flat)
            };
            let views: Vec<&[f64]> = flat.iter().map(|g| g.as_slice()).collect();
            adam.step(&mut model.params_mut(&ids), &views)?;
            total += loss * batch.len() as f64;
            count += batch.len() as f64;
        }
        let record = PretrainRecord {
            epoch,
            train_loss: total / count,
        };
        on_epoch(model, &record)?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Encoded;
    use crate::rng::{gaussian_vec, seeded};
    use crate::testutil::{random_tokens, tiny_config};

    fn triplets(n: usize, seed: u64) -> Vec<PreparedTriplet> {
        let mut rng = seeded(seed);
        let enc = |ids: Vec<u32>| {
            let eos = ids.len() - 1;
            let mut padded = ids;
            padded.resize(10, 0);
            Encoded { ids: padded, eos }
        };
        (0..n)
            .map(|_| PreparedTriplet {
                image: gaussian_vec(&mut rng, 6, 1.0),
                description: enc(random_tokens(&mut rng, 4, 20)),
                caption: enc(random_tokens(&mut rng, 6, 20)),
            })
            .collect()
    }

    fn trainee(cfg: &TrainConfig) -> Trainee {
        let base = DualEncoder::new(tiny_config(), 1).unwrap();
        let lora = LoraConfig {
            rank: 2,
            ..LoraConfig::default()
        };
        prepare_trainee(base, cfg, &lora, Some(2), Some(4)).unwrap()
    }

    #[test]
    fn two_epochs_two_records() {
        let data = triplets(24, 3);
        for objective in [Objective::Behavioral, Objective::IitDas, Objective::Joint] {
            let cfg = TrainConfig {
                objective,
                epochs: 2,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            };
            let mut t = trainee(&cfg);
            let mut seen = 0;
            let out = train(
                &mut t,
                TrainData {
                    train: &data,
                    val: &data[..6],
                },
                &cfg,
                &Sequential,
                |_, _| {
                    seen += 1;
                    Ok(())
                },
            )
            .unwrap();
            assert_eq!(out.records.len(), 2);
            assert_eq!(seen, 2);
            assert_eq!(out.records[1].epoch, 2);
            assert_eq!(out.records[0].train_term_a.is_some(), objective.uses_site());
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = triplets(20, 4);
        let cfg = TrainConfig {
            objective: Objective::Joint,
            epochs: 2,
            learning_rate: 1e-3,
            cross_image_sources: true,
            ..TrainConfig::default()
        };
        let run = || {
            let mut t = trainee(&cfg);
            let d = TrainData {
                train: &data,
                val: &data[..4],
            };
            train(&mut t, d, &cfg, &Sequential, |_, _| Ok(())).unwrap();
            t
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_training_set_rejected() {
        let data = triplets(2, 5);
        let cfg = TrainConfig::default();
        let mut t = trainee(&cfg);
        let d = TrainData {
            train: &[],
            val: &data,
        };
        assert!(matches!(train(&mut t, d, &cfg, &Sequential, |_, _| Ok(())), Err(Error::Data(_))));
    }

    #[test]
    fn adapter_steps_leave_base_untouched() {
        let data = triplets(12, 6);
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let mut t = trainee(&cfg);
        let before = t.model.clone();
        let mut opt = Optimizer::new(&t, &cfg).unwrap();
        let batch: Vec<_> = data.iter().map(|x| (x, None)).collect();
        for _ in 0..5 {
            opt.step(&mut t, &batch, None, &Sequential).unwrap();
        }
        for (a, b) in before.params().iter().zip(t.model.params()) {
            match a.kind {
                crate::model::ParamKind::Base => assert_eq!(a.tensor, b.tensor, "{}", a.name),
                crate::model::ParamKind::Adapter if a.name.ends_with("lora_up") => {
                    assert_ne!(a.tensor, b.tensor, "{}", a.name)
                }
                _ => {}
            }
        }
    }

    #[test]
    fn rotation_stays_orthogonal() {
        let data = triplets(4, 7);
        let cfg = TrainConfig {
            objective: Objective::IitDas,
            adapter: Adapter::Full,
            learning_rate: 5e-2,
            ..TrainConfig::default()
        };
        let mut t = trainee(&cfg);
        let r0 = t.site.as_ref().unwrap().rotation.clone();
        let mut opt = Optimizer::new(&t, &cfg).unwrap();
        let batch: Vec<_> = data.iter().map(|x| (x, None)).collect();
        for _ in 0..30 {
            opt.step(&mut t, &batch, None, &Sequential).unwrap();
            assert!(t.site.as_ref().unwrap().orthogonality_error() <= 1e-10);
        }
        assert_ne!(t.site.unwrap().rotation, r0);
    }

    #[test]
    fn behavioral_step_lowers_loss() {
        for seed in 0..5 {
            let data = triplets(1, 100 + seed);
            let cfg = TrainConfig {
                adapter: Adapter::Full,
                learning_rate: 1e-4,
                ..TrainConfig::default()
            };
            let mut t = trainee(&cfg);
            let before = super::super::behavioral_loss(&t.model, &data[0]).unwrap();
            let mut opt = Optimizer::new(&t, &cfg).unwrap();
            opt.step(&mut t, &[(&data[0], None)], None, &Sequential).unwrap();
            let after = super::super::behavioral_loss(&t.model, &data[0]).unwrap();
            assert!(after < before, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn pretraining_reduces_contrastive_loss() {
        let data = triplets(24, 8);
        let mut model = DualEncoder::new(tiny_config(), 2).unwrap();
        let cfg = PretrainConfig {
            epochs: 6,
            batch_size: 8,
            learning_rate: 1e-2,
            texts: PretrainTexts::Descriptions,
            ..PretrainConfig::default()
        };
        let recs = pretrain(&mut model, &data, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(recs.len(), 6);
        assert!(recs[5].train_loss < recs[0].train_loss);
    }

    #[test]
    fn optimizer_needs_site_for_iit() {
        let cfg = TrainConfig {
            objective: Objective::IitDas,
            ..TrainConfig::default()
        };
        let t = Trainee {
            model: DualEncoder::new(tiny_config(), 1).unwrap().with_lora(LoraConfig { rank: 2, ..LoraConfig::default() }, 0).unwrap(),
            site: None,
        };
        assert!(Optimizer::new(&t, &cfg).is_err());
    }
}
