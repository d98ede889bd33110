//! Training objectives.
//!
//! * contrastive pretraining over a batch score matrix,
//! * the behavioral loss `CE([s(im, cap), s(im, des)], 1)`,
//! * the two interchange-intervention terms that localize the text's
//!   purpose in the site's subspace,
//! * their convex combination.

mod adam;
mod train;

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::Triplet;
use crate::error::{config_err, Result};
use crate::intervention::{finish_from_site, run_to_site, spliced_text, BoundSite, InterventionSite, MediationMode};
use crate::model::{Bound, DualEncoder, Encoded, Tokenizer, TrainMode};

pub use adam::{Adam, AdamConfig};
pub use train::{
    prepare_trainee, prepared_desc_gt_cap, pretrain, train, BatchRunner, EpochRecord, ExampleGrad, Optimizer,
    PretrainConfig, PretrainRecord, PretrainTexts, Sequential, StepStats, TrainConfig, TrainData, TrainOutcome,
    Trainee,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Behavioral,
    IitDas,
    Joint,
}

impl Objective {
    pub fn uses_site(self) -> bool {
        !matches!(self, Objective::Behavioral)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Behavioral => "behavioral",
            Objective::IitDas => "iit-das",
            Objective::Joint => "joint",
        }
    }
}

impl core::str::FromStr for Objective {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "behavioral" => Ok(Objective::Behavioral),
            "iit-das" => Ok(Objective::IitDas),
            "joint" => Ok(Objective::Joint),
            other => Err(config_err(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adapter {
    Full,
    Lora,
}

impl Adapter {
    pub fn train_mode(self) -> TrainMode {
        match self {
            Adapter::Full => TrainMode::Full,
            Adapter::Lora => TrainMode::Adapters,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Adapter::Full => "full",
            Adapter::Lora => "lora",
        }
    }
}

impl core::str::FromStr for Adapter {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Adapter::Full),
            "lora" => Ok(Adapter::Lora),
            other => Err(config_err(format!("unknown adapter {other:?}"))),
        }
    }
}

/// A triplet with both texts tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTriplet {
    pub image: Vec<f64>,
    pub description: Encoded,
    pub caption: Encoded,
}

impl PreparedTriplet {
    pub fn new(t: &Triplet, tok: &Tokenizer, max_len: usize) -> Result<Self> {
        t.validate()?;
        Ok(Self {
            image: t.image.clone(),
            description: tok.encode(&t.description, max_len)?,
            caption: tok.encode(&t.caption, max_len)?,
        })
    }
}

pub fn prepare(triplets: &[Triplet], tok: &Tokenizer, max_len: usize) -> Result<Vec<PreparedTriplet>> {
    triplets.iter().map(|t| PreparedTriplet::new(t, tok, max_len)).collect()
}

/// Symmetric InfoNCE over a `b x b` score matrix whose diagonal holds the
/// matched pairs: the mean of row-wise and column-wise cross-entropies.
pub fn contrastive_loss(g: &mut Graph<'_>, scores: Var) -> Result<Var> {
    let t = g.value(scores);
    let b = t.rows();
    if t.shape().len() != 2 || t.cols() != b {
        return Err(config_err(format!("score matrix must be square, got {:?}", t.shape())));
    }
    if b < 2 {
        return Err(config_err("contrastive loss needs a batch of at least 2 pairs"));
    }
    let cols = g.transpose(scores)?;
    let mut terms = Vec::with_capacity(2 * b);
    for m in [scores, cols] {
        for i in 0..b {
            let row = g.slice(m, 0, i, i + 1)?;
            let row = g.reshape(row, alloc::vec![b])?;
            terms.push(g.cross_entropy(row, i)?);
        }
    }
    let all = g.stack(&terms)?;
    Ok(g.mean(all))
}

/// Contrastive loss of a batch of `(image, tokens)` pairs on a bound model.
pub fn pretrain_loss_graph<'p>(
    g: &mut Graph<'p>,
    m: &Bound<'p>,
    images: &[&[f64]],
    texts: &[&[u32]],
) -> Result<Var> {
    if images.len() != texts.len() || images.len() < 2 {
        return Err(config_err("pretraining needs at least 2 matched pairs"));
    }
    let mut img_rows = Vec::with_capacity(images.len());
    let mut txt_rows = Vec::with_capacity(texts.len());
    for (im, tx) in images.iter().zip(texts) {
        let i = m.project_image(g, im)?;
        img_rows.push(g.normalize(i)?);
        let t = m.encode_text_raw(g, tx)?;
        txt_rows.push(g.normalize(t)?);
    }
    let imgs = g.concat(&img_rows, 0)?;
    let txts = g.concat(&txt_rows, 0)?;
    let tt = g.transpose(txts)?;
    let cos = g.matmul(imgs, tt)?;
    let scores = g.scale(cos, m.model().config().logit_scale);
    contrastive_loss(g, scores)
}

/// `CE([score_cap, score_des], 1)`.
pub fn behavioral_from_scores(g: &mut Graph<'_>, score_des: Var, score_cap: Var) -> Result<Var> {
    let logits = g.stack(&[score_cap, score_des])?;
    g.cross_entropy(logits, 1)
}

/// `alpha * iit + (1 - alpha) * behavioral`.
pub fn combine_joint(alpha: f64, iit: f64, behavioral: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * iit + (1.0 - alpha) * behavioral)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(config_err(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Loss nodes for one triplet.
#[derive(Debug, Clone, Copy)]
pub struct TripletLoss {
    pub total: Var,
    pub behavioral: Var,
    /// Caption base with the description's subspace should outscore the
    /// plain caption.
    pub term_a: Option<Var>,
    /// The plain description should outscore the description carrying the
    /// caption's subspace.
    pub term_b: Option<Var>,
}

/// Build the loss of `objective` for one triplet. `sources` optionally
/// supplies the counterfactual texts from another triplet; by default each
/// triplet's own description and caption are swapped.
pub fn triplet_loss_graph<'p>(
    g: &mut Graph<'p>,
    m: &Bound<'p>,
    site: Option<&BoundSite>,
    t: &PreparedTriplet,
    sources: Option<&PreparedTriplet>,
    objective: Objective,
    alpha: f64,
) -> Result<TripletLoss> {
    check_alpha(alpha)?;
    let img = m.project_image(g, &t.image)?;
    if !objective.uses_site() {
        let des = m.encode_text_raw(g, t.description.active())?;
        let cap = m.encode_text_raw(g, t.caption.active())?;
        let sd = m.score(g, img, des)?;
        let sc = m.score(g, img, cap)?;
        let b = behavioral_from_scores(g, sd, sc)?;
        return Ok(TripletLoss {
            total: b,
            behavioral: b,
            term_a: None,
            term_b: None,
        });
    }
    let site = site.ok_or_else(|| config_err(format!("objective {} needs an intervention site", objective.as_str())))?;
    let cap0 = m.embed_text(g, t.caption.active())?;
    let des0 = m.embed_text(g, t.description.active())?;
    let cap_l = run_to_site(g, m, site, cap0)?;
    let des_l = run_to_site(g, m, site, des0)?;
    let (src_des_l, src_cap_l) = match sources {
        None => (des_l, cap_l),
        Some(s) => {
            let d0 = m.embed_text(g, s.description.active())?;
            let c0 = m.embed_text(g, s.caption.active())?;
            (run_to_site(g, m, site, d0)?, run_to_site(g, m, site, c0)?)
        }
    };
    let cap_txt = finish_from_site(g, m, site, cap_l)?;
    let des_txt = finish_from_site(g, m, site, des_l)?;
    let s_cap = m.score(g, img, cap_txt)?;
    let s_des = m.score(g, img, des_txt)?;
    let cap_with_des = spliced_text(g, m, site, cap_l, src_des_l, MediationMode::None)?;
    let des_with_cap = spliced_text(g, m, site, des_l, src_cap_l, MediationMode::None)?;
    let dii_a = m.score(g, img, cap_with_des)?;
    let dii_b = m.score(g, img, des_with_cap)?;
    let la = g.stack(&[s_cap, dii_a])?;
    let term_a = g.cross_entropy(la, 1)?;
    let lb = g.stack(&[s_des, dii_b])?;
    let term_b = g.cross_entropy(lb, 0)?;
    let iit = g.add(term_a, term_b)?;
    let behavioral = behavioral_from_scores(g, s_des, s_cap)?;
    let total = match objective {
        Objective::IitDas => iit,
        Objective::Joint => {
            let a = g.scale(iit, alpha);
            let b = g.scale(behavioral, 1.0 - alpha);
            g.add(a, b)?
        }
        Objective::Behavioral => unreachable!(),
    };
    Ok(TripletLoss {
        total,
        behavioral,
        term_a: Some(term_a),
        term_b: Some(term_b),
    })
}

/// Behavioral loss of one triplet.
pub fn behavioral_loss(model: &DualEncoder, t: &PreparedTriplet) -> Result<f64> {
    let mut g = Graph::new();
    let m = model.bind(&mut g, TrainMode::Frozen);
    let l = triplet_loss_graph(&mut g, &m, None, t, None, Objective::Behavioral, 0.0)?;
    Ok(g.value(l.total).item())
}

/// Interchange-intervention loss and its two terms `(total, a, b)`.
pub fn iit_das_loss(model: &DualEncoder, site: &InterventionSite, t: &PreparedTriplet) -> Result<(f64, f64, f64)> {
    site.validate(model.config())?;
    let mut g = Graph::new();
    let m = model.bind(&mut g, TrainMode::Frozen);
    let s = site.bind(&mut g, false);
    let l = triplet_loss_graph(&mut g, &m, Some(&s), t, None, Objective::IitDas, 1.0)?;
    let v = |x: Option<Var>| g.value(x.expect("iit terms present")).item();
    Ok((g.value(l.total).item(), v(l.term_a), v(l.term_b)))
}

pub fn joint_loss(model: &DualEncoder, site: &InterventionSite, t: &PreparedTriplet, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    site.validate(model.config())?;
    let mut g = Graph::new();
    let m = model.bind(&mut g, TrainMode::Frozen);
    let s = site.bind(&mut g, false);
    let l = triplet_loss_graph(&mut g, &m, Some(&s), t, None, Objective::Joint, alpha)?;
    Ok(g.value(l.total).item())
}
