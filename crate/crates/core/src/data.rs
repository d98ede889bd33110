//! Triplets, zero-shot tasks, human ratings and the synthetic generator.
//!
//! Synthetic images are feature vectors. The first `n_attributes`
//! coordinates (when they fit) are one-hot attribute axes; the remaining
//! coordinates hold random directions for the named entity and the place a
//! caption mentions. A description lists every attribute of its image.
//! A caption names the entity, a date, half of the attributes and the
//! place, so both texts mention four image-aligned things.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Result};
use crate::rng::{gaussian, stream, Rng};
use crate::tensor::norm;

/// One image with its description and caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Triplet {
    pub id: String,
    pub image: Vec<f64>,
    pub description: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

impl Triplet {
    pub fn validate(&self) -> Result<()> {
        if self.description.trim().is_empty() {
            return Err(data_err("empty description"));
        }
        if self.caption.trim().is_empty() {
            return Err(data_err("empty caption"));
        }
        validate_image(&self.image)
    }
}

pub fn validate_image(image: &[f64]) -> Result<()> {
    if image.is_empty() || !image.iter().all(|v| v.is_finite()) {
        return Err(data_err("image features must be finite and non-empty"));
    }
    if norm(image) == 0.0 {
        return Err(data_err("image features must be nonzero"));
    }
    Ok(())
}

/// The two text purposes the fine-tuning objectives distinguish.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextPurpose {
    Description,
    Caption,
}

pub const DEFAULT_TEMPLATE: &str = "An image of {}";

/// Zero-shot classification task: predict the label whose prompt scores
/// highest against the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotTask {
    pub name: String,
    pub labels: Vec<String>,
    pub examples: Vec<(Vec<f64>, usize)>,
    pub template: String,
}

impl ZeroShotTask {
    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(data_err("zero-shot task has no labels"));
        }
        if !self.template.contains("{}") {
            return Err(data_err("template needs a {} slot"));
        }
        for (i, (img, label)) in self.examples.iter().enumerate() {
            if *label >= self.labels.len() {
                return Err(data_err(format!(
                    "example {i}: label {label} out of range for {} labels",
                    self.labels.len()
                )));
            }
            validate_image(img)?;
        }
        Ok(())
    }

    pub fn prompt(&self, label: usize) -> String {
        self.template.replacen("{}", &self.labels[label], 1)
    }
}

/// One human judgement of an image-text pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanRating {
    pub image: Vec<f64>,
    pub text: String,
    pub overall: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imaginability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub irrelevance: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatingDimension {
    Overall,
    Imaginability,
    Relevance,
    Irrelevance,
}

impl RatingDimension {
    pub fn get(self, r: &HumanRating) -> Option<f64> {
        match self {
            RatingDimension::Overall => Some(r.overall),
            RatingDimension::Imaginability => r.imaginability,
            RatingDimension::Relevance => r.relevance,
            RatingDimension::Irrelevance => r.irrelevance,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RatingDimension::Overall => "overall",
            RatingDimension::Imaginability => "imaginability",
            RatingDimension::Relevance => "relevance",
            RatingDimension::Irrelevance => "irrelevance",
        }
    }
}

impl core::str::FromStr for RatingDimension {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "overall" => RatingDimension::Overall,
            "imaginability" => RatingDimension::Imaginability,
            "relevance" => RatingDimension::Relevance,
            "irrelevance" => RatingDimension::Irrelevance,
            other => return Err(config_err(format!("unknown rating dimension {other:?}"))),
        })
    }
}

/// Imageability and concreteness ratings for one token.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LexiconEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imageability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concreteness: Option<f64>,
}

pub type Lexicon = BTreeMap<String, LexiconEntry>;

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_attributes: usize,
    pub attrs_per_image: usize,
    pub n_names: usize,
    pub n_dates: usize,
    pub n_places: usize,
    pub image_dim: usize,
    pub noise_std: f64,
    /// Length of the name and place directions added to each image.
    pub context_strength: f64,
    /// Zero-shot examples per attribute.
    pub zeroshot_per_class: usize,
    pub n_human_eval: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val: 400,
            n_test: 400,
            n_attributes: 24,
            attrs_per_image: 4,
            n_names: 16,
            n_dates: 12,
            n_places: 8,
            image_dim: 32,
            noise_std: 0.05,
            context_strength: 2.0,
            zeroshot_per_class: 10,
            n_human_eval: 200,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.attrs_per_image == 0 || self.attrs_per_image > self.n_attributes {
            return Err(config_err(format!(
                "attrs_per_image ({}) must lie in 1..=n_attributes ({})",
                self.attrs_per_image, self.n_attributes
            )));
        }
        if self.attrs_per_image < 2 {
            return Err(config_err("captions need a strict, nonempty half of at least 2 attributes"));
        }
        if self.n_names == 0 || self.n_dates == 0 || self.n_places == 0 {
            return Err(config_err("distractor vocabularies must be nonempty"));
        }
        if self.image_dim == 0 {
            return Err(config_err("image_dim must be positive"));
        }
        if !(self.context_strength >= 0.0 && self.context_strength.is_finite()) {
            return Err(config_err("context_strength must be finite and non-negative"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(config_err("noise_std must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Output of [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: Vec<Triplet>,
    pub val: Vec<Triplet>,
    pub test: Vec<Triplet>,
    pub zeroshot: ZeroShotTask,
    pub lexicon: Lexicon,
    pub human_eval: Vec<HumanRating>,
    pub attribute_words: Vec<String>,
    pub distractor_words: Vec<String>,
}

impl SyntheticData {
    /// Every text the generator can emit plus the zero-shot prompts.
    pub fn corpus(&self) -> Vec<String> {
        let mut out = Vec::new();
        for t in self.train.iter().chain(&self.val).chain(&self.test) {
            out.push(t.description.clone());
            out.push(t.caption.clone());
        }
        for l in 0..self.zeroshot.labels.len() {
            out.push(self.zeroshot.prompt(l));
        }
        out
    }
}

const ATTRIBUTE_WORDS: [&str; 48] = [
    "red", "blue", "green", "yellow", "wooden", "metal", "glass", "stone", "dog", "cat", "horse",
    "bird", "tree", "flower", "river", "mountain", "guitar", "piano", "bicycle", "boat", "bridge",
    "tower", "window", "door", "table", "chair", "lamp", "book", "cup", "bottle", "hat", "coat",
    "shoe", "ball", "kite", "sand", "snow", "grass", "cloud", "fire", "rope", "wheel", "fence",
    "apple", "bread", "candle", "mirror", "ladder",
];

const NAME_WORDS: [&str; 24] = [
    "hendrix", "curie", "lovelace", "darwin", "tesla", "austen", "turing", "noether", "kahlo",
    "mandela", "bach", "hopper", "goodall", "euler", "banneker", "sappho", "basho", "hypatia",
    "ramanujan", "mozart", "shelley", "gandhi", "nightingale", "galileo",
];

const PLACE_WORDS: [&str; 16] = [
    "festival", "ceremony", "museum", "parliament", "stadium", "conference", "exhibition",
    "premiere", "summit", "gallery", "election", "tournament", "campaign", "concert", "expedition",
    "headquarters",
];

fn word_list(fixed: &[&str], n: usize, prefix: &str) -> Vec<String> {
    (0..n)
        .map(|i| match fixed.get(i) {
            Some(w) => w.to_string(),
            None => format!("{prefix}{i}"),
        })
        .collect()
}

fn unit_direction(rng: &mut Rng, dim: usize, offset: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    loop {
        for x in &mut v[offset..] {
            *x = gaussian(rng);
        }
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

struct World {
    attributes: Vec<String>,
    names: Vec<String>,
    dates: Vec<String>,
    places: Vec<String>,
    attr_axes: Vec<Vec<f64>>,
    name_axes: Vec<Vec<f64>>,
    place_axes: Vec<Vec<f64>>,
}

impl World {
    fn new(spec: &SyntheticSpec, rng: &mut Rng) -> Self {
        let dim = spec.image_dim;
        let one_hot = spec.n_attributes < dim;
        let attr_axes = (0..spec.n_attributes)
            .map(|i| {
                if one_hot {
                    let mut v = vec![0.0; dim];
                    v[i] = 1.0;
                    v
                } else {
                    unit_direction(rng, dim, 0)
                }
            })
            .collect();
        let offset = if one_hot { spec.n_attributes } else { 0 };
        let name_axes = (0..spec.n_names).map(|_| unit_direction(rng, dim, offset)).collect();
        let place_axes = (0..spec.n_places).map(|_| unit_direction(rng, dim, offset)).collect();
        Self {
            attributes: word_list(&ATTRIBUTE_WORDS, spec.n_attributes, "attr"),
            names: word_list(&NAME_WORDS, spec.n_names, "name"),
            dates: (0..spec.n_dates).map(|i| format!("{}", 1901 + 7 * i)).collect(),
            places: word_list(&PLACE_WORDS, spec.n_places, "place"),
            attr_axes,
            name_axes,
            place_axes,
        }
    }

    fn image(&self, rng: &mut Rng, attrs: &[usize], context: Option<(usize, usize, f64)>, noise: f64) -> Vec<f64> {
        let dim = self.attr_axes.first().map_or(0, Vec::len);
        let mut v: Vec<f64> = (0..dim).map(|_| noise * gaussian(rng)).collect();
        let mut add = |axis: &[f64], w: f64| v.iter_mut().zip(axis).for_each(|(x, a)| *x += w * a);
        for &a in attrs {
            add(&self.attr_axes[a], 1.0);
        }
        if let Some((name, place, w)) = context {
            add(&self.name_axes[name], w);
            add(&self.place_axes[place], w);
        }
        v
    }

    fn triplet(&self, spec: &SyntheticSpec, rng: &mut Rng, id: String) -> Triplet {
        let mut pool: Vec<usize> = (0..spec.n_attributes).collect();
        pool.shuffle(rng);
        let attrs = &pool[..spec.attrs_per_image];
        let name = rng.random_range(0..self.names.len());
        let date = rng.random_range(0..self.dates.len());
        let place = rng.random_range(0..self.places.len());
        let image = self.image(rng, attrs, Some((name, place, spec.context_strength)), spec.noise_std);

        let mut desc: Vec<&str> = attrs.iter().map(|&a| self.attributes[a].as_str()).collect();
        desc.shuffle(rng);
        let mut half: Vec<usize> = attrs.to_vec();
        half.shuffle(rng);
        half.truncate(spec.attrs_per_image / 2);
        let mut cap: Vec<&str> = vec![self.names[name].as_str(), self.dates[date].as_str()];
        cap.extend(half.iter().map(|&a| self.attributes[a].as_str()));
        cap.push(self.places[place].as_str());
        cap.shuffle(rng);
        Triplet {
            id,
            image,
            description: desc.join(" "),
            caption: cap.join(" "),
            context: Some(format!("{} {}", self.places[place], self.dates[date])),
        }
    }
}

/// Deterministic synthetic dataset with a planted description/caption
/// signal and matching lexicon.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = stream(spec.seed, 0x64617461);
    let world = World::new(spec, &mut rng);

    let split = |n: usize, tag: &str, rng: &mut Rng| -> Vec<Triplet> {
        (0..n)
            .map(|i| world.triplet(spec, rng, format!("{tag}-{i:05}")))
            .collect()
    };
    let train = split(spec.n_train, "train", &mut rng);
    let val = split(spec.n_val, "val", &mut rng);
    let test = split(spec.n_test, "test", &mut rng);

    let mut examples = Vec::new();
    for a in 0..spec.n_attributes {
        for _ in 0..spec.zeroshot_per_class {
            examples.push((world.image(&mut rng, &[a], None, spec.noise_std), a));
        }
    }
    let zeroshot = ZeroShotTask {
        name: "attributes".into(),
        labels: world.attributes.clone(),
        examples,
        template: DEFAULT_TEMPLATE.into(),
    };

    let mut lexicon = Lexicon::new();
    let rate = |rng: &mut Rng, center: f64| LexiconEntry {
        imageability: Some(center + 0.1 * gaussian(rng)),
        concreteness: Some(center + 0.1 * gaussian(rng)),
    };
    for w in &world.attributes {
        lexicon.insert(w.clone(), rate(&mut rng, 1.0));
    }
    let distractors: Vec<String> = world
        .names
        .iter()
        .chain(&world.dates)
        .chain(&world.places)
        .cloned()
        .collect();
    for w in &distractors {
        lexicon.insert(w.clone(), rate(&mut rng, -1.0));
    }

    let human_eval = human_ratings(&world, spec, &test, &mut rng);

    Ok(SyntheticData {
        train,
        val,
        test,
        zeroshot,
        lexicon,
        human_eval,
        attribute_words: world.attributes,
        distractor_words: distractors,
    })
}

// Ratings favour texts that name more of the image's attributes and fewer
// distractors, mimicking what low-vision readers ask of alt text.
fn human_ratings(world: &World, spec: &SyntheticSpec, pool: &[Triplet], rng: &mut Rng) -> Vec<HumanRating> {
    if pool.is_empty() {
        return Vec::new();
    }
    let attr_set: BTreeMap<&str, ()> = world.attributes.iter().map(|w| (w.as_str(), ())).collect();
    (0..spec.n_human_eval)
        .map(|i| {
            let t = &pool[i % pool.len()];
            let text = if rng.random_bool(0.5) { &t.description } else { &t.caption };
            let words: Vec<&str> = text.split_whitespace().collect();
            let concrete = words.iter().filter(|w| attr_set.contains_key(*w)).count() as f64;
            let other = words.len() as f64 - concrete;
            let frac = concrete / spec.attrs_per_image as f64;
            let overall = 1.0 + 4.0 * frac - 0.5 * other + 0.3 * gaussian(rng);
            HumanRating {
                image: t.image.clone(),
                text: text.clone(),
                overall,
                imaginability: Some(1.0 + 4.0 * frac + 0.3 * gaussian(rng)),
                relevance: Some(1.0 + 4.0 * frac + 0.3 * gaussian(rng)),
                irrelevance: Some(1.0 + other + 0.3 * gaussian(rng)),
            }
        })
        .collect()
}
