//! The dual encoder: a small causal transformer over text, a linear image
//! projector and a scaled-cosine similarity head, with optional LoRA
//! adapters on any of the block's linear maps.

mod lora;
mod tokenizer;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, invalid, Error, Result};
use crate::rng::{gaussian_tensor, stream, Rng};
use crate::tensor::{norm, Tensor};

pub use lora::{LoraConfig, LoraTarget};
pub use tokenizer::{split_words, Encoded, Tokenizer, BOS, EOS, PAD, UNK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_image_in: usize,
    pub logit_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            max_seq_len: 32,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_image_in: 32,
            logit_scale: 20.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= UNK as usize {
            return Err(config_err("vocab_size must exceed the 4 reserved tokens"));
        }
        if self.max_seq_len < 3 {
            return Err(config_err("max_seq_len must be at least 3"));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(config_err(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers < 2 {
            return Err(config_err("n_layers must be at least 2"));
        }
        if self.d_image_in == 0 {
            return Err(config_err("d_image_in must be positive"));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(config_err("logit_scale must be positive"));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Index of a tensor in [`DualEncoder::params`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Base,
    Adapter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
}

/// Which parameters receive gradients on a bound forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Frozen,
    Full,
    Adapters,
}

impl TrainMode {
    fn trains(self, kind: ParamKind) -> bool {
        match self {
            TrainMode::Frozen => false,
            TrainMode::Full => true,
            TrainMode::Adapters => kind == ParamKind::Adapter,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct LoraPair {
    down: ParamId,
    up: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    ln1: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    // q, k, v, o, mlp_in, mlp_out
    linear: [ParamId; 6],
    adapters: [Option<LoraPair>; 6],
}

/// Text tower, image projector and similarity head.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder {
    config: ModelConfig,
    params: Vec<Param>,
    token_embedding: ParamId,
    positional_embedding: ParamId,
    blocks: Vec<Block>,
    final_norm: (ParamId, ParamId),
    text_projection: ParamId,
    image_projection: ParamId,
    lora: Option<LoraConfig>,
}

/// Output of [`DualEncoder::encode_text_traced`].
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoding {
    /// Unit-norm text embedding.
    pub embedding: Tensor,
    /// Residual at the pooled position after the embeddings (index 0) and
    /// after every block (index `l` = output of block `l - 1`).
    pub pooled_residuals: Vec<Tensor>,
}

struct Builder {
    params: Vec<Param>,
}

impl Builder {
    fn add(&mut self, name: String, tensor: Tensor, kind: ParamKind) -> ParamId {
        self.params.push(Param { name, tensor, kind });
        ParamId(self.params.len() - 1)
    }
}

const LINEAR_NAMES: [&str; 6] = [
    "attn.q",
    "attn.k",
    "attn.v",
    "attn.o",
    "mlp.in",
    "mlp.out",
];

impl DualEncoder {
    /// Randomly initialized encoder.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, 0x6d6f64656c);
        Ok(Self::build(config, |shape, kind| match kind {
            Init::Embedding => gaussian_tensor(&mut rng, shape, 0.5),
            Init::Position => gaussian_tensor(&mut rng, shape, 0.1),
            Init::Linear => gaussian_tensor(&mut rng, shape, 1.0 / libm::sqrt(shape[0] as f64)),
            Init::Ones => {
                let mut t = Tensor::zeros(shape);
                t.data_mut().iter_mut().for_each(|v| *v = 1.0);
                t
            }
            Init::Zeros => Tensor::zeros(shape),
        }))
    }

    /// Zero-filled encoder with the canonical parameter layout, used when
    /// loading named tensors.
    pub fn skeleton(config: ModelConfig, lora: Option<LoraConfig>) -> Result<Self> {
        config.validate()?;
        let mut m = Self::build(config, |shape, _| Tensor::zeros(shape));
        if let Some(cfg) = lora {
            m.attach_adapters(cfg, |shape, _| Tensor::zeros(shape))?;
        }
        Ok(m)
    }

    fn build(config: ModelConfig, mut init: impl FnMut(&[usize], Init) -> Tensor) -> Self {
        let d = config.d_model;
        let mut b = Builder { params: Vec::new() };
        let token_embedding = b.add(
            "token_embedding".into(),
            init(&[config.vocab_size, d], Init::Embedding),
            ParamKind::Base,
        );
        let positional_embedding = b.add(
            "positional_embedding".into(),
            init(&[config.max_seq_len, d], Init::Position),
            ParamKind::Base,
        );
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut norm_pair = |b: &mut Builder, tag: &str| {
                (
                    b.add(format!("layers.{l}.{tag}.gain"), init(&[1, d], Init::Ones), ParamKind::Base),
                    b.add(format!("layers.{l}.{tag}.bias"), init(&[1, d], Init::Zeros), ParamKind::Base),
                )
            };
            let ln1 = norm_pair(&mut b, "ln1");
            let ln2 = norm_pair(&mut b, "ln2");
            let shapes = [[d, d], [d, d], [d, d], [d, d], [d, 4 * d], [4 * d, d]];
            let mut linear = [ParamId(0); 6];
            for (i, shape) in shapes.iter().enumerate() {
                linear[i] = b.add(
                    format!("layers.{l}.{}", LINEAR_NAMES[i]),
                    init(shape, Init::Linear),
                    ParamKind::Base,
                );
            }
            blocks.push(Block {
                ln1,
                ln2,
                linear,
                adapters: [None; 6],
            });
        }
        let final_norm = (
            b.add("final_norm.gain".into(), init(&[1, d], Init::Ones), ParamKind::Base),
            b.add("final_norm.bias".into(), init(&[1, d], Init::Zeros), ParamKind::Base),
        );
        let text_projection = b.add("text_projection".into(), init(&[d, d], Init::Linear), ParamKind::Base);
        let image_projection = b.add(
            "image_projection".into(),
            init(&[config.d_image_in, d], Init::Linear),
            ParamKind::Base,
        );
        Self {
            config,
            params: b.params,
            token_embedding,
            positional_embedding,
            blocks,
            final_norm,
            text_projection,
            image_projection,
            lora: None,
        }
    }

    /// Attach zero-initialized-`up` LoRA adapters and freeze the base.
    pub fn with_lora(mut self, cfg: LoraConfig, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, 0x6c6f7261);
        let std = 1.0 / libm::sqrt(cfg.rank as f64);
        self.attach_adapters(cfg, |shape, is_down| {
            if is_down {
                gaussian_tensor(&mut rng, shape, std)
            } else {
                Tensor::zeros(shape)
            }
        })?;
        Ok(self)
    }

    fn attach_adapters(
        &mut self,
        cfg: LoraConfig,
        mut init: impl FnMut(&[usize], bool) -> Tensor,
    ) -> Result<()> {
        cfg.validate()?;
        if self.lora.is_some() {
            return Err(invalid("model already carries LoRA adapters"));
        }
        for l in 0..self.blocks.len() {
            for target in cfg.targets.iter().copied() {
                let slot = target.slot();
                let w = self.blocks[l].linear[slot];
                let (d_in, d_out) = (self.params[w.0].tensor.rows(), self.params[w.0].tensor.cols());
                if cfg.rank > d_in.min(d_out) {
                    return Err(config_err(format!(
                        "LoRA rank {} exceeds min(d_in, d_out) = {} for {}",
                        cfg.rank,
                        d_in.min(d_out),
                        self.params[w.0].name
                    )));
                }
                let base = self.params[w.0].name.clone();
                self.params.push(Param {
                    name: format!("{base}.lora_down"),
                    tensor: init(&[d_in, cfg.rank], true),
                    kind: ParamKind::Adapter,
                });
                let down = ParamId(self.params.len() - 1);
                self.params.push(Param {
                    name: format!("{base}.lora_up"),
                    tensor: init(&[cfg.rank, d_out], false),
                    kind: ParamKind::Adapter,
                });
                let up = ParamId(self.params.len() - 1);
                self.blocks[l].adapters[slot] = Some(LoraPair { down, up });
            }
        }
        self.lora = Some(cfg);
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn lora(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    /// Mutable access to several parameters at once. `ids` must be strictly
    /// increasing.
    pub fn params_mut(&mut self, ids: &[ParamId]) -> Vec<&mut Tensor> {
        assert!(ids.windows(2).all(|w| w[0] < w[1]), "parameter ids must be sorted and unique");
        let mut want = ids.iter().peekable();
        let mut out = Vec::with_capacity(ids.len());
        for (i, p) in self.params.iter_mut().enumerate() {
            if want.peek().is_some_and(|id| id.0 == i) {
                want.next();
                out.push(&mut p.tensor);
            }
        }
        out
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Ids of the parameters that `mode` trains, in canonical order.
    pub fn trainable(&self, mode: TrainMode) -> Vec<ParamId> {
        (0..self.params.len())
            .filter(|&i| mode.trains(self.params[i].kind))
            .map(ParamId)
            .collect()
    }

    pub fn trainable_count(&self, mode: TrainMode) -> usize {
        self.trainable(mode)
            .iter()
            .map(|id| self.params[id.0].tensor.numel())
            .sum()
    }

    /// Overwrite a parameter by name, checking the shape.
    pub fn load_named(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| invalid(format!("unknown parameter {name}")))?;
        let slot = &mut self.params[id.0].tensor;
        if slot.shape() != tensor.shape() {
            return Err(Error::Shape {
                op: "load_named",
                lhs: slot.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        *slot = tensor;
        Ok(())
    }

    /// Place every parameter on `graph`.
    pub fn bind<'p>(&'p self, graph: &mut Graph<'p>, mode: TrainMode) -> Bound<'p> {
        let vars = self
            .params
            .iter()
            .map(|p| graph.borrowed(&p.tensor, mode.trains(p.kind)))
            .collect();
        Bound {
            model: self,
            vars,
            dropout: RefCell::new(None),
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(invalid("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(invalid(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        Ok(())
    }

    /// Unit-norm text embedding of the active token sequence (`BOS .. EOS`).
    pub fn encode_text(&self, tokens: &[u32]) -> Result<Tensor> {
        Ok(self.encode_text_traced(tokens)?.embedding)
    }

    pub fn encode_text_traced(&self, tokens: &[u32]) -> Result<TextEncoding> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, TrainMode::Frozen);
        let mut resid = m.embed_text(&mut g, tokens)?;
        let mut pooled = vec![m.pooled_value(&g, resid)];
        for l in 0..self.config.n_layers {
            resid = m.run_blocks(&mut g, resid, l..l + 1)?;
            pooled.push(m.pooled_value(&g, resid));
        }
        let raw = m.project_text(&mut g, resid)?;
        let unit = g.normalize(raw)?;
        Ok(TextEncoding {
            embedding: g.value(unit).clone(),
            pooled_residuals: pooled,
        })
    }

    /// Unit-norm image embedding.
    pub fn encode_image(&self, features: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, TrainMode::Frozen);
        let raw = m.project_image(&mut g, features)?;
        let unit = g.normalize(raw)?;
        Ok(g.value(unit).clone())
    }

    /// `logit_scale * cos(image, text)`.
    pub fn score(&self, features: &[f64], tokens: &[u32]) -> Result<f64> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, TrainMode::Frozen);
        let img = m.project_image(&mut g, features)?;
        let txt = m.encode_text_raw(&mut g, tokens)?;
        let s = m.score(&mut g, img, txt)?;
        Ok(g.value(s).item())
    }

    /// Score with the pooled residual after `layer` blocks replaced by `row`.
    pub fn score_with_pooled_override(
        &self,
        features: &[f64],
        tokens: &[u32],
        layer: usize,
        row: &Tensor,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, TrainMode::Frozen);
        let img = m.project_image(&mut g, features)?;
        let resid = m.embed_text(&mut g, tokens)?;
        let resid = m.run_blocks(&mut g, resid, 0..layer)?;
        let r = g.constant(row.clone());
        let resid = m.replace_pooled(&mut g, resid, r)?;
        let resid = m.run_blocks(&mut g, resid, layer..self.config.n_layers)?;
        let txt = m.project_text(&mut g, resid)?;
        let s = m.score(&mut g, img, txt)?;
        Ok(g.value(s).item())
    }
}

/// Scaled cosine of two already normalized embeddings.
pub fn score_from_embeddings(logit_scale: f64, image: &[f64], text: &[f64]) -> f64 {
    logit_scale * crate::tensor::dot(image, text) / (norm(image) * norm(text))
}

enum Init {
    Embedding,
    Position,
    Linear,
    Ones,
    Zeros,
}

struct Dropout {
    p: f64,
    rng: Rng,
}

/// A [`DualEncoder`] whose parameters live on a particular graph.
pub struct Bound<'p> {
    model: &'p DualEncoder,
    vars: Vec<Var>,
    dropout: RefCell<Option<Dropout>>,
}

impl<'p> Bound<'p> {
    pub fn model(&self) -> &'p DualEncoder {
        self.model
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Enable LoRA dropout (training only) with its own random stream.
    pub fn enable_dropout(&self, rng: Rng) {
        if let Some(cfg) = self.model.lora.as_ref() {
            if cfg.dropout > 0.0 {
                *self.dropout.borrow_mut() = Some(Dropout { p: cfg.dropout, rng });
            }
        }
    }

    /// Token embedding rows for the active sequence (`n x d`).
    pub fn token_embeddings(&self, g: &mut Graph<'p>, tokens: &[u32]) -> Result<Var> {
        self.model.check_tokens(tokens)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        g.gather(self.var(self.model.token_embedding), &ids)
    }

    /// Add positional embeddings to an `n x d` block of token embeddings.
    pub fn add_positions(&self, g: &mut Graph<'p>, tok: Var) -> Result<Var> {
        let n = g.value(tok).rows();
        if n == 0 || n > self.model.config.max_seq_len {
            return Err(invalid(format!("sequence length {n} outside 1..=max_seq_len")));
        }
        let pos = g.slice(self.var(self.model.positional_embedding), 0, 0, n)?;
        g.add(tok, pos)
    }

    /// Residual stream entering block 0.
    pub fn embed_text(&self, g: &mut Graph<'p>, tokens: &[u32]) -> Result<Var> {
        let tok = self.token_embeddings(g, tokens)?;
        self.add_positions(g, tok)
    }

    fn linear(&self, g: &mut Graph<'p>, x: Var, block: &Block, slot: usize) -> Result<Var> {
        let y = g.matmul(x, self.var(block.linear[slot]))?;
        let Some(pair) = block.adapters[slot] else {
            return Ok(y);
        };
        let mut input = x;
        if let Some(drop) = self.dropout.borrow_mut().as_mut() {
            let shape = g.value(x).shape().to_vec();
            let n = g.value(x).numel();
            let keep = 1.0 - drop.p;
            let mask: Vec<f64> = (0..n)
                .map(|_| {
                    let u: f64 = rand::Rng::random(&mut drop.rng);
                    if u < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect();
            let mask = g.constant(Tensor::new(shape, mask)?);
            input = g.mul(x, mask)?;
        }
        let h = g.matmul(input, self.var(pair.down))?;
        let delta = g.matmul(h, self.var(pair.up))?;
        g.add(y, delta)
    }

    fn attention(&self, g: &mut Graph<'p>, x: Var, block: &Block) -> Result<Var> {
        let cfg = &self.model.config;
        let n = g.value(x).rows();
        let dh = cfg.d_head();
        let q = self.linear(g, x, block, 0)?;
        let k = self.linear(g, x, block, 1)?;
        let v = self.linear(g, x, block, 2)?;
        let mut mask = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in i + 1..n {
                mask.set(i, j, f64::NEG_INFINITY);
            }
        }
        let mask = g.constant(mask);
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = g.slice(q, 1, h * dh, (h + 1) * dh)?;
            let kh = g.slice(k, 1, h * dh, (h + 1) * dh)?;
            let vh = g.slice(v, 1, h * dh, (h + 1) * dh)?;
            let kt = g.transpose(kh)?;
            let logits = g.matmul(qh, kt)?;
            let logits = g.scale(logits, scale);
            let logits = g.add(logits, mask)?;
            let attn = g.softmax_rows(logits)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let cat = g.concat(&heads, 1)?;
        self.linear(g, cat, block, 3)
    }

    /// Run blocks `layers` (pre-norm attention then MLP) on a residual.
    pub fn run_blocks(&self, g: &mut Graph<'p>, mut resid: Var, layers: Range<usize>) -> Result<Var> {
        if layers.end > self.model.blocks.len() {
            return Err(invalid(format!(
                "block range {layers:?} outside 0..{}",
                self.model.blocks.len()
            )));
        }
        for block in &self.model.blocks[layers] {
            let h = g.layer_norm(resid, self.var(block.ln1.0), self.var(block.ln1.1))?;
            let a = self.attention(g, h, block)?;
            resid = g.add(resid, a)?;
            let h = g.layer_norm(resid, self.var(block.ln2.0), self.var(block.ln2.1))?;
            let h = self.linear(g, h, block, 4)?;
            let h = g.gelu(h);
            let h = self.linear(g, h, block, 5)?;
            resid = g.add(resid, h)?;
        }
        Ok(resid)
    }

    /// Last row (the EOS slot) of a residual.
    pub fn pooled(&self, g: &mut Graph<'p>, resid: Var) -> Result<Var> {
        let n = g.value(resid).rows();
        g.slice(resid, 0, n - 1, n)
    }

    fn pooled_value(&self, g: &Graph<'p>, resid: Var) -> Tensor {
        let t = g.value(resid);
        let (n, d) = (t.rows(), t.cols());
        Tensor::row(t.data()[(n - 1) * d..].to_vec())
    }

    /// Residual rows before the pooled position.
    pub fn prefix_rows(&self, g: &mut Graph<'p>, resid: Var) -> Result<Option<Var>> {
        let n = g.value(resid).rows();
        if n == 1 {
            return Ok(None);
        }
        Ok(Some(g.slice(resid, 0, 0, n - 1)?))
    }

    /// Residual with its pooled row replaced by `row`.
    pub fn replace_pooled(&self, g: &mut Graph<'p>, resid: Var, row: Var) -> Result<Var> {
        match self.prefix_rows(g, resid)? {
            Some(prefix) => g.concat(&[prefix, row], 0),
            None => Ok(row),
        }
    }

    /// Final norm and projection of the pooled row (not normalized).
    pub fn project_text(&self, g: &mut Graph<'p>, resid: Var) -> Result<Var> {
        let pooled = self.pooled(g, resid)?;
        let (gain, bias) = self.model.final_norm;
        let h = g.layer_norm(pooled, self.var(gain), self.var(bias))?;
        g.matmul(h, self.var(self.model.text_projection))
    }

    /// Full text tower, unnormalized projection.
    pub fn encode_text_raw(&self, g: &mut Graph<'p>, tokens: &[u32]) -> Result<Var> {
        let resid = self.embed_text(g, tokens)?;
        let resid = self.run_blocks(g, resid, 0..self.model.config.n_layers)?;
        self.project_text(g, resid)
    }

    /// Image projection, unnormalized. Zero or wrongly sized features are
    /// rejected.
    pub fn project_image(&self, g: &mut Graph<'p>, features: &[f64]) -> Result<Var> {
        let d_in = self.model.config.d_image_in;
        if features.len() != d_in {
            return Err(invalid(format!(
                "image features have length {}, expected {d_in}",
                features.len()
            )));
        }
        if norm(features) == 0.0 || !features.iter().all(|v| v.is_finite()) {
            return Err(invalid("image features must be finite and nonzero"));
        }
        let x = g.constant(Tensor::row(features.to_vec()));
        g.matmul(x, self.var(self.model.image_projection))
    }

    /// `logit_scale * cos(image, text)` on the graph.
    pub fn score(&self, g: &mut Graph<'p>, image: Var, text: Var) -> Result<Var> {
        let c = g.cosine(image, text)?;
        Ok(g.scale(c, self.model.config.logit_scale))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_vec, seeded};

    use crate::testutil::tiny_config;

    fn tokens(rng: &mut Rng, n: usize) -> Vec<u32> {
        crate::testutil::random_tokens(rng, n, 20)
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.n_layers = 1;
        assert!(c.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let m = DualEncoder::new(tiny_config(), 1).unwrap();
        let mut rng = seeded(2);
        for _ in 0..10 {
            let t = tokens(&mut rng, 5);
            let e = m.encode_text(&t).unwrap();
            assert!((norm(e.data()) - 1.0).abs() < 1e-9);
            assert_eq!(e, m.encode_text(&t).unwrap());
            let f = gaussian_vec(&mut rng, 6, 1.0);
            let i = m.encode_image(&f).unwrap();
            assert!((norm(i.data()) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_or_long_sequence_rejected() {
        let m = DualEncoder::new(tiny_config(), 1).unwrap();
        assert!(m.encode_text(&[]).is_err());
        assert!(m.encode_text(&[5; 11]).is_err());
    }

    #[test]
    fn image_scale_invariance_and_zero_rejected() {
        let m = DualEncoder::new(tiny_config(), 4).unwrap();
        let f = [0.3, -1.0, 0.2, 0.0, 2.0, 1.0];
        let f2: Vec<f64> = f.iter().map(|v| 2.0 * v).collect();
        let a = m.encode_image(&f).unwrap();
        let b = m.encode_image(&f2).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(m.encode_image(&[0.0; 6]).is_err());
        assert!(m.encode_image(&[1.0; 5]).is_err());
    }

    #[test]
    fn score_bounded_by_logit_scale() {
        let m = DualEncoder::new(tiny_config(), 9).unwrap();
        let mut rng = seeded(10);
        for _ in 0..20 {
            let t = tokens(&mut rng, 4);
            let f = gaussian_vec(&mut rng, 6, 1.0);
            let s = m.score(&f, &t).unwrap();
            assert!(s.abs() <= 20.0 + 1e-12);
        }
        assert_eq!(score_from_embeddings(20.0, &[0.6, 0.8], &[0.6, 0.8]), 20.0);
        assert_eq!(score_from_embeddings(20.0, &[1.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn permutation_changes_output() {
        let mut rng = seeded(77);
        let mut differ = 0;
        for seed in 0..10 {
            let m = DualEncoder::new(tiny_config(), seed).unwrap();
            let t = vec![BOS, 5, 6, 7, 8, EOS];
            let p = vec![BOS, 8, 6, 5, 7, EOS];
            let _ = &mut rng;
            if m.encode_text(&t).unwrap() != m.encode_text(&p).unwrap() {
                differ += 1;
            }
        }
        assert_eq!(differ, 10);
    }

    #[test]
    fn pooled_splice_self_consistent() {
        let m = DualEncoder::new(tiny_config(), 3).unwrap();
        let mut rng = seeded(5);
        for layer in 0..=3 {
            let t = tokens(&mut rng, 6);
            let f = gaussian_vec(&mut rng, 6, 1.0);
            let trace = m.encode_text_traced(&t).unwrap();
            let base = m.score(&f, &t).unwrap();
            let spliced = m
                .score_with_pooled_override(&f, &t, layer, &trace.pooled_residuals[layer])
                .unwrap();
            assert!((base - spliced).abs() <= 1e-12);
        }
    }

    #[test]
    fn lora_rejects_bad_rank() {
        let m = DualEncoder::new(tiny_config(), 3).unwrap();
        let cfg = LoraConfig {
            rank: 9,
            ..LoraConfig::default()
        };
        assert!(m.clone().with_lora(cfg, 0).is_err());
        let cfg = LoraConfig {
            rank: 0,
            ..LoraConfig::default()
        };
        assert!(m.with_lora(cfg, 0).is_err());
    }

    #[test]
    fn lora_trainable_count_default_model() {
        let cfg = ModelConfig {
            vocab_size: 50,
            ..ModelConfig::default()
        };
        let m = DualEncoder::new(cfg, 0)
            .unwrap()
            .with_lora(LoraConfig::default(), 0)
            .unwrap();
        assert_eq!(m.trainable_count(TrainMode::Adapters), 4 * 4 * (64 * 16 + 16 * 64));
        assert_eq!(m.trainable_count(TrainMode::Adapters), 32768);
    }

    #[test]
    fn zero_init_lora_is_noop() {
        let m = DualEncoder::new(tiny_config(), 8).unwrap();
        let cfg = LoraConfig {
            rank: 4,
            targets: LoraTarget::ALL.to_vec(),
            ..LoraConfig::default()
        };
        let a = m.clone().with_lora(cfg, 1).unwrap();
        let mut rng = seeded(6);
        for _ in 0..20 {
            let t = tokens(&mut rng, 5);
            let f = gaussian_vec(&mut rng, 6, 1.0);
            assert_eq!(m.score(&f, &t).unwrap(), a.score(&f, &t).unwrap());
        }
    }

    #[test]
    fn skeleton_layout_matches_initialized_model() {
        let cfg = LoraConfig {
            rank: 2,
            ..LoraConfig::default()
        };
        let m = DualEncoder::new(tiny_config(), 8).unwrap().with_lora(cfg.clone(), 1).unwrap();
        let s = DualEncoder::skeleton(tiny_config(), Some(cfg)).unwrap();
        let names: Vec<_> = m.params().iter().map(|p| (&p.name, p.tensor.shape())).collect();
        let names2: Vec<_> = s.params().iter().map(|p| (&p.name, p.tensor.shape())).collect();
        assert_eq!(names, names2);
    }
}
