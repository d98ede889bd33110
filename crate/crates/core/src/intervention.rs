//! Distributed interchange interventions through a learned rotation.
//!
//! The site is the pooled (EOS) row of the residual stream after `layer`
//! blocks. A rotation `ρ` maps that row into a new basis whose first
//! `width` coordinates form the subspace `Z`. An interchange intervention
//! replaces `Z` of a base run with `Z` of a source run and rotates back.
//!
//! Vectors are rows, so `ρ h` is written `h ρᵀ` and `ρᵀ y` is `y ρ`.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, invalid, Error, Result};
use crate::linalg::{orthogonality_error, qr_orthogonal};
use crate::model::{Bound, DualEncoder, ModelConfig, TrainMode};
use crate::rng::{gaussian_tensor, stream};
use crate::tensor::Tensor;

/// How gradients are routed at the site. Forward values never change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediationMode {
    /// Ordinary gradients.
    #[default]
    None,
    /// Only paths through the `Z` coordinates of the pooled row.
    Through,
    /// Every path except the one through `Z`.
    Around,
}

impl MediationMode {
    pub const ALL: [MediationMode; 3] = [MediationMode::None, MediationMode::Through, MediationMode::Around];

    pub fn as_str(self) -> &'static str {
        match self {
            MediationMode::None => "none",
            MediationMode::Through => "through",
            MediationMode::Around => "around",
        }
    }
}

impl core::str::FromStr for MediationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MediationMode::None),
            "through" => Ok(MediationMode::Through),
            "around" => Ok(MediationMode::Around),
            other => Err(invalid(format!("unknown mediation mode {other:?}"))),
        }
    }
}

/// Layer, subspace width and rotation of the intervention.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionSite {
    pub layer: usize,
    pub width: usize,
    pub rotation: Tensor,
}

/// Random orthogonal matrix: QR of a seeded Gaussian matrix with `diag(R) > 0`.
pub fn init_rotation(dim: usize, seed: u64) -> Tensor {
    let mut rng = stream(seed, 0x726f74);
    qr_orthogonal(&gaussian_tensor(&mut rng, &[dim, dim], 1.0))
}

impl InterventionSite {
    pub fn new(config: &ModelConfig, layer: usize, width: usize, seed: u64) -> Result<Self> {
        let site = Self {
            layer,
            width,
            rotation: init_rotation(config.d_model, seed),
        };
        site.validate(config)?;
        Ok(site)
    }

    /// Layer `n_layers - 1`, width `d_model / 2`.
    pub fn default_for(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, config.n_layers - 1, (config.d_model / 2).max(1), seed)
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layer < 1 || self.layer >= config.n_layers {
            return Err(config_err(format!(
                "intervention layer {} outside 1..={}",
                self.layer,
                config.n_layers - 1
            )));
        }
        if self.width < 1 || self.width > config.d_model {
            return Err(config_err(format!(
                "subspace width {} outside 1..={}",
                self.width, config.d_model
            )));
        }
        if self.rotation.shape() != [config.d_model, config.d_model] {
            return Err(Error::Shape {
                op: "intervention site",
                lhs: self.rotation.shape().to_vec(),
                rhs: alloc::vec![config.d_model, config.d_model],
            });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.rotation.rows()
    }

    /// Project the rotation back onto the orthogonal group.
    pub fn retract(&mut self) {
        self.rotation = qr_orthogonal(&self.rotation);
    }

    pub fn orthogonality_error(&self) -> f64 {
        orthogonality_error(&self.rotation)
    }

    /// Place the rotation on `graph`.
    pub fn bind<'p>(&'p self, graph: &mut Graph<'p>, trainable: bool) -> BoundSite {
        BoundSite {
            rotation: graph.borrowed(&self.rotation, trainable),
            layer: self.layer,
            width: self.width,
        }
    }
}

/// Plain splice `ρᵀ [ (ρ h_src)[..k] ; (ρ h_base)[k..] ]`.
pub fn splice(h_base: &[f64], h_src: &[f64], site: &InterventionSite) -> Result<Vec<f64>> {
    let d = site.dim();
    if h_base.len() != d || h_src.len() != d {
        return Err(invalid(format!(
            "splice: vectors of length {} and {}, site dimension {d}",
            h_base.len(),
            h_src.len()
        )));
    }
    let mut g = Graph::new();
    let s = site.bind(&mut g, false);
    let b = g.constant(Tensor::row(h_base.to_vec()));
    let src = g.constant(Tensor::row(h_src.to_vec()));
    let out = s.splice(&mut g, b, src, MediationMode::None)?;
    Ok(g.value(out).data().to_vec())
}

/// Rotation of an [`InterventionSite`] as a graph node.
#[derive(Clone, Copy, Debug)]
pub struct BoundSite {
    pub rotation: Var,
    pub layer: usize,
    pub width: usize,
}

impl BoundSite {
    fn rotate(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let rt = g.transpose(self.rotation)?;
        g.matmul(h, rt)
    }

    fn zero_cols(g: &mut Graph<'_>, n: usize) -> Var {
        g.constant(Tensor::zeros(&[1, n]))
    }

    /// Recombine `z` (first `k` rotated coordinates) and `rest` into the
    /// original basis, gating gradients according to `mode`.
    fn recombine(&self, g: &mut Graph<'_>, z: Var, rest: Var, mode: MediationMode) -> Result<Var> {
        let d = g.value(self.rotation).rows();
        let k = self.width;
        if mode == MediationMode::None {
            let cat = g.concat(&[z, rest], 1)?;
            return g.matmul(cat, self.rotation);
        }
        let zr = Self::zero_cols(g, d - k);
        let zz = Self::zero_cols(g, k);
        let z_full = g.concat(&[z, zr], 1)?;
        let rest_full = g.concat(&[zz, rest], 1)?;
        let mut z_part = g.matmul(z_full, self.rotation)?;
        let mut rest_part = g.matmul(rest_full, self.rotation)?;
        match mode {
            MediationMode::Through => rest_part = g.stop_gradient(rest_part),
            MediationMode::Around => z_part = g.stop_gradient(z_part),
            MediationMode::None => unreachable!(),
        }
        g.add(z_part, rest_part)
    }

    /// Differentiable splice of two `1 x d` rows.
    pub fn splice(&self, g: &mut Graph<'_>, h_base: Var, h_src: Var, mode: MediationMode) -> Result<Var> {
        let (tb, ts) = (g.value(h_base), g.value(h_src));
        let d = g.value(self.rotation).rows();
        if tb.shape() != [1, d] || ts.shape() != [1, d] {
            return Err(Error::Shape {
                op: "splice",
                lhs: tb.shape().to_vec(),
                rhs: ts.shape().to_vec(),
            });
        }
        let rb = self.rotate(g, h_base)?;
        let rs = self.rotate(g, h_src)?;
        let z = g.slice(rs, 1, 0, self.width)?;
        let rest = g.slice(rb, 1, self.width, d)?;
        self.recombine(g, z, rest, mode)
    }

    /// Gate a `1 x d` row without replacing anything.
    pub fn gate(&self, g: &mut Graph<'_>, h: Var, mode: MediationMode) -> Result<Var> {
        if mode == MediationMode::None {
            return Ok(h);
        }
        let d = g.value(self.rotation).rows();
        let r = self.rotate(g, h)?;
        let z = g.slice(r, 1, 0, self.width)?;
        let rest = g.slice(r, 1, self.width, d)?;
        self.recombine(g, z, rest, mode)
    }

    /// Replace the pooled row of `resid` by `row`. In `Through` mode the
    /// other rows are cut from the gradient as well, so the only route from
    /// the input to the output runs through `Z`.
    pub fn install<'p>(
        &self,
        g: &mut Graph<'p>,
        m: &Bound<'p>,
        resid: Var,
        row: Var,
        mode: MediationMode,
    ) -> Result<Var> {
        match m.prefix_rows(g, resid)? {
            None => Ok(row),
            Some(prefix) => {
                let prefix = if mode == MediationMode::Through {
                    g.stop_gradient(prefix)
                } else {
                    prefix
                };
                g.concat(&[prefix, row], 0)
            }
        }
    }
}

fn check_layer(model: &DualEncoder, layer: usize) -> Result<()> {
    let n = model.config().n_layers;
    if layer < 1 || layer >= n {
        return Err(config_err(format!("intervention layer {layer} outside 1..={}", n - 1)));
    }
    Ok(())
}

/// Residual stream after the first `site.layer` blocks.
pub fn run_to_site<'p>(g: &mut Graph<'p>, m: &Bound<'p>, site: &BoundSite, resid0: Var) -> Result<Var> {
    check_layer(m.model(), site.layer)?;
    m.run_blocks(g, resid0, 0..site.layer)
}

/// Finish a forward pass from the site and return the unnormalized text
/// projection.
pub fn finish_from_site<'p>(g: &mut Graph<'p>, m: &Bound<'p>, site: &BoundSite, resid: Var) -> Result<Var> {
    let n = m.model().config().n_layers;
    let out = m.run_blocks(g, resid, site.layer..n)?;
    m.project_text(g, out)
}

/// Text projection of `base` with `Z` at the site taken from `source`.
/// Both arguments are residuals at the site.
pub fn spliced_text<'p>(
    g: &mut Graph<'p>,
    m: &Bound<'p>,
    site: &BoundSite,
    base_resid: Var,
    source_resid: Var,
    mode: MediationMode,
) -> Result<Var> {
    let hb = m.pooled(g, base_resid)?;
    let hs = m.pooled(g, source_resid)?;
    let row = site.splice(g, hb, hs, mode)?;
    let resid = site.install(g, m, base_resid, row, mode)?;
    finish_from_site(g, m, site, resid)
}

/// Text projection of a plain forward with gates at the site.
pub fn gated_text<'p>(
    g: &mut Graph<'p>,
    m: &Bound<'p>,
    site: &BoundSite,
    resid0: Var,
    mode: MediationMode,
) -> Result<Var> {
    let resid = run_to_site(g, m, site, resid0)?;
    if mode == MediationMode::None {
        return finish_from_site(g, m, site, resid);
    }
    let h = m.pooled(g, resid)?;
    let row = site.gate(g, h, mode)?;
    let resid = site.install(g, m, resid, row, mode)?;
    finish_from_site(g, m, site, resid)
}

/// DII on the graph: score of `image` against `base` with the site's `Z`
/// fixed to its value on `source`.
pub fn dii_score_graph<'p>(
    g: &mut Graph<'p>,
    m: &Bound<'p>,
    site: &BoundSite,
    image: Var,
    base: &[u32],
    source: &[u32],
    mode: MediationMode,
) -> Result<Var> {
    let b0 = m.embed_text(g, base)?;
    let s0 = m.embed_text(g, source)?;
    let b = run_to_site(g, m, site, b0)?;
    let s = run_to_site(g, m, site, s0)?;
    let txt = spliced_text(g, m, site, b, s, mode)?;
    m.score(g, image, txt)
}

/// Distributed interchange intervention score.
pub fn dii_score(
    model: &DualEncoder,
    image: &[f64],
    base: &[u32],
    source: &[u32],
    site: &InterventionSite,
    mode: MediationMode,
) -> Result<f64> {
    site.validate(model.config())?;
    let mut g = Graph::new();
    let m = model.bind(&mut g, TrainMode::Frozen);
    let s = site.bind(&mut g, false);
    let img = m.project_image(&mut g, image)?;
    let out = dii_score_graph(&mut g, &m, &s, img, base, source, mode)?;
    Ok(g.value(out).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_vec, seeded};
    use crate::testutil::{random_tokens, tiny_config};

    fn site(k: usize, seed: u64) -> InterventionSite {
        InterventionSite::new(&tiny_config(), 1, k, seed).unwrap()
    }

    #[test]
    fn rotation_dim_one_is_identity() {
        assert_eq!(init_rotation(1, 4).data(), &[1.0]);
    }

    #[test]
    fn rotation_is_orthogonal_and_seeded() {
        for seed in 0..5 {
            let r = init_rotation(16, seed);
            assert!(orthogonality_error(&r) <= 1e-10);
        }
        assert_ne!(init_rotation(8, 1), init_rotation(8, 2));
    }

    #[test]
    fn site_validation() {
        let c = tiny_config();
        assert!(InterventionSite::new(&c, 0, 2, 0).is_err());
        assert!(InterventionSite::new(&c, 3, 2, 0).is_err());
        assert!(InterventionSite::new(&c, 2, 0, 0).is_err());
        assert!(InterventionSite::new(&c, 2, 9, 0).is_err());
        let d = InterventionSite::default_for(&c, 0).unwrap();
        assert_eq!((d.layer, d.width), (2, 4));
    }

    #[test]
    fn splice_identities() {
        let mut rng = seeded(1);
        for k in 1..=8 {
            let s = site(k, k as u64);
            let hb = gaussian_vec(&mut rng, 8, 1.0);
            let hs = gaussian_vec(&mut rng, 8, 1.0);
            let same = splice(&hb, &hb, &s).unwrap();
            for (a, b) in same.iter().zip(&hb) {
                assert!((a - b).abs() <= 1e-12);
            }
            if k == 8 {
                let full = splice(&hb, &hs, &s).unwrap();
                for (a, b) in full.iter().zip(&hs) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn splice_matches_projector_form() {
        // h_base + ρᵀ Π_k ρ (h_src - h_base), computed independently
        let mut rng = seeded(2);
        for k in 0..=8 {
            let rot = init_rotation(8, 10 + k as u64);
            let hb = gaussian_vec(&mut rng, 8, 1.0);
            let hs = gaussian_vec(&mut rng, 8, 1.0);
            let diff: Vec<f64> = hs.iter().zip(&hb).map(|(a, b)| a - b).collect();
            let mut proj = alloc::vec![0.0; 8];
            for i in 0..k {
                let c: f64 = (0..8).map(|j| rot.at(i, j) * diff[j]).sum();
                for j in 0..8 {
                    proj[j] += rot.at(i, j) * c;
                }
            }
            let closed: Vec<f64> = hb.iter().zip(&proj).map(|(a, b)| a + b).collect();
            if k == 0 {
                assert_eq!(closed, hb);
                continue;
            }
            let s = InterventionSite {
                layer: 1,
                width: k,
                rotation: rot,
            };
            let got = splice(&hb, &hs, &s).unwrap();
            for (a, b) in got.iter().zip(&closed) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn splice_rejects_wrong_length() {
        assert!(splice(&[0.0; 7], &[0.0; 8], &site(2, 0)).is_err());
    }

    #[test]
    fn self_intervention_is_plain_score() {
        let model = DualEncoder::new(tiny_config(), 5).unwrap();
        let mut rng = seeded(3);
        for trial in 0..10 {
            let t = random_tokens(&mut rng, 5, 20);
            let f = gaussian_vec(&mut rng, 6, 1.0);
            let s = InterventionSite::new(&tiny_config(), 1 + trial % 2, 1 + trial % 8, trial as u64).unwrap();
            for mode in MediationMode::ALL {
                let d = dii_score(&model, &f, &t, &t, &s, mode).unwrap();
                assert!((d - model.score(&f, &t).unwrap()).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn full_width_transplants_source_and_ignores_rotation() {
        let model = DualEncoder::new(tiny_config(), 6).unwrap();
        let mut rng = seeded(4);
        let base = random_tokens(&mut rng, 6, 20);
        let src = random_tokens(&mut rng, 4, 20);
        let f = gaussian_vec(&mut rng, 6, 1.0);
        let trace = model.encode_text_traced(&src).unwrap();
        let expected = model
            .score_with_pooled_override(&f, &base, 2, &trace.pooled_residuals[2])
            .unwrap();
        for seed in 0..5 {
            let s = InterventionSite::new(&tiny_config(), 2, 8, seed).unwrap();
            let d = dii_score(&model, &f, &base, &src, &s, MediationMode::None).unwrap();
            assert!((d - expected).abs() <= 1e-9);
        }
    }

    #[test]
    fn mediated_gradients_split_additively() {
        let model = DualEncoder::new(tiny_config(), 7).unwrap();
        let mut rng = seeded(5);
        let base = random_tokens(&mut rng, 5, 20);
        let src = random_tokens(&mut rng, 3, 20);
        let f = gaussian_vec(&mut rng, 6, 1.0);
        let s = site(3, 9);
        let grad = |mode: MediationMode| -> Vec<f64> {
            let mut g = Graph::new();
            let m = model.bind(&mut g, TrainMode::Frozen);
            let bs = s.bind(&mut g, false);
            let img = m.project_image(&mut g, &f).unwrap();
            let eb = m.token_embeddings(&mut g, &base).unwrap();
            let es = m.token_embeddings(&mut g, &src).unwrap();
            let xb = g.variable(g.value(eb).clone());
            let xs = g.variable(g.value(es).clone());
            let rb = m.add_positions(&mut g, xb).unwrap();
            let rs = m.add_positions(&mut g, xs).unwrap();
            let rb = run_to_site(&mut g, &m, &bs, rb).unwrap();
            let rs = run_to_site(&mut g, &m, &bs, rs).unwrap();
            let txt = spliced_text(&mut g, &m, &bs, rb, rs, mode).unwrap();
            let sc = m.score(&mut g, img, txt).unwrap();
            let gr = g.backward(sc).unwrap();
            let mut out = gr.wrt(&g, xb).into_data();
            out.extend(gr.wrt(&g, xs).into_data());
            out
        };
        let none = grad(MediationMode::None);
        let through = grad(MediationMode::Through);
        let around = grad(MediationMode::Around);
        assert!(none.iter().any(|v| v.abs() > 1e-6));
        for i in 0..none.len() {
            assert!((through[i] + around[i] - none[i]).abs() <= 1e-9);
        }
    }
}
