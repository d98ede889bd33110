//! Integrated-gradients token attributions in embedding space, optionally
//! restricted to paths through (or around) the intervention subspace, and
//! their correlation with word-level imageability/concreteness ratings.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::Lexicon;
use crate::error::{config_err, data_err, invalid, Result};
use crate::eval::{correlate, Correlation};
use crate::intervention::{gated_text, InterventionSite, MediationMode};
use crate::model::{DualEncoder, Tokenizer, TrainMode, PAD};
use crate::objectives::{BatchRunner, Sequential};
use crate::tensor::Tensor;

pub const DEFAULT_IG_STEPS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub tokens: Vec<String>,
    pub values: Vec<f64>,
    pub mediation: MediationMode,
    pub score: f64,
    pub baseline_score: f64,
    pub ig_steps: usize,
    /// `|sum(values) - (score - baseline_score)|`.
    pub completeness_residual: f64,
}

/// Midpoint-rule integrated gradients of a scalar function given its
/// gradient oracle. Returns one attribution per coordinate of `x`.
pub fn integrated_gradients<G>(x: &[f64], baseline: &[f64], steps: usize, mut grad: G) -> Result<Vec<f64>>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    check_path(x, baseline, steps)?;
    let mut acc = vec![0.0; x.len()];
    let mut point = vec![0.0; x.len()];
    for j in 0..steps {
        let t = (j as f64 + 0.5) / steps as f64;
        for ((p, a), b) in point.iter_mut().zip(x).zip(baseline) {
            *p = b + t * (a - b);
        }
        let g = grad(&point)?;
        if g.len() != x.len() {
            return Err(invalid(format!("gradient has {} entries, expected {}", g.len(), x.len())));
        }
        for (s, v) in acc.iter_mut().zip(&g) {
            *s += v;
        }
    }
    Ok(acc
        .iter()
        .zip(x.iter().zip(baseline))
        .map(|(s, (a, b))| (a - b) * s / steps as f64)
        .collect())
}

fn check_path(x: &[f64], baseline: &[f64], steps: usize) -> Result<()> {
    if steps < 1 {
        return Err(config_err("integrated gradients needs at least one step"));
    }
    if x.len() != baseline.len() {
        return Err(invalid(format!(
            "input has {} coordinates but baseline has {}",
            x.len(),
            baseline.len()
        )));
    }
    Ok(())
}

/// Token-embedding rows of `tokens` and of the baseline: the same sequence
/// with every content token replaced by `PAD` (BOS and EOS kept).
pub fn embedding_path(model: &DualEncoder, tokens: &[u32]) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let m = model.bind(&mut g, TrainMode::Frozen);
    let x = m.token_embeddings(&mut g, tokens)?;
    let mut base_ids = tokens.to_vec();
    let n = base_ids.len();
    if n > 2 {
        base_ids[1..n - 1].iter_mut().for_each(|t| *t = PAD);
    }
    let b = m.token_embeddings(&mut g, &base_ids)?;
    Ok((g.value(x).clone(), g.value(b).clone()))
}

/// Score and its gradient with respect to the token-embedding rows, with
/// the mediation gates installed at the site.
pub fn score_and_embedding_grad(
    model: &DualEncoder,
    image: &[f64],
    embeddings: &Tensor,
    site: Option<&InterventionSite>,
    mediation: MediationMode,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let m = model.bind(&mut g, TrainMode::Frozen);
    let img = m.project_image(&mut g, image)?;
    let x = g.variable(embeddings.clone());
    let resid0 = m.add_positions(&mut g, x)?;
    let txt = match (mediation, site) {
        (MediationMode::None, _) => {
            let n = model.config().n_layers;
            let out = m.run_blocks(&mut g, resid0, 0..n)?;
            m.project_text(&mut g, out)?
        }
        (_, Some(site)) => {
            site.validate(model.config())?;
            let s = site.bind(&mut g, false);
            gated_text(&mut g, &m, &s, resid0, mediation)?
        }
        (_, None) => {
            return Err(config_err(format!(
                "mediation {} needs an intervention site",
                mediation.as_str()
            )))
        }
    };
    let score = m.score(&mut g, img, txt)?;
    let grads = g.backward(score)?;
    Ok((g.value(score).item(), grads.wrt(&g, x).into_data()))
}

/// Attributions for one `(image, text)` pair. `tokens` is the active
/// sequence `BOS .. EOS`; values are reported for the content tokens only
/// (BOS and EOS coincide with the baseline and receive exactly zero).
pub fn attribute<R: BatchRunner>(
    model: &DualEncoder,
    tokenizer: &Tokenizer,
    image: &[f64],
    tokens: &[u32],
    site: Option<&InterventionSite>,
    mediation: MediationMode,
    steps: usize,
    runner: &R,
) -> Result<AttributionReport> {
    if tokens.len() < 3 {
        return Err(invalid("attribution needs at least one content token"));
    }
    if steps < 1 {
        return Err(config_err("integrated gradients needs at least one step"));
    }
    let (x, base) = embedding_path(model, tokens)?;
    let shape = x.shape().to_vec();
    let d = model.config().d_model;
    let grads = runner.map(steps, |j| {
        let t = (j as f64 + 0.5) / steps as f64;
        let data = x.data().iter().zip(base.data()).map(|(a, b)| b + t * (a - b)).collect();
        let point = Tensor::new(shape.clone(), data)?;
        Ok(score_and_embedding_grad(model, image, &point, site, mediation)?.1)
    })?;
    let mut next = grads.into_iter();
    let per_coord = integrated_gradients(x.data(), base.data(), steps, |_| {
        next.next().ok_or_else(|| invalid("gradient oracle exhausted"))
    })?;
    let (score, _) = score_and_embedding_grad(model, image, &x, None, MediationMode::None)?;
    let (baseline_score, _) = score_and_embedding_grad(model, image, &base, None, MediationMode::None)?;
    let n = tokens.len();
    let values: Vec<f64> = (1..n - 1).map(|i| per_coord[i * d..(i + 1) * d].iter().sum()).collect();
    let total_all: f64 = per_coord.iter().sum();
    Ok(AttributionReport {
        tokens: tokens[1..n - 1].iter().map(|&t| String::from(tokenizer.token(t))).collect(),
        values,
        mediation,
        score,
        baseline_score,
        ig_steps: steps,
        completeness_residual: libm::fabs(total_all - (score - baseline_score)),
    })
}

/// [`attribute`] on the calling thread.
pub fn attribute_sequential(
    model: &DualEncoder,
    tokenizer: &Tokenizer,
    image: &[f64],
    tokens: &[u32],
    site: Option<&InterventionSite>,
    mediation: MediationMode,
    steps: usize,
) -> Result<AttributionReport> {
    attribute(model, tokenizer, image, tokens, site, mediation, steps, &Sequential)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconCorrelation {
    pub imageability: Option<Correlation>,
    pub concreteness: Option<Correlation>,
    /// Token occurrences found in the lexicon.
    pub n_tokens: usize,
}

/// Pooled correlation between token attributions and lexicon ratings.
/// Tokens missing from the lexicon are skipped; repeated tokens count once
/// per occurrence. A dimension with fewer than 3 rated tokens is `None`.
pub fn lexicon_correlation(reports: &[AttributionReport], lexicon: &Lexicon) -> Result<LexiconCorrelation> {
    let mut n_tokens = 0;
    let (mut im_x, mut im_y, mut co_x, mut co_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for r in reports {
        for (tok, &v) in r.tokens.iter().zip(&r.values) {
            let Some(entry) = lexicon.get(tok) else { continue };
            n_tokens += 1;
            if let Some(im) = entry.imageability {
                im_x.push(v);
                im_y.push(im);
            }
            if let Some(co) = entry.concreteness {
                co_x.push(v);
                co_y.push(co);
            }
        }
    }
    if n_tokens < 3 {
        return Err(data_err(format!(
            "only {n_tokens} attributed tokens found in the lexicon, need at least 3"
        )));
    }
    let dim = |x: &[f64], y: &[f64]| if x.len() >= 3 { correlate(x, y).map(Some) } else { Ok(None) };
    Ok(LexiconCorrelation {
        imageability: dim(&im_x, &im_y)?,
        concreteness: dim(&co_x, &co_y)?,
        n_tokens,
    })
}

/// Signed intensities in `[-1, 1]`: each value over the largest magnitude.
/// All zero when every value is zero.
pub fn intensities(report: &AttributionReport) -> Vec<f64> {
    let max = report.values.iter().fold(0.0f64, |m, v| m.max(libm::fabs(*v)));
    if max == 0.0 || !max.is_finite() {
        return vec![0.0; report.values.len()];
    }
    report.values.iter().map(|v| v / max).collect()
}

// green for positive, magenta for negative, blended toward white
fn rgb(w: f64) -> (u8, u8, u8) {
    let a = libm::fabs(w).min(1.0);
    let (r, g, b) = if w >= 0.0 { (0.0, 170.0, 0.0) } else { (200.0, 0.0, 200.0) };
    let mix = |c: f64| libm::round(255.0 + a * (c - 255.0)) as u8;
    (mix(r), mix(g), mix(b))
}

/// Terminal rendering with 24-bit background colours. Zero-attribution
/// tokens are printed without any escape sequence.
pub fn render_ansi(report: &AttributionReport) -> String {
    let mut out = String::new();
    for (i, (tok, w)) in report.tokens.iter().zip(intensities(report)).enumerate() {
        if i > 0 {
            out.push(' ');
        }
        if w == 0.0 {
            out.push_str(tok);
        } else {
            let (r, g, b) = rgb(w);
            let _ = write!(out, "\x1b[48;2;{r};{g};{b}m\x1b[30m{tok}\x1b[0m");
        }
    }
    out
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

pub fn render_html(report: &AttributionReport) -> String {
    let mut out = String::from("<p class=\"attribution\">");
    for (i, ((tok, w), v)) in report
        .tokens
        .iter()
        .zip(intensities(report))
        .zip(&report.values)
        .enumerate()
    {
        if i > 0 {
            out.push(' ');
        }
        let (r, g, b) = rgb(w);
        let _ = write!(
            out,
            "<span style=\"background-color:#{r:02x}{g:02x}{b:02x}\" title=\"{v:.6}\">{}</span>",
            escape_html(tok)
        );
    }
    out.push_str("</p>");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LexiconEntry;
    use crate::model::{BOS, EOS};
    use crate::rng::{gaussian_vec, seeded};
    use crate::testutil::{random_tokens, tiny_config};

    fn vocab() -> Tokenizer {
        Tokenizer::from_vocabulary((0..16).map(|i| format!("w{i}")).collect())
    }

    #[test]
    fn linear_function_is_exact_for_any_step_count() {
        let w = [0.5, -2.0, 3.0, 0.25];
        let x = [1.0, 2.0, -1.0, 4.0];
        let b = [0.3, -0.1, 0.0, 1.0];
        for m in [1, 2, 7, 64] {
            let a = integrated_gradients(&x, &b, m, |_| Ok(w.to_vec())).unwrap();
            for i in 0..4 {
                assert_eq!(a[i], w[i] * (x[i] - b[i]));
            }
        }
    }

    #[test]
    fn quadratic_matches_closed_form() {
        // f = sum x^2: grad is linear along the path, so the midpoint rule is exact.
        let x = [1.0, -2.0, 0.5];
        let b = [0.0, 1.0, 0.5];
        let a = integrated_gradients(&x, &b, 3, |p| Ok(p.iter().map(|v| 2.0 * v).collect())).unwrap();
        for i in 0..3 {
            assert!((a[i] - (x[i] * x[i] - b[i] * b[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(integrated_gradients(&[1.0], &[0.0], 0, |_| Ok(vec![1.0])).is_err());
    }

    #[test]
    fn zero_path_gives_zero_attributions() {
        let model = DualEncoder::new(tiny_config(), 3).unwrap();
        let image = gaussian_vec(&mut seeded(1), 6, 1.0);
        // a sequence of PAD content tokens is its own baseline
        let tokens = [BOS, PAD, PAD, EOS];
        let r = attribute_sequential(&model, &vocab(), &image, &tokens, None, MediationMode::None, 8).unwrap();
        assert!(r.values.iter().all(|v| *v == 0.0));
        assert_eq!(r.score, r.baseline_score);
    }

    #[test]
    fn completeness_on_random_models() {
        for seed in 0..5 {
            let model = DualEncoder::new(tiny_config(), seed).unwrap();
            let mut rng = seeded(50 + seed);
            let image = gaussian_vec(&mut rng, 6, 1.0);
            let tokens = random_tokens(&mut rng, 5, 20);
            let r = attribute_sequential(&model, &vocab(), &image, &tokens, None, MediationMode::None, 256).unwrap();
            let delta = r.score - r.baseline_score;
            let sum: f64 = r.values.iter().sum();
            assert!((sum - delta).abs() <= 0.005 * delta.abs() + 1e-6, "{sum} vs {delta}");
            assert_eq!(r.values.len(), 5);
        }
    }

    #[test]
    fn mediation_split_is_additive() {
        let model = DualEncoder::new(tiny_config(), 7).unwrap();
        let site = InterventionSite::new(&tiny_config(), 1, 3, 2).unwrap();
        let mut rng = seeded(8);
        let image = gaussian_vec(&mut rng, 6, 1.0);
        let tokens = random_tokens(&mut rng, 6, 20);
        let run = |mode| attribute_sequential(&model, &vocab(), &image, &tokens, Some(&site), mode, 16).unwrap();
        let (none, through, around) = (run(MediationMode::None), run(MediationMode::Through), run(MediationMode::Around));
        for i in 0..none.values.len() {
            assert!((through.values[i] + around.values[i] - none.values[i]).abs() <= 1e-6);
        }
        assert!(through.values.iter().any(|v| v.abs() > 1e-9));
    }

    #[test]
    fn mediation_without_site_rejected() {
        let model = DualEncoder::new(tiny_config(), 7).unwrap();
        let tokens = [BOS, 5, EOS];
        let r = attribute_sequential(&model, &vocab(), &[1.0; 6], &tokens, None, MediationMode::Through, 4);
        assert!(r.is_err());
    }

    fn report(tokens: &[&str], values: &[f64]) -> AttributionReport {
        AttributionReport {
            tokens: tokens.iter().map(|s| String::from(*s)).collect(),
            values: values.to_vec(),
            mediation: MediationMode::None,
            score: 0.0,
            baseline_score: 0.0,
            ig_steps: 1,
            completeness_residual: 0.0,
        }
    }

    fn lexicon(pairs: &[(&str, f64)]) -> Lexicon {
        pairs
            .iter()
            .map(|(t, v)| {
                (
                    String::from(*t),
                    LexiconEntry {
                        imageability: Some(*v),
                        concreteness: None,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn lexicon_correlation_signs() {
        let lex = lexicon(&[("a", 1.0), ("b", 3.0), ("c", -2.0), ("d", 0.5)]);
        let up = report(&["a", "b", "zz", "c", "d"], &[1.0, 3.0, 9.0, -2.0, 0.5]);
        let c = lexicon_correlation(&[up], &lex).unwrap();
        assert!((c.imageability.unwrap().pearson - 1.0).abs() < 1e-12);
        assert_eq!(c.n_tokens, 4);
        assert!(c.concreteness.is_none());
        let down = report(&["a", "b", "c", "d"], &[-1.0, -3.0, 2.0, -0.5]);
        let c = lexicon_correlation(&[down], &lex).unwrap();
        assert!((c.imageability.unwrap().pearson + 1.0).abs() < 1e-12);
    }

    #[test]
    fn lexicon_correlation_pools_duplicates() {
        let lex = lexicon(&[("a", 1.0), ("b", 2.0)]);
        let r1 = report(&["a", "b"], &[0.1, 0.4]);
        let r2 = report(&["a"], &[0.2]);
        let c = lexicon_correlation(&[r1, r2], &lex).unwrap();
        assert_eq!(c.n_tokens, 3);
        // x = (0.1, 0.4, 0.2), y = (1, 2, 1)
        let (mx, my) = (0.7 / 3.0, 4.0 / 3.0);
        let xs = [0.1, 0.4, 0.2];
        let ys = [1.0, 2.0, 1.0];
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
        let want = sxy / libm::sqrt(sxx * syy);
        assert!((c.imageability.unwrap().pearson - want).abs() < 1e-12);
    }

    #[test]
    fn too_few_lexicon_tokens_rejected() {
        let lex = lexicon(&[("a", 1.0), ("b", 2.0)]);
        assert!(lexicon_correlation(&[report(&["a", "b", "c"], &[1.0, 2.0, 3.0])], &lex).is_err());
    }

    #[test]
    fn rendering() {
        let zeros = report(&["x", "y"], &[0.0, 0.0]);
        assert_eq!(render_ansi(&zeros), "x y");
        assert_eq!(intensities(&zeros), vec![0.0, 0.0]);
        let html = render_html(&zeros);
        assert_eq!(html.matches("#ffffff").count(), 2);

        let one = report(&["<a>", "b", "c"], &[0.0, 2.5, 0.0]);
        assert_eq!(intensities(&one), vec![0.0, 1.0, 0.0]);
        let html = render_html(&one);
        assert!(html.contains("&lt;a&gt;"));
        assert!(html.contains("#00aa00"));
        let neg = report(&["p", "q"], &[-1.0, 0.5]);
        assert_eq!(intensities(&neg), vec![-1.0, 0.5]);
        assert!(render_ansi(&neg).contains("48;2;200;0;200"));
    }
}
