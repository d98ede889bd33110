//! Finite-difference gradient checking shared by the property tests and the
//! acceptance suite.
#![allow(dead_code)]

use descap_core::model::{Encoded, ParamId, TrainMode, BOS, EOS};
use descap_core::objectives::{pretrain_loss_graph, triplet_loss_graph, Objective, PreparedTriplet};
use descap_core::rng::{gaussian_tensor, seeded, Rng};
use descap_core::{DualEncoder, Graph, InterventionSite, LoraConfig, ModelConfig, Tensor, Var};
use rand::Rng as _;

pub const RTOL: f64 = 1e-4;
/// Absolute floor for coordinates whose true derivative is ~0, where a
/// purely relative test would compare rounding noise.
pub const ATOL: f64 = 1e-8;
const H: f64 = 1e-5;

pub fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= RTOL * analytic.abs().max(numeric.abs()) + ATOL
}

/// Central differences of `f` at `x` along each coordinate in `coords`.
pub fn central_diff(x: &Tensor, coords: &[usize], f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&j| {
            let mut p = x.clone();
            p.data_mut()[j] += H;
            let mut m = x.clone();
            m.data_mut()[j] -= H;
            (f(&p) - f(&m)) / (2.0 * H)
        })
        .collect()
}

/// One elementwise-or-structural primitive under test: random inputs and
/// a builder applying the op.
pub struct PrimCase {
    pub inputs: Vec<Tensor>,
    pub build: Box<dyn Fn(&mut Graph<'_>, &[Var]) -> Var>,
    /// Function the finite differences see instead of `build`, for ops
    /// whose gradient deliberately differs from the forward derivative.
    pub reference: Option<Box<dyn Fn(&mut Graph<'_>, &[Var]) -> Var>>,
}

fn rnd(rng: &mut Rng, shape: &[usize]) -> Tensor {
    gaussian_tensor(rng, shape, 1.0)
}

fn dims(rng: &mut Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5))
}

pub const PRIMITIVES: &[&str] = &[
    "add", "sub", "mul", "scale", "add_scalar", "matmul", "transpose", "softmax_rows", "log", "exp", "gelu",
    "sum_axis", "mean_axis", "sum", "mean", "concat", "slice", "gather", "layer_norm", "cosine", "normalize",
    "cross_entropy", "stack", "reshape", "stop_gradient",
];

pub fn primitive_case(name: &str, seed: u64) -> PrimCase {
    let mut rng = seeded(seed);
    let (r, c) = dims(&mut rng);
    let case = |inputs: Vec<Tensor>, build: Box<dyn Fn(&mut Graph<'_>, &[Var]) -> Var>| PrimCase { inputs, build, reference: None };
    match name {
        "add" => case(vec![rnd(&mut rng, &[r, c]), rnd(&mut rng, &[r, c])], Box::new(|g, v| g.add(v[0], v[1]).unwrap())),
        "sub" => case(vec![rnd(&mut rng, &[r, c]), rnd(&mut rng, &[r, c])], Box::new(|g, v| g.sub(v[0], v[1]).unwrap())),
        "mul" => case(vec![rnd(&mut rng, &[r, c]), rnd(&mut rng, &[r, c])], Box::new(|g, v| g.mul(v[0], v[1]).unwrap())),
        "scale" => {
            let s: f64 = rng.random_range(-3.0..3.0);
            case(vec![rnd(&mut rng, &[r, c])], Box::new(move |g, v| g.scale(v[0], s)))
        }
        "add_scalar" => {
            let s: f64 = rng.random_range(-3.0..3.0);
            case(vec![rnd(&mut rng, &[r, c])], Box::new(move |g, v| g.add_scalar(v[0], s)))
        }
        "matmul" => {
            let k = rng.random_range(1..5);
            case(vec![rnd(&mut rng, &[r, k]), rnd(&mut rng, &[k, c])], Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()))
        }
        "transpose" => case(vec![rnd(&mut rng, &[r, c])], Box::new(|g, v| g.transpose(v[0]).unwrap())),
        "softmax_rows" => case(vec![rnd(&mut rng, &[r, c])], Box::new(|g, v| g.softmax_rows(v[0]).unwrap())),
        "log" => {
            let data = (0..r * c).map(|_| rng.random_range(0.2..3.0)).collect();
            case(vec![Tensor::new(vec![r, c], data).unwrap()], Box::new(|g, v| g.log(v[0])))
        }
        "exp" => case(vec![rnd(&mut rng, &[r, c])], Box::new(|g, v| g.exp(v[0]))),
        "gelu" => case(vec![gaussian_tensor(&mut rng, &[r, c], 2.0)], Box::new(|g, v| g.gelu(v[0]))),
        "sum_axis" => {
            let axis = rng.random_range(0..2);
            case(vec![rnd(&mut rng, &[r, c])], Box::new(move |g, v| g.sum_axis(v[0], axis).unwrap()))
        }
        "mean_axis" => {
            let axis = rng.random_range(0..2);
            case(vec![rnd(&mut rng, &[r, c])], Box::new(move |g, v| g.mean_axis(v[0], axis).unwrap()))
        }
        "sum" => case(vec![rnd(&mut rng, &[r, c])], Box::new(|g, v| g.sum(v[0]))),
        "mean" => case(vec![rnd(&mut rng, &[r, c])], Box::new(|g, v| g.mean(v[0]))),
        "concat" => {
            let axis = rng.random_range(0..2);
            let other = if axis == 0 { [rng.random_range(1..4), c] } else { [r, rng.random_range(1..4)] };
            case(
                vec![rnd(&mut rng, &[r, c]), rnd(&mut rng, &other)],
                Box::new(move |g, v| g.concat(&[v[0], v[1]], axis).unwrap()),
            )
        }
        "slice" => {
            let axis = rng.random_range(0..2);
            let n = if axis == 0 { r } else { c };
            let start = rng.random_range(0..n);
            let end = rng.random_range(start + 1..=n);
            case(vec![rnd(&mut rng, &[r, c])], Box::new(move |g, v| g.slice(v[0], axis, start, end).unwrap()))
        }
        "gather" => {
            let k = rng.random_range(1..6);
            let ids: Vec<usize> = (0..k).map(|_| rng.random_range(0..r)).collect();
            case(vec![rnd(&mut rng, &[r, c])], Box::new(move |g, v| g.gather(v[0], &ids).unwrap()))
        }
        "layer_norm" => {
            let c = c.max(2);
            case(
                vec![rnd(&mut rng, &[r, c]), rnd(&mut rng, &[1, c]), rnd(&mut rng, &[1, c])],
                Box::new(|g, v| g.layer_norm(v[0], v[1], v[2]).unwrap()),
            )
        }
        "cosine" => case(vec![rnd(&mut rng, &[r, c]), rnd(&mut rng, &[r, c])], Box::new(|g, v| g.cosine(v[0], v[1]).unwrap())),
        "normalize" => case(vec![rnd(&mut rng, &[r, c])], Box::new(|g, v| g.normalize(v[0]).unwrap())),
        "cross_entropy" => {
            let n = rng.random_range(2..6);
            let target = rng.random_range(0..n);
            case(vec![gaussian_tensor(&mut rng, &[n], 3.0)], Box::new(move |g, v| g.cross_entropy(v[0], target).unwrap()))
        }
        "stack" => {
            let n = rng.random_range(1..5);
            let inputs = (0..n).map(|_| rnd(&mut rng, &[1])).collect();
            case(inputs, Box::new(|g, v| g.stack(v).unwrap()))
        }
        "reshape" => case(vec![rnd(&mut rng, &[r, c])], Box::new(move |g, v| g.reshape(v[0], vec![c * r]).unwrap())),
        "stop_gradient" => {
            // y = x * sg(x): the gradient is sg(x), i.e. the derivative of
            // x * x0 with x0 frozen at the input value
            let x0 = rnd(&mut rng, &[r, c]);
            let frozen = x0.clone();
            PrimCase {
                inputs: vec![x0],
                build: Box::new(|g, v| {
                    let s = g.stop_gradient(v[0]);
                    g.mul(v[0], s).unwrap()
                }),
                reference: Some(Box::new(move |g, v| {
                    let c = g.constant(frozen.clone());
                    g.mul(v[0], c).unwrap()
                })),
            }
        }
        other => panic!("unknown primitive {other}"),
    }
}

/// Check one primitive instance: `sum(op(inputs) * w)` for a random `w`,
/// differentiated with respect to every input coordinate. Returns the
/// number of coordinates compared, or a description of the first mismatch.
pub fn check_primitive(name: &str, seed: u64) -> Result<usize, String> {
    let case = primitive_case(name, seed);
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = case.inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (case.build)(&mut g, &vars);
        gaussian_tensor(&mut seeded(seed ^ 0x5eed), g.value(out).shape(), 1.0)
    };
    let eval = |inputs: &[Tensor], grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let build = match (&case.reference, grads) {
            (Some(r), false) => r,
            _ => &case.build,
        };
        let out = build(&mut g, &vars);
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w).unwrap();
        let y = g.sum(prod);
        let value = g.value(y).item();
        if !grads {
            return (value, Vec::new());
        }
        let back = g.backward(y).unwrap();
        let gr = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| back.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        (value, gr)
    };
    let (_, analytic) = eval(&case.inputs, true);
    let mut n = 0;
    for (i, x) in case.inputs.iter().enumerate() {
        let coords: Vec<usize> = (0..x.numel()).collect();
        let numeric = central_diff(x, &coords, &|p| {
            let mut inputs = case.inputs.clone();
            inputs[i] = p.clone();
            eval(&inputs, false).0
        });
        for (j, (&a, &f)) in analytic[i].iter().zip(&numeric).enumerate() {
            if !close(a, f) {
                return Err(format!("{name} seed {seed}: input {i} coord {j}: analytic {a} vs numeric {f}"));
            }
            n += 1;
        }
    }
    Ok(n)
}

/// Losses checked end to end.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Behavioral,
    TermA,
    TermB,
    Joint,
    Pretrain,
}

pub const LOSSES: [LossKind; 5] = [LossKind::Behavioral, LossKind::TermA, LossKind::TermB, LossKind::Joint, LossKind::Pretrain];

pub fn tiny_config(rng: &mut Rng) -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        max_seq_len: 8,
        d_model: 8,
        n_layers: rng.random_range(2..4),
        n_heads: 2,
        d_image_in: 5,
        logit_scale: 20.0,
    }
}

pub fn random_encoded(rng: &mut Rng, vocab: u32, max_len: usize) -> Encoded {
    let n = rng.random_range(1..=max_len - 2);
    let mut ids = vec![BOS];
    ids.extend((0..n).map(|_| rng.random_range(4..vocab)));
    ids.push(EOS);
    let eos = ids.len() - 1;
    Encoded { ids, eos }
}

pub fn random_triplet(rng: &mut Rng, cfg: &ModelConfig) -> PreparedTriplet {
    PreparedTriplet {
        image: gaussian_tensor(rng, &[cfg.d_image_in], 1.0).into_data(),
        description: random_encoded(rng, cfg.vocab_size as u32, cfg.max_seq_len),
        caption: random_encoded(rng, cfg.vocab_size as u32, cfg.max_seq_len),
    }
}

/// A random model (optionally with LoRA adapters whose `up` factors are
/// perturbed away from zero so that both factors get gradient), a random
/// site and random data.
pub struct LossCase {
    pub model: DualEncoder,
    pub site: InterventionSite,
    pub triplet: PreparedTriplet,
    pub pairs: Vec<(Vec<f64>, Vec<u32>)>,
    pub alpha: f64,
    pub mode: TrainMode,
}

pub fn loss_case(seed: u64) -> LossCase {
    let mut rng = seeded(seed);
    let cfg = tiny_config(&mut rng);
    let mut model = DualEncoder::new(cfg.clone(), seed).unwrap();
    let mode = if rng.random_bool(0.5) {
        model = model.with_lora(LoraConfig { rank: 2, ..Default::default() }, seed).unwrap();
        let ups: Vec<ParamId> = model.trainable(TrainMode::Adapters);
        for id in ups {
            for v in model.param_mut(id).data_mut() {
                *v += 0.3 * descap_core::rng::gaussian(&mut rng);
            }
        }
        TrainMode::Adapters
    } else {
        TrainMode::Full
    };
    let layer = rng.random_range(1..cfg.n_layers);
    let width = rng.random_range(1..=cfg.d_model);
    let site = InterventionSite::new(&cfg, layer, width, seed).unwrap();
    let triplet = random_triplet(&mut rng, &cfg);
    let pairs = (0..3)
        .map(|_| {
            let t = random_triplet(&mut rng, &cfg);
            (t.image, t.description.active().to_vec())
        })
        .collect();
    LossCase {
        model,
        site,
        triplet,
        pairs,
        alpha: rng.random_range(0.0..1.0),
        mode,
    }
}

fn loss_node<'p>(g: &mut Graph<'p>, case: &'p LossCase, model: &'p DualEncoder, site: &'p InterventionSite, kind: LossKind, mode: TrainMode) -> (Var, Vec<Var>, Option<Var>) {
    let m = model.bind(g, mode);
    let params: Vec<Var> = model.trainable(mode).into_iter().map(|id| m.var(id)).collect();
    if kind == LossKind::Pretrain {
        let images: Vec<&[f64]> = case.pairs.iter().map(|p| p.0.as_slice()).collect();
        let texts: Vec<&[u32]> = case.pairs.iter().map(|p| p.1.as_slice()).collect();
        return (pretrain_loss_graph(g, &m, &images, &texts).unwrap(), params, None);
    }
    let s = site.bind(g, true);
    let rot = s.rotation;
    let (objective, site_arg) = match kind {
        LossKind::Behavioral => (Objective::Behavioral, None),
        LossKind::Joint => (Objective::Joint, Some(&s)),
        _ => (Objective::IitDas, Some(&s)),
    };
    let l = triplet_loss_graph(g, &m, site_arg, &case.triplet, None, objective, case.alpha).unwrap();
    let out = match kind {
        LossKind::TermA => l.term_a.unwrap(),
        LossKind::TermB => l.term_b.unwrap(),
        _ => l.total,
    };
    (out, params, objective.uses_site().then_some(rot))
}

/// Compare analytic and numeric derivatives of `kind` on `coords_per_tensor`
/// random coordinates of randomly chosen trainable tensors and of the
/// rotation. Returns the number of coordinates compared.
pub fn check_loss(kind: LossKind, seed: u64, samples: usize) -> Result<usize, String> {
    let case = loss_case(seed);
    let mode = if kind == LossKind::Pretrain { TrainMode::Full } else { case.mode };
    let (param_grads, rot_grad) = {
        let mut g = Graph::new();
        let (y, params, rot) = loss_node(&mut g, &case, &case.model, &case.site, kind, mode);
        let back = g.backward(y).unwrap();
        let pg: Vec<Vec<f64>> = params.iter().map(|v| back.wrt(&g, *v).into_data()).collect();
        (pg, rot.map(|r| back.wrt(&g, r).into_data()))
    };
    let value = |model: &DualEncoder, site: &InterventionSite| -> f64 {
        let mut g = Graph::new();
        let (y, _, _) = loss_node(&mut g, &case, model, site, kind, mode);
        g.value(y).item()
    };
    let mut rng = seeded(seed ^ 0xfd);
    let ids = case.model.trainable(mode);
    let mut n = 0;
    for _ in 0..samples {
        let k = rng.random_range(0..ids.len());
        let t = &case.model.params()[ids[k].0].tensor;
        let j = rng.random_range(0..t.numel());
        let numeric = central_diff(t, &[j], &|p| {
            let mut m = case.model.clone();
            *m.param_mut(ids[k]) = p.clone();
            value(&m, &case.site)
        })[0];
        let a = param_grads[k][j];
        if !close(a, numeric) {
            return Err(format!(
                "{kind:?} seed {seed}: {}[{j}] analytic {a} vs numeric {numeric}",
                case.model.params()[ids[k].0].name
            ));
        }
        n += 1;
    }
    if let Some(rg) = rot_grad {
        for _ in 0..samples {
            let j = rng.random_range(0..rg.len());
            let numeric = central_diff(&case.site.rotation, &[j], &|p| {
                let mut s = case.site.clone();
                s.rotation = p.clone();
                value(&case.model, &s)
            })[0];
            if !close(rg[j], numeric) {
                return Err(format!("{kind:?} seed {seed}: rotation[{j}] analytic {} vs numeric {numeric}", rg[j]));
            }
            n += 1;
        }
    }
    Ok(n)
}
