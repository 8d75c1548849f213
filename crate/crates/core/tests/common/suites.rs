//! Finite-difference suites shared by the unit-level gradient tests and the
//! acceptance gate.

// NaN must count as a violation, hence the negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use dcqe::autodiff::{Tape, Tensor, Var};
use dcqe::models::{init_params, BoundModel, ModelFamily, ModelSpec};
use dcqe::rng::{stream_rng, Stream};
use dcqe::training::{
    bounded_compactness, distance, domain_consistent_objective, straightforward_objective, Distance, LossWeights,
    StraightforwardConfig,
};
use rand_chacha::ChaCha8Rng;

use super::{away_from_zero, gradient_error, random_tensor};

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, Stream::Custom(77))
}

/// Relative error for every primitive operation at one seed.
pub fn primitive_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = rng_for(seed);
    let shape = vec![2, 3];
    let a = random_tensor(&mut rng, shape.clone(), -1.0, 1.0);
    let b = random_tensor(&mut rng, shape.clone(), -1.0, 1.0);
    let nz = away_from_zero(&mut rng, shape.clone(), 0.2, 1.5);
    let probe = random_tensor(&mut rng, shape.clone(), -1.0, 1.0);
    let s = Tensor::scalar(0.3 + (seed % 7) as f64 * 0.1);

    // Weighted sum so that every output element carries a distinct gradient.
    let weighted = move |t: &mut Tape, y: Var| {
        let w = t.constant(probe.clone());
        let p = t.mul(y, w).unwrap();
        t.mean(p)
    };
    let w2 = weighted.clone();
    let mut out = vec![
        (
            "add",
            gradient_error(&[a.clone(), b.clone()], |t, v| {
                let y = t.add(v[0], v[1]).unwrap();
                weighted(t, y)
            }),
        ),
        (
            "sub",
            gradient_error(&[a.clone(), b.clone()], |t, v| {
                let y = t.sub(v[0], v[1]).unwrap();
                weighted(t, y)
            }),
        ),
        (
            "mul",
            gradient_error(&[a.clone(), b.clone()], |t, v| {
                let y = t.mul(v[0], v[1]).unwrap();
                weighted(t, y)
            }),
        ),
        (
            "div",
            gradient_error(&[a.clone(), nz.clone()], |t, v| {
                let y = t.div(v[0], v[1]).unwrap();
                weighted(t, y)
            }),
        ),
        (
            "scale",
            gradient_error(std::slice::from_ref(&a), |t, v| {
                let y = t.scale(v[0], -1.7);
                weighted(t, y)
            }),
        ),
        (
            "relu",
            gradient_error(std::slice::from_ref(&nz), |t, v| {
                let y = t.relu(v[0]);
                weighted(t, y)
            }),
        ),
        (
            "tanh",
            gradient_error(std::slice::from_ref(&a), |t, v| {
                let y = t.tanh(v[0]);
                weighted(t, y)
            }),
        ),
        (
            "abs",
            gradient_error(std::slice::from_ref(&nz), |t, v| {
                let y = t.abs(v[0]);
                weighted(t, y)
            }),
        ),
        (
            "mean",
            gradient_error(std::slice::from_ref(&a), |t, v| {
                let y = t.mul(v[0], v[0]).unwrap();
                t.mean(y)
            }),
        ),
        (
            "scalar_broadcast",
            gradient_error(&[a.clone(), s.clone()], |t, v| {
                let y = t.mul(v[0], v[1]).unwrap();
                let y = t.div(y, v[1]).unwrap();
                let y = t.add(y, v[1]).unwrap();
                let y = t.sub(v[1], y).unwrap();
                let y = t.mul(y, v[1]).unwrap();
                w2(t, y)
            }),
        ),
        (
            "stop_gradient",
            gradient_error(&[a.clone(), b.clone()], |t, v| {
                let frozen = t.stop_gradient(v[0]);
                let y = t.mul(frozen, v[1]).unwrap();
                let z = t.mul(y, v[0]).unwrap();
                t.mean(z)
            }),
        ),
    ];
    let blocked = {
        let mut t = Tape::new();
        let x = t.param(a.clone());
        let sg = t.stop_gradient(x);
        let y = t.mul(sg, sg).unwrap();
        let l = t.mean(y);
        let g = t.backward(l).unwrap();
        if g.get(x).data().iter().all(|&v| v == 0.0) {
            0.0
        } else {
            f64::INFINITY
        }
    };
    out.push(("stop_gradient_blocks", blocked));

    for (k, cin, cout, h, w) in [(1, 2, 3, 4, 5), (3, 2, 3, 5, 4), (5, 1, 2, 3, 6), (3, 3, 1, 2, 2)] {
        let x = random_tensor(&mut rng, vec![2, cin, h, w], -1.0, 1.0);
        let wt = random_tensor(&mut rng, vec![cout, cin, k, k], -0.5, 0.5);
        let bias = random_tensor(&mut rng, vec![cout], -0.5, 0.5);
        let probe = random_tensor(&mut rng, vec![2, cout, h, w], -1.0, 1.0);
        let e = gradient_error(&[x, wt, bias], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2]).unwrap();
            let p = t.constant(probe.clone());
            let y = t.mul(y, p).unwrap();
            t.mean(y)
        });
        out.push(("conv2d", e));
    }
    out
}

/// 77 parameters: depth 3, two hidden channels.
pub fn tiny_dncnn() -> ModelSpec {
    ModelSpec::dncnn_with(1, 2, 3)
}

/// 51 parameters: four stages with 3-3-1-3 kernels and widths 1-2-1-1-1.
pub fn tiny_arcnn() -> ModelSpec {
    ModelSpec {
        family: ModelFamily::ArcnnLike,
        channels_in: 1,
        channels_hidden: 2,
        depth: 4,
        residual: false,
        kernel_sizes: vec![3, 3, 1, 3],
    }
}

pub struct Problem {
    pub spec: ModelSpec,
    pub params: Vec<Tensor>,
    pub compressed: Tensor,
    pub raw: Tensor,
}

/// A random problem at a differentiable point. Narrow ReLU networks with
/// random biases sometimes collapse to a constant map on part of the input;
/// there `F(F(x)) = F(x)` exactly and the L1 terms sit on the kink of `|x|`,
/// where central differences and the subgradient legitimately disagree.
/// The same happens wherever a ReLU input is close to zero. Draws with any
/// kink within reach of the step are rejected and redrawn.
pub fn problem(spec: ModelSpec, seed: u64) -> Problem {
    for attempt in 0..1000u64 {
        let p = draw_problem(&spec, seed, attempt);
        if !collapsed(&p) {
            return p;
        }
    }
    panic!("no non-degenerate problem for seed {seed}");
}

/// Well beyond what a step of `FD_STEP` on one weight moves any activation.
const KINK_MARGIN: f64 = 5.0 * super::FD_STEP;

fn draw_problem(spec: &ModelSpec, seed: u64, attempt: u64) -> Problem {
    let mut rng = rng_for(seed.wrapping_add(1 << 32).wrapping_add(attempt << 40));
    let params: Vec<Tensor> = init_params(spec, seed.wrapping_add(attempt << 40))
        .unwrap()
        .tensors()
        .cloned()
        .collect();
    // random biases too, so that no parameter sits at a special value
    let params = params
        .into_iter()
        .map(|p| {
            if p.shape().len() == 1 {
                random_tensor(&mut rng, p.shape().to_vec(), -0.2, 0.2)
            } else {
                p
            }
        })
        .collect();
    let compressed = random_tensor(&mut rng, vec![2, 1, 6, 6], 0.0, 1.0);
    let noise = random_tensor(&mut rng, vec![2, 1, 6, 6], -0.15, 0.15);
    let raw = Tensor::new(
        compressed.shape().to_vec(),
        compressed.data().iter().zip(noise.data()).map(|(c, n)| c + n).collect(),
    )
    .unwrap();
    Problem {
        spec: spec.clone(),
        params,
        compressed,
        raw,
    }
}

/// True when some `relu` or `abs` input lies within reach of its kink.
fn collapsed(p: &Problem) -> bool {
    let mut t = Tape::new();
    let vars: Vec<Var> = p.params.iter().map(|x| t.param(x.clone())).collect();
    let model = bind(&p.spec, &vars);
    let c = t.constant(p.compressed.clone());
    let r = t.constant(p.raw.clone());
    domain_consistent_objective(&mut t, &model, c, r, &LossWeights::default(), Distance::L1).unwrap();
    t.kink_margin() < KINK_MARGIN
}

fn bind<'a>(spec: &'a ModelSpec, vars: &[Var]) -> BoundModel<'a> {
    BoundModel {
        spec,
        vars: vars.chunks(2).map(|c| (c[0], c[1])).collect(),
    }
}

/// Weights large enough that every term visibly shapes the gradient while
/// still satisfying `lambda_comp·a < lambda_iden`.
pub fn amplified_weights() -> LossWeights {
    LossWeights {
        lambda_iden: 0.5,
        lambda_idem: 0.5,
        lambda_comp: 0.2,
        a: 1.5,
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Term {
    Enh,
    Iden,
    Idem,
    Comp,
    CompTilde,
    Total,
    Straightforward,
}

pub const TERMS: [Term; 7] = [
    Term::Enh,
    Term::Iden,
    Term::Idem,
    Term::Comp,
    Term::CompTilde,
    Term::Total,
    Term::Straightforward,
];

pub fn objective_error(p: &Problem, term: Term, w: &LossWeights, kind: Distance) -> f64 {
    let (c, r) = (p.compressed.clone(), p.raw.clone());
    gradient_error(&p.params, |t, v| {
        let model = bind(&p.spec, v);
        let cv = t.constant(c.clone());
        let rv = t.constant(r.clone());
        if let Term::Straightforward = term {
            let sc = StraightforwardConfig::default();
            return straightforward_objective(t, &model, cv, rv, &sc, kind).unwrap().1;
        }
        let terms = domain_consistent_objective(t, &model, cv, rv, w, kind).unwrap();
        match term {
            Term::Enh => terms.enh,
            Term::Iden => terms.iden,
            Term::Idem => terms.idem,
            Term::Comp => terms.comp,
            Term::CompTilde => terms.comp_tilde,
            Term::Total => terms.total,
            Term::Straightforward => unreachable!(),
        }
    })
}

/// Bounded compactness on scalar leaves, both arguments differentiable.
pub fn bounded_error(comp: f64, iden: f64, a: f64) -> f64 {
    gradient_error(&[Tensor::scalar(comp), Tensor::scalar(iden)], |t, v| {
        bounded_compactness(t, v[0], v[1], a).unwrap()
    })
}

/// Gradient of `mean(forward(x))` on a 1×1×8×8 input.
pub fn forward_mean_error(spec: &ModelSpec, seed: u64) -> f64 {
    let p = problem(spec.clone(), seed);
    let mut rng = rng_for(seed.wrapping_add(99));
    let x = random_tensor(&mut rng, vec![1, 1, 8, 8], 0.0, 1.0);
    gradient_error(&p.params, |t, v| {
        let model = bind(&p.spec, v);
        let xv = t.constant(x.clone());
        let y = dcqe::models::Enhancer::enhance(&model, t, xv).unwrap();
        t.mean(y)
    })
}

pub fn distance_error(seed: u64, kind: Distance) -> f64 {
    let mut rng = rng_for(seed.wrapping_add(5));
    let a = random_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
    let d = away_from_zero(&mut rng, vec![3, 4], 0.05, 1.0);
    let b = Tensor::new(vec![3, 4], a.data().iter().zip(d.data()).map(|(x, y)| x + y).collect()).unwrap();
    gradient_error(&[a, b], |t, v| distance(t, v[0], v[1], kind).unwrap())
}

fn param_grads(t: &Tape, loss: Var, vars: &[Var]) -> Vec<u64> {
    let g = t.backward(loss).unwrap();
    vars.iter().flat_map(|&v| g.get(v).into_data()).map(f64::to_bits).collect()
}

/// Parameter gradients of `L_idem` and `L_comp` as recorded by the training
/// objective, next to the same losses rebuilt with the frozen quantity
/// replaced by a plain constant of equal value. Returned as bit patterns.
pub struct StopGradientCase {
    pub idem: (Vec<u64>, Vec<u64>),
    pub comp: (Vec<u64>, Vec<u64>),
}

pub fn stop_gradient_case(p: &Problem, kind: Distance) -> StopGradientCase {
    let mut t = Tape::new();
    let vars: Vec<Var> = p.params.iter().map(|x| t.param(x.clone())).collect();
    let model = bind(&p.spec, &vars);
    let c = t.constant(p.compressed.clone());
    let r = t.constant(p.raw.clone());
    let terms = domain_consistent_objective(&mut t, &model, c, r, &LossWeights::default(), kind).unwrap();
    let idem_sg = param_grads(&t, terms.idem, &vars);
    let comp_sg = param_grads(&t, terms.comp, &vars);

    // L_idem = D(F(F(I_C)) as a constant, F(I_C))
    let mut t = Tape::new();
    let vars: Vec<Var> = p.params.iter().map(|x| t.param(x.clone())).collect();
    let model = bind(&p.spec, &vars);
    let c = t.constant(p.compressed.clone());
    let enhanced = dcqe::models::Enhancer::enhance(&model, &mut t, c).unwrap();
    let twice = dcqe::models::forward(&params_of(p), &p.spec, t.value(enhanced)).unwrap();
    let twice = t.constant(twice);
    let idem = distance(&mut t, twice, enhanced, kind).unwrap();
    let idem_const = param_grads(&t, idem, &vars);

    // L_comp = D(F(c), c) with c = F(I_C) as a constant
    let mut t = Tape::new();
    let vars: Vec<Var> = p.params.iter().map(|x| t.param(x.clone())).collect();
    let model = bind(&p.spec, &vars);
    let e = dcqe::models::forward(&params_of(p), &p.spec, &p.compressed).unwrap();
    let e = t.constant(e);
    let outer = dcqe::models::Enhancer::enhance(&model, &mut t, e).unwrap();
    let comp = distance(&mut t, outer, e, kind).unwrap();
    let comp_const = param_grads(&t, comp, &vars);

    StopGradientCase {
        idem: (idem_sg, idem_const),
        comp: (comp_sg, comp_const),
    }
}

fn params_of(p: &Problem) -> dcqe::models::ModelParams {
    let mut m = dcqe::models::ModelParams::zeros(&p.spec);
    for (dst, src) in m.tensors_mut().zip(&p.params) {
        *dst = src.clone();
    }
    m
}

/// Forward value of the bounded compactness for scalar inputs.
pub fn bounded_value(comp: f64, iden: f64, a: f64) -> f64 {
    let mut t = Tape::frozen();
    let c = t.constant(Tensor::scalar(comp));
    let i = t.constant(Tensor::scalar(iden));
    let v = bounded_compactness(&mut t, c, i, a).unwrap();
    t.value(v).item()
}

/// Violations of the four loss-algebra laws over `pairs` random draws each.
#[derive(Debug, Default)]
pub struct AlgebraViolations {
    pub zero_weights: usize,
    pub upper_bound: usize,
    pub linear: usize,
    pub saturated: usize,
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    use rand::Rng;
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

pub fn loss_algebra(pairs: usize, seed: u64) -> AlgebraViolations {
    use rand::Rng;
    let mut rng = rng_for(seed.wrapping_add(1 << 48));
    let mut v = AlgebraViolations::default();

    for s in 0..20 {
        let spec = if s % 2 == 0 { tiny_dncnn() } else { tiny_arcnn() };
        let p = problem(spec, seed.wrapping_add(s));
        for kind in [Distance::L1, Distance::L2] {
            let mut t = Tape::new();
            let vars: Vec<Var> = p.params.iter().map(|x| t.param(x.clone())).collect();
            let model = bind(&p.spec, &vars);
            let c = t.constant(p.compressed.clone());
            let r = t.constant(p.raw.clone());
            let w = LossWeights {
                a: rng.gen_range(0.5..3.0),
                ..LossWeights::zero()
            };
            let terms = domain_consistent_objective(&mut t, &model, c, r, &w, kind).unwrap();
            if t.value(terms.total).item().to_bits() != t.value(terms.enh).item().to_bits() {
                v.zero_weights += 1;
            }
        }
    }

    for _ in 0..pairs {
        let a = rng.gen_range(0.1..5.0);
        let comp = log_uniform(&mut rng, 1e-12, 1e3);
        let iden = log_uniform(&mut rng, 1e-12, 1e3);
        if bounded_value(comp, iden, a) > a * iden + 1e-12 {
            v.upper_bound += 1;
        }
    }

    for _ in 0..pairs {
        let a = rng.gen_range(0.1..5.0);
        let iden = log_uniform(&mut rng, 1e-6, 1e2);
        let ratio = log_uniform(&mut rng, 1e-8, 0.05);
        let comp = ratio * a * iden;
        let tilde = bounded_value(comp, iden, a);
        if !((tilde - comp).abs() / comp < 5e-3) {
            v.linear += 1;
        }
    }

    for _ in 0..pairs {
        let a = rng.gen_range(0.1..5.0);
        let iden = log_uniform(&mut rng, 1e-6, 1e2);
        let ratio = log_uniform(&mut rng, 20.0, 1e8);
        let comp = ratio * a * iden;
        let bound = a * iden;
        if !((bounded_value(comp, iden, a) - bound).abs() < 1e-9 * bound) {
            v.saturated += 1;
        }
    }
    v
}
