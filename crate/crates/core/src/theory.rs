//! Two-dimensional toy lab: a Gaussian-mixture "natural" domain, an
//! additive-noise "compressed" domain, and a small MLP trained with exactly
//! the image objectives. Energy distance stands in for a domain-gap metric.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{Enhancer, LayerParams};
use crate::rng::{stream_rng, Stream};
use crate::training::{domain_consistent_objective, Distance, LossRecord, LossTerms, LossWeights, Optimizer, OptimizerKind};

pub type Point = [f64; 2];

/// Mixture of 2-D Gaussians with full covariances.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDistribution {
    pub means: Vec<Point>,
    /// Row-major 2×2 covariances.
    pub covariances: Vec<[f64; 4]>,
    pub weights: Vec<f64>,
    /// Lower Cholesky factors `[l00, l10, l11]`.
    chol: Vec<[f64; 3]>,
}

impl ToyDistribution {
    pub fn new(means: Vec<Point>, covariances: Vec<[f64; 4]>, weights: Vec<f64>) -> Result<Self> {
        let k = means.len();
        if k == 0 || covariances.len() != k || weights.len() != k {
            return Err(Error::InvalidSpec(
                "mixture needs equally many means, covariances and weights".into(),
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec("mixture weights must be non-negative and sum to 1".into()));
        }
        let mut chol = Vec::with_capacity(k);
        for c in &covariances {
            let [a, b, b2, d] = *c;
            if b != b2 || !(a > 0.0) || !(a * d - b * b > 0.0) {
                return Err(Error::InvalidSpec(format!(
                    "covariance {c:?} is not symmetric positive-definite"
                )));
            }
            let l00 = a.sqrt();
            let l10 = b / l00;
            chol.push([l00, l10, (d - l10 * l10).sqrt()]);
        }
        Ok(ToyDistribution {
            means,
            covariances,
            weights,
            chol,
        })
    }

    /// `k` equally weighted isotropic components with means on the unit circle.
    pub fn ring(k: usize, std: f64) -> Result<Self> {
        let means = (0..k)
            .map(|i| {
                let t = std::f64::consts::TAU * i as f64 / k as f64;
                [t.cos(), t.sin()]
            })
            .collect();
        let v = std * std;
        ToyDistribution::new(means, vec![[v, 0.0, 0.0, v]; k], vec![1.0 / k as f64; k])
    }

    /// Mean distance of the component means from their weighted centroid.
    pub fn spread(&self) -> f64 {
        let mut c = [0.0; 2];
        for (m, w) in self.means.iter().zip(&self.weights) {
            c[0] += w * m[0];
            c[1] += w * m[1];
        }
        self.means
            .iter()
            .map(|m| ((m[0] - c[0]).powi(2) + (m[1] - c[1]).powi(2)).sqrt())
            .sum::<f64>()
            / self.means.len() as f64
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Point {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let (e0, e1): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
        let [l00, l10, l11] = self.chol[k];
        [self.means[k][0] + l00 * e0, self.means[k][1] + l10 * e0 + l11 * e1]
    }
}

/// Target samples `x` and corrupted copies `z = x + N(0, sigma²·I)`.
pub fn sample_pair(dist: &ToyDistribution, sigma: f64, count: usize, seed: u64) -> Result<(Vec<Point>, Vec<Point>)> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidSpec(format!("corruption sigma must be >= 0, got {sigma}")));
    }
    if count == 0 {
        return Err(Error::InvalidSpec("sample count must be >= 1".into()));
    }
    let mut xs_rng = stream_rng(seed, Stream::ToySamples);
    let mut noise_rng = stream_rng(seed, Stream::ToyNoise);
    Ok(draw_pairs(dist, sigma, count, &mut xs_rng, &mut noise_rng))
}

fn draw_pairs(
    dist: &ToyDistribution,
    sigma: f64,
    count: usize,
    xs: &mut ChaCha8Rng,
    noise: &mut ChaCha8Rng,
) -> (Vec<Point>, Vec<Point>) {
    let x: Vec<Point> = (0..count).map(|_| dist.sample(xs)).collect();
    let z = x
        .iter()
        .map(|p| {
            let (a, b): (f64, f64) = (StandardNormal.sample(noise), StandardNormal.sample(noise));
            [p[0] + sigma * a, p[1] + sigma * b]
        })
        .collect();
    (x, z)
}

/// `2·E|a−b| − E|a−a'| − E|b−b'|` over all ordered pairs (self-pairs
/// included), Euclidean norm.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidSpec("energy distance of an empty set".into()));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|p| p.len() != dim) {
        return Err(Error::InvalidSpec("energy distance: dimension mismatch".into()));
    }
    let mean_dist = |s: &[Vec<f64>], t: &[Vec<f64>]| {
        let mut total = 0.0;
        for p in s {
            for q in t {
                total += p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            }
        }
        total / (s.len() * t.len()) as f64
    };
    Ok(2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b))
}

pub fn points_to_vecs(p: &[Point]) -> Vec<Vec<f64>> {
    p.iter().map(|q| q.to_vec()).collect()
}

/// Points as a `[1, 2, N, 1]` tensor, so that 1×1 convolutions act as dense
/// layers over the whole sample set at once.
pub fn points_to_tensor(p: &[Point]) -> Tensor {
    let n = p.len();
    let mut data = vec![0.0; 2 * n];
    for (i, q) in p.iter().enumerate() {
        data[i] = q[0];
        data[n + i] = q[1];
    }
    Tensor::new(vec![1, 2, n, 1], data).expect("positive sample count")
}

pub fn tensor_to_points(t: &Tensor) -> Vec<Point> {
    let n = t.shape()[2];
    let d = t.data();
    (0..n).map(|i| [d[i], d[n + i]]).collect()
}

/// `2 → h → h → 2` MLP with rectifiers on the hidden layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub hidden: usize,
    pub residual: bool,
    pub layers: Vec<LayerParams>,
}

impl ToyModel {
    pub fn init(hidden: usize, residual: bool, seed: u64) -> Result<Self> {
        if hidden == 0 || hidden > 64 {
            return Err(Error::InvalidSpec(format!(
                "toy hidden width must be in 1..=64, got {hidden}"
            )));
        }
        let mut rng = stream_rng(seed, Stream::Init);
        let layers = [(hidden, 2), (hidden, hidden), (2, hidden)]
            .iter()
            .map(|&(out, inp)| {
                let std = (2.0 / inp as f64).sqrt();
                let w = (0..out * inp)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        std * e
                    })
                    .collect();
                LayerParams {
                    weight: Tensor::new(vec![out, inp, 1, 1], w).expect("valid"),
                    bias: Tensor::new(vec![out], vec![0.0; out]).expect("valid"),
                }
            })
            .collect();
        Ok(ToyModel {
            hidden,
            residual,
            layers,
        })
    }

    /// Constant map `x ↦ c`: zero weights everywhere, output bias `c`.
    pub fn constant(hidden: usize, c: Point) -> Result<Self> {
        let mut m = ToyModel::init(hidden, false, 0)?;
        for l in &mut m.layers {
            l.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        m.layers[2].bias = Tensor::from_vec(c.to_vec());
        Ok(m)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundToy {
        let vars = self
            .layers
            .iter()
            .map(|l| (tape.leaf(l.weight.clone(), trainable), tape.leaf(l.bias.clone(), trainable)))
            .collect();
        BoundToy {
            vars,
            residual: self.residual,
        }
    }

    pub fn apply(&self, points: &[Point]) -> Result<Vec<Point>> {
        let mut tape = Tape::frozen();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(points_to_tensor(points));
        let y = bound.enhance(&mut tape, x)?;
        Ok(tensor_to_points(tape.value(y)))
    }

    /// Per-sample drift `D(f(p), p)`: mean absolute (or squared) coordinate
    /// difference.
    pub fn drift(&self, points: &[Point], kind: Distance) -> Result<Vec<f64>> {
        let out = self.apply(points)?;
        Ok(out
            .iter()
            .zip(points)
            .map(|(f, p)| {
                let (d0, d1) = (f[0] - p[0], f[1] - p[1]);
                match kind {
                    Distance::L1 => (d0.abs() + d1.abs()) / 2.0,
                    Distance::L2 => (d0 * d0 + d1 * d1) / 2.0,
                }
            })
            .collect())
    }
}

/// A [`ToyModel`] recorded on a tape.
pub struct BoundToy {
    vars: Vec<(Var, Var)>,
    residual: bool,
}

impl BoundToy {
    pub fn param_vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().flat_map(|&(w, b)| [w, b])
    }
}

impl Enhancer for BoundToy {
    fn enhance(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.vars.len() - 1;
        for (i, &(w, b)) in self.vars.iter().enumerate() {
            h = tape.conv2d(h, w, b)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        if self.residual {
            h = tape.add(x, h)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub components: usize,
    pub component_std: f64,
    /// Corruption sigma as a fraction of the mixture spread.
    pub sigma_fraction: f64,
    pub hidden: usize,
    pub residual: bool,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub eval_count: usize,
    pub log_interval: usize,
    pub seed: u64,
    pub distance: Distance,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            components: 3,
            component_std: 0.1,
            sigma_fraction: 0.3,
            hidden: 32,
            residual: false,
            batch_size: 256,
            iterations: 3000,
            learning_rate: 3e-3,
            eval_count: 1000,
            log_interval: 100,
            seed: 0,
            distance: Distance::L1,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.components) {
            return Err(Error::config("toy.components", "must be 2..=4"));
        }
        if !(self.component_std > 0.0) || !(self.sigma_fraction >= 0.0) {
            return Err(Error::config("toy.component_std", "std must be > 0 and sigma_fraction >= 0"));
        }
        if self.batch_size == 0 || self.iterations == 0 || self.eval_count == 0 || self.log_interval == 0 {
            return Err(Error::config(
                "toy",
                "batch_size, iterations, eval_count and log_interval must be >= 1",
            ));
        }
        if self.eval_count > 2000 {
            return Err(Error::config("toy.eval_count", "at most 2000 (exact pairwise statistics)"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("toy.learning_rate", "must be > 0"));
        }
        Ok(())
    }

    pub fn distribution(&self) -> Result<ToyDistribution> {
        ToyDistribution::ring(self.components, self.component_std)
    }
}

#[derive(Clone, Debug)]
pub struct ToyDiagnostics {
    pub sigma: f64,
    pub curve: Vec<LossRecord>,
    pub target: Vec<Point>,
    pub corrupted: Vec<Point>,
    pub generated: Vec<Point>,
    pub energy_generated: f64,
    pub energy_corrupted: f64,
    pub drift_target: Vec<f64>,
    pub drift_corrupted: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl ToyDiagnostics {
    pub fn mean_drift_target(&self) -> f64 {
        mean(&self.drift_target)
    }

    pub fn mean_drift_corrupted(&self) -> f64 {
        mean(&self.drift_corrupted)
    }

    /// `set,x,y` for the target, corrupted and generated clouds.
    pub fn samples_csv(&self) -> String {
        let mut s = String::from("set,x,y\n");
        for (name, pts) in [
            ("target", &self.target),
            ("corrupted", &self.corrupted),
            ("generated", &self.generated),
        ] {
            for p in pts.iter() {
                let _ = writeln!(s, "{name},{},{}", p[0], p[1]);
            }
        }
        s
    }

    /// `set,index,drift` on target and corrupted samples.
    pub fn drift_csv(&self) -> String {
        let mut s = String::from("set,index,drift\n");
        for (name, d) in [("target", &self.drift_target), ("corrupted", &self.drift_corrupted)] {
            for (i, v) in d.iter().enumerate() {
                let _ = writeln!(s, "{name},{i},{v}");
            }
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        format!(
            "quantity,value\nsigma,{}\nenergy_generated,{}\nenergy_corrupted,{}\ndrift_target,{}\ndrift_corrupted,{}\n",
            self.sigma,
            self.energy_generated,
            self.energy_corrupted,
            self.mean_drift_target(),
            self.mean_drift_corrupted()
        )
    }
}

/// The image objectives on a batch of corrupted points `z` and targets `x`.
pub fn toy_objective(
    tape: &mut Tape,
    model: &BoundToy,
    z: &[Point],
    x: &[Point],
    w: &LossWeights,
    kind: Distance,
) -> Result<LossTerms> {
    let zv = tape.constant(points_to_tensor(z));
    let xv = tape.constant(points_to_tensor(x));
    domain_consistent_objective(tape, model, zv, xv, w, kind)
}

/// Loss values of a fixed toy model, without gradients.
pub fn evaluate_toy_losses(model: &ToyModel, z: &[Point], x: &[Point], w: &LossWeights, kind: Distance) -> Result<LossRecord> {
    let mut tape = Tape::frozen();
    let bound = model.bind(&mut tape, false);
    let terms = toy_objective(&mut tape, &bound, z, x, w, kind)?;
    Ok(LossRecord::from_terms(&tape, &terms, 0))
}

/// Trains with the image objectives on fresh `(z, x)` batches each step,
/// then measures alignment and drift on held-out samples.
pub fn train_toy(dist: &ToyDistribution, cfg: &ToyConfig, w: &LossWeights) -> Result<(ToyModel, ToyDiagnostics)> {
    cfg.validate()?;
    if w.lambda_comp > 0.0 {
        w.validate()?;
    }
    let sigma = cfg.sigma_fraction * dist.spread();
    let mut model = ToyModel::init(cfg.hidden, cfg.residual, cfg.seed)?;
    let mut opt = Optimizer::new(OptimizerKind::default(), cfg.learning_rate);
    let mut xs_rng = stream_rng(cfg.seed, Stream::Batches);
    let mut noise_rng = stream_rng(cfg.seed, Stream::Custom(1));
    let mut curve = Vec::new();

    for it in 1..=cfg.iterations {
        let (x, z) = draw_pairs(dist, sigma, cfg.batch_size, &mut xs_rng, &mut noise_rng);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let terms = toy_objective(&mut tape, &bound, &z, &x, w, cfg.distance)
            .map_err(|e| Error::NonFinite(format!("toy iteration {it}: {e}")))?;
        let grads = tape.backward(terms.total)?;
        let grads: Vec<Tensor> = bound.param_vars().map(|v| grads.get(v)).collect();
        opt.apply(model.tensors_mut(), &grads)?;
        if !model.is_finite() {
            return Err(Error::NonFinite(format!("toy parameters after iteration {it}")));
        }
        if it % cfg.log_interval == 0 || it == cfg.iterations {
            curve.push(LossRecord::from_terms(&tape, &terms, it));
        }
    }

    let eval_seed = cfg.seed.wrapping_add(1);
    let (_, corrupted) = sample_pair(dist, sigma, cfg.eval_count, eval_seed)?;
    let (target, _) = sample_pair(dist, sigma, cfg.eval_count, eval_seed.wrapping_add(1))?;
    let generated = model.apply(&corrupted)?;
    let tv = points_to_vecs(&target);
    let diagnostics = ToyDiagnostics {
        sigma,
        curve,
        energy_generated: energy_distance(&points_to_vecs(&generated), &tv)?,
        energy_corrupted: energy_distance(&points_to_vecs(&corrupted), &tv)?,
        drift_target: model.drift(&target, cfg.distance)?,
        drift_corrupted: model.drift(&corrupted, cfg.distance)?,
        target,
        corrupted,
        generated,
    };
    Ok((model, diagnostics))
}
