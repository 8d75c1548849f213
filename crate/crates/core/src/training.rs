//! Domain-consistent training: the four forward passes, the identity,
//! idempotency and bounded compactness objectives, and the optimizer loop.
//! Also hosts the enhancement-only baseline and the unrolled
//! multi-supervision ("straightforward") baseline.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::codec::{encode_decode, CodecConfig};
use crate::error::{Error, Result};
use crate::image::{images_to_tensor, patch_positions, ImageBuffer};
use crate::models::{save_checkpoint, BoundModel, Enhancer, Model, ModelParams, ModelSpec};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Distance {
    #[default]
    L1,
    L2,
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Distance::L1),
            "l2" => Ok(Distance::L2),
            other => Err(Error::config("distance", format!("unknown distance `{other}`"))),
        }
    }
}

/// Mean absolute (L1) or mean squared (L2) difference.
pub fn distance(tape: &mut Tape, a: Var, b: Var, kind: Distance) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::ShapeMismatch {
            op: "distance",
            left: tape.shape(a).to_vec(),
            right: tape.shape(b).to_vec(),
        });
    }
    let d = tape.sub(a, b)?;
    let e = match kind {
        Distance::L1 => tape.abs(d),
        Distance::L2 => tape.mul(d, d)?,
    };
    Ok(tape.mean(e))
}

/// Objective weights. Defaults are the CNN-family settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_iden: f64,
    pub lambda_idem: f64,
    pub lambda_comp: f64,
    pub a: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_iden: 1e-2,
            lambda_idem: 1e-2,
            lambda_comp: 1e-3,
            a: 1.5,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            lambda_iden: 0.0,
            lambda_idem: 0.0,
            lambda_comp: 0.0,
            a: 1.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_iden", self.lambda_iden),
            ("lambda_idem", self.lambda_idem),
            ("lambda_comp", self.lambda_comp),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(
                    format!("loss.{name}"),
                    format!("must be finite and >= 0, got {v}"),
                ));
            }
        }
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::config("loss.a", format!("must be > 0, got {}", self.a)));
        }
        // The bound a·L_iden carries gradient, so compactness pushes L_iden up
        // with weight lambda_comp·a; identity pressure must dominate it.
        if self.lambda_comp > 0.0 && self.lambda_comp * self.a >= self.lambda_iden {
            return Err(Error::config(
                "loss.lambda_comp",
                format!(
                    "lambda_comp·a = {} must be below lambda_iden = {}",
                    self.lambda_comp * self.a,
                    self.lambda_iden
                ),
            ));
        }
        Ok(())
    }
}

/// Outputs of the four forward passes.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPasses {
    /// `F(I_C)`
    pub enhanced: Var,
    /// `F(I_R)`
    pub raw_enhanced: Var,
    /// `F(F(I_C))`, differentiable through both applications.
    pub enhanced_twice: Var,
    /// `F(StopGrad(F(I_C)))`, differentiable through the outer application only.
    pub enhanced_twice_outer: Var,
    /// `StopGrad(F(I_C))`, shared by the outer pass and the compactness target.
    pub enhanced_frozen: Var,
}

pub fn forward_passes<E: Enhancer + ?Sized>(tape: &mut Tape, model: &E, compressed: Var, raw: Var) -> Result<ForwardPasses> {
    if tape.shape(compressed) != tape.shape(raw) {
        return Err(Error::ShapeMismatch {
            op: "forward_passes",
            left: tape.shape(compressed).to_vec(),
            right: tape.shape(raw).to_vec(),
        });
    }
    let enhanced = model.enhance(tape, compressed)?;
    let raw_enhanced = model.enhance(tape, raw)?;
    let enhanced_twice = model.enhance(tape, enhanced)?;
    let enhanced_frozen = tape.stop_gradient(enhanced);
    let enhanced_twice_outer = model.enhance(tape, enhanced_frozen)?;
    Ok(ForwardPasses {
        enhanced,
        raw_enhanced,
        enhanced_twice,
        enhanced_twice_outer,
        enhanced_frozen,
    })
}

/// Below this value of `a·L_iden` the bounded compactness falls back to
/// `min(L_comp, a·L_iden)`.
pub const BOUND_FLOOR: f64 = 1e-8;

/// `tanh(L_comp / (a·L_iden)) · a·L_iden`. Gradient flows through both the
/// compactness term and the bound.
pub fn bounded_compactness(tape: &mut Tape, comp: Var, iden: Var, a: f64) -> Result<Var> {
    let bound = tape.scale(iden, a);
    if tape.value(bound).item() < BOUND_FLOOR {
        let pick = if tape.value(comp).item() <= tape.value(bound).item() {
            comp
        } else {
            bound
        };
        return Ok(pick);
    }
    let ratio = tape.div(comp, bound)?;
    let squashed = tape.tanh(ratio);
    tape.mul(squashed, bound)
}

/// The objective terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub enh: Var,
    pub iden: Var,
    pub idem: Var,
    pub comp: Var,
    pub comp_tilde: Var,
    pub total: Var,
}

pub fn losses(tape: &mut Tape, passes: &ForwardPasses, raw: Var, w: &LossWeights, kind: Distance) -> Result<LossTerms> {
    let enh = distance(tape, passes.enhanced, raw, kind)?;
    let iden = distance(tape, passes.raw_enhanced, raw, kind)?;
    let twice_frozen = tape.stop_gradient(passes.enhanced_twice);
    let idem = distance(tape, twice_frozen, passes.enhanced, kind)?;
    let comp = distance(tape, passes.enhanced_twice_outer, passes.enhanced_frozen, kind)?;
    let comp_tilde = bounded_compactness(tape, comp, iden, w.a)?;

    let t_iden = tape.scale(iden, w.lambda_iden);
    let t_idem = tape.scale(idem, w.lambda_idem);
    let t_comp = tape.scale(comp_tilde, w.lambda_comp);
    let total = tape.add(enh, t_iden)?;
    let total = tape.add(total, t_idem)?;
    let total = tape.sub(total, t_comp)?;

    for (name, v) in [
        ("L_enh", enh),
        ("L_iden", iden),
        ("L_idem", idem),
        ("L_comp", comp),
        ("L_total", total),
    ] {
        if !tape.value(v).item().is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    Ok(LossTerms {
        enh,
        iden,
        idem,
        comp,
        comp_tilde,
        total,
    })
}

/// Forward passes plus objectives for one batch.
pub fn domain_consistent_objective<E: Enhancer + ?Sized>(
    tape: &mut Tape,
    model: &E,
    compressed: Var,
    raw: Var,
    w: &LossWeights,
    kind: Distance,
) -> Result<LossTerms> {
    let passes = forward_passes(tape, model, compressed, raw)?;
    losses(tape, &passes, raw, w, kind)
}

/// `Σ_i w_i · D(F^(i)(I_C), I_R)` with gradient through every application.
pub fn straightforward_objective<E: Enhancer + ?Sized>(
    tape: &mut Tape,
    model: &E,
    compressed: Var,
    raw: Var,
    sc: &StraightforwardConfig,
    kind: Distance,
) -> Result<(Var, Var)> {
    sc.validate()?;
    let mut current = compressed;
    let mut total = None;
    let mut first = None;
    for &wi in &sc.weights {
        current = model.enhance(tape, current)?;
        let d = distance(tape, current, raw, kind)?;
        first.get_or_insert(d);
        let term = tape.scale(d, wi);
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    let total = total.expect("validated non-empty");
    if !tape.value(total).item().is_finite() {
        return Err(Error::NonFinite("straightforward loss".into()));
    }
    Ok((first.expect("validated non-empty"), total))
}

/// Loss values of one step or evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub enh: f64,
    pub iden: f64,
    pub idem: f64,
    pub comp: f64,
    pub comp_tilde: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn from_terms(tape: &Tape, t: &LossTerms, iteration: usize) -> Self {
        let v = |x: Var| tape.value(x).item();
        LossRecord {
            iteration,
            enh: v(t.enh),
            iden: v(t.iden),
            idem: v(t.idem),
            comp: v(t.comp),
            comp_tilde: v(t.comp_tilde),
            total: v(t.total),
        }
    }

    pub const CSV_HEADER: &'static str = "iteration,L_enh,L_iden,L_idem,L_comp,L_comp_tilde,L_total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration, self.enh, self.iden, self.idem, self.comp, self.comp_tilde, self.total
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Enhancement objective only.
    Baseline,
    /// Unrolled multi-cycle supervision.
    Straightforward,
    /// Enhancement plus identity, idempotency and bounded compactness.
    DomainConsistent,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Straightforward => "straightforward",
            TrainMode::DomainConsistent => "domain_consistent",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub optimizer: OptimizerKind,
    pub patch_size: usize,
    pub patch_stride: usize,
    pub seed: u64,
    pub distance: Distance,
    pub mode: TrainMode,
    pub log_interval: usize,
    /// Checkpoint every this many iterations; 0 writes only the final one.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 8,
            iterations: 1000,
            optimizer: OptimizerKind::default(),
            patch_size: 32,
            patch_stride: 16,
            seed: 0,
            distance: Distance::L1,
            mode: TrainMode::DomainConsistent,
            log_interval: 50,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be > 0"));
        }
        if self.iterations == 0 {
            return Err(Error::config("train.iterations", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.patch_size == 0 || self.patch_stride == 0 {
            return Err(Error::config("train.patch_size", "patch size and stride must be >= 1"));
        }
        if self.log_interval == 0 {
            return Err(Error::config("train.log_interval", "must be >= 1"));
        }
        Ok(())
    }
}

/// Unroll depth `M = weights.len()` and per-cycle weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StraightforwardConfig {
    pub weights: Vec<f64>,
}

impl Default for StraightforwardConfig {
    fn default() -> Self {
        StraightforwardConfig {
            weights: vec![1.0, 0.01],
        }
    }
}

impl StraightforwardConfig {
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::config("straightforward.weights", "need at least one cycle"));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::config("straightforward.weights", "weights must be finite and >= 0"));
        }
        Ok(())
    }
}

/// First-order optimizer state over a flat list of parameter tensors.
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn apply<'p>(&mut self, params: impl Iterator<Item = &'p mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.zip(grads) {
                    p.data_mut().iter_mut().zip(g.data()).for_each(|(p, g)| *p -= lr * g);
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                if self.first.is_empty() {
                    self.first = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
                    self.second = self.first.clone();
                }
                let c1 = 1.0 - beta1.powi(self.step as i32);
                let c2 = 1.0 - beta2.powi(self.step as i32);
                for (((p, g), m), v) in params.zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Aligned compressed/raw patches stacked as NCHW tensors.
#[derive(Clone, Debug)]
pub struct Batch {
    pub compressed: Tensor,
    pub raw: Tensor,
}

impl Batch {
    pub fn from_pairs(pairs: &[(ImageBuffer, ImageBuffer)]) -> Result<Self> {
        let (c, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        Ok(Batch {
            compressed: images_to_tensor(&c)?,
            raw: images_to_tensor(&r)?,
        })
    }
}

/// Source of training batches.
pub trait DataSource {
    fn next_batch(&mut self, rng: &mut ChaCha8Rng, batch_size: usize) -> Result<Batch>;
}

/// In-memory pool of aligned (compressed, raw) patch pairs; batches are
/// drawn uniformly with replacement.
#[derive(Clone, Debug)]
pub struct PatchPool {
    pairs: Vec<(ImageBuffer, ImageBuffer)>,
}

impl PatchPool {
    pub fn new(pairs: Vec<(ImageBuffer, ImageBuffer)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Dataset("no training patches".into()));
        }
        Ok(PatchPool { pairs })
    }

    /// Compresses each raw image with `codec` and cuts aligned patches.
    pub fn from_raw_images(raws: &[ImageBuffer], codec: &CodecConfig, size: usize, stride: usize, seed: u64) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in raws.iter().enumerate() {
            let compressed = encode_decode(raw, codec)?;
            for (y, x) in patch_positions(raw.height(), raw.width(), size, stride, seed.wrapping_add(i as u64))? {
                pairs.push((compressed.crop(y, x, size, size)?, raw.crop(y, x, size, size)?));
            }
        }
        PatchPool::new(pairs)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(ImageBuffer, ImageBuffer)] {
        &self.pairs
    }
}

impl DataSource for PatchPool {
    fn next_batch(&mut self, rng: &mut ChaCha8Rng, batch_size: usize) -> Result<Batch> {
        let picked: Vec<_> = (0..batch_size)
            .map(|_| self.pairs[rng.gen_range(0..self.pairs.len())].clone())
            .collect();
        Batch::from_pairs(&picked)
    }
}

fn collect_grads(tape: &Tape, loss: Var, vars: impl Iterator<Item = Var>) -> Result<Vec<Tensor>> {
    let grads = tape.backward(loss)?;
    Ok(vars.map(|v| grads.get(v)).collect())
}

/// Gradient of the objective selected by `mode` with respect to every
/// parameter tensor, plus the loss record. Terms a mode does not optimize
/// are reported as NaN.
pub fn objective_gradients(
    params: &ModelParams,
    spec: &ModelSpec,
    batch: &Batch,
    mode: TrainMode,
    kind: Distance,
    w: &LossWeights,
    sc: &StraightforwardConfig,
) -> Result<(Vec<Tensor>, LossRecord)> {
    let mut tape = Tape::new();
    let model = BoundModel::trainable(&mut tape, spec, params);
    let compressed = tape.constant(batch.compressed.clone());
    let raw = tape.constant(batch.raw.clone());
    let (loss, record) = match mode {
        TrainMode::DomainConsistent => {
            let terms = domain_consistent_objective(&mut tape, &model, compressed, raw, w, kind)?;
            (terms.total, LossRecord::from_terms(&tape, &terms, 0))
        }
        TrainMode::Baseline => {
            let enhanced = model.enhance(&mut tape, compressed)?;
            let enh = distance(&mut tape, enhanced, raw, kind)?;
            let v = tape.value(enh).item();
            if !v.is_finite() {
                return Err(Error::NonFinite("L_enh".into()));
            }
            (enh, partial_record(v, v))
        }
        TrainMode::Straightforward => {
            let (first, total) = straightforward_objective(&mut tape, &model, compressed, raw, sc, kind)?;
            (total, partial_record(tape.value(first).item(), tape.value(total).item()))
        }
    };
    let grads = collect_grads(&tape, loss, model.param_vars())?;
    Ok((grads, record))
}

fn partial_record(enh: f64, total: f64) -> LossRecord {
    LossRecord {
        iteration: 0,
        enh,
        iden: f64::NAN,
        idem: f64::NAN,
        comp: f64::NAN,
        comp_tilde: f64::NAN,
        total,
    }
}

/// One domain-consistent update.
pub fn train_step(
    params: &mut ModelParams,
    spec: &ModelSpec,
    batch: &Batch,
    cfg: &TrainConfig,
    w: &LossWeights,
    opt: &mut Optimizer,
) -> Result<LossRecord> {
    let (grads, record) = objective_gradients(
        params,
        spec,
        batch,
        TrainMode::DomainConsistent,
        cfg.distance,
        w,
        &StraightforwardConfig::default(),
    )?;
    opt.apply(params.tensors_mut(), &grads)?;
    Ok(record)
}

/// One enhancement-only update.
pub fn baseline_step(
    params: &mut ModelParams,
    spec: &ModelSpec,
    batch: &Batch,
    cfg: &TrainConfig,
    opt: &mut Optimizer,
) -> Result<LossRecord> {
    let (grads, record) = objective_gradients(
        params,
        spec,
        batch,
        TrainMode::Baseline,
        cfg.distance,
        &LossWeights::zero(),
        &StraightforwardConfig::default(),
    )?;
    opt.apply(params.tensors_mut(), &grads)?;
    Ok(record)
}

/// One unrolled multi-supervision update.
pub fn straightforward_step(
    params: &mut ModelParams,
    spec: &ModelSpec,
    batch: &Batch,
    cfg: &TrainConfig,
    sc: &StraightforwardConfig,
    opt: &mut Optimizer,
) -> Result<LossRecord> {
    let (grads, record) = objective_gradients(
        params,
        spec,
        batch,
        TrainMode::Straightforward,
        cfg.distance,
        &LossWeights::zero(),
        sc,
    )?;
    opt.apply(params.tensors_mut(), &grads)?;
    Ok(record)
}

/// All six loss values for a fixed model, without gradients.
pub fn evaluate_losses(model: &dyn Enhancer, batch: &Batch, w: &LossWeights, kind: Distance) -> Result<LossRecord> {
    let mut tape = Tape::frozen();
    let compressed = tape.constant(batch.compressed.clone());
    let raw = tape.constant(batch.raw.clone());
    let terms = domain_consistent_objective(&mut tape, model, compressed, raw, w, kind)?;
    Ok(LossRecord::from_terms(&tape, &terms, 0))
}

/// Where a training run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<LossRecord>,
}

/// Stateful trainer over one model.
pub struct Trainer {
    pub spec: ModelSpec,
    pub params: ModelParams,
    pub cfg: TrainConfig,
    pub weights: LossWeights,
    pub straightforward: StraightforwardConfig,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl Trainer {
    pub fn new(
        spec: ModelSpec,
        params: ModelParams,
        cfg: TrainConfig,
        weights: LossWeights,
        straightforward: StraightforwardConfig,
    ) -> Result<Self> {
        spec.validate()?;
        params.check_shapes(&spec)?;
        cfg.validate()?;
        if cfg.mode == TrainMode::DomainConsistent {
            weights.validate()?;
        }
        if cfg.mode == TrainMode::Straightforward {
            straightforward.validate()?;
        }
        Ok(Trainer {
            optimizer: Optimizer::new(cfg.optimizer, cfg.learning_rate),
            rng: stream_rng(cfg.seed, Stream::Batches),
            iteration: 0,
            spec,
            params,
            cfg,
            weights,
            straightforward,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.spec.clone(), self.params.clone())
    }

    /// One update. When `full_record` is set, terms the mode does not
    /// optimize are evaluated (without gradient) on the same batch first.
    pub fn step(&mut self, source: &mut dyn DataSource, full_record: bool) -> Result<LossRecord> {
        let batch = source.next_batch(&mut self.rng, self.cfg.batch_size)?;
        let aux = if full_record && self.cfg.mode != TrainMode::DomainConsistent {
            let mut tape = Tape::frozen();
            let fixed = BoundModel::fixed(&mut tape, &self.spec, &self.params);
            Some(evaluate_losses_on(
                &mut tape,
                &fixed,
                &batch,
                &self.weights,
                self.cfg.distance,
            )?)
        } else {
            None
        };
        let (grads, mut record) = objective_gradients(
            &self.params,
            &self.spec,
            &batch,
            self.cfg.mode,
            self.cfg.distance,
            &self.weights,
            &self.straightforward,
        )?;
        self.optimizer.apply(self.params.tensors_mut(), &grads)?;
        if !self.params.is_finite() {
            return Err(Error::NonFinite(format!("parameters after iteration {}", self.iteration + 1)));
        }
        self.iteration += 1;
        if let Some(a) = aux {
            record.iden = a.iden;
            record.idem = a.idem;
            record.comp = a.comp;
            record.comp_tilde = a.comp_tilde;
        }
        record.iteration = self.iteration;
        Ok(record)
    }
}

fn evaluate_losses_on(
    tape: &mut Tape,
    model: &dyn Enhancer,
    batch: &Batch,
    w: &LossWeights,
    kind: Distance,
) -> Result<LossRecord> {
    let compressed = tape.constant(batch.compressed.clone());
    let raw = tape.constant(batch.raw.clone());
    let terms = domain_consistent_objective(tape, model, compressed, raw, w, kind)?;
    Ok(LossRecord::from_terms(tape, &terms, 0))
}

/// Runs `cfg.iterations` updates starting from `params`, logging every
/// `log_interval` steps (and the last one) and checkpointing as configured.
pub fn train_loop(
    spec: &ModelSpec,
    params: ModelParams,
    cfg: &TrainConfig,
    source: &mut dyn DataSource,
    w: &LossWeights,
    sc: &StraightforwardConfig,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(spec.clone(), params, cfg.clone(), *w, sc.clone())?;
    let mut csv = match &outputs.loss_csv {
        Some(path) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
            writeln!(f, "{}", LossRecord::CSV_HEADER).map_err(|e| Error::io(path, e))?;
            Some((path, f))
        }
        None => None,
    };
    let mut curve = Vec::new();
    for it in 1..=cfg.iterations {
        let log = it % cfg.log_interval == 0 || it == cfg.iterations;
        let record = trainer.step(source, log)?;
        if log {
            log::info!(
                "iter {it}: L_enh {:.5} L_iden {:.5} L_idem {:.5} L_comp {:.5} total {:.5}",
                record.enh,
                record.iden,
                record.idem,
                record.comp,
                record.total
            );
            if let Some((path, f)) = csv.as_mut() {
                writeln!(f, "{}", record.csv_row()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            curve.push(record);
        }
        if cfg.checkpoint_interval > 0 && it % cfg.checkpoint_interval == 0 && it != cfg.iterations {
            if let Some(path) = &outputs.checkpoint {
                save_checkpoint(&checkpoint_at(path, it), &trainer.model()?)?;
            }
        }
    }
    if let Some((path, mut f)) = csv {
        f.flush().map_err(|e| Error::io(path.as_path(), e))?;
    }
    let model = trainer.model()?;
    if let Some(path) = &outputs.checkpoint {
        save_checkpoint(path, &model)?;
    }
    Ok(TrainOutcome { model, curve })
}

/// `model.ckpt` → `model.iter000100.ckpt`
pub fn checkpoint_at(path: &Path, iteration: usize) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("ckpt");
    path.with_file_name(format!("{stem}.iter{iteration:06}.{ext}"))
}
