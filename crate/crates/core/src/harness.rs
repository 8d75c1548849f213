//! Multi-enhancement evaluation: images are compressed once, then pushed
//! through `n` enhancement cycles while per-cycle quality is recorded.
//!
//! Cases: the same operator every cycle, a different operator each cycle,
//! or a different operator each cycle on inputs compressed with a codec
//! setting drawn per image.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::codec::{encode_decode, CodecSetting};
use crate::error::{Error, Result};
use crate::image::{load_pnm, quantize_to_bytes, read_pnm, write_pnm, ImageBuffer};
use crate::metrics::{degradation_index, Metric, MetricSeries};
use crate::models::{forward, load_checkpoint, Model};
use crate::rng::{stream_rng, Stream};

/// Hand-written image filters usable as enhancement operators.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BuiltinFilter {
    Identity,
    /// 3×3 mean filter with edge replication.
    BoxBlur,
    /// Separable Gaussian with the given sigma (radius `ceil(3σ)`).
    GaussianBlur(f64),
    /// Unsharp mask `x + amount·(x − box(x))`.
    Sharpen(f64),
}

impl BuiltinFilter {
    pub fn apply(&self, frame: &Tensor) -> Tensor {
        match *self {
            BuiltinFilter::Identity => frame.clone(),
            BuiltinFilter::BoxBlur => map_planes(frame, box3),
            BuiltinFilter::GaussianBlur(sigma) => map_planes(frame, |p, h, w| gaussian(p, h, w, sigma)),
            BuiltinFilter::Sharpen(amount) => map_planes(frame, |p, h, w| {
                let blurred = box3(p, h, w);
                p.iter().zip(&blurred).map(|(x, b)| x + amount * (x - b)).collect()
            }),
        }
    }
}

impl fmt::Display for BuiltinFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BuiltinFilter::Identity => f.write_str("identity"),
            BuiltinFilter::BoxBlur => f.write_str("box_blur"),
            BuiltinFilter::GaussianBlur(s) => write!(f, "gaussian:{s}"),
            BuiltinFilter::Sharpen(a) => write!(f, "sharpen:{a}"),
        }
    }
}

impl FromStr for BuiltinFilter {
    type Err = Error;

    /// `identity`, `box_blur`, `gaussian:SIGMA`, `sharpen:AMOUNT`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::Operator {
            name: s.to_string(),
            reason: why.to_string(),
        };
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a.parse::<f64>().map_err(|_| bad("bad numeric argument"))?)),
            None => (s, None),
        };
        match (name, arg) {
            ("identity", None) => Ok(BuiltinFilter::Identity),
            ("box_blur", None) => Ok(BuiltinFilter::BoxBlur),
            ("gaussian", Some(sigma)) if sigma > 0.0 && sigma.is_finite() => Ok(BuiltinFilter::GaussianBlur(sigma)),
            ("sharpen", Some(amount)) if amount.is_finite() => Ok(BuiltinFilter::Sharpen(amount)),
            _ => Err(bad("unknown filter")),
        }
    }
}

/// Blur and sharpen filters, each of which degrades an image when applied
/// repeatedly; the default pool for the varied-method cases.
pub fn degrading_pool() -> Vec<BuiltinFilter> {
    vec![
        BuiltinFilter::BoxBlur,
        BuiltinFilter::GaussianBlur(0.8),
        BuiltinFilter::GaussianBlur(1.2),
        BuiltinFilter::Sharpen(0.5),
        BuiltinFilter::Sharpen(1.0),
    ]
}

fn map_planes(frame: &Tensor, f: impl Fn(&[f64], usize, usize) -> Vec<f64>) -> Tensor {
    let shape = frame.shape().to_vec();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let data: Vec<f64> = frame.data().chunks(h * w).flat_map(|p| f(p, h, w)).collect();
    Tensor::new(shape, data).expect("same shape")
}

fn box3(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| p[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut s = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    s += at(y + dy, x + dx);
                }
            }
            out[y as usize * w + x as usize] = s / 9.0;
        }
    }
    out
}

fn gaussian(p: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * p[y * w + clampi(x as isize + d, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * rows[clampi(y as isize + d, h) * w + x])
                .sum();
        }
    }
    out
}

/// Serializable description of an operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    Builtin {
        #[serde(default)]
        name: Option<String>,
        filter: String,
    },
    Model {
        name: String,
        checkpoint: PathBuf,
    },
    /// A program reading one PNM on stdin and writing one PNM on stdout.
    External {
        name: String,
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
    },
}

#[derive(Clone)]
enum OperatorKind {
    Builtin(BuiltinFilter),
    Model(Arc<Model>),
    External { program: PathBuf, args: Vec<String> },
}

/// A resolved enhancement operator: image in, image of identical
/// dimensions out.
#[derive(Clone)]
pub struct EnhanceOperator {
    name: String,
    kind: OperatorKind,
}

impl fmt::Debug for EnhanceOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnhanceOperator").field("name", &self.name).finish()
    }
}

impl EnhanceOperator {
    pub fn builtin(filter: BuiltinFilter) -> Self {
        EnhanceOperator {
            name: filter.to_string(),
            kind: OperatorKind::Builtin(filter),
        }
    }

    pub fn model(name: impl Into<String>, model: Model) -> Self {
        EnhanceOperator {
            name: name.into(),
            kind: OperatorKind::Model(Arc::new(model)),
        }
    }

    pub fn external(name: impl Into<String>, program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        EnhanceOperator {
            name: name.into(),
            kind: OperatorKind::External {
                program: program.into(),
                args,
            },
        }
    }

    /// Resolves a spec; checkpoints are loaded here, once.
    pub fn from_spec(spec: &OperatorSpec) -> Result<Self> {
        Ok(match spec {
            OperatorSpec::Builtin { name, filter } => {
                let mut op = EnhanceOperator::builtin(filter.parse()?);
                if let Some(n) = name {
                    op.name = n.clone();
                }
                op
            }
            OperatorSpec::Model { name, checkpoint } => EnhanceOperator::model(name.clone(), load_checkpoint(checkpoint)?),
            OperatorSpec::External { name, program, args } => {
                EnhanceOperator::external(name.clone(), program.clone(), args.clone())
            }
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Operator {
            name: self.name.clone(),
            reason: reason.into(),
        }
    }

    /// Applies the operator to a `[1, C, H, W]` frame. The result may leave
    /// `[0, 1]`; external programs only ever see clamped bytes.
    pub fn apply(&self, frame: &Tensor) -> Result<Tensor> {
        let out = match &self.kind {
            OperatorKind::Builtin(f) => f.apply(frame),
            OperatorKind::Model(m) => {
                let channels = frame.shape()[1];
                if channels != m.spec.channels_in {
                    return Err(self.fail(format!("model expects {} channels, image has {channels}", m.spec.channels_in)));
                }
                forward(&m.params, &m.spec, frame)?
            }
            OperatorKind::External { program, args } => {
                let img = ImageBuffer::from_tensor_clamped(frame)?;
                self.run_external(program, args, &img)?.to_tensor()
            }
        };
        if out.shape() != frame.shape() {
            return Err(self.fail(format!(
                "output shape {:?} differs from input {:?}",
                out.shape(),
                frame.shape()
            )));
        }
        if !out.is_finite() {
            return Err(self.fail("non-finite output"));
        }
        Ok(out)
    }

    pub fn apply_image(&self, img: &ImageBuffer) -> Result<ImageBuffer> {
        ImageBuffer::from_tensor_clamped(&self.apply(&img.to_tensor())?)
    }

    fn run_external(&self, program: &Path, args: &[String], img: &ImageBuffer) -> Result<ImageBuffer> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| self.fail(format!("cannot start {}: {e}", program.display())))?;
        let bytes = write_pnm(img);
        let mut stdin = child.stdin.take().expect("piped stdin");
        let writer = std::thread::spawn(move || stdin.write_all(&bytes));
        let mut out = Vec::new();
        child
            .stdout
            .take()
            .expect("piped stdout")
            .read_to_end(&mut out)
            .map_err(|e| self.fail(format!("reading output: {e}")))?;
        let status = child.wait().map_err(|e| self.fail(e.to_string()))?;
        // A program that exits without draining stdin is judged by its exit code.
        let _ = writer.join();
        if !status.success() {
            let mut err = String::new();
            if let Some(mut s) = child.stderr.take() {
                let _ = s.read_to_string(&mut err);
            }
            return Err(self.fail(format!("exited with {status}: {}", err.trim())));
        }
        let result = read_pnm(&out)?;
        if !result.same_dims(img) {
            return Err(self.fail("output dimensions differ from input"));
        }
        Ok(result)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    #[default]
    SameMethod,
    VaryMethod,
    VaryMethodAndCodec,
}

impl Case {
    pub fn name(self) -> &'static str {
        match self {
            Case::SameMethod => "same_method",
            Case::VaryMethod => "vary_method",
            Case::VaryMethodAndCodec => "vary_method_and_codec",
        }
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Case {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same_method" | "1" => Ok(Case::SameMethod),
            "vary_method" | "2" => Ok(Case::VaryMethod),
            "vary_method_and_codec" | "3" => Ok(Case::VaryMethodAndCodec),
            other => Err(Error::config("cycles.case", format!("unknown case `{other}`"))),
        }
    }
}

/// Rule used by the varied cases to pick operators across cycles.
pub const DRAW_RULE: &str = "without replacement when pool >= cycles, else with replacement";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CycleSpec {
    pub cycles: usize,
    pub case: Case,
    pub operators: Vec<OperatorSpec>,
    /// Codec settings as `jpeg:40` / `bpg:37`.
    pub codecs: Vec<String>,
    pub seed: u64,
    pub clamp_between_cycles: bool,
    pub quantize_between_cycles: bool,
}

impl Default for CycleSpec {
    fn default() -> Self {
        CycleSpec {
            cycles: 5,
            case: Case::SameMethod,
            operators: Vec::new(),
            codecs: vec!["jpeg:40".into()],
            seed: 0,
            clamp_between_cycles: true,
            quantize_between_cycles: false,
        }
    }
}

impl CycleSpec {
    pub fn codec_settings(&self) -> Result<Vec<CodecSetting>> {
        self.codecs.iter().map(|c| CodecSetting::parse(c)).collect()
    }

    /// Checks everything that does not need the resolved operator pool.
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.cycles == 0 {
            return Err(Error::InvalidSpec("cycles must be >= 1".into()));
        }
        let needed = if self.case == Case::SameMethod { 1 } else { 2 };
        if pool_size < needed {
            return Err(Error::InvalidSpec(format!(
                "case {} needs at least {needed} operators, pool has {pool_size}",
                self.case
            )));
        }
        if self.codec_settings()?.is_empty() {
            return Err(Error::InvalidSpec("codec pool is empty".into()));
        }
        Ok(())
    }
}

/// One enhancement cycle as executed.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub cycle: usize,
    pub operator: String,
    /// Index into the operator pool chosen by the case draw.
    pub draw: usize,
}

/// Quality of one image across cycles `0..=n` for every metric.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationReport {
    pub image: String,
    pub codec: CodecSetting,
    pub case: Case,
    pub series: Vec<(Metric, MetricSeries)>,
    /// DI over cycles `1..=n`; `None` when undefined (truncated run,
    /// non-finite endpoint).
    pub di: Vec<(Metric, Option<f64>)>,
    pub trace: Vec<TraceEntry>,
    pub error: Option<String>,
    pub seed: u64,
    pub clamp_between_cycles: bool,
    pub quantize_between_cycles: bool,
}

impl DegradationReport {
    pub fn values(&self, metric: Metric) -> Option<&[f64]> {
        self.series
            .iter()
            .find(|(m, _)| *m == metric)
            .map(|(_, s)| s.values.as_slice())
    }

    pub fn di_of(&self, metric: Metric) -> Option<f64> {
        self.di.iter().find(|(m, _)| *m == metric).and_then(|(_, d)| *d)
    }

    pub fn is_complete(&self, cycles: usize) -> bool {
        self.error.is_none() && self.trace.len() == cycles
    }
}

/// DI over cycles `1..=n` of a cycle-0-based series.
fn di_after_cycle0(name: &str, metric: Metric, values: &[f64]) -> Option<f64> {
    if values.len() < 3 {
        return None;
    }
    degradation_index(&MetricSeries::new(name, metric.orientation(), values[1..].to_vec())).ok()
}

/// An operator pool bound to a cycle specification.
pub struct Harness {
    pub spec: CycleSpec,
    pub metrics: Vec<Metric>,
    operators: Vec<EnhanceOperator>,
    codecs: Vec<CodecSetting>,
}

impl Harness {
    /// Resolves `spec.operators` (loading checkpoints).
    pub fn new(spec: CycleSpec, metrics: Vec<Metric>) -> Result<Self> {
        let ops = spec
            .operators
            .iter()
            .map(EnhanceOperator::from_spec)
            .collect::<Result<Vec<_>>>()?;
        Harness::with_operators(spec, ops, metrics)
    }

    /// Uses an already resolved pool; `spec.operators` is ignored.
    pub fn with_operators(spec: CycleSpec, operators: Vec<EnhanceOperator>, metrics: Vec<Metric>) -> Result<Self> {
        spec.validate(operators.len())?;
        if metrics.is_empty() {
            return Err(Error::InvalidSpec("no metrics requested".into()));
        }
        let codecs = spec.codec_settings()?;
        Ok(Harness {
            spec,
            metrics,
            operators,
            codecs,
        })
    }

    pub fn operators(&self) -> &[EnhanceOperator] {
        &self.operators
    }

    fn image_rng(&self, image_index: usize) -> rand_chacha::ChaCha8Rng {
        let mut rng = stream_rng(self.spec.seed, Stream::CaseSelection);
        rng.set_word_pos(image_index as u128 * 1024);
        rng
    }

    /// Operator indices for each cycle, and (case 3) the codec index.
    fn draw(&self, image_index: usize) -> (Vec<usize>, usize) {
        let mut rng = self.image_rng(image_index);
        let (n, pool) = (self.spec.cycles, self.operators.len());
        match self.spec.case {
            Case::SameMethod => (vec![rng.gen_range(0..pool); n], 0),
            Case::VaryMethod | Case::VaryMethodAndCodec => {
                let ops = if pool >= n {
                    sample(&mut rng, pool, n).into_vec()
                } else {
                    (0..n).map(|_| rng.gen_range(0..pool)).collect()
                };
                let codec = if self.spec.case == Case::VaryMethodAndCodec {
                    rng.gen_range(0..self.codecs.len())
                } else {
                    0
                };
                (ops, codec)
            }
        }
    }

    /// Runs one image at a given codec setting. `image_index` keys the
    /// case draw so that every image gets its own reproducible sequence.
    pub fn run_cycles(
        &self,
        name: &str,
        raw: &ImageBuffer,
        codec: CodecSetting,
        image_index: usize,
    ) -> Result<DegradationReport> {
        let (ops, _) = self.draw(image_index);
        let compressed = encode_decode(raw, &codec.config()?)?;
        let mut values: Vec<Vec<f64>> = vec![Vec::with_capacity(self.spec.cycles + 1); self.metrics.len()];
        let record = |img: &ImageBuffer, values: &mut Vec<Vec<f64>>| -> Result<()> {
            for (m, v) in self.metrics.iter().zip(values.iter_mut()) {
                v.push(m.evaluate(img, raw)?);
            }
            Ok(())
        };
        record(&compressed, &mut values)?;

        let mut frame = compressed.to_tensor();
        let mut trace = Vec::new();
        let mut error = None;
        for (k, &idx) in ops.iter().enumerate() {
            let op = &self.operators[idx];
            let out = match op.apply(&frame) {
                Ok(out) => out,
                Err(e) => {
                    log::warn!("{name}: cycle {} failed: {e}", k + 1);
                    error = Some(format!("cycle {}: {e}", k + 1));
                    break;
                }
            };
            let mut img = ImageBuffer::from_tensor_clamped(&out)?;
            if self.spec.quantize_between_cycles {
                img = quantize_to_bytes(&img);
            }
            record(&img, &mut values)?;
            frame = if self.spec.clamp_between_cycles || self.spec.quantize_between_cycles {
                img.to_tensor()
            } else {
                out
            };
            trace.push(TraceEntry {
                cycle: k + 1,
                operator: op.name().to_string(),
                draw: idx,
            });
        }

        let series: Vec<(Metric, MetricSeries)> = self
            .metrics
            .iter()
            .zip(values)
            .map(|(m, v)| (*m, MetricSeries::new(m.name(), m.orientation(), v)))
            .collect();
        let di = series
            .iter()
            .map(|(m, s)| {
                let d = if error.is_none() {
                    di_after_cycle0(name, *m, &s.values)
                } else {
                    None
                };
                (*m, d)
            })
            .collect();
        Ok(DegradationReport {
            image: name.to_string(),
            codec,
            case: self.spec.case,
            series,
            di,
            trace,
            error,
            seed: self.spec.seed,
            clamp_between_cycles: self.spec.clamp_between_cycles,
            quantize_between_cycles: self.spec.quantize_between_cycles,
        })
    }

    /// Runs every image under every applicable codec setting. Images are
    /// processed on `workers` threads; results are ordered by image name.
    pub fn run_experiment(&self, images: &[(String, ImageBuffer)], workers: usize) -> Result<ExperimentReport> {
        if images.is_empty() {
            return Err(Error::Dataset("no images to evaluate".into()));
        }
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.sort_by(|&a, &b| images[a].0.cmp(&images[b].0));

        let jobs: Vec<(usize, usize, CodecSetting)> = match self.spec.case {
            Case::VaryMethodAndCodec => order
                .iter()
                .enumerate()
                .map(|(rank, &i)| (rank, i, self.codecs[self.draw(rank).1]))
                .collect(),
            _ => self
                .codecs
                .iter()
                .flat_map(|&c| order.iter().enumerate().map(move |(rank, &i)| (rank, i, c)))
                .collect(),
        };

        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::InvalidSpec(format!("worker pool: {e}")))?;
        let reports: Vec<DegradationReport> = pool.install(|| {
            jobs.par_iter()
                .map(|&(rank, i, codec)| self.run_cycles(&images[i].0, &images[i].1, codec, rank))
                .collect::<Result<Vec<_>>>()
        })?;

        let rows = cycle_rows(&reports);
        let summary = summarize(&rows, self.spec.cycles);
        Ok(ExperimentReport { reports, rows, summary })
    }
}

/// Loads every `.pgm`/`.ppm`/`.pnm` file in `dir`, sorted by file name.
/// Unreadable images are skipped with a warning.
pub fn load_image_dir(dir: &Path) -> Result<Vec<(String, ImageBuffer)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm" | "pnm")))
        .collect();
    paths.sort();
    let mut images = Vec::new();
    for p in paths {
        match load_pnm(&p) {
            Ok(img) => images.push((p.file_name().unwrap().to_string_lossy().into_owned(), img)),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if images.is_empty() {
        return Err(Error::Dataset(format!("no readable images in {}", dir.display())));
    }
    Ok(images)
}

/// One (image, cycle, metric) measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleRow {
    pub image: String,
    pub codec: String,
    pub case: Case,
    pub cycle: usize,
    pub operator: String,
    pub metric: Metric,
    pub value: f64,
}

pub const CYCLES_CSV_HEADER: &str = "image,codec,case,cycle,operator,metric,value";

pub fn cycle_rows(reports: &[DegradationReport]) -> Vec<CycleRow> {
    let mut rows = Vec::new();
    for r in reports {
        for (metric, s) in &r.series {
            for (cycle, &value) in s.values.iter().enumerate() {
                let operator = if cycle == 0 {
                    "codec".to_string()
                } else {
                    r.trace[cycle - 1].operator.clone()
                };
                rows.push(CycleRow {
                    image: r.image.clone(),
                    codec: r.codec.to_string(),
                    case: r.case,
                    cycle,
                    operator,
                    metric: *metric,
                    value,
                });
            }
        }
    }
    rows
}

pub fn write_cycles_csv(rows: &[CycleRow]) -> String {
    let mut s = String::from(CYCLES_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.image, r.codec, r.case, r.cycle, r.operator, r.metric, r.value
        );
    }
    s
}

pub fn parse_cycles_csv(text: &str) -> Result<Vec<CycleRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CYCLES_CSV_HEADER) {
        return Err(Error::InvalidSpec("cycles CSV: unexpected header".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = |what: &str| Error::InvalidSpec(format!("cycles CSV line {}: {what}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad("expected 7 fields"));
            }
            Ok(CycleRow {
                image: f[0].to_string(),
                codec: f[1].to_string(),
                case: f[2].parse().map_err(|_| bad("bad case"))?,
                cycle: f[3].parse().map_err(|_| bad("bad cycle"))?,
                operator: f[4].to_string(),
                metric: f[5].parse().map_err(|_| bad("bad metric"))?,
                value: f[6].parse().map_err(|_| bad("bad value"))?,
            })
        })
        .collect()
}

/// Dataset-mean series and DI for one (codec, case, metric).
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub codec: String,
    pub case: Case,
    pub metric: Metric,
    /// Images contributing to the mean (complete, all-finite series).
    pub images: usize,
    /// Images left out (truncated runs or infinite values).
    pub excluded: usize,
    pub mean_series: Vec<f64>,
    pub di: Option<f64>,
}

/// Averages complete series per (codec, case, metric) in image-name order.
/// Case-3 runs are pooled under codec `mixed`.
pub fn summarize(rows: &[CycleRow], cycles: usize) -> Vec<SummaryRow> {
    type Key = (String, Case, Metric);
    let mut groups: BTreeMap<Key, BTreeMap<String, Vec<(usize, f64)>>> = BTreeMap::new();
    for r in rows {
        let codec = if r.case == Case::VaryMethodAndCodec {
            "mixed".to_string()
        } else {
            r.codec.clone()
        };
        // in case 3 the same image name appears once; elsewhere once per codec
        groups
            .entry((codec, r.case, r.metric))
            .or_default()
            .entry(r.image.clone())
            .or_default()
            .push((r.cycle, r.value));
    }
    groups
        .into_iter()
        .map(|((codec, case, metric), per_image)| {
            let mut sums = vec![0.0; cycles + 1];
            let (mut used, mut excluded) = (0, 0);
            for (_, mut vals) in per_image {
                vals.sort_by_key(|(c, _)| *c);
                let complete = vals.len() == cycles + 1 && vals.iter().enumerate().all(|(i, (c, v))| *c == i && v.is_finite());
                if !complete {
                    excluded += 1;
                    continue;
                }
                used += 1;
                sums.iter_mut().zip(&vals).for_each(|(s, (_, v))| *s += v);
            }
            let mean_series: Vec<f64> = if used == 0 {
                Vec::new()
            } else {
                sums.iter().map(|s| s / used as f64).collect()
            };
            let di = di_after_cycle0(&codec, metric, &mean_series);
            SummaryRow {
                codec,
                case,
                metric,
                images: used,
                excluded,
                mean_series,
                di,
            }
        })
        .collect()
}

pub fn write_summary_csv(summary: &[SummaryRow], cycles: usize) -> String {
    let mut s = String::from("codec,case,metric,images,excluded");
    for c in 0..=cycles {
        let _ = write!(s, ",cycle_{c}");
    }
    s.push_str(",di\n");
    for r in summary {
        let _ = write!(s, "{},{},{},{},{}", r.codec, r.case, r.metric, r.images, r.excluded);
        for c in 0..=cycles {
            match r.mean_series.get(c) {
                Some(v) => {
                    let _ = write!(s, ",{v}");
                }
                None => s.push(','),
            }
        }
        match r.di {
            Some(d) => {
                let _ = writeln!(s, ",{d}");
            }
            None => s.push_str(",\n"),
        }
    }
    s
}

/// Fixed-width table: one row per (codec, case, metric).
pub fn render_table(summary: &[SummaryRow], cycles: usize) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<14} {:<22} {:<6} {:>6}", "codec", "case", "metric", "images");
    for c in 0..=cycles {
        let _ = write!(s, " {:>9}", format!("Q{c}"));
    }
    let _ = writeln!(s, " {:>8}", "DI(%)");
    for r in summary {
        let _ = write!(
            s,
            "{:<14} {:<22} {:<6} {:>6}",
            r.codec,
            r.case.name(),
            r.metric.name(),
            r.images
        );
        for c in 0..=cycles {
            match r.mean_series.get(c) {
                Some(v) => {
                    let _ = write!(s, " {v:>9.4}");
                }
                None => {
                    let _ = write!(s, " {:>9}", "-");
                }
            }
        }
        match r.di {
            Some(d) => {
                let _ = writeln!(s, " {d:>8.4}");
            }
            None => {
                let _ = writeln!(s, " {:>8}", "-");
            }
        }
    }
    s
}

pub struct ExperimentReport {
    pub reports: Vec<DegradationReport>,
    pub rows: Vec<CycleRow>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentReport {
    pub fn summary_for(&self, codec: &str, case: Case, metric: Metric) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.codec == codec && r.case == case && r.metric == metric)
    }

    /// Per-cycle operator trace, one line per report.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("image,codec,case,cycle,operator,draw\n");
        for r in &self.reports {
            for t in &r.trace {
                let _ = writeln!(s, "{},{},{},{},{},{}", r.image, r.codec, r.case, t.cycle, t.operator, t.draw);
            }
            if let Some(e) = &r.error {
                let _ = writeln!(s, "{},{},{},error,\"{}\",", r.image, r.codec, r.case, e.replace('"', "'"));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(size: usize) -> ImageBuffer {
        let s: Vec<f64> = (0..size * size)
            .map(|i| {
                let (y, x) = (i / size, i % size);
                (((x * 7 + y * 3) % 23) as f64 / 22.0) * 0.8 + 0.1
            })
            .collect();
        ImageBuffer::new(size, size, 1, s).unwrap()
    }

    fn harness(case: Case, ops: Vec<EnhanceOperator>) -> Harness {
        let spec = CycleSpec {
            case,
            ..CycleSpec::default()
        };
        Harness::with_operators(spec, ops, vec![Metric::Psnr, Metric::Ssim]).unwrap()
    }

    #[test]
    fn identity_cycles_have_zero_di() {
        let h = harness(Case::SameMethod, vec![EnhanceOperator::builtin(BuiltinFilter::Identity)]);
        let r = h.run_cycles("ramp", &ramp(24), CodecSetting::Jpeg(40), 0).unwrap();
        let psnr = r.values(Metric::Psnr).unwrap();
        assert_eq!(psnr.len(), 6);
        assert!(psnr.iter().all(|v| *v == psnr[0]));
        assert_eq!(r.di_of(Metric::Psnr), Some(0.0));
        assert_eq!(r.di_of(Metric::Ssim), Some(0.0));
        assert_eq!(r.trace.len(), 5);
    }

    #[test]
    fn box_blur_degrades_monotonically() {
        let h = harness(Case::SameMethod, vec![EnhanceOperator::builtin(BuiltinFilter::BoxBlur)]);
        let r = h.run_cycles("ramp", &ramp(24), CodecSetting::Jpeg(40), 0).unwrap();
        let psnr = r.values(Metric::Psnr).unwrap();
        assert!(psnr[1..].windows(2).all(|w| w[1] < w[0]), "{psnr:?}");
        assert!(r.di_of(Metric::Psnr).unwrap() > 0.0);
    }

    #[test]
    fn vary_case_needs_two_operators() {
        let spec = CycleSpec {
            case: Case::VaryMethod,
            ..CycleSpec::default()
        };
        assert!(Harness::with_operators(
            spec,
            vec![EnhanceOperator::builtin(BuiltinFilter::Identity)],
            vec![Metric::Psnr]
        )
        .is_err());
        let spec = CycleSpec {
            cycles: 0,
            ..CycleSpec::default()
        };
        assert!(Harness::with_operators(
            spec,
            vec![EnhanceOperator::builtin(BuiltinFilter::Identity)],
            vec![Metric::Psnr]
        )
        .is_err());
    }

    #[test]
    fn draws_are_reproducible_and_distinct_without_replacement() {
        let ops: Vec<_> = [
            "identity",
            "box_blur",
            "gaussian:0.8",
            "sharpen:0.5",
            "gaussian:1.2",
            "sharpen:1",
        ]
        .iter()
        .map(|f| EnhanceOperator::builtin(f.parse().unwrap()))
        .collect();
        let h = harness(Case::VaryMethod, ops);
        for i in 0..20 {
            let (a, _) = h.draw(i);
            assert_eq!(a, h.draw(i).0);
            let mut sorted = a.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), 5);
        }
        assert_ne!(h.draw(0).0, h.draw(1).0);
    }

    #[test]
    fn filter_names_round_trip() {
        for s in ["identity", "box_blur", "gaussian:1.5", "sharpen:0.5"] {
            assert_eq!(s.parse::<BuiltinFilter>().unwrap().to_string(), s);
        }
        assert!("gaussian:-1".parse::<BuiltinFilter>().is_err());
        assert!("median".parse::<BuiltinFilter>().is_err());
    }

    #[test]
    fn failing_operator_truncates_report() {
        let broken = EnhanceOperator::external("missing", "/nonexistent/enhancer", vec![]);
        let h = harness(Case::SameMethod, vec![broken]);
        let r = h.run_cycles("ramp", &ramp(16), CodecSetting::Jpeg(40), 0).unwrap();
        assert_eq!(r.values(Metric::Psnr).unwrap().len(), 1);
        assert!(r.trace.is_empty());
        assert!(r.error.as_deref().unwrap().contains("cycle 1"));
        assert_eq!(r.di_of(Metric::Psnr), None);
    }

    #[test]
    fn csv_round_trip_and_summary() {
        let h = harness(Case::SameMethod, vec![EnhanceOperator::builtin(BuiltinFilter::BoxBlur)]);
        let images = vec![("b".to_string(), ramp(16)), ("a".to_string(), ramp(24))];
        let report = h.run_experiment(&images, 2).unwrap();
        assert_eq!(report.reports[0].image, "a");
        let text = write_cycles_csv(&report.rows);
        let parsed = parse_cycles_csv(&text).unwrap();
        assert_eq!(parsed, report.rows);
        assert_eq!(summarize(&parsed, 5), report.summary);
        let row = report.summary_for("jpeg:40", Case::SameMethod, Metric::Psnr).unwrap();
        assert_eq!(row.images, 2);
        assert_eq!(row.mean_series.len(), 6);
    }
}
