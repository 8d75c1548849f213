//! Fidelity metrics, the Degradation Index and the drift measure.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::models::Enhancer;
use crate::training::{distance, Distance};

/// Whether larger metric values are better (`+1`) or worse (`-1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    HigherBetter,
    LowerBetter,
}

impl Orientation {
    pub fn sign(self) -> f64 {
        match self {
            Orientation::HigherBetter => 1.0,
            Orientation::LowerBetter => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Psnr,
    Ssim,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
        }
    }

    pub fn orientation(self) -> Orientation {
        Orientation::HigherBetter
    }

    pub fn evaluate(self, image: &ImageBuffer, reference: &ImageBuffer) -> Result<f64> {
        match self {
            Metric::Psnr => psnr(image, reference),
            Metric::Ssim => ssim(image, reference),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "psnr" => Ok(Metric::Psnr),
            "ssim" => Ok(Metric::Ssim),
            other => Err(Error::Metric(format!("unknown metric `{other}`"))),
        }
    }
}

/// Quality values `Q_1..Q_n` of one metric over enhancement cycles.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSeries {
    pub name: String,
    pub orientation: Orientation,
    pub values: Vec<f64>,
}

impl MetricSeries {
    pub fn new(name: impl Into<String>, orientation: Orientation, values: Vec<f64>) -> Self {
        MetricSeries {
            name: name.into(),
            orientation,
            values,
        }
    }
}

/// Degradation slope in percent per cycle:
/// `m · ((Q_1 − Q_n) / Q_1) / (n − 1) · 100`.
pub fn degradation_index(series: &MetricSeries) -> Result<f64> {
    let n = series.values.len();
    if n < 2 {
        return Err(Error::Metric(format!(
            "degradation index of `{}` needs at least 2 values, got {n}",
            series.name
        )));
    }
    let (first, last) = (series.values[0], series.values[n - 1]);
    if first == 0.0 {
        return Err(Error::Metric(format!("`{}`: first value is zero", series.name)));
    }
    if !first.is_finite() || !last.is_finite() {
        return Err(Error::Metric(format!("`{}`: non-finite endpoint", series.name)));
    }
    Ok(series.orientation.sign() * ((first - last) / first) / (n - 1) as f64 * 100.0)
}

fn check_dims(op: &'static str, a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: vec![a.height(), a.width(), a.channels()],
            right: vec![b.height(), b.width(), b.channels()],
        })
    }
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_dims("mse", a, b)?;
    let sum: f64 = a.samples().iter().zip(b.samples()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// PSNR in dB with peak 1.0. Identical images give `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> &'static [f64; SSIM_WINDOW] {
    static W: OnceLock<[f64; SSIM_WINDOW]> = OnceLock::new();
    W.get_or_init(|| {
        let mut w = [0.0; SSIM_WINDOW];
        let c = (SSIM_WINDOW / 2) as f64;
        for (i, v) in w.iter_mut().enumerate() {
            let d = i as f64 - c;
            *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        w
    })
}

/// Separable Gaussian filtering over the valid region.
fn filter_valid(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let g = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM (11×11 Gaussian window, σ = 1.5, K1 = 0.01, K2 = 0.03,
/// dynamic range 1), averaged over the valid map and then over channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_dims("ssim", a, b)?;
    let (h, w, ch) = (a.height(), a.width(), a.channels());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Metric(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    if a == b {
        return Ok(1.0);
    }
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    for c in 0..ch {
        let pa: Vec<f64> = a.samples().iter().skip(c).step_by(ch).copied().collect();
        let pb: Vec<f64> = b.samples().iter().skip(c).step_by(ch).copied().collect();
        let paa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let pbb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let pab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let (ma, mb) = (filter_valid(&pa, h, w), filter_valid(&pb, h, w));
        let (saa, sbb, sab) = (filter_valid(&paa, h, w), filter_valid(&pbb, h, w), filter_valid(&pab, h, w));
        let map_sum: f64 = (0..ma.len())
            .map(|i| {
                let (mua, mub) = (ma[i], mb[i]);
                let va = saa[i] - mua * mua;
                let vb = sbb[i] - mub * mub;
                let cov = sab[i] - mua * mub;
                ((2.0 * mua * mub + c1) * (2.0 * cov + c2)) / ((mua * mua + mub * mub + c1) * (va + vb + c2))
            })
            .sum();
        total += map_sum / ma.len() as f64;
    }
    Ok(total / ch as f64)
}

/// Drift of an instance: the distance between `x` and its one-step
/// enhancement, `D(F(x), x)`.
pub fn drift(model: &dyn Enhancer, x: &ImageBuffer, kind: Distance) -> Result<f64> {
    let mut tape = Tape::frozen();
    let input = tape.constant(x.to_tensor());
    drift_on_tape(&mut tape, model, input, kind)
}

/// Drift of an arbitrary input tensor already recorded on `tape`.
pub fn drift_on_tape(tape: &mut Tape, model: &dyn Enhancer, input: crate::autodiff::Var, kind: Distance) -> Result<f64> {
    let out = model.enhance(tape, input)?;
    let d = distance(tape, out, input, kind)?;
    Ok(tape.value(d).item())
}
