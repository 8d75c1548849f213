//! Degradation-index and codec oracles shared by the focused tests and the
//! acceptance gate.

use dcqe::codec::{encode_decode, quant_table_for_quality, CodecConfig, BASE_LUMA_TABLE};
use dcqe::desk::{DeskConfig, DeskSet, CODEC_TEST_COUNT};
use dcqe::image::ImageBuffer;
use dcqe::metrics::{degradation_index, psnr, MetricSeries, Orientation};
use rand::Rng;

use super::suites::rng_for;

/// Telescoped form: the total drop is the sum of the per-cycle drops.
pub fn di_by_hand(values: &[f64], orientation: Orientation) -> f64 {
    let steps = (values.len() - 1) as f64;
    let drop: f64 = values.windows(2).map(|w| w[0] - w[1]).sum();
    let sign = match orientation {
        Orientation::HigherBetter => 1.0,
        Orientation::LowerBetter => -1.0,
    };
    sign * 100.0 * drop / (values[0] * steps)
}

#[derive(Debug, Default)]
pub struct DiReport {
    pub max_abs_error: f64,
    pub scale_mismatches: usize,
    pub sign_violations: usize,
}

/// Quality-like series: a first value anywhere from SSIM to PSNR scale and
/// later values within ±50% of it, so that DI stays in the range real
/// reports produce (|DI| ≤ 50).
pub fn random_series(rng: &mut impl Rng) -> Vec<f64> {
    let n = rng.gen_range(2..12);
    let first: f64 = rng.gen_range(0.05..60.0);
    std::iter::once(first)
        .chain((1..n).map(|_| first * (1.0 + rng.gen_range(-0.5..0.5))))
        .collect()
}

pub fn di_checks(count: usize, seed: u64) -> DiReport {
    let mut rng = rng_for(seed.wrapping_add(1 << 50));
    let mut r = DiReport::default();
    for _ in 0..count {
        let values = random_series(&mut rng);
        let orientation = if rng.gen_bool(0.5) {
            Orientation::HigherBetter
        } else {
            Orientation::LowerBetter
        };
        let di = degradation_index(&MetricSeries::new("q", orientation, values.clone())).unwrap();
        r.max_abs_error = r.max_abs_error.max((di - di_by_hand(&values, orientation)).abs());

        // powers of two scale every value without rounding
        let k = rng.gen_range(-20..20);
        let c = 2f64.powi(k);
        let scaled: Vec<f64> = values.iter().map(|v| v * c).collect();
        let di_scaled = degradation_index(&MetricSeries::new("q", orientation, scaled)).unwrap();
        if di_scaled.to_bits() != di.to_bits() {
            r.scale_mismatches += 1;
        }

        // a series that only gets worse under its orientation
        let mut worse = vec![rng.gen_range(1.0..50.0)];
        for _ in 1..values.len() {
            let step = rng.gen_range(0.01..1.0);
            let last = *worse.last().unwrap();
            worse.push(match orientation {
                Orientation::HigherBetter => last * (1.0 - 0.01 * step),
                Orientation::LowerBetter => last * (1.0 + 0.01 * step),
            });
        }
        let better: Vec<f64> = worse.iter().rev().copied().collect();
        let dw = degradation_index(&MetricSeries::new("w", orientation, worse)).unwrap();
        let db = degradation_index(&MetricSeries::new("b", orientation, better)).unwrap();
        if !(dw > 0.0 && db < 0.0) {
            r.sign_violations += 1;
        }
    }
    r
}

#[derive(Debug)]
pub struct CodecReport {
    pub mid_gray_lossless: bool,
    pub q50_is_base: bool,
    pub q100_min_psnr: f64,
    /// Dataset-mean PSNR at qualities 20, 40, 60, 80.
    pub mean_psnr: Vec<(u8, f64)>,
    /// `quality,image,psnr` rows.
    pub csv: String,
}

impl CodecReport {
    pub fn monotone(&self) -> bool {
        self.mean_psnr.windows(2).all(|w| w[0].1 <= w[1].1)
    }
}

pub fn codec_checks(seed: u64) -> CodecReport {
    let gray = ImageBuffer::filled(32, 40, 1, 128.0 / 255.0).unwrap();
    let mid_gray_lossless = [10, 40, 75, 100]
        .iter()
        .all(|&q| encode_decode(&gray, &CodecConfig::new(q).unwrap()).unwrap() == gray);
    let q50_is_base = quant_table_for_quality(50).unwrap() == BASE_LUMA_TABLE;

    let mut rng = rng_for(seed.wrapping_add(1 << 51));
    let q100 = CodecConfig::new(100).unwrap();
    let mut q100_min_psnr = f64::INFINITY;
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(8..48), rng.gen_range(8..48));
        let img = ImageBuffer::new(h, w, 1, (0..h * w).map(|_| rng.gen::<f64>()).collect()).unwrap();
        q100_min_psnr = q100_min_psnr.min(psnr(&encode_decode(&img, &q100).unwrap(), &img).unwrap());
    }

    let set = DeskSet::generate(&DeskConfig {
        seed,
        ..DeskConfig::default()
    })
    .unwrap();
    let images = &set.test[..CODEC_TEST_COUNT];
    let mut csv = String::from("quality,image,psnr\n");
    let mut mean_psnr = Vec::new();
    for q in [20u8, 40, 60, 80] {
        let cfg = CodecConfig::new(q as i64).unwrap();
        let mut sum = 0.0;
        for (i, img) in images.iter().enumerate() {
            let p = psnr(&encode_decode(img, &cfg).unwrap(), img).unwrap();
            csv.push_str(&format!("{q},{i},{p}\n"));
            sum += p;
        }
        mean_psnr.push((q, sum / images.len() as f64));
    }
    CodecReport {
        mid_gray_lossless,
        q50_is_base,
        q100_min_psnr,
        mean_psnr,
        csv,
    }
}
