//! Procedural grayscale "desk" images: smooth illumination, hard-edged
//! shapes, oriented stripes and sensor noise. Small enough to train on a
//! laptop CPU, varied enough that a block codec leaves visible artifacts.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{save_pnm, ImageBuffer};
use crate::rng::{stream_rng, Stream};

/// Number of leading images of the evaluation split used as the codec test set.
pub const CODEC_TEST_COUNT: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeskConfig {
    pub train: usize,
    pub test: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        DeskConfig {
            train: 50,
            test: 10,
            size: 64,
            seed: 0,
        }
    }
}

pub struct DeskSet {
    pub train: Vec<ImageBuffer>,
    pub test: Vec<ImageBuffer>,
}

impl DeskSet {
    pub fn generate(cfg: &DeskConfig) -> Result<Self> {
        if cfg.size < 8 {
            return Err(Error::Dataset(format!("desk images must be at least 8×8, got {}", cfg.size)));
        }
        let mut rng = stream_rng(cfg.seed, Stream::Dataset);
        let mut make = |n| (0..n).map(|_| desk_image(&mut rng, cfg.size)).collect::<Result<Vec<_>>>();
        let train = make(cfg.train)?;
        let test = make(cfg.test)?;
        Ok(DeskSet { train, test })
    }

    /// Writes `train/desk_000.pgm ...` and `test/desk_000.pgm ...` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for (split, images) in [("train", &self.train), ("test", &self.test)] {
            let sub = dir.join(split);
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for (i, img) in images.iter().enumerate() {
                let path = sub.join(format!("desk_{i:03}.pgm"));
                save_pnm(&path, img)?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

/// One `size`×`size` grayscale image, quantized to byte precision so that it
/// survives a PNM round trip unchanged.
pub fn desk_image(rng: &mut ChaCha8Rng, size: usize) -> Result<ImageBuffer> {
    let n = size as f64;
    let mut px = vec![0.0; size * size];

    // illumination: a tilted plane plus a soft vignette
    let base = rng.gen_range(0.25..0.75);
    let (gx, gy) = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    let (cx, cy) = (rng.gen_range(0.2..0.8) * n, rng.gen_range(0.2..0.8) * n);
    let vignette = rng.gen_range(0.0..0.25);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / n - 0.5, y as f64 / n - 0.5);
            let r2 = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (n * n);
            px[y * size + x] = base + gx * u + gy * v - vignette * r2;
        }
    }

    // hard-edged rectangles and ellipses
    for _ in 0..rng.gen_range(2..6) {
        let level = rng.gen_range(0.0..1.0);
        let alpha = rng.gen_range(0.5..1.0);
        let (x0, y0) = (rng.gen_range(0.0..n), rng.gen_range(0.0..n));
        let (w, h) = (rng.gen_range(0.1..0.5) * n, rng.gen_range(0.1..0.5) * n);
        let ellipse = rng.gen_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - x0, y as f64 - y0);
                let inside = if ellipse {
                    (dx / w).powi(2) + (dy / h).powi(2) <= 1.0
                } else {
                    dx.abs() <= w / 2.0 && dy.abs() <= h / 2.0
                };
                if inside {
                    let p = &mut px[y * size + x];
                    *p = (1.0 - alpha) * *p + alpha * level;
                }
            }
        }
    }

    // oriented stripes inside a band
    if rng.gen_bool(0.7) {
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let period = rng.gen_range(3.0..12.0);
        let amp = rng.gen_range(0.05..0.2);
        let (lo, hi) = {
            let a = rng.gen_range(0.0..n);
            let b = rng.gen_range(0.0..n);
            (a.min(b), a.max(b).max(a.min(b) + n / 4.0))
        };
        let (c, s) = (theta.cos(), theta.sin());
        for y in 0..size {
            if (y as f64) < lo || (y as f64) > hi {
                continue;
            }
            for x in 0..size {
                let t = (x as f64 * c + y as f64 * s) / period;
                px[y * size + x] += amp * (std::f64::consts::TAU * t).sin();
            }
        }
    }

    let noise = Normal::new(0.0, rng.gen_range(0.0..0.02)).expect("valid std");
    for p in &mut px {
        *p += noise.sample(rng);
        *p = (p.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    ImageBuffer::new(size, size, 1, px)
}
