//! Deterministic JPEG-style codec simulator.
//!
//! Each 8×8 block of every channel is level-shifted, transformed with an
//! orthonormal DCT-II, quantized with round-half-away-from-zero against a
//! quality-scaled luminance table, dequantized and inverted. No bitstream is
//! produced; only the reconstruction matters here. All channels share the
//! luminance table.

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{clamp_unit, ImageBuffer};

pub const BLOCK: usize = 8;

/// Standard luminance quantization table (ITU T.81 Annex K), row-major.
pub const BASE_LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Scales the base luminance table for a quality factor in `1..=100`.
pub fn quant_table_for_quality(quality: i64) -> Result<[u16; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::QualityOutOfRange(quality));
    }
    let scale = if quality < 50 { 5000 / quality } else { 200 - 2 * quality };
    let mut table = [0u16; 64];
    for (out, &base) in table.iter_mut().zip(BASE_LUMA_TABLE.iter()) {
        *out = ((i64::from(base) * scale + 50) / 100).clamp(1, 255) as u16;
    }
    Ok(table)
}

/// Codec operating point. `table` is derived from `quality`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodecConfig {
    quality: u8,
    table: [u16; 64],
}

impl CodecConfig {
    pub fn new(quality: i64) -> Result<Self> {
        Ok(CodecConfig {
            quality: quality as u8,
            table: quant_table_for_quality(quality)?,
        })
    }

    pub fn quality(&self) -> u8 {
        self.quality
    }

    pub fn luma_quant_table(&self) -> &[u16; 64] {
        &self.table
    }

    pub fn block_size(&self) -> usize {
        BLOCK
    }
}

/// A codec setting as named in experiments: JPEG-style quality factors, or
/// the HEVC-style QP stand-in mapped onto the same simulator by
/// `quality = 100 - 2·QP`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "codec", content = "level", rename_all = "snake_case")]
pub enum CodecSetting {
    Jpeg(u8),
    BpgStandIn(u8),
}

impl CodecSetting {
    pub fn quality(self) -> i64 {
        match self {
            CodecSetting::Jpeg(q) => i64::from(q),
            CodecSetting::BpgStandIn(qp) => 100 - 2 * i64::from(qp),
        }
    }

    pub fn config(self) -> Result<CodecConfig> {
        CodecConfig::new(self.quality())
    }

    pub fn codec_name(self) -> &'static str {
        match self {
            CodecSetting::Jpeg(_) => "jpeg",
            CodecSetting::BpgStandIn(_) => "bpg_standin",
        }
    }

    pub fn level(self) -> u8 {
        match self {
            CodecSetting::Jpeg(l) | CodecSetting::BpgStandIn(l) => l,
        }
    }

    /// Parses `jpeg:40` or `bpg:37`.
    pub fn parse(s: &str) -> Result<Self> {
        let (codec, level) = s
            .split_once(':')
            .ok_or_else(|| Error::config("codec", format!("`{s}` is not of the form codec:level")))?;
        let level: u8 = level
            .parse()
            .map_err(|_| Error::config("codec", format!("bad level in `{s}`")))?;
        let setting = match codec {
            "jpeg" => CodecSetting::Jpeg(level),
            "bpg" | "bpg_standin" => CodecSetting::BpgStandIn(level),
            other => return Err(Error::config("codec", format!("unknown codec `{other}`"))),
        };
        quant_table_for_quality(setting.quality())?;
        Ok(setting)
    }
}

impl fmt::Display for CodecSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodecSetting::Jpeg(q) => write!(f, "jpeg:{q}"),
            CodecSetting::BpgStandIn(qp) => write!(f, "bpg:{qp}"),
        }
    }
}

/// Orthonormal DCT-II basis, `basis[k][n] = c(k) cos((2n+1)kπ/16)`.
fn dct_basis() -> &'static [[f64; BLOCK]; BLOCK] {
    static BASIS: OnceLock<[[f64; BLOCK]; BLOCK]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut m = [[0.0; BLOCK]; BLOCK];
        for (k, row) in m.iter_mut().enumerate() {
            let c = if k == 0 {
                (1.0 / BLOCK as f64).sqrt()
            } else {
                (2.0 / BLOCK as f64).sqrt()
            };
            for (n, v) in row.iter_mut().enumerate() {
                *v = c * ((2 * n + 1) as f64 * k as f64 * std::f64::consts::PI / (2 * BLOCK) as f64).cos();
            }
        }
        m
    })
}

type Block = [[f64; BLOCK]; BLOCK];

pub fn forward_dct(block: &Block) -> Block {
    let b = dct_basis();
    let mut tmp = [[0.0; BLOCK]; BLOCK];
    // rows: tmp = block · Bᵀ
    for y in 0..BLOCK {
        for k in 0..BLOCK {
            tmp[y][k] = (0..BLOCK).map(|n| block[y][n] * b[k][n]).sum();
        }
    }
    let mut out = [[0.0; BLOCK]; BLOCK];
    for k in 0..BLOCK {
        for x in 0..BLOCK {
            out[k][x] = (0..BLOCK).map(|n| b[k][n] * tmp[n][x]).sum();
        }
    }
    out
}

pub fn inverse_dct(coeffs: &Block) -> Block {
    let b = dct_basis();
    let mut tmp = [[0.0; BLOCK]; BLOCK];
    for y in 0..BLOCK {
        for n in 0..BLOCK {
            tmp[y][n] = (0..BLOCK).map(|k| coeffs[y][k] * b[k][n]).sum();
        }
    }
    let mut out = [[0.0; BLOCK]; BLOCK];
    for n in 0..BLOCK {
        for x in 0..BLOCK {
            out[n][x] = (0..BLOCK).map(|k| b[k][n] * tmp[k][x]).sum();
        }
    }
    out
}

/// Compress-decompress round trip. Dimensions that are not multiples of 8
/// are padded by edge replication and cropped back afterwards.
pub fn encode_decode(img: &ImageBuffer, cfg: &CodecConfig) -> Result<ImageBuffer> {
    if img.is_empty() {
        return Err(Error::InvalidImage("empty image".into()));
    }
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let ph = h.div_ceil(BLOCK) * BLOCK;
    let pw = w.div_ceil(BLOCK) * BLOCK;
    // Samples are scaled to the 0..255 range the tables are defined for.
    let shift = 128.0;
    let mut out = vec![0.0; h * w * ch];

    for c in 0..ch {
        for by in (0..ph).step_by(BLOCK) {
            for bx in (0..pw).step_by(BLOCK) {
                let mut block = [[0.0; BLOCK]; BLOCK];
                for (dy, row) in block.iter_mut().enumerate() {
                    for (dx, v) in row.iter_mut().enumerate() {
                        let y = (by + dy).min(h - 1);
                        let x = (bx + dx).min(w - 1);
                        *v = img.get(y, x, c) * 255.0 - shift;
                    }
                }
                let mut coeffs = forward_dct(&block);
                for (i, row) in coeffs.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        let q = f64::from(cfg.table[i * BLOCK + j]);
                        *v = (*v / q).round() * q;
                    }
                }
                let rec = inverse_dct(&coeffs);
                for (dy, row) in rec.iter().enumerate() {
                    for (dx, v) in row.iter().enumerate() {
                        let (y, x) = (by + dy, bx + dx);
                        if y < h && x < w {
                            out[(y * w + x) * ch + c] = clamp_unit((v + shift) / 255.0);
                        }
                    }
                }
            }
        }
    }
    ImageBuffer::new(h, w, ch, out)
}
