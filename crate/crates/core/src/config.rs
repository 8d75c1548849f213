//! Run configuration: one TOML document, strictly parsed, with command-line
//! overrides applied on top and echoed back verbatim into every output
//! directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::CodecSetting;
use crate::desk::DeskConfig;
use crate::error::{Error, Result};
use crate::harness::{Case, CycleSpec};
use crate::metrics::Metric;
use crate::models::{ModelFamily, ModelSpec};
use crate::theory::ToyConfig;
use crate::training::{LossWeights, StraightforwardConfig, TrainConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    /// Single-channel (P5) images.
    #[default]
    Luma,
    /// Three-channel (P6) images.
    Rgb,
}

impl Color {
    pub fn channels(self) -> usize {
        match self {
            Color::Luma => 1,
            Color::Rgb => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of training PNMs; the built-in desk set when absent.
    pub train: Option<PathBuf>,
    /// Directory of evaluation PNMs; the desk test split when absent.
    pub test: Option<PathBuf>,
    /// Single image for the `cycle` command.
    pub image: Option<PathBuf>,
    pub color: Color,
    /// Codec producing the training inputs, e.g. `jpeg:40`.
    pub codec: String,
    pub desk_train: usize,
    pub desk_test: usize,
    pub desk_size: usize,
    pub desk_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let d = DeskConfig::default();
        DataConfig {
            train: None,
            test: None,
            image: None,
            color: Color::Luma,
            codec: "jpeg:40".into(),
            desk_train: d.train,
            desk_test: d.test,
            desk_size: d.size,
            desk_seed: d.seed,
        }
    }
}

impl DataConfig {
    pub fn desk(&self) -> DeskConfig {
        DeskConfig {
            train: self.desk_train,
            test: self.desk_test,
            size: self.desk_size,
            seed: self.desk_seed,
        }
    }

    pub fn codec_setting(&self) -> Result<CodecSetting> {
        CodecSetting::parse(&self.codec).map_err(|e| Error::config("data.codec", e.to_string()))
    }
}

/// Model family with optional overrides of its desk-scale defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub family: ModelFamily,
    pub channels_hidden: Option<usize>,
    pub depth: Option<usize>,
    pub kernel_sizes: Option<Vec<usize>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            family: ModelFamily::DncnnLike,
            channels_hidden: None,
            depth: None,
            kernel_sizes: None,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, channels_in: usize) -> Result<ModelSpec> {
        let mut spec = match self.family {
            ModelFamily::ArcnnLike => ModelSpec::arcnn_like(channels_in),
            ModelFamily::DncnnLike => {
                let base = ModelSpec::dncnn_like(channels_in);
                ModelSpec::dncnn_with(
                    channels_in,
                    self.channels_hidden.unwrap_or(base.channels_hidden),
                    self.depth.unwrap_or(base.depth),
                )
            }
        };
        if let Some(h) = self.channels_hidden {
            spec.channels_hidden = h;
        }
        if let (ModelFamily::ArcnnLike, Some(d)) = (self.family, self.depth) {
            spec.depth = d;
        }
        if let Some(k) = &self.kernel_sizes {
            spec.kernel_sizes = k.clone();
        }
        spec.validate().map_err(|e| Error::config("model", e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Per-cycle CSV written by `experiment` or `cycle`.
    pub input: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: String,
    /// The single run seed; copied into every stage by [`RunConfig::resolve`].
    pub seed: u64,
    /// Harness worker threads; 0 means one per available processor.
    pub workers: usize,
    pub out: PathBuf,
    pub metrics: Vec<Metric>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub straightforward: StraightforwardConfig,
    pub cycles: CycleSpec,
    pub toy: ToyConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            seed: 0,
            workers: 0,
            out: PathBuf::from("runs/latest"),
            metrics: vec![Metric::Psnr, Metric::Ssim],
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            straightforward: StraightforwardConfig::default(),
            cycles: CycleSpec::default(),
            toy: ToyConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub cycles: Option<usize>,
    /// Sets both the training codec and the evaluation codec pool to `jpeg:Q`.
    pub quality: Option<u8>,
    pub case: Option<Case>,
    pub lambda_iden: Option<f64>,
    pub lambda_idem: Option<f64>,
    pub lambda_comp: Option<f64>,
    pub a: Option<f64>,
}

impl RunConfig {
    /// Strict parse: unknown keys and type mismatches are reported with
    /// their key path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().message().trim().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<echo>", e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(n) = o.cycles {
            self.cycles.cycles = n;
        }
        if let Some(q) = o.quality {
            let setting = format!("jpeg:{q}");
            CodecSetting::parse(&setting).map_err(|e| Error::config("--quality", e.to_string()))?;
            self.data.codec = setting.clone();
            self.cycles.codecs = vec![setting];
        }
        if let Some(c) = o.case {
            self.cycles.case = c;
        }
        if let Some(v) = o.lambda_iden {
            self.loss.lambda_iden = v;
        }
        if let Some(v) = o.lambda_idem {
            self.loss.lambda_idem = v;
        }
        if let Some(v) = o.lambda_comp {
            self.loss.lambda_comp = v;
        }
        if let Some(v) = o.a {
            self.loss.a = v;
        }
        Ok(())
    }

    /// Propagates the run seed into every stage and validates cross-field
    /// constraints. Idempotent.
    pub fn resolve(&mut self) -> Result<()> {
        self.train.seed = self.seed;
        self.cycles.seed = self.seed;
        self.toy.seed = self.seed;
        if self.metrics.is_empty() {
            return Err(Error::config("metrics", "at least one metric is required"));
        }
        self.data.codec_setting()?;
        self.cycles
            .codec_settings()
            .map_err(|e| Error::config("cycles.codecs", e.to_string()))?;
        self.model.spec(self.data.color.channels())?;
        self.train.validate()?;
        self.loss.validate()?;
        self.straightforward.validate()?;
        self.toy.validate()?;
        Ok(())
    }

    pub fn workers(&self) -> usize {
        if self.workers > 0 {
            self.workers
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        self.model.spec(self.data.color.channels())
    }
}
