//! Small convolutional enhancement networks and their checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::rng::{stream_rng, Stream};

/// Anything that maps a recorded NCHW (or N×D) input to an output of the same
/// shape on a tape. Training objectives are written against this trait, so
/// the image networks and the toy networks share one loss implementation.
pub trait Enhancer {
    fn enhance(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    /// Four stages: feature extraction, enhancement, mapping, reconstruction.
    ArcnnLike,
    /// Plain stack of 3×3 convolutions predicting a residual correction.
    DncnnLike,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub channels_in: usize,
    pub channels_hidden: usize,
    pub depth: usize,
    pub residual: bool,
    pub kernel_sizes: Vec<usize>,
}

impl ModelSpec {
    /// 9-7-1-5 kernels with 32/16/16 hidden channels.
    pub fn arcnn_like(channels_in: usize) -> Self {
        ModelSpec {
            family: ModelFamily::ArcnnLike,
            channels_in,
            channels_hidden: 32,
            depth: 4,
            residual: false,
            kernel_sizes: vec![9, 7, 1, 5],
        }
    }

    /// Depth 8, 3×3 kernels, 32 channels.
    pub fn dncnn_like(channels_in: usize) -> Self {
        ModelSpec::dncnn_with(channels_in, 32, 8)
    }

    pub fn dncnn_with(channels_in: usize, channels_hidden: usize, depth: usize) -> Self {
        ModelSpec {
            family: ModelFamily::DncnnLike,
            channels_in,
            channels_hidden,
            depth,
            residual: true,
            kernel_sizes: vec![3; depth],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidSpec(m));
        if self.channels_in == 0 || self.channels_hidden == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.kernel_sizes.len() != self.depth {
            return fail(format!("{} kernel sizes for depth {}", self.kernel_sizes.len(), self.depth));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return fail(format!("kernel size {k} is even"));
        }
        match self.family {
            ModelFamily::ArcnnLike => {
                if self.depth != 4 || self.residual {
                    return fail("arcnn_like needs exactly 4 layers and residual = false".into());
                }
                if self.channels_hidden < 2 {
                    return fail("arcnn_like needs at least 2 hidden channels".into());
                }
            }
            ModelFamily::DncnnLike => {
                if self.depth < 3 || !self.residual {
                    return fail("dncnn_like needs depth >= 3 and residual = true".into());
                }
            }
        }
        Ok(())
    }

    /// `(out, in, kernel)` for every layer in order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (c, h) = (self.channels_in, self.channels_hidden);
        let widths: Vec<usize> = match self.family {
            ModelFamily::ArcnnLike => vec![c, h, h / 2, h / 2, c],
            ModelFamily::DncnnLike => {
                let mut w = vec![c];
                w.extend(std::iter::repeat_n(h, self.depth - 1));
                w.push(c);
                w
            }
        };
        widths
            .windows(2)
            .zip(&self.kernel_sizes)
            .map(|(io, &k)| (io[1], io[0], k))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|&(o, i, k)| o * i * k * k + o).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    pub fn zeros(spec: &ModelSpec) -> Self {
        ModelParams {
            layers: spec
                .layer_shapes()
                .into_iter()
                .map(|(o, i, k)| LayerParams {
                    weight: Tensor::zeros(vec![o, i, k, k]),
                    bias: Tensor::zeros(vec![o]),
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    pub fn check_shapes(&self, spec: &ModelSpec) -> Result<()> {
        let shapes = spec.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::InvalidSpec(format!(
                "{} layers in parameters, {} in spec",
                self.layers.len(),
                shapes.len()
            )));
        }
        for (l, &(o, i, k)) in self.layers.iter().zip(&shapes) {
            if l.weight.shape() != [o, i, k, k] || l.bias.shape() != [o] {
                return Err(Error::InvalidSpec(format!(
                    "layer shapes {:?}/{:?} do not match {o}×{i}×{k}×{k}",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
        }
        Ok(())
    }
}

/// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = stream_rng(seed, Stream::Init);
    let mut params = ModelParams::zeros(spec);
    for (layer, &(_, i, k)) in params.layers.iter_mut().zip(&spec.layer_shapes()) {
        let std = (2.0 / (i * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        layer.weight.data_mut().iter_mut().for_each(|w| *w = normal.sample(&mut rng));
    }
    Ok(params)
}

/// Parameters recorded on a tape, ready for forward passes.
pub struct BoundModel<'a> {
    pub spec: &'a ModelSpec,
    pub vars: Vec<(Var, Var)>,
}

impl<'a> BoundModel<'a> {
    /// Registers parameters as trainable leaves.
    pub fn trainable(tape: &mut Tape, spec: &'a ModelSpec, params: &ModelParams) -> Self {
        Self::bind(tape, spec, params, true)
    }

    /// Registers parameters as constants.
    pub fn fixed(tape: &mut Tape, spec: &'a ModelSpec, params: &ModelParams) -> Self {
        Self::bind(tape, spec, params, false)
    }

    fn bind(tape: &mut Tape, spec: &'a ModelSpec, params: &ModelParams, trainable: bool) -> Self {
        let vars = params
            .layers
            .iter()
            .map(|l| (tape.leaf(l.weight.clone(), trainable), tape.leaf(l.bias.clone(), trainable)))
            .collect();
        BoundModel { spec, vars }
    }

    pub fn param_vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().flat_map(|&(w, b)| [w, b])
    }
}

impl Enhancer for BoundModel<'_> {
    /// Conv layers with ReLU on hidden layers and none on the output;
    /// residual models add the input back. Output is not clamped.
    fn enhance(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != self.spec.channels_in {
            return Err(Error::ShapeMismatch {
                op: "model forward",
                left: shape.to_vec(),
                right: vec![0, self.spec.channels_in, 0, 0],
            });
        }
        let last = self.vars.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.vars.iter().enumerate() {
            h = tape.conv2d(h, w, b)?;
            if i != last {
                h = tape.relu(h);
            }
        }
        if self.spec.residual {
            h = tape.add(x, h)?;
        }
        Ok(h)
    }
}

/// Convenience forward on a fresh tape.
pub fn forward(params: &ModelParams, spec: &ModelSpec, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::frozen();
    let model = BoundModel::fixed(&mut tape, spec, params);
    let input = tape.constant(x.clone());
    let out = model.enhance(&mut tape, input)?;
    Ok(tape.value(out).clone())
}

/// A trained model applied to whole images.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ModelParams,
}

impl Model {
    pub fn new(spec: ModelSpec, params: ModelParams) -> Result<Self> {
        spec.validate()?;
        params.check_shapes(&spec)?;
        Ok(Model { spec, params })
    }

    /// One enhancement; the result is clamped into `[0, 1]`.
    pub fn enhance_image(&self, img: &ImageBuffer) -> Result<ImageBuffer> {
        let out = forward(&self.params, &self.spec, &img.to_tensor())?;
        if !out.is_finite() {
            return Err(Error::NonFinite("model output".into()));
        }
        ImageBuffer::from_tensor_clamped(&out)
    }

    pub fn enhance_image_raw(&self, img: &ImageBuffer) -> Result<Tensor> {
        forward(&self.params, &self.spec, &img.to_tensor())
    }
}

/// Owned image model usable wherever an [`Enhancer`] is expected.
pub struct FixedModel<'a>(pub &'a Model);

impl Enhancer for FixedModel<'_> {
    fn enhance(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let bound = BoundModel::fixed(tape, &self.0.spec, &self.0.params);
        bound.enhance(tape, x)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DCQECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint layout, all integers u32 LE and reals f64 LE:
///
/// ```text
/// magic "DCQECKPT" | version
/// family (0 arcnn_like, 1 dncnn_like) | channels_in | channels_hidden | depth
/// residual (0/1) | kernel count | kernel sizes...
/// tensor count | per tensor: rank | dims... | values...
/// ```
///
/// Tensors appear in declaration order: weight then bias for each layer.
pub fn write_checkpoint(w: &mut impl Write, model: &Model) -> std::io::Result<()> {
    let spec = &model.spec;
    let u32s = |w: &mut dyn Write, v: usize| w.write_all(&(v as u32).to_le_bytes());
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let family = match spec.family {
        ModelFamily::ArcnnLike => 0,
        ModelFamily::DncnnLike => 1,
    };
    u32s(w, family)?;
    u32s(w, spec.channels_in)?;
    u32s(w, spec.channels_hidden)?;
    u32s(w, spec.depth)?;
    u32s(w, spec.residual as usize)?;
    u32s(w, spec.kernel_sizes.len())?;
    for &k in &spec.kernel_sizes {
        u32s(w, k)?;
    }
    let tensors: Vec<&Tensor> = model.params.tensors().collect();
    u32s(w, tensors.len())?;
    for t in tensors {
        u32s(w, t.shape().len())?;
        for &d in t.shape() {
            u32s(w, d)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<'a, R: Read> {
    inner: &'a mut R,
    offset: usize,
}

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated at byte {}: {e}", self.offset)))?;
        self.offset += N;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes::<4>()?) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes::<8>()?))
    }
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Model> {
    let mut rd = Reader { inner: r, offset: 0 };
    if &rd.bytes::<8>()? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = rd.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let family = match rd.u32()? {
        0 => ModelFamily::ArcnnLike,
        1 => ModelFamily::DncnnLike,
        f => return Err(Error::Checkpoint(format!("unknown family {f}"))),
    };
    let channels_in = rd.u32()?;
    let channels_hidden = rd.u32()?;
    let depth = rd.u32()?;
    let residual = rd.u32()? != 0;
    let nk = rd.u32()?;
    if nk > 1024 {
        return Err(Error::Checkpoint(format!("implausible kernel count {nk}")));
    }
    let kernel_sizes = (0..nk).map(|_| rd.u32()).collect::<Result<Vec<_>>>()?;
    let spec = ModelSpec {
        family,
        channels_in,
        channels_hidden,
        depth,
        residual,
        kernel_sizes,
    };
    spec.validate()?;
    let expected = spec.layer_shapes();
    let count = rd.u32()?;
    if count != 2 * expected.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors, spec needs {}",
            2 * expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for &(o, i, k) in &expected {
        for want in [vec![o, i, k, k], vec![o]] {
            let rank = rd.u32()?;
            let dims = (0..rank).map(|_| rd.u32()).collect::<Result<Vec<_>>>()?;
            if dims != want {
                return Err(Error::Checkpoint(format!("tensor shape {dims:?}, expected {want:?}")));
            }
            let n: usize = dims.iter().product();
            let data = (0..n).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push(Tensor::new(dims, data)?);
        }
    }
    let mut trailing = [0u8; 1];
    if rd.inner.read(&mut trailing).map_err(|e| Error::Checkpoint(e.to_string()))? != 0 {
        return Err(Error::Checkpoint(format!("trailing data at byte {}", rd.offset)));
    }
    let mut it = tensors.into_iter();
    let layers = expected
        .iter()
        .map(|_| LayerParams {
            weight: it.next().expect("counted"),
            bias: it.next().expect("counted"),
        })
        .collect();
    Model::new(spec, ModelParams { layers })
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut bytes.as_slice())
}
