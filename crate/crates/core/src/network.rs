//! The hierarchical scene-coordinate network.
//!
//! A shared convolutional trunk feeds one classification head per tree
//! level plus an optional regression head. Every head except the coarsest
//! is modulated per position by FiLM parameters generated from the one-hot
//! labels of all coarser levels; the regression head sees every level.
//! During training the conditioning labels are the ground truth, at test
//! time the argmax of the heads already evaluated.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{reconstruct, HierarchyError, LabelPath, LabelTree};
use crate::tensor::{
    affine, concat_channels, conv2d, conv2d_backward, conv2d_backward_params, elu, elu_backward, one_hot,
    read_checkpoint, split_channels, write_checkpoint, ConvSpec, Tensor, TensorError,
};

/// ELU slope for negative inputs, used everywhere in the network.
pub const ELU_ALPHA: f64 = 1.0;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("input image must have shape {expected:?}, got {got:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("training-mode forward needs label maps for {expected} levels, got {got}")]
    MissingLabels { expected: usize, got: usize },
    #[error("label map for level {level} is {got:?}, expected {expected:?}")]
    LabelShape { level: usize, expected: (usize, usize), got: (usize, usize) },
    #[error("label {label} at level {level} exceeds class count {count}")]
    LabelRange { level: usize, label: usize, count: usize },
    #[error("tree label counts {tree:?} do not match network levels {network:?}")]
    TreeMismatch { tree: Vec<usize>, network: Vec<usize> },
    #[error("checkpoint does not match the network: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error("config parse error: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("config write error: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture description, stored as TOML next to checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HscNetConfig {
    pub input_height: usize,
    pub input_width: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Channel width of each trunk stage. The first stage keeps full
    /// resolution; the following ones halve it until `output_stride` is reached.
    pub backbone_widths: Vec<usize>,
    /// 3x3 convolutions per trunk stage; the extra ones keep resolution and width.
    #[serde(default = "default_stage_depth")]
    pub stage_depth: usize,
    /// Downsampling from input pixels to the prediction grid (power of two).
    pub output_stride: usize,
    /// Channel width inside every head.
    pub head_width: usize,
    /// Hidden width of the FiLM generators.
    pub generator_hidden: usize,
    /// Class count of each classification level, coarse to fine. Empty for
    /// the regression-only network.
    pub labels_per_level: Vec<usize>,
    /// Dilation of each classification head's context convolution, coarse to
    /// fine; must be non-increasing. The coarsest head additionally works at
    /// twice the output stride, so it has the largest receptive field.
    pub head_dilations: Vec<usize>,
    pub regression_enabled: bool,
    /// Seed for parameter initialization.
    #[serde(default)]
    pub init_seed: u64,
}

fn default_in_channels() -> usize {
    3
}

fn default_stage_depth() -> usize {
    1
}

impl HscNetConfig {
    /// CPU-scale default: 64x64 input, stride 4, labels [4, 4].
    pub fn desk() -> Self {
        Self {
            input_height: 64,
            input_width: 64,
            in_channels: 3,
            backbone_widths: vec![16, 32, 64],
            stage_depth: 2,
            output_stride: 4,
            head_width: 64,
            generator_hidden: 64,
            labels_per_level: vec![4, 4],
            head_dilations: vec![2, 1],
            regression_enabled: true,
            init_seed: 0,
        }
    }

    /// Small network on a 16x16 input, sized for exhaustive gradient checks.
    pub fn tiny(labels_per_level: Vec<usize>) -> Self {
        let head_dilations = (0..labels_per_level.len()).map(|l| (labels_per_level.len() - l).min(2)).collect();
        Self {
            input_height: 16,
            input_width: 16,
            in_channels: 3,
            backbone_widths: vec![4, 8, 8],
            stage_depth: 1,
            output_stride: 4,
            head_width: 8,
            generator_hidden: 8,
            labels_per_level,
            head_dilations,
            regression_enabled: true,
            init_seed: 0,
        }
    }

    /// Full-resolution layout: 640x480 input, stride 8, 25x25 labels.
    pub fn full_scale() -> Self {
        Self {
            input_height: 480,
            input_width: 640,
            in_channels: 3,
            backbone_widths: vec![64, 128, 256, 512],
            stage_depth: 1,
            output_stride: 8,
            head_width: 512,
            generator_hidden: 256,
            labels_per_level: vec![25, 25],
            head_dilations: vec![4, 2],
            regression_enabled: true,
            init_seed: 0,
        }
    }

    /// The same trunk with conditioning and classification heads removed.
    pub fn regression_only(&self) -> Self {
        Self { labels_per_level: Vec::new(), head_dilations: Vec::new(), regression_enabled: true, ..self.clone() }
    }

    pub fn classification_only(&self) -> Self {
        Self { regression_enabled: false, ..self.clone() }
    }

    pub fn levels(&self) -> usize {
        self.labels_per_level.len()
    }

    pub fn grid_size(&self) -> (usize, usize) {
        (self.input_height / self.output_stride, self.input_width / self.output_stride)
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::Config(m));
        if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) {
            return bad(format!("backbone widths must be non-empty and positive: {:?}", self.backbone_widths));
        }
        if [self.in_channels, self.stage_depth, self.head_width, self.generator_hidden].contains(&0) {
            return bad("channel counts and stage depth must be positive".into());
        }
        if !self.output_stride.is_power_of_two() {
            return bad(format!("output stride {} is not a power of two", self.output_stride));
        }
        let downsamplings = self.output_stride.trailing_zeros() as usize;
        if downsamplings >= self.backbone_widths.len() {
            return bad(format!(
                "output stride {} needs at least {} backbone stages",
                self.output_stride,
                downsamplings + 1
            ));
        }
        let cell = if self.levels() > 0 { 2 * self.output_stride } else { self.output_stride };
        if self.input_height == 0
            || self.input_width == 0
            || self.input_height % cell != 0
            || self.input_width % cell != 0
        {
            return bad(format!(
                "input {}x{} must be a positive multiple of {cell}",
                self.input_height, self.input_width
            ));
        }
        if self.labels_per_level.contains(&0) {
            return bad("every level needs at least one label".into());
        }
        if self.head_dilations.len() != self.levels() {
            return bad(format!(
                "{} head dilations given for {} levels",
                self.head_dilations.len(),
                self.levels()
            ));
        }
        if self.head_dilations.contains(&0) || self.head_dilations.windows(2).any(|w| w[1] > w[0]) {
            return bad(format!("head dilations must be positive and non-increasing: {:?}", self.head_dilations));
        }
        if self.levels() == 0 && !self.regression_enabled {
            return bad("network has no heads".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, NetworkError> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String, NetworkError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetworkError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetworkError> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    fn trunk_specs(&self) -> Vec<ConvSpec> {
        let downsamplings = self.output_stride.trailing_zeros() as usize;
        let mut specs = Vec::new();
        let mut prev = self.in_channels;
        for (i, &w) in self.backbone_widths.iter().enumerate() {
            let stride = if i >= 1 && i <= downsamplings { 2 } else { 1 };
            specs.push(ConvSpec::new(prev, w, 3).stride(stride).padding(1));
            for _ in 1..self.stage_depth {
                specs.push(ConvSpec::new(w, w, 3).padding(1));
            }
            prev = w;
        }
        specs.push(ConvSpec::new(prev, prev, 3).padding(1));
        specs
    }

    fn trunk_width(&self) -> usize {
        *self.backbone_widths.last().expect("validated")
    }

    /// Context layers in front of the (optional) conditioning of each head:
    /// classification levels coarse to fine, then regression.
    fn head_context_specs(&self) -> Vec<Vec<ConvSpec>> {
        let (c, h) = (self.trunk_width(), self.head_width);
        let mut heads = Vec::new();
        for (l, &d) in self.head_dilations.iter().enumerate() {
            if l == 0 {
                heads.push(vec![
                    ConvSpec::new(c, h, 3).stride(2).padding(1),
                    ConvSpec::new(h, h, 3).dilation(d).padding(d),
                    ConvSpec::new(h, h, 4).stride(2).padding(1).transposed(),
                ]);
            } else {
                heads.push(vec![ConvSpec::new(c, h, 3).dilation(d).padding(d)]);
            }
        }
        if self.regression_enabled {
            heads.push(vec![ConvSpec::new(c, h, 3).padding(1)]);
        }
        heads
    }

    /// Receptive field in input pixels of each head (classification levels
    /// coarse to fine, then regression when enabled).
    pub fn receptive_fields(&self) -> Vec<f64> {
        let (mut r, mut j) = (1.0, 1.0);
        for s in self.trunk_specs() {
            grow_receptive_field(&s, &mut r, &mut j);
        }
        self.head_context_specs()
            .iter()
            .map(|specs| {
                let (mut hr, mut hj) = (r, j);
                for s in specs {
                    grow_receptive_field(s, &mut hr, &mut hj);
                }
                hr
            })
            .collect()
    }
}

fn grow_receptive_field(s: &ConvSpec, r: &mut f64, j: &mut f64) {
    let span = (s.dilation * (s.kernel.0 - 1) + 1) as f64;
    if s.transposed {
        *j /= s.stride as f64;
        *r += ((span / s.stride as f64).ceil() - 1.0) * *j;
    } else {
        *r += (span - 1.0) * *j;
        *j *= s.stride as f64;
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Gradients aligned with [`Params`].
pub type Gradients = Vec<Tensor>;

impl Params {
    fn add(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_gradients(&self) -> Gradients {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    spec: ConvSpec,
    w: usize,
    b: usize,
    elu: bool,
}

/// A chain of convolutions, each optionally followed by ELU.
#[derive(Debug, Clone)]
struct ConvStack {
    layers: Vec<ConvLayer>,
}

impl ConvStack {
    /// Creates parameters for `specs`; the last layer is linear unless
    /// `elu_last` is set.
    fn build(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        specs: &[ConvSpec],
        elu_last: bool,
        last_gain: f64,
    ) -> Self {
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let last = i + 1 == specs.len();
                let [a, b, kh, kw] = spec.weight_shape();
                let fan_in = if spec.transposed {
                    (spec.in_channels * kh * kw) as f64 / (spec.stride * spec.stride) as f64
                } else {
                    (spec.in_channels * kh * kw) as f64
                };
                // He-uniform: variance 2 / fan_in
                let bound = (6.0 / fan_in).sqrt() * if last { last_gain } else { 1.0 };
                let w = Tensor::from_fn(&[a, b, kh, kw], |_| rng.gen_range(-bound..bound));
                let w = params.add(format!("{prefix}.{i}.weight"), w);
                let b = params.add(format!("{prefix}.{i}.bias"), Tensor::zeros(&[spec.out_channels]));
                ConvLayer { spec: *spec, w, b, elu: !last || elu_last }
            })
            .collect();
        Self { layers }
    }

    /// Returns the input followed by every layer's output.
    fn forward(&self, params: &Params, x: &Tensor) -> Result<Vec<Tensor>, NetworkError> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for l in &self.layers {
            let y = conv2d(acts.last().unwrap(), params.get(l.w), params.get(l.b), &l.spec)?;
            acts.push(if l.elu { elu(&y, ELU_ALPHA) } else { y });
        }
        Ok(acts)
    }

    fn backward(
        &self,
        params: &Params,
        acts: &[Tensor],
        dout: Tensor,
        grads: &mut Gradients,
        want_dx: bool,
    ) -> Result<Option<Tensor>, NetworkError> {
        let mut d = dout;
        for (i, l) in self.layers.iter().enumerate().rev() {
            if l.elu {
                d = elu_backward(&acts[i + 1], &d, ELU_ALPHA);
            }
            if i > 0 || want_dx {
                let g = conv2d_backward(&acts[i], params.get(l.w), &l.spec, &d)?;
                grads[l.w].data_mut().iter_mut().zip(g.dw.data()).for_each(|(a, b)| *a += b);
                grads[l.b].data_mut().iter_mut().zip(g.db.data()).for_each(|(a, b)| *a += b);
                d = g.dx;
            } else {
                let (dw, db) = conv2d_backward_params(&acts[i], params.get(l.w), &l.spec, &d)?;
                grads[l.w].data_mut().iter_mut().zip(dw.data()).for_each(|(a, b)| *a += b);
                grads[l.b].data_mut().iter_mut().zip(db.data()).for_each(|(a, b)| *a += b);
                return Ok(None);
            }
        }
        Ok(Some(d))
    }
}

/// Per-position scale and shift for a conditioned feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FiLMParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// `elu(gamma * x + beta)`, elementwise.
pub fn film_condition(x: &Tensor, params: &FiLMParams) -> Result<Tensor, NetworkError> {
    Ok(elu(&affine(x, &params.gamma, &params.beta)?, ELU_ALPHA))
}

/// Per-position label map on the prediction grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Self {
        assert_eq!(labels.len(), height * width, "label map size");
        Self { height, width, labels }
    }

    pub fn filled(height: usize, width: usize, label: usize) -> Self {
        Self { height, width, labels: vec![label; height * width] }
    }
}

/// FiLM generator: one-hot labels of the conditioning levels, concatenated,
/// through 1x1 convolutions with ELU between them. The last layer is linear
/// and emits gamma then beta.
#[derive(Debug, Clone)]
pub struct Generator {
    stack: ConvStack,
    label_counts: Vec<usize>,
    channels: usize,
}

impl Generator {
    fn build(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        label_counts: &[usize],
        hidden: usize,
        channels: usize,
    ) -> Self {
        let input: usize = label_counts.iter().sum();
        let specs = [ConvSpec::new(input, hidden, 1), ConvSpec::new(hidden, 2 * channels, 1)];
        let stack = ConvStack::build(params, rng, prefix, &specs, false, 0.1);
        // start as the identity modulation: gamma = 1, beta = 0
        let last = stack.layers.last().unwrap().b;
        params.get_mut(last).data_mut()[..channels].iter_mut().for_each(|v| *v = 1.0);
        Self { stack, label_counts: label_counts.to_vec(), channels }
    }

    pub fn label_counts(&self) -> &[usize] {
        &self.label_counts
    }

    fn encode(&self, labels: &[LabelMap]) -> Result<Tensor, NetworkError> {
        let maps = labels
            .iter()
            .zip(&self.label_counts)
            .enumerate()
            .map(|(level, (m, &count))| {
                if let Some(&label) = m.labels.iter().find(|&&l| l >= count) {
                    return Err(NetworkError::LabelRange { level, label, count });
                }
                Ok(one_hot(&m.labels, count, m.height, m.width)?)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(concat_channels(&maps.iter().collect::<Vec<_>>())?)
    }

    fn run(&self, params: &Params, labels: &[LabelMap]) -> Result<(FiLMParams, Vec<Tensor>), NetworkError> {
        if labels.len() != self.label_counts.len() {
            return Err(NetworkError::MissingLabels { expected: self.label_counts.len(), got: labels.len() });
        }
        let acts = self.stack.forward(params, &self.encode(labels)?)?;
        let mut parts = split_channels(acts.last().unwrap(), &[self.channels, self.channels])?.into_iter();
        let gamma = parts.next().unwrap();
        let beta = parts.next().unwrap();
        Ok((FiLMParams { gamma, beta }, acts))
    }

    /// FiLM parameters for the given label maps (one per conditioning level).
    pub fn generate(&self, params: &Params, labels: &[LabelMap]) -> Result<FiLMParams, NetworkError> {
        Ok(self.run(params, labels)?.0)
    }
}

#[derive(Debug, Clone)]
struct Head {
    context: ConvStack,
    generator: Option<Generator>,
    output: ConvStack,
}

#[derive(Debug, Clone)]
struct FilmCache {
    gen_acts: Vec<Tensor>,
    film: FiLMParams,
    modulated: Tensor,
}

#[derive(Debug, Clone)]
struct HeadCache {
    context: Vec<Tensor>,
    film: Option<FilmCache>,
    output: Vec<Tensor>,
}

impl Head {
    fn forward(
        &self,
        params: &Params,
        feat: &Tensor,
        labels: &[LabelMap],
    ) -> Result<(Tensor, HeadCache), NetworkError> {
        let context = self.context.forward(params, feat)?;
        let z = context.last().unwrap();
        let (hidden, film) = match &self.generator {
            None => (z.clone(), None),
            Some(g) => {
                let (film, gen_acts) = g.run(params, labels)?;
                let modulated = film_condition(z, &film)?;
                (modulated.clone(), Some(FilmCache { gen_acts, film, modulated }))
            }
        };
        let output = self.output.forward(params, &hidden)?;
        let out = output.last().unwrap().clone();
        Ok((out, HeadCache { context, film, output }))
    }

    fn backward(
        &self,
        params: &Params,
        cache: &HeadCache,
        dout: Tensor,
        grads: &mut Gradients,
    ) -> Result<Tensor, NetworkError> {
        let dh = self.output.backward(params, &cache.output, dout, grads, true)?.unwrap();
        let dz = match (&self.generator, &cache.film) {
            (Some(g), Some(fc)) => {
                let da = elu_backward(&fc.modulated, &dh, ELU_ALPHA);
                let z = cache.context.last().unwrap();
                let mul = |a: &Tensor, b: &Tensor| Tensor::from_fn(a.shape(), |i| a.data()[i] * b.data()[i]);
                let dgamma = mul(&da, z);
                let dz = mul(&da, &fc.film.gamma);
                let dgen = concat_channels(&[&dgamma, &da])?;
                g.stack.backward(params, &fc.gen_acts, dgen, grads, false)?;
                dz
            }
            _ => dh,
        };
        Ok(self.context.backward(params, &cache.context, dz, grads, true)?.unwrap())
    }
}

/// Head outputs on the prediction grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutput {
    /// `(K_l, H/stride, W/stride)` logits per level, coarse to fine.
    pub class_logits: Vec<Tensor>,
    /// `(3, H/stride, W/stride)` offsets in meters from the finest cluster center.
    pub regression: Option<Tensor>,
}

/// Upstream gradients for [`HscNet::backward`]; `None` means zero.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    pub class_logits: Vec<Option<Tensor>>,
    pub regression: Option<Tensor>,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    trunk: Vec<Tensor>,
    heads: Vec<HeadCache>,
    /// Conditioning labels actually used, one map per level.
    pub labels: Vec<LabelMap>,
}

#[derive(Debug, Clone)]
pub struct HscNet {
    config: HscNetConfig,
    params: Params,
    trunk: ConvStack,
    heads: Vec<Head>,
}

impl HscNet {
    /// Builds the network with parameters drawn from `config.init_seed`.
    pub fn new(config: HscNetConfig) -> Result<Self, NetworkError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = Params::default();
        let trunk = ConvStack::build(&mut params, &mut rng, "trunk", &config.trunk_specs(), true, 1.0);
        let h = config.head_width;
        let mut heads = Vec::new();
        for (i, context_specs) in config.head_context_specs().into_iter().enumerate() {
            let is_regression = i == config.levels();
            let prefix = if is_regression { "regression".to_string() } else { format!("level{i}") };
            let conditioned_on = &config.labels_per_level[..i.min(config.levels())];
            let conditioned = !conditioned_on.is_empty();
            let context =
                ConvStack::build(&mut params, &mut rng, &format!("{prefix}.context"), &context_specs, !conditioned, 1.0);
            let generator = conditioned.then(|| {
                Generator::build(&mut params, &mut rng, &format!("{prefix}.film"), conditioned_on, config.generator_hidden, h)
            });
            let out_channels = if is_regression { 3 } else { config.labels_per_level[i] };
            let output = ConvStack::build(
                &mut params,
                &mut rng,
                &format!("{prefix}.output"),
                &[ConvSpec::new(h, h, 1), ConvSpec::new(h, out_channels, 1)],
                false,
                0.1,
            );
            heads.push(Head { context, generator, output });
        }
        Ok(Self { config, params, trunk, heads })
    }

    pub fn config(&self) -> &HscNetConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Generator of classification level `level` (`levels()` selects the
    /// regression head); `None` for unconditioned heads.
    pub fn generator(&self, level: usize) -> Option<&Generator> {
        self.heads.get(level).and_then(|h| h.generator.as_ref())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.config.in_channels, self.config.input_height, self.config.input_width]
    }

    /// Test mode when `conditioning` is `None`, teacher forcing otherwise.
    pub fn forward(&self, image: &Tensor, conditioning: Option<&[LabelMap]>) -> Result<NetworkOutput, NetworkError> {
        Ok(self.forward_cached(image, conditioning)?.0)
    }

    pub fn forward_cached(
        &self,
        image: &Tensor,
        conditioning: Option<&[LabelMap]>,
    ) -> Result<(NetworkOutput, ForwardCache), NetworkError> {
        if image.shape() != self.input_shape() {
            return Err(NetworkError::InputShape { expected: self.input_shape().to_vec(), got: image.shape().to_vec() });
        }
        let levels = self.config.levels();
        let (gh, gw) = self.config.grid_size();
        if let Some(labels) = conditioning {
            let needed = if self.config.regression_enabled { levels } else { levels.saturating_sub(1) };
            if labels.len() < needed {
                return Err(NetworkError::MissingLabels { expected: needed, got: labels.len() });
            }
            for (level, m) in labels.iter().enumerate().take(levels) {
                if (m.height, m.width) != (gh, gw) {
                    return Err(NetworkError::LabelShape { level, expected: (gh, gw), got: (m.height, m.width) });
                }
            }
        }
        let trunk = self.trunk.forward(&self.params, image)?;
        let feat = trunk.last().unwrap();
        let mut used: Vec<LabelMap> = Vec::with_capacity(levels);
        let mut class_logits = Vec::with_capacity(levels);
        let mut caches = Vec::with_capacity(self.heads.len());
        for (l, head) in self.heads.iter().enumerate() {
            let (out, cache) = head.forward(&self.params, feat, &used[..l.min(levels)])?;
            caches.push(cache);
            if l < levels {
                let label = match conditioning {
                    Some(labels) if l < labels.len() => labels[l].clone(),
                    _ => argmax_channels(&out)?,
                };
                used.push(label);
                class_logits.push(out);
            } else {
                return Ok((
                    NetworkOutput { class_logits, regression: Some(out) },
                    ForwardCache { trunk, heads: caches, labels: used },
                ));
            }
        }
        Ok((NetworkOutput { class_logits, regression: None }, ForwardCache { trunk, heads: caches, labels: used }))
    }

    /// Parameter gradients of `<grads, output>` for the pass that produced `cache`.
    pub fn backward(&self, cache: &ForwardCache, grads: &OutputGrads) -> Result<Gradients, NetworkError> {
        let mut out = self.params.zero_gradients();
        let mut dfeat: Option<Tensor> = None;
        let levels = self.config.levels();
        for (l, (head, hc)) in self.heads.iter().zip(&cache.heads).enumerate() {
            let upstream = if l < levels { grads.class_logits.get(l).cloned().flatten() } else { grads.regression.clone() };
            let Some(d) = upstream else { continue };
            let df = head.backward(&self.params, hc, d, &mut out)?;
            match dfeat.as_mut() {
                None => dfeat = Some(df),
                Some(acc) => acc.data_mut().iter_mut().zip(df.data()).for_each(|(a, b)| *a += b),
            }
        }
        if let Some(d) = dfeat {
            self.trunk.backward(&self.params, &cache.trunk, d, &mut out, false)?;
        }
        Ok(out)
    }

    pub fn write_checkpoint(&self, out: impl std::io::Write) -> Result<(), NetworkError> {
        Ok(write_checkpoint(out, self.params.iter())?)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<(), NetworkError> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Replaces all parameters with the checkpoint's, which must match by
    /// name and shape.
    pub fn read_checkpoint(&mut self, input: impl std::io::Read) -> Result<(), NetworkError> {
        let loaded = read_checkpoint(input)?;
        if loaded.len() != self.params.len() {
            return Err(NetworkError::Checkpoint(format!(
                "{} tensors in file, network has {}",
                loaded.len(),
                self.params.len()
            )));
        }
        for (i, (name, t)) in loaded.into_iter().enumerate() {
            if name != self.params.names[i] || t.shape() != self.params.tensors[i].shape() {
                return Err(NetworkError::Checkpoint(format!(
                    "record {i} is {name} {:?}, expected {} {:?}",
                    t.shape(),
                    self.params.names[i],
                    self.params.tensors[i].shape()
                )));
            }
            self.params.tensors[i] = t;
        }
        Ok(())
    }

    pub fn load(config: HscNetConfig, checkpoint: impl AsRef<Path>) -> Result<Self, NetworkError> {
        let mut net = Self::new(config)?;
        net.read_checkpoint(std::fs::File::open(checkpoint)?)?;
        Ok(net)
    }
}

/// Per-position argmax over channels; ties go to the lowest class.
pub fn argmax_channels(logits: &Tensor) -> Result<LabelMap, NetworkError> {
    let (c, h, w) = logits.chw()?;
    let d = logits.data();
    let labels = (0..h * w)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if d[k * h * w + p] > d[best * h * w + p] {
                    best = k;
                }
            }
            best
        })
        .collect();
    Ok(LabelMap::new(h, w, labels))
}

pub fn predict_labels(output: &NetworkOutput) -> Result<Vec<LabelMap>, NetworkError> {
    output.class_logits.iter().map(argmax_channels).collect()
}

/// Scene coordinates on the prediction grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateMap {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<Vector3<f64>>,
    pub labels: Vec<LabelMap>,
}

/// Decodes each grid position's labels to a leaf and adds the regressed
/// offset (zero without a regression head).
///
/// A network without classification levels pairs with a tree whose levels
/// all have a single cluster.
pub fn predict_coordinates(output: &NetworkOutput, tree: &LabelTree) -> Result<CoordinateMap, NetworkError> {
    let labels = predict_labels(output)?;
    let net_counts: Vec<usize> = output.class_logits.iter().map(|t| t.shape()[0]).collect();
    let tree_counts = tree.label_counts();
    let regression_only = net_counts.is_empty() && tree_counts.iter().all(|&k| k == 1);
    if net_counts != tree_counts && !regression_only {
        return Err(NetworkError::TreeMismatch { tree: tree_counts, network: net_counts });
    }
    let (h, w) = match (output.class_logits.first(), &output.regression) {
        (Some(t), _) | (None, Some(t)) => {
            let (_, h, w) = t.chw()?;
            (h, w)
        }
        (None, None) => return Err(NetworkError::Config("output has no heads".into())),
    };
    let n = h * w;
    let coords = (0..n)
        .map(|p| {
            let path = if regression_only {
                LabelPath(vec![0; tree.depth()])
            } else {
                LabelPath(labels.iter().map(|m| m.labels[p]).collect())
            };
            let offset = match &output.regression {
                Some(r) => Vector3::new(r.data()[p], r.data()[n + p], r.data()[2 * n + p]),
                None => Vector3::zeros(),
            };
            Ok(reconstruct(tree, &path, &offset)?)
        })
        .collect::<Result<Vec<_>, NetworkError>>()?;
    Ok(CoordinateMap { height: h, width: w, coords, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::TreeBuildOptions;

    fn random_image(cfg: &HscNetConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[cfg.in_channels, cfg.input_height, cfg.input_width], |_| rng.gen_range(-0.5..0.5))
    }

    fn random_labels(cfg: &HscNetConfig, seed: u64) -> Vec<LabelMap> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = cfg.grid_size();
        cfg.labels_per_level.iter().map(|&k| LabelMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..k)).collect())).collect()
    }

    #[test]
    fn film_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_fn(&[2, 3, 3], |_| rng.gen_range(-2.0..2.0));
        let id = FiLMParams { gamma: Tensor::full(&[2, 3, 3], 1.0), beta: Tensor::zeros(&[2, 3, 3]) };
        assert_eq!(film_condition(&x, &id).unwrap(), elu(&x, 1.0));
        let shift = FiLMParams { gamma: Tensor::zeros(&[2, 3, 3]), beta: Tensor::full(&[2, 3, 3], -0.7) };
        assert!(film_condition(&x, &shift).unwrap().data().iter().all(|&v| v == (-0.7f64).exp_m1()));
        let wrong = FiLMParams { gamma: Tensor::zeros(&[2, 3, 2]), beta: Tensor::zeros(&[2, 3, 2]) };
        assert!(film_condition(&x, &wrong).is_err());
        for _ in 0..100 {
            let shape = [rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4)];
            let x = Tensor::from_fn(&shape, |_| rng.gen_range(-3.0..3.0));
            let g = Tensor::from_fn(&shape, |_| rng.gen_range(-3.0..3.0));
            let b = Tensor::from_fn(&shape, |_| rng.gen_range(-3.0..3.0));
            let y = film_condition(&x, &FiLMParams { gamma: g.clone(), beta: b.clone() }).unwrap();
            for i in 0..x.len() {
                let a = g.data()[i] * x.data()[i] + b.data()[i];
                let e = if a > 0.0 { a } else { a.exp() - 1.0 };
                assert!((y.data()[i] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generator_locality_and_constants() {
        let cfg = HscNetConfig::tiny(vec![3, 2]);
        let mut net = HscNet::new(cfg.clone()).unwrap();
        let (h, w) = cfg.grid_size();
        let maps = vec![LabelMap::new(h, w, (0..h * w).map(|p| [0, 2, 0, 1][p % 4]).collect()), LabelMap::filled(h, w, 1)];
        let g = net.generator(cfg.levels()).unwrap().clone();
        let film = g.generate(net.params(), &maps).unwrap();
        // positions 0 and 2 carry identical label vectors
        let plane = h * w;
        for c in 0..cfg.head_width {
            assert_eq!(film.gamma.data()[c * plane], film.gamma.data()[c * plane + 2]);
            assert_eq!(film.beta.data()[c * plane], film.beta.data()[c * plane + 2]);
        }
        assert!(g.generate(net.params(), &[LabelMap::filled(h, w, 3), maps[1].clone()]).is_err());

        // zero weights: gamma/beta are the last layer's biases
        let last = g.stack.layers.last().unwrap().clone();
        for l in &g.stack.layers {
            net.params_mut().get_mut(l.w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let bias: Vec<f64> = (0..2 * cfg.head_width).map(|i| 0.25 * i as f64 - 1.0).collect();
        net.params_mut().get_mut(last.b).data_mut().copy_from_slice(&bias);
        let film = g.generate(net.params(), &maps).unwrap();
        for c in 0..cfg.head_width {
            assert!(film.gamma.data()[c * plane..(c + 1) * plane].iter().all(|&v| v == bias[c]));
            assert!(film.beta.data()[c * plane..(c + 1) * plane].iter().all(|&v| v == bias[cfg.head_width + c]));
        }
    }

    #[test]
    fn generator_matches_per_pixel_dense_layers() {
        let cfg = HscNetConfig::tiny(vec![3, 2]);
        for seed in 0..10 {
            let net = HscNet::new(HscNetConfig { init_seed: seed, ..cfg.clone() }).unwrap();
            let maps = random_labels(&cfg, seed + 100);
            let g = net.generator(cfg.levels()).unwrap();
            let film = g.generate(net.params(), &maps).unwrap();
            let (h, w) = cfg.grid_size();
            let p = net.params();
            let (l0, l1) = (&g.stack.layers[0], &g.stack.layers[1]);
            for pos in 0..h * w {
                let mut input = vec![0.0; 5];
                input[maps[0].labels[pos]] = 1.0;
                input[3 + maps[1].labels[pos]] = 1.0;
                let hidden: Vec<f64> = (0..cfg.generator_hidden)
                    .map(|o| {
                        let a = p.get(l0.b).data()[o] + (0..5).map(|i| p.get(l0.w).data()[o * 5 + i] * input[i]).sum::<f64>();
                        if a > 0.0 { a } else { a.exp_m1() }
                    })
                    .collect();
                for o in 0..2 * cfg.head_width {
                    let v = p.get(l1.b).data()[o]
                        + (0..cfg.generator_hidden).map(|i| p.get(l1.w).data()[o * cfg.generator_hidden + i] * hidden[i]).sum::<f64>();
                    let got = if o < cfg.head_width {
                        film.gamma.data()[o * h * w + pos]
                    } else {
                        film.beta.data()[(o - cfg.head_width) * h * w + pos]
                    };
                    assert!((got - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn output_shapes_and_receptive_fields() {
        for cfg in [HscNetConfig::desk(), HscNetConfig::tiny(vec![2, 2]), HscNetConfig::tiny(vec![3, 2, 2])] {
            let net = HscNet::new(cfg.clone()).unwrap();
            let out = net.forward(&random_image(&cfg, 1), None).unwrap();
            let (h, w) = cfg.grid_size();
            for (l, t) in out.class_logits.iter().enumerate() {
                assert_eq!(t.shape(), &[cfg.labels_per_level[l], h, w]);
            }
            assert_eq!(out.regression.unwrap().shape(), &[3, h, w]);
            let rf = cfg.receptive_fields();
            assert!(rf.windows(2).all(|p| p[0] >= p[1]), "{rf:?}");
        }
        let big = HscNetConfig { input_height: 32, input_width: 48, ..HscNetConfig::tiny(vec![2, 2]) };
        let out = HscNet::new(big.clone()).unwrap().forward(&random_image(&big, 2), None).unwrap();
        assert_eq!(out.class_logits[1].shape(), &[2, 8, 12]);
        assert!(HscNetConfig { input_height: 20, ..HscNetConfig::tiny(vec![2, 2]) }.validate().is_err());
        assert!(HscNetConfig { head_dilations: vec![1, 2], ..HscNetConfig::tiny(vec![2, 2]) }.validate().is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = HscNetConfig::desk();
        assert_eq!(HscNetConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        assert!(HscNetConfig::from_toml("input_height = 8").is_err());
    }

    #[test]
    fn teacher_forcing_matches_test_mode() {
        let cfg = HscNetConfig::tiny(vec![2, 3]);
        let net = HscNet::new(cfg.clone()).unwrap();
        let img = random_image(&cfg, 3);
        let (test_out, cache) = net.forward_cached(&img, None).unwrap();
        let forced = net.forward(&img, Some(&cache.labels)).unwrap();
        assert_eq!(test_out, forced);
        assert!(matches!(net.forward(&img, Some(&cache.labels[..1])), Err(NetworkError::MissingLabels { .. })));
    }

    #[test]
    fn coarse_label_changes_only_its_position() {
        let cfg = HscNetConfig { input_height: 32, input_width: 32, ..HscNetConfig::tiny(vec![2, 2]) };
        let net = HscNet::new(cfg.clone()).unwrap();
        let img = random_image(&cfg, 4);
        let (gh, gw) = cfg.grid_size();
        assert_eq!((gh, gw), (8, 8));
        let base = random_labels(&cfg, 5);
        let a = net.forward(&img, Some(&base)).unwrap();
        for p in [0, 27, 63] {
            let mut changed = base.clone();
            changed[0].labels[p] = 1 - changed[0].labels[p];
            let b = net.forward(&img, Some(&changed)).unwrap();
            assert_eq!(a.class_logits[0], b.class_logits[0]);
            for t in [(&a.class_logits[1], &b.class_logits[1]), (a.regression.as_ref().unwrap(), b.regression.as_ref().unwrap())] {
                let c = t.0.shape()[0];
                for q in 0..gh * gw {
                    let differs = (0..c).any(|k| t.0.data()[k * 64 + q] != t.1.data()[k * 64 + q]);
                    assert_eq!(differs, q == p, "position {q}");
                }
            }
        }
    }

    #[test]
    fn argmax_rules() {
        let t = Tensor::from_vec(&[3, 1, 2], vec![0.0, 1.0, 5.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(argmax_channels(&t).unwrap().labels, vec![1, 0]);
        assert_eq!(argmax_channels(&Tensor::zeros(&[4, 2, 2])).unwrap().labels, vec![0; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let t = Tensor::from_fn(&[5, 3, 3], |_| rng.gen_range(-1.0..1.0));
            let m = argmax_channels(&t).unwrap();
            for p in 0..9 {
                let vals: Vec<f64> = (0..5).map(|k| t.data()[k * 9 + p]).collect();
                let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(m.labels[p], vals.iter().position(|&v| v == max).unwrap());
            }
        }
    }

    fn tree_for(counts: &[usize]) -> LabelTree {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<_> = (0..400).map(|_| Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))).collect();
        LabelTree::build(&pts, counts, &TreeBuildOptions::default()).unwrap()
    }

    #[test]
    fn coordinates_compose_reconstruct() {
        let tree = tree_for(&[3, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let out = NetworkOutput {
                class_logits: vec![
                    Tensor::from_fn(&[3, 2, 3], |_| rng.gen_range(-1.0..1.0)),
                    Tensor::from_fn(&[2, 2, 3], |_| rng.gen_range(-1.0..1.0)),
                ],
                regression: Some(Tensor::from_fn(&[3, 2, 3], |_| rng.gen_range(-0.3..0.3))),
            };
            let map = predict_coordinates(&out, &tree).unwrap();
            let labels = predict_labels(&out).unwrap();
            let r = out.regression.as_ref().unwrap();
            for p in 0..6 {
                let path = LabelPath(vec![labels[0].labels[p], labels[1].labels[p]]);
                let off = Vector3::new(r.data()[p], r.data()[6 + p], r.data()[12 + p]);
                assert_eq!(map.coords[p], reconstruct(&tree, &path, &off).unwrap());
            }
            let cls_only = NetworkOutput { regression: None, ..out.clone() };
            let zero = NetworkOutput { regression: Some(Tensor::zeros(&[3, 2, 3])), ..out.clone() };
            let a = predict_coordinates(&cls_only, &tree).unwrap();
            assert_eq!(a, predict_coordinates(&zero, &tree).unwrap());
            for p in 0..6 {
                let path = LabelPath(vec![labels[0].labels[p], labels[1].labels[p]]);
                assert_eq!(a.coords[p], tree.leaf_center(&path).unwrap());
            }
        }
        let wrong = NetworkOutput { class_logits: vec![Tensor::zeros(&[2, 1, 1])], regression: None };
        assert!(matches!(predict_coordinates(&wrong, &tree), Err(NetworkError::TreeMismatch { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = HscNetConfig::tiny(vec![2, 2]);
        let net = HscNet::new(HscNetConfig { init_seed: 11, ..cfg.clone() }).unwrap();
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        let mut other = HscNet::new(cfg.clone()).unwrap();
        assert_ne!(other.params(), net.params());
        other.read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(other.params(), net.params());
        let mut wrong = HscNet::new(HscNetConfig::tiny(vec![2, 3])).unwrap();
        assert!(wrong.read_checkpoint(buf.as_slice()).is_err());
    }
}
