//! Layer-stack models: the five heterogeneous CNN variants and the shared
//! same-padding feature extractor.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::Uniform;

use crate::error::{Error, Result};
use crate::ops::{self, PaddingMode, PoolIndices};
use crate::params::{Manifest, ParamEntry, ParamRole, ParamSet};
use crate::rng;
use crate::tensor::Tensor;

/// Shape of one image sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

impl FromStr for ImageShape {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let dims: Vec<usize> = s
            .split('x')
            .map(|d| d.trim().parse::<usize>().map_err(|e| format!("`{d}`: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        match dims[..] {
            [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(Self::new(c, h, w)),
            _ => Err(format!("expected CxHxW with positive dims, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layer {
    Conv {
        kernel: usize,
        out_channels: usize,
        padding: PaddingMode,
    },
    /// 2×2 window, stride 2.
    MaxPool,
    /// Fully connected; flattens its input.
    Linear { out_features: usize },
    Relu,
}

/// Validated layer stack with its derived parameter manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    layers: Vec<Layer>,
    input_shape: ImageShape,
    num_classes: Option<usize>,
    /// Per-sample output shape of each layer.
    shapes: Vec<Vec<usize>>,
    /// Manifest entry of each parameterized layer's kernel/weight.
    param_slots: Vec<Option<usize>>,
    manifest: Arc<Manifest>,
}

impl ModelSpec {
    /// Checks the shape chain end to end. For classifiers the final output
    /// must be a `num_classes` vector.
    pub fn new(layers: Vec<Layer>, input_shape: ImageShape, num_classes: Option<usize>) -> Result<Self> {
        let mut current = input_shape.dims().to_vec();
        let mut shapes = Vec::with_capacity(layers.len());
        let mut param_slots = Vec::with_capacity(layers.len());
        let mut entries = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            let mut slot = None;
            current = match (*layer, current.as_slice()) {
                (Layer::Conv { kernel, out_channels, padding }, &[c, h, w]) => {
                    if kernel == 0 || out_channels == 0 {
                        return Err(Error::dim(format!("layer {i}: empty convolution")));
                    }
                    let (oh, ow) = match padding {
                        PaddingMode::Valid if kernel <= h && kernel <= w => (h - kernel + 1, w - kernel + 1),
                        PaddingMode::Same if kernel % 2 == 1 => (h, w),
                        _ => {
                            return Err(Error::dim(format!(
                                "layer {i}: {padding:?} conv with kernel {kernel} cannot apply to {h}x{w}"
                            )))
                        }
                    };
                    slot = Some(entries.len());
                    entries.push(ParamEntry { layer: i, role: ParamRole::Kernel, shape: vec![out_channels, c, kernel, kernel] });
                    entries.push(ParamEntry { layer: i, role: ParamRole::Bias, shape: vec![out_channels] });
                    vec![out_channels, oh, ow]
                }
                (Layer::MaxPool, &[c, h, w]) if h % 2 == 0 && w % 2 == 0 => vec![c, h / 2, w / 2],
                (Layer::Linear { out_features }, shape) if out_features > 0 => {
                    let d_in = shape.iter().product();
                    slot = Some(entries.len());
                    entries.push(ParamEntry { layer: i, role: ParamRole::Weight, shape: vec![out_features, d_in] });
                    entries.push(ParamEntry { layer: i, role: ParamRole::Bias, shape: vec![out_features] });
                    vec![out_features]
                }
                (Layer::Relu, shape) => shape.to_vec(),
                (layer, shape) => {
                    return Err(Error::dim(format!("layer {i}: {layer:?} cannot apply to shape {shape:?}")))
                }
            };
            shapes.push(current.clone());
            param_slots.push(slot);
        }
        if let Some(classes) = num_classes {
            if current != [classes] {
                return Err(Error::dim(format!(
                    "classifier output {current:?} does not match {classes} classes"
                )));
            }
        }
        Ok(Self {
            layers,
            input_shape,
            num_classes,
            shapes,
            param_slots,
            manifest: Arc::new(Manifest::new(entries)),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> ImageShape {
        self.input_shape
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    /// Per-sample output shape; the input shape for an empty stack.
    pub fn output_shape(&self) -> Vec<usize> {
        self.shapes
            .last()
            .cloned()
            .unwrap_or_else(|| self.input_shape.dims().to_vec())
    }

    pub fn layer_output_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn manifest(&self) -> &Arc<Manifest> {
        &self.manifest
    }
}

/// First fully connected width of CNN-1..CNN-5.
const FC1_WIDTHS: [usize; 5] = [2000, 2000, 1000, 800, 500];

/// One of the five heterogeneous CNNs: conv5×5/16, pool, conv5×5/{16|32},
/// pool, FC1, FC2 (500), FC3 (classes), with ReLU after every conv and hidden FC.
pub fn build_cnn(variant: u8, num_classes: usize, input_shape: ImageShape) -> Result<ModelSpec> {
    if !(1..=5).contains(&variant) {
        return Err(Error::arg(format!("unknown CNN variant {variant}, expected 1..=5")));
    }
    if num_classes == 0 {
        return Err(Error::arg("num_classes must be positive"));
    }
    let conv2 = if variant == 2 { 16 } else { 32 };
    let conv = |out_channels| Layer::Conv {
        kernel: 5,
        out_channels,
        padding: PaddingMode::Valid,
    };
    let layers = vec![
        conv(16),
        Layer::Relu,
        Layer::MaxPool,
        conv(conv2),
        Layer::Relu,
        Layer::MaxPool,
        Layer::Linear { out_features: FC1_WIDTHS[variant as usize - 1] },
        Layer::Relu,
        Layer::Linear { out_features: 500 },
        Layer::Relu,
        Layer::Linear { out_features: num_classes },
    ];
    ModelSpec::new(layers, input_shape, Some(num_classes))
}

pub const EXTRACTOR_KERNEL: usize = 3;
pub const EXTRACTOR_HIDDEN: usize = 16;

/// The shared extractor: conv3×3 C→16 (same), ReLU, conv3×3 16→C (same).
/// Output shape equals input shape; the final layer is linear.
pub fn build_extractor(input_shape: ImageShape) -> ModelSpec {
    let conv = |out_channels| Layer::Conv {
        kernel: EXTRACTOR_KERNEL,
        out_channels,
        padding: PaddingMode::Same,
    };
    ModelSpec::new(
        vec![conv(EXTRACTOR_HIDDEN), Layer::Relu, conv(input_shape.channels)],
        input_shape,
        None,
    )
    .expect("same-padding stack accepts any image shape")
}

pub fn count_params(spec: &ModelSpec) -> usize {
    spec.manifest.param_count()
}

/// Forward FLOPs for one sample: conv `2·K²·C_in·C_out·H'·W'`, linear
/// `2·D_in·D_out`, one op per input element for pooling and ReLU.
pub fn estimate_flops(spec: &ModelSpec) -> u64 {
    let mut input: Vec<usize> = spec.input_shape.dims().to_vec();
    let mut total = 0u64;
    for (layer, out) in spec.layers.iter().zip(&spec.shapes) {
        let n_in: usize = input.iter().product();
        total += match *layer {
            Layer::Conv { kernel, out_channels, .. } => {
                2 * (kernel * kernel * input[0] * out_channels * out[1] * out[2]) as u64
            }
            Layer::Linear { out_features } => 2 * (n_in * out_features) as u64,
            Layer::MaxPool | Layer::Relu => n_in as u64,
        };
        input.clone_from(out);
    }
    total
}

/// Fan-in scaled uniform `U(-1/√fan_in, 1/√fan_in)` weights, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamSet {
    let mut rng = rng::seeded(seed);
    let mut params = ParamSet::zeros(spec.manifest.clone());
    for (i, entry) in spec.manifest.entries().iter().enumerate() {
        if entry.role == ParamRole::Bias {
            continue;
        }
        let fan_in: usize = entry.shape[1..].iter().product();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new(-bound, bound).expect("positive bound");
        for v in params.segment_mut(i) {
            *v = rng.sample(dist);
        }
    }
    params
}

/// Per-layer state saved by a traced forward pass.
#[derive(Debug)]
pub struct Trace {
    inputs: Vec<Tensor>,
    pools: Vec<Option<PoolIndices>>,
}

/// Whether a backward pass should produce parameter gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    Full,
    /// Frozen parameters: only propagate the input gradient.
    InputOnly,
}

/// A spec with concrete parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: Arc<ModelSpec>,
    params: ParamSet,
}

impl Model {
    pub fn new(spec: Arc<ModelSpec>, params: ParamSet) -> Result<Self> {
        if **params.manifest() != *spec.manifest {
            return Err(Error::Incompatible(format!(
                "parameters [{}] do not fit model [{}]",
                params.manifest(),
                spec.manifest
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn init(spec: Arc<ModelSpec>, seed: u64) -> Self {
        let params = init_params(&spec, seed);
        Self { spec, params }
    }

    pub fn spec(&self) -> &Arc<ModelSpec> {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        self.params.ensure_compatible(&params)?;
        self.params = params;
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let dims = self.spec.input_shape.dims();
        match x.shape() {
            [_, rest @ ..] if rest == dims => Ok(()),
            s => Err(Error::dim(format!(
                "model expects [B,{}], got {s:?}",
                self.spec.input_shape.to_string().replace('x', ",")
            ))),
        }
    }

    fn layer_tensors(&self, i: usize) -> (Tensor, Tensor) {
        let slot = self.spec.param_slots[i].expect("parameterized layer");
        (self.params.tensor(slot), self.params.tensor(slot + 1))
    }

    fn run(&self, x: &Tensor, mut trace: Option<&mut Trace>) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let mut pool = None;
            let next = match *layer {
                Layer::Conv { padding, .. } => {
                    let (k, b) = self.layer_tensors(i);
                    ops::conv2d_forward(&h, &k, &b, padding)?
                }
                Layer::MaxPool => {
                    let (y, idx) = ops::maxpool2d_forward(&h)?;
                    pool = Some(idx);
                    y
                }
                Layer::Linear { .. } => {
                    let (w, b) = self.layer_tensors(i);
                    ops::linear_forward(&h, &w, &b)?
                }
                Layer::Relu => ops::relu_forward(&h),
            };
            if let Some(t) = trace.as_deref_mut() {
                t.inputs.push(std::mem::replace(&mut h, next));
                t.pools.push(pool);
            } else {
                h = next;
            }
        }
        Ok(h)
    }

    /// Batched forward pass over `[B, C, H, W]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, None)
    }

    pub fn forward_traced(&self, x: &Tensor) -> Result<(Tensor, Trace)> {
        let mut trace = Trace {
            inputs: Vec::with_capacity(self.spec.layers.len()),
            pools: Vec::with_capacity(self.spec.layers.len()),
        };
        let y = self.run(x, Some(&mut trace))?;
        Ok((y, trace))
    }

    /// Backpropagates `upstream` (gradient w.r.t. the output) through a traced
    /// pass. Returns parameter gradients when `mode` is [`GradMode::Full`],
    /// and always the gradient w.r.t. the model input.
    pub fn backward(
        &self,
        trace: &Trace,
        upstream: Tensor,
        mode: GradMode,
    ) -> Result<(Option<ParamSet>, Tensor)> {
        if trace.inputs.len() != self.spec.layers.len() {
            return Err(Error::dim("trace does not belong to this model"));
        }
        let mut grads = (mode == GradMode::Full).then(|| ParamSet::zeros(self.spec.manifest.clone()));
        let mut g = upstream;
        for (i, layer) in self.spec.layers.iter().enumerate().rev() {
            let input = &trace.inputs[i];
            g = match *layer {
                Layer::Conv { padding, .. } => {
                    let (k, _) = self.layer_tensors(i);
                    match grads.as_mut() {
                        Some(acc) => {
                            let lg = ops::conv2d_backward(input, &k, padding, &g)?;
                            store(acc, self.spec.param_slots[i], lg.param_grad, lg.bias_grad);
                            lg.input_grad
                        }
                        None => ops::conv2d_backward_input(input, &k, padding, &g)?,
                    }
                }
                Layer::MaxPool => {
                    let idx = trace.pools[i].as_ref().expect("pool indices recorded");
                    ops::maxpool2d_backward(idx, &g)?
                }
                Layer::Linear { .. } => {
                    let (w, _) = self.layer_tensors(i);
                    match grads.as_mut() {
                        Some(acc) => {
                            let lg = ops::linear_backward(input, &w, &g)?;
                            store(acc, self.spec.param_slots[i], lg.param_grad, lg.bias_grad);
                            lg.input_grad
                        }
                        None => ops::linear_backward_input(input, &w, &g)?,
                    }
                }
                Layer::Relu => ops::relu_backward(input, &g)?,
            };
        }
        Ok((grads, g))
    }

    /// Arg-max class per batch row; ties go to the lowest class index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        let classes = *logits.shape().last().expect("non-scalar output");
        Ok(logits.data().chunks_exact(classes).map(argmax).collect())
    }
}

fn store(acc: &mut ParamSet, slot: Option<usize>, weight: Tensor, bias: Tensor) {
    let slot = slot.expect("parameterized layer");
    acc.segment_mut(slot).copy_from_slice(weight.data());
    acc.segment_mut(slot + 1).copy_from_slice(bias.data());
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
