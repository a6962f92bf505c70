//! Layer-chain architectures over one flat parameter vector.
//!
//! The flat order is canonical: layers in chain order, conv and dense
//! layers contribute their weights (`[out][in][kh][kw]` row-major) followed
//! by their biases, batchnorm layers contribute gamma, beta, running mean
//! and running variance. Every other layer owns no parameters.

mod format;
mod selection;

pub use format::{load_model, read_model, save_model, write_model, FORMAT_VERSION, MAGIC};
pub use selection::{BnLayerStats, BnStats, FilterSelection, LayerSelection, ParameterMask, SubnetMap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{kaiming_init, BatchNormAttrs, Conv2dAttrs, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid architecture: {0}")]
    Invalid(String),
    #[error("selection does not fit the graph: {0}")]
    Selection(String),
    #[error("parameter index out of range: {0}")]
    Index(String),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model format version {0}")]
    Version(u16),
    #[error("model file truncated: {0}")]
    Truncated(String),
    #[error("model checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// One layer of a sequential network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        out_filters: usize,
        in_channels: usize,
        kernel: (usize, usize),
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Dense {
        out_width: usize,
        in_width: usize,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm {
        channels: usize,
    },
    Relu,
    #[serde(rename = "maxpool")]
    MaxPool,
    #[serde(rename = "avgpool_global")]
    AvgPoolGlobal,
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn conv(out_filters: usize, in_channels: usize, k: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            out_filters,
            in_channels,
            kernel: (k, k),
            stride: 1,
            padding,
        }
    }

    pub fn dense(out_width: usize, in_width: usize) -> Self {
        LayerSpec::Dense { out_width, in_width }
    }

    pub fn has_weights(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    /// Number of filters (output channels or neurons) of a weighted layer.
    pub fn filters(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv2d { out_filters, .. } => Some(out_filters),
            LayerSpec::Dense { out_width, .. } => Some(out_width),
            _ => None,
        }
    }

    /// Scalars per filter in the canonical `c×s1×s2` view.
    pub fn filter_len(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv2d { in_channels, kernel, .. } => Some(in_channels * kernel.0 * kernel.1),
            LayerSpec::Dense { in_width, .. } => Some(in_width),
            _ => None,
        }
    }

    /// Parameter tensor shapes in canonical order.
    pub fn param_shapes(&self) -> Vec<(ParamRole, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d { out_filters, in_channels, kernel, .. } => vec![
                (ParamRole::Weight, vec![out_filters, in_channels, kernel.0, kernel.1]),
                (ParamRole::Bias, vec![out_filters]),
            ],
            LayerSpec::Dense { out_width, in_width } => {
                vec![(ParamRole::Weight, vec![out_width, in_width]), (ParamRole::Bias, vec![out_width])]
            }
            LayerSpec::BatchNorm { channels } => [ParamRole::Gamma, ParamRole::Beta, ParamRole::RunningMean, ParamRole::RunningVar]
                .into_iter()
                .map(|r| (r, vec![channels]))
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool => "maxpool",
            LayerSpec::AvgPoolGlobal => "avgpool_global",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    /// Whether gradient descent ever touches this role.
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

/// Position of one scalar in the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLocation {
    pub layer: usize,
    pub role: ParamRole,
    pub index: Vec<usize>,
}

/// What flows between layers, as far as the architecture alone can tell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Flow {
    Unknown,
    Spatial(usize),
    Flat(usize),
}

/// A validated layer chain plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    layers: Vec<LayerSpec>,
    params: Vec<f32>,
    offsets: Vec<usize>,
}

fn validate(layers: &[LayerSpec]) -> Result<()> {
    if layers.is_empty() {
        return Err(GraphError::Invalid("layer list is empty".into()));
    }
    let invalid = |i: usize, msg: String| Err(GraphError::Invalid(format!("layer {i} ({}): {msg}", layers[i].name())));
    let mut flow = Flow::Unknown;
    for (i, layer) in layers.iter().enumerate() {
        flow = match (*layer, flow) {
            (LayerSpec::Conv2d { out_filters, in_channels, kernel, stride, .. }, f) => {
                if out_filters == 0 || in_channels == 0 || kernel.0 == 0 || kernel.1 == 0 || stride == 0 {
                    return invalid(i, "zero extent".into());
                }
                match f {
                    Flow::Flat(_) => return invalid(i, "convolution after a flattening layer".into()),
                    Flow::Spatial(c) if c != in_channels => {
                        return invalid(i, format!("expects {in_channels} input channels, previous layer produces {c}"))
                    }
                    _ => {}
                }
                Flow::Spatial(out_filters)
            }
            (LayerSpec::Dense { out_width, in_width }, f) => {
                if out_width == 0 || in_width == 0 {
                    return invalid(i, "zero extent".into());
                }
                match f {
                    Flow::Spatial(c) if in_width % c != 0 => {
                        return invalid(i, format!("input width {in_width} is not a multiple of {c} channels"))
                    }
                    Flow::Flat(w) if w != in_width => {
                        return invalid(i, format!("expects width {in_width}, previous layer produces {w}"))
                    }
                    _ => {}
                }
                Flow::Flat(out_width)
            }
            (LayerSpec::BatchNorm { channels }, f) => {
                if channels == 0 {
                    return invalid(i, "zero channels".into());
                }
                match f {
                    Flow::Spatial(c) | Flow::Flat(c) if c != channels => {
                        return invalid(i, format!("has {channels} channels, previous layer produces {c}"))
                    }
                    Flow::Unknown => Flow::Spatial(channels),
                    other => other,
                }
            }
            (LayerSpec::Relu, f) => f,
            (LayerSpec::MaxPool, Flow::Flat(_)) | (LayerSpec::AvgPoolGlobal, Flow::Flat(_)) => {
                return invalid(i, "pooling needs a spatial input".into())
            }
            (LayerSpec::MaxPool, f) => f,
            (LayerSpec::AvgPoolGlobal, Flow::Spatial(c)) => Flow::Flat(c),
            (LayerSpec::AvgPoolGlobal, Flow::Unknown) => Flow::Unknown,
        };
    }
    if !layers.iter().any(LayerSpec::has_weights) {
        return Err(GraphError::Invalid("no conv or dense layer".into()));
    }
    Ok(())
}

impl ModelGraph {
    /// Builds a graph from explicit parameters in canonical order.
    pub fn new(layers: Vec<LayerSpec>, params: Vec<f32>) -> Result<Self> {
        validate(&layers)?;
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.param_count();
        }
        offsets.push(total);
        if params.len() != total {
            return Err(GraphError::Invalid(format!(
                "architecture holds {total} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self { layers, params, offsets })
    }

    /// Kaiming-initialized weights, zero biases, unit gamma, zero beta,
    /// running statistics (0, 1).
    pub fn init<R: Rng + ?Sized>(layers: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        validate(&layers)?;
        let mut params = Vec::new();
        for l in &layers {
            for (role, shape) in l.param_shapes() {
                let n: usize = shape.iter().product();
                match role {
                    ParamRole::Weight => params.extend(kaiming_init(&shape, rng)?.into_data()),
                    ParamRole::Gamma | ParamRole::RunningVar => params.extend(std::iter::repeat_n(1.0, n)),
                    _ => params.extend(std::iter::repeat_n(0.0, n)),
                }
            }
        }
        Self::new(layers, params)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn into_parts(self) -> (Vec<LayerSpec>, Vec<f32>) {
        (self.layers, self.params)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Flat range owned by `layer`.
    pub fn layer_range(&self, layer: usize) -> std::ops::Range<usize> {
        self.offsets[layer]..self.offsets[layer + 1]
    }

    /// Flat range of one parameter tensor of `layer`.
    pub fn role_range(&self, layer: usize, role: ParamRole) -> Option<std::ops::Range<usize>> {
        let mut at = self.offsets[layer];
        for (r, shape) in self.layers[layer].param_shapes() {
            let n: usize = shape.iter().product();
            if r == role {
                return Some(at..at + n);
            }
            at += n;
        }
        None
    }

    pub fn role_slice(&self, layer: usize, role: ParamRole) -> Option<&[f32]> {
        self.role_range(layer, role).map(|r| &self.params[r])
    }

    /// Indices of conv and dense layers in chain order.
    pub fn weight_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].has_weights()).collect()
    }

    pub fn batchnorm_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| matches!(self.layers[i], LayerSpec::BatchNorm { .. }))
            .collect()
    }

    /// Width of the last weighted layer.
    pub fn output_dim(&self) -> usize {
        let last = *self.weight_layers().last().expect("validated graphs have a weighted layer");
        self.layers[last].filters().unwrap_or(0)
    }

    /// Total filter count over the given layers.
    pub fn filter_count(&self, layers: &[usize]) -> usize {
        layers.iter().filter_map(|&l| self.layers[l].filters()).sum()
    }

    /// Flat offset of `(layer, role, index)`.
    pub fn index_of(&self, layer: usize, role: ParamRole, index: &[usize]) -> Result<usize> {
        let oob = || GraphError::Index(format!("layer {layer} {role:?} {index:?}"));
        let spec = self.layers.get(layer).ok_or_else(oob)?;
        let shape = spec
            .param_shapes()
            .into_iter()
            .find(|(r, _)| *r == role)
            .map(|(_, s)| s)
            .ok_or_else(oob)?;
        if shape.len() != index.len() || shape.iter().zip(index).any(|(s, i)| i >= s) {
            return Err(oob());
        }
        let flat = index.iter().zip(&shape).fold(0, |acc, (i, s)| acc * s + i);
        Ok(self.role_range(layer, role).ok_or_else(oob)?.start + flat)
    }

    /// Inverse of [`index_of`](Self::index_of).
    pub fn locate(&self, flat: usize) -> Result<ParamLocation> {
        if flat >= self.params.len() {
            return Err(GraphError::Index(format!("{flat} >= {}", self.params.len())));
        }
        let layer = self.offsets.partition_point(|&o| o <= flat) - 1;
        let mut rest = flat - self.offsets[layer];
        for (role, shape) in self.layers[layer].param_shapes() {
            let n: usize = shape.iter().product();
            if rest < n {
                let mut index = vec![0; shape.len()];
                for (slot, s) in index.iter_mut().zip(&shape).rev() {
                    *slot = rest % s;
                    rest /= s;
                }
                return Ok(ParamLocation { layer, role, index });
            }
            rest -= n;
        }
        unreachable!("offsets cover every parameter")
    }

    /// Places every parameter tensor on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<Bound> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, spec) in self.layers.iter().enumerate() {
            let mut at = self.offsets[l];
            let mut vars = Vec::new();
            for (role, shape) in spec.param_shapes() {
                let n: usize = shape.iter().product();
                let t = Tensor::new(shape, self.params[at..at + n].to_vec())?;
                vars.push(tape.leaf(t.requires_grad(requires_grad && role.is_trainable())));
                at += n;
            }
            layers.push(vars);
        }
        Ok(Bound { layers })
    }

    /// Runs the chain on `tape`. Batchnorm uses batch statistics when
    /// `training` is set, running statistics otherwise.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, training: bool) -> Result<Var> {
        let mut h = x;
        for (spec, vars) in self.layers.iter().zip(&bound.layers) {
            h = match *spec {
                LayerSpec::Conv2d { stride, padding, .. } => {
                    tape.conv2d(h, vars[0], Some(vars[1]), Conv2dAttrs { stride, padding })?
                }
                LayerSpec::Dense { .. } => tape.dense(h, vars[0], Some(vars[1]))?,
                LayerSpec::BatchNorm { .. } => {
                    let attrs = if training { BatchNormAttrs::training() } else { BatchNormAttrs::eval() };
                    tape.batchnorm(h, vars[0], vars[1], vars[2], vars[3], attrs)?
                }
                LayerSpec::Relu => tape.relu(h)?,
                LayerSpec::MaxPool => tape.maxpool2x2(h)?,
                LayerSpec::AvgPoolGlobal => tape.avgpool_global(h)?,
            };
        }
        Ok(h)
    }

    /// Evaluation-mode forward pass without gradient tracking.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let xv = tape.leaf(x.clone());
        let out = self.forward(&mut tape, &bound, xv, false)?;
        Ok(tape.value(out).clone())
    }

    /// Gradients of every parameter in flat order; zeros where none exist.
    pub fn flat_grad(&self, tape: &Tape, bound: &Bound) -> Vec<f32> {
        let mut g = vec![0.0; self.params.len()];
        for (l, vars) in bound.layers.iter().enumerate() {
            let mut at = self.offsets[l];
            for &v in vars {
                let n = tape.value(v).len();
                if let Some(grad) = tape.grad(v) {
                    g[at..at + n].copy_from_slice(grad);
                }
                at += n;
            }
        }
        g
    }

    /// Copies batchnorm running statistics updated on `tape` back into the
    /// parameter vector.
    pub fn store_running_stats(&mut self, tape: &Tape, bound: &Bound) {
        for l in self.batchnorm_layers() {
            for (k, role) in [(2, ParamRole::RunningMean), (3, ParamRole::RunningVar)] {
                let r = self.role_range(l, role).expect("batchnorm owns running stats");
                self.params[r].copy_from_slice(tape.value(bound.layers[l][k]).data());
            }
        }
    }
}

/// Tape handles of a graph's parameter tensors, grouped by layer.
#[derive(Debug, Clone)]
pub struct Bound {
    layers: Vec<Vec<Var>>,
}

impl Bound {
    pub fn layer(&self, layer: usize) -> &[Var] {
        &self.layers[layer]
    }
}
