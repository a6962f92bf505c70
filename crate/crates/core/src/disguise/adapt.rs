use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{GraphError, LayerSpec, ModelGraph, ParamRole, Result};
use crate::tensor::kaiming_init;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    None,
    Upsample,
    HiddenExtend,
}

impl AdaptMode {
    pub fn code(self) -> u8 {
        match self {
            AdaptMode::None => 0,
            AdaptMode::Upsample => 1,
            AdaptMode::HiddenExtend => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(AdaptMode::None),
            1 => Some(AdaptMode::Upsample),
            2 => Some(AdaptMode::HiddenExtend),
            _ => None,
        }
    }
}

/// How the secret output layer was reshaped to match the stego task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptationMeta {
    pub mode: AdaptMode,
    pub original_output_dim: usize,
    pub stego_output_dim: usize,
    pub added_neurons: usize,
    pub appended_final_layer: bool,
}

impl AdaptationMeta {
    /// No adaptation on an output of width `dim`.
    pub fn identity(dim: usize) -> Self {
        Self {
            mode: AdaptMode::None,
            original_output_dim: dim,
            stego_output_dim: dim,
            added_neurons: 0,
            appended_final_layer: false,
        }
    }

    /// Extra hidden neurons for the extend case.
    pub fn default_added_neurons(original_output_dim: usize) -> usize {
        original_output_dim.div_ceil(4)
    }

    /// Checks that the metadata describes `graph`'s tail.
    pub fn check(&self, graph: &ModelGraph) -> Result<()> {
        let bad = |m: String| Err(GraphError::Selection(format!("adaptation metadata: {m}")));
        let expected = match self.original_output_dim.cmp(&self.stego_output_dim) {
            std::cmp::Ordering::Less => AdaptMode::Upsample,
            std::cmp::Ordering::Greater => AdaptMode::HiddenExtend,
            std::cmp::Ordering::Equal => AdaptMode::None,
        };
        if self.mode != expected || self.original_output_dim == 0 {
            return bad(format!("mode {:?} for {} -> {}", self.mode, self.original_output_dim, self.stego_output_dim));
        }
        if self.appended_final_layer != (self.mode == AdaptMode::HiddenExtend)
            || (self.mode != AdaptMode::HiddenExtend && self.added_neurons != 0)
        {
            return bad("inconsistent extension fields".into());
        }
        let weights = graph.weight_layers();
        let last = graph.layers()[*weights.last().expect("validated")];
        if last.filters() != Some(self.stego_output_dim) {
            return bad(format!("graph output is {:?}, metadata says {}", last.filters(), self.stego_output_dim));
        }
        if self.mode != AdaptMode::None && !matches!(last, LayerSpec::Dense { .. }) {
            return bad("output adaptation needs a dense output layer".into());
        }
        if self.mode == AdaptMode::HiddenExtend {
            if weights.len() < 2 {
                return bad("extended graph needs a penultimate weighted layer".into());
            }
            let pen = graph.layers()[weights[weights.len() - 2]];
            if !matches!(pen, LayerSpec::Dense { .. }) || pen.filters() != Some(self.original_output_dim + self.added_neurons) {
                return bad(format!("penultimate layer {pen:?} does not hold {} + {} neurons", self.original_output_dim, self.added_neurons));
            }
        }
        Ok(())
    }
}

/// Reshapes the output of `secret` to `stego_output_dim` neurons.
///
/// Widening appends Kaiming rows (zero bias) after the original neurons.
/// Narrowing keeps the original layer, appends `ceil(O_e / 4)` neurons to
/// it, then a ReLU and a fresh dense layer of the stego width.
pub fn adapt_output_layer<R: Rng + ?Sized>(secret: &ModelGraph, stego_output_dim: usize, rng: &mut R) -> Result<(ModelGraph, AdaptationMeta)> {
    adapt_output_layer_with(secret, stego_output_dim, None, rng)
}

/// [`adapt_output_layer`] with an explicit extension size.
pub fn adapt_output_layer_with<R: Rng + ?Sized>(
    secret: &ModelGraph,
    stego_output_dim: usize,
    added_neurons: Option<usize>,
    rng: &mut R,
) -> Result<(ModelGraph, AdaptationMeta)> {
    if stego_output_dim == 0 {
        return Err(GraphError::Invalid("stego output width must be at least 1".into()));
    }
    let out_layer = *secret.weight_layers().last().expect("validated");
    let o_e = secret.output_dim();
    if o_e == stego_output_dim {
        return Ok((secret.clone(), AdaptationMeta::identity(o_e)));
    }
    let LayerSpec::Dense { in_width, .. } = secret.layers()[out_layer] else {
        return Err(GraphError::Invalid("output adaptation needs a dense output layer".into()));
    };
    if out_layer + 1 != secret.layers().len() {
        return Err(GraphError::Invalid("the dense output layer must end the chain".into()));
    }
    let prefix = &secret.params()[..secret.layer_range(out_layer).start];
    let weights = secret.role_slice(out_layer, ParamRole::Weight).expect("dense weight");
    let bias = secret.role_slice(out_layer, ParamRole::Bias).expect("dense bias");
    let mut layers = secret.layers()[..out_layer].to_vec();
    let mut params = prefix.to_vec();

    let widen = |extra: usize, rng: &mut R, params: &mut Vec<f32>| -> Result<()> {
        params.extend_from_slice(weights);
        if extra > 0 {
            // fan-in of the layer, not of the extra block
            let fresh = kaiming_init(&[extra, in_width], rng)?;
            params.extend_from_slice(fresh.data());
        }
        params.extend_from_slice(bias);
        params.extend(std::iter::repeat_n(0.0, extra));
        Ok(())
    };

    let meta = if o_e < stego_output_dim {
        layers.push(LayerSpec::dense(stego_output_dim, in_width));
        widen(stego_output_dim - o_e, rng, &mut params)?;
        AdaptationMeta {
            mode: AdaptMode::Upsample,
            original_output_dim: o_e,
            stego_output_dim,
            added_neurons: 0,
            appended_final_layer: false,
        }
    } else {
        let added = added_neurons.unwrap_or_else(|| AdaptationMeta::default_added_neurons(o_e));
        let hidden = o_e + added;
        layers.push(LayerSpec::dense(hidden, in_width));
        widen(added, rng, &mut params)?;
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::dense(stego_output_dim, hidden));
        params.extend(kaiming_init(&[stego_output_dim, hidden], rng)?.into_data());
        params.extend(std::iter::repeat_n(0.0, stego_output_dim));
        AdaptationMeta {
            mode: AdaptMode::HiddenExtend,
            original_output_dim: o_e,
            stego_output_dim,
            added_neurons: added,
            appended_final_layer: true,
        }
    };
    let graph = ModelGraph::new(layers, params)?;
    meta.check(&graph)?;
    Ok((graph, meta))
}
