//! Gradient-based filter importance for two competing tasks.
//!
//! A filter's importance on a task is the mean absolute gradient over its
//! own weights plus the mean absolute gradient over the input-channel slice
//! it feeds in the next weighted layer. Filters are then ranked by
//! `secret − λ · stego` importance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{FilterSelection, GraphError, LayerSelection, LayerSpec, ModelGraph, ParamRole};
use crate::tasks::{loss_on_tape, Dataset, LossKind, TaskError};
use crate::tensor::{Tape, TensorError};

#[derive(Debug, Error)]
pub enum ImportanceError {
    #[error("empty weight slice: {0}")]
    EmptySlice(String),
    #[error("non-finite loss while scoring")]
    NonFiniteLoss,
    #[error("cannot keep one filter in each of {layers} layers with only {requested} selected")]
    FloorUnsatisfiable { requested: usize, layers: usize },
    #[error("requested {requested} filters but only {available} were scored")]
    TooMany { requested: usize, available: usize },
    #[error("candidate does not fit the models: {0}")]
    Candidate(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

pub type Result<T> = std::result::Result<T, ImportanceError>;

/// Minibatches feeding one gradient average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradOptions {
    pub batches: usize,
    pub batch_size: usize,
}

impl Default for GradOptions {
    fn default() -> Self {
        Self { batches: 10, batch_size: 32 }
    }
}

/// A filter's own weights, or the weights consuming one of the previous
/// layer's channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSlice {
    /// `W[i, :, :, :]` of `layer`.
    Filter { layer: usize, filter: usize },
    /// `W[:, j, :, :]` of `layer`; for a dense layer reading a flattened
    /// feature map, every column fed by channel `j`.
    Channel { layer: usize, channel: usize },
}

/// Mean of `|∂L/∂w|` per parameter, each batch's gradient averaged over the
/// first `opts.batches` batches in order. Batchnorm runs on batch
/// statistics.
pub fn mean_abs_grads(model: &ModelGraph, loss: LossKind, data: &Dataset, opts: &GradOptions) -> Result<Vec<f64>> {
    let mut acc = vec![0.0f64; model.param_count()];
    let batches = data.batches(opts.batch_size, None);
    let used = &batches[..opts.batches.min(batches.len())];
    if used.is_empty() {
        return Err(ImportanceError::EmptySlice("no batches".into()));
    }
    for b in used {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true)?;
        let x = tape.leaf(b.x.clone());
        let out = model.forward(&mut tape, &bound, x, true).map_err(non_finite)?;
        let l = loss_on_tape(&mut tape, loss, out, &b.y).map_err(|e| match e {
            TaskError::Tensor(TensorError::NonFinite(_)) => ImportanceError::NonFiniteLoss,
            other => other.into(),
        })?;
        if !tape.value(l).is_finite() {
            return Err(ImportanceError::NonFiniteLoss);
        }
        tape.backward(l).map_err(|_| ImportanceError::NonFiniteLoss)?;
        for (a, g) in acc.iter_mut().zip(model.flat_grad(&tape, &bound)) {
            *a += g.abs() as f64;
        }
    }
    let n = used.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

fn non_finite(e: GraphError) -> ImportanceError {
    match e {
        GraphError::Tensor(TensorError::NonFinite(_)) => ImportanceError::NonFiniteLoss,
        other => other.into(),
    }
}

/// Flat indices covered by a slice.
pub fn slice_indices(model: &ModelGraph, slice: WeightSlice) -> Result<Vec<usize>> {
    let empty = || ImportanceError::EmptySlice(format!("{slice:?}"));
    let layer = match slice {
        WeightSlice::Filter { layer, .. } | WeightSlice::Channel { layer, .. } => layer,
    };
    let spec = *model.layers().get(layer).ok_or_else(empty)?;
    let w = model.role_range(layer, ParamRole::Weight).ok_or_else(empty)?;
    let (rows, in_len, ksize) = match spec {
        LayerSpec::Conv2d { out_filters, in_channels, kernel, .. } => (out_filters, in_channels, kernel.0 * kernel.1),
        LayerSpec::Dense { out_width, in_width } => (out_width, in_width, 1),
        _ => return Err(empty()),
    };
    match slice {
        WeightSlice::Filter { filter, .. } => {
            if filter >= rows {
                return Err(empty());
            }
            let len = in_len * ksize;
            Ok((w.start + filter * len..w.start + (filter + 1) * len).collect())
        }
        WeightSlice::Channel { channel, .. } => {
            let cols = channel_columns(model, layer, channel).ok_or_else(empty)?;
            Ok((0..rows)
                .flat_map(|r| cols.clone().flat_map(move |c| {
                    let base = w.start + (r * in_len + c) * ksize;
                    base..base + ksize
                }))
                .collect())
        }
    }
}

/// Input columns of weighted `layer` fed by channel `channel` of the
/// previous weighted layer.
fn channel_columns(model: &ModelGraph, layer: usize, channel: usize) -> Option<std::ops::Range<usize>> {
    let prev = model.weight_layers().into_iter().rev().find(|&w| w < layer);
    match model.layers()[layer] {
        LayerSpec::Conv2d { in_channels, .. } => (channel < in_channels).then_some(channel..channel + 1),
        LayerSpec::Dense { in_width, .. } => {
            let channels = prev.and_then(|p| model.layers()[p].filters()).unwrap_or(in_width);
            let f = in_width / channels;
            (channel < channels).then_some(channel * f..(channel + 1) * f)
        }
        _ => None,
    }
}

/// Mean absolute gradient of the loss over one slice.
pub fn grad_magnitude(model: &ModelGraph, loss: LossKind, data: &Dataset, slice: WeightSlice, opts: &GradOptions) -> Result<f64> {
    let idx = slice_indices(model, slice)?;
    let g = mean_abs_grads(model, loss, data, opts)?;
    Ok(slice_mean(&g, &idx))
}

fn slice_mean(g: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| g[i]).sum::<f64>() / idx.len() as f64
}

/// Scores of one filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterScore {
    pub layer: usize,
    pub filter: usize,
    /// Secret-task importance.
    pub goe: f64,
    /// Stego-task importance.
    pub got: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScore {
    pub lambda_g: f64,
    /// Selectable layers in chain order; every scored filter belongs to one.
    pub layers: Vec<usize>,
    pub filters: Vec<FilterScore>,
}

impl ImportanceScore {
    /// Rebuilds a score table from raw importances.
    pub fn from_parts(layers: Vec<usize>, lambda_g: f64, raw: Vec<(usize, usize, f64, f64)>) -> Self {
        let filters = raw
            .into_iter()
            .map(|(layer, filter, goe, got)| FilterScore { layer, filter, goe, got, alpha: goe - lambda_g * got })
            .collect();
        Self { lambda_g, layers, filters }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scores serialize")
    }
}

/// Gradient source for one task.
#[derive(Debug, Clone, Copy)]
pub struct TaskGrads<'a> {
    pub model: &'a ModelGraph,
    pub loss: LossKind,
    pub data: &'a Dataset,
}

/// Scores every candidate filter.
///
/// `secret` is the candidate's own sub-network, in which the filters of
/// each selectable layer appear compacted in candidate order; `stego` is
/// the full model the candidate indexes. Layers before the first weighted
/// layer have no channel term below them; every selectable layer has a
/// weighted successor (the output layer at the latest).
pub fn score_filters(secret: TaskGrads<'_>, stego: TaskGrads<'_>, candidate: &FilterSelection, lambda_g: f64, opts: &GradOptions) -> Result<ImportanceScore> {
    let ge = mean_abs_grads(secret.model, secret.loss, secret.data, opts)?;
    let gt = mean_abs_grads(stego.model, stego.loss, stego.data, opts)?;
    let next_weighted = |m: &ModelGraph, l: usize| m.weight_layers().into_iter().find(|&w| w > l);
    let mut raw = Vec::with_capacity(candidate.total());
    for sel in &candidate.layers {
        let l = sel.layer;
        let sub_spec = secret.model.layers().get(l).copied();
        if sub_spec.and_then(|s| s.filters()) != Some(sel.filters.len()) {
            return Err(ImportanceError::Candidate(format!("secret layer {l} does not hold the {} candidate filters", sel.filters.len())));
        }
        let (ne, nt) = (next_weighted(secret.model, l), next_weighted(stego.model, l));
        for (k, &f) in sel.filters.iter().enumerate() {
            let mut goe = slice_mean(&ge, &slice_indices(secret.model, WeightSlice::Filter { layer: l, filter: k })?);
            if let Some(n) = ne {
                goe += slice_mean(&ge, &slice_indices(secret.model, WeightSlice::Channel { layer: n, channel: k })?);
            }
            let mut got = slice_mean(&gt, &slice_indices(stego.model, WeightSlice::Filter { layer: l, filter: f })?);
            if let Some(n) = nt {
                got += slice_mean(&gt, &slice_indices(stego.model, WeightSlice::Channel { layer: n, channel: f })?);
            }
            raw.push((l, f, goe, got));
        }
    }
    Ok(ImportanceScore::from_parts(candidate.layers.iter().map(|s| s.layer).collect(), lambda_g, raw))
}

/// Ranking order: higher alpha first, then lower layer, then lower filter.
fn ranks_before(a: &FilterScore, b: &FilterScore) -> std::cmp::Ordering {
    b.alpha.total_cmp(&a.alpha).then(a.layer.cmp(&b.layer)).then(a.filter.cmp(&b.filter))
}

/// The `count` best filters overall, keeping at least one per layer.
pub fn select_top(scores: &ImportanceScore, count: usize) -> Result<FilterSelection> {
    let layers = &scores.layers;
    if count < layers.len() {
        return Err(ImportanceError::FloorUnsatisfiable { requested: count, layers: layers.len() });
    }
    if count > scores.filters.len() {
        return Err(ImportanceError::TooMany { requested: count, available: scores.filters.len() });
    }
    let mut ranked: Vec<&FilterScore> = scores.filters.iter().collect();
    ranked.sort_by(|a, b| ranks_before(a, b));
    let mut picked = vec![false; ranked.len()];
    // each layer's best filter first
    for &l in layers {
        let best = ranked
            .iter()
            .position(|s| s.layer == l)
            .ok_or(ImportanceError::FloorUnsatisfiable { requested: count, layers: layers.len() })?;
        picked[best] = true;
    }
    let mut remaining = count - layers.len();
    for p in picked.iter_mut() {
        if remaining == 0 {
            break;
        }
        if !*p {
            *p = true;
            remaining -= 1;
        }
    }
    let sets = layers
        .iter()
        .map(|&l| LayerSelection {
            layer: l,
            filters: ranked.iter().zip(&picked).filter(|(s, p)| **p && s.layer == l).map(|(s, _)| s.filter).collect(),
        })
        .collect();
    Ok(FilterSelection::new(sets))
}
