//! Filter selections, the parameter mask they induce, and sub-network
//! extraction.
//!
//! A selected parameter is a weight whose filter is selected in its layer
//! and whose input channel is selected in the previous weighted layer, the
//! bias of a selected filter, or the affine pair of a batchnorm channel fed
//! by a selected filter. The secret output layer keeps its original
//! neurons; anything added by output adaptation is never selected.

use serde::{Deserialize, Serialize};

use super::{GraphError, LayerSpec, ModelGraph, ParamRole, Result};
use crate::disguise::{AdaptMode, AdaptationMeta};

/// Selected filters of one selectable layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSelection {
    /// Layer index in the chain.
    pub layer: usize,
    /// Sorted, distinct filter indices.
    pub filters: Vec<usize>,
}

/// Per-layer selected filter sets, one entry per selectable layer in chain
/// order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSelection {
    pub layers: Vec<LayerSelection>,
}

impl FilterSelection {
    /// Sorts and deduplicates each set.
    pub fn new(layers: Vec<LayerSelection>) -> Self {
        let layers = layers
            .into_iter()
            .map(|mut s| {
                s.filters.sort_unstable();
                s.filters.dedup();
                s
            })
            .collect();
        Self { layers }
    }

    /// Every filter of every selectable layer.
    pub fn all(graph: &ModelGraph, adapt: &AdaptationMeta) -> Result<Self> {
        let layers = graph
            .selectable_layers(adapt)?
            .into_iter()
            .map(|l| LayerSelection {
                layer: l,
                filters: (0..graph.layers()[l].filters().expect("weighted")).collect(),
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|s| s.filters.len()).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|s| s.filters.len()).collect()
    }

    pub fn contains(&self, layer: usize, filter: usize) -> bool {
        self.layers
            .iter()
            .find(|s| s.layer == layer)
            .is_some_and(|s| s.filters.binary_search(&filter).is_ok())
    }

    /// Whether every set is contained in the matching set of `other`.
    pub fn is_subset_of(&self, other: &FilterSelection) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.layer == b.layer && a.filters.iter().all(|f| b.filters.binary_search(f).is_ok())
            })
    }
}

/// Binary mask aligned with the flat parameters: `false` marks a selected
/// (frozen) parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterMask {
    trainable: Vec<bool>,
}

impl ParameterMask {
    pub fn ones(len: usize) -> Self {
        Self { trainable: vec![true; len] }
    }

    pub fn zeros(len: usize) -> Self {
        Self { trainable: vec![false; len] }
    }

    pub fn from_bits(trainable: Vec<bool>) -> Self {
        Self { trainable }
    }

    pub fn len(&self) -> usize {
        self.trainable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trainable.is_empty()
    }

    /// Mask value at `i`: 0 for a selected parameter, 1 otherwise.
    pub fn value(&self, i: usize) -> u8 {
        self.trainable[i] as u8
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        !self.trainable[i]
    }

    pub fn frozen_count(&self) -> usize {
        self.trainable.iter().filter(|t| !**t).count()
    }

    pub fn frozen_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.trainable.iter().enumerate().filter(|(_, t)| !**t).map(|(i, _)| i)
    }

    pub fn trainable_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.trainable.iter().enumerate().filter(|(_, t)| **t).map(|(i, _)| i)
    }
}

/// Running statistics of one batchnorm layer over all of its channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnLayerStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Secret-task running statistics for every batchnorm layer, full width.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub layers: Vec<BnLayerStats>,
}

impl BnStats {
    /// The running statistics stored in `graph` itself.
    pub fn from_graph(graph: &ModelGraph) -> Self {
        let layers = graph
            .batchnorm_layers()
            .into_iter()
            .map(|l| BnLayerStats {
                mean: graph.role_slice(l, ParamRole::RunningMean).expect("bn").to_vec(),
                var: graph.role_slice(l, ParamRole::RunningVar).expect("bn").to_vec(),
            })
            .collect();
        Self { layers }
    }

    /// Total channel count over all layers.
    pub fn channel_count(&self) -> usize {
        self.layers.iter().map(|l| l.mean.len()).sum()
    }

    fn check(&self, graph: &ModelGraph) -> Result<()> {
        let bn = graph.batchnorm_layers();
        if bn.len() != self.layers.len() {
            return Err(GraphError::Selection(format!(
                "{} batchnorm layers but statistics for {}",
                bn.len(),
                self.layers.len()
            )));
        }
        for (k, (&l, s)) in bn.iter().zip(&self.layers).enumerate() {
            let LayerSpec::BatchNorm { channels } = graph.layers()[l] else { unreachable!() };
            if s.mean.len() != channels || s.var.len() != channels {
                return Err(GraphError::Selection(format!(
                    "statistics {k} hold {}/{} values for {channels} channels",
                    s.mean.len(),
                    s.var.len()
                )));
            }
        }
        Ok(())
    }
}

/// Where each parameter of an extracted sub-network lives in the full graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubnetMap {
    full_len: usize,
    to_full: Vec<usize>,
    roles: Vec<ParamRole>,
    /// For each batchnorm layer, its full width and the channel kept at
    /// each sub-network position.
    bn_channels: Vec<(usize, Vec<usize>)>,
}

impl SubnetMap {
    pub fn sub_len(&self) -> usize {
        self.to_full.len()
    }

    pub fn full_index(&self, sub: usize) -> usize {
        self.to_full[sub]
    }

    /// Pairs `(sub, full)` for the selected (gradient-trained) parameters.
    pub fn selected(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.to_full
            .iter()
            .zip(&self.roles)
            .enumerate()
            .filter(|(_, (_, r))| r.is_trainable())
            .map(|(s, (f, _))| (s, *f))
    }

    /// Sub-network parameter vector read out of a full vector.
    pub fn gather(&self, full: &[f32]) -> Vec<f32> {
        self.to_full.iter().map(|&i| full[i]).collect()
    }

    /// Writes the selected values of `sub` into `full` at their original
    /// positions. Running statistics are left alone.
    pub fn scatter_selected(&self, sub: &[f32], full: &mut [f32]) {
        for (s, f) in self.selected() {
            full[f] = sub[s];
        }
    }

    /// Full-width statistics from a sub-network's running buffers; channels
    /// outside the selection get mean 0 and variance 1.
    pub fn bn_stats(&self, sub: &ModelGraph) -> BnStats {
        let layers = sub
            .batchnorm_layers()
            .into_iter()
            .zip(&self.bn_channels)
            .map(|(l, (width, kept))| {
                let width = *width;
                let mut mean = vec![0.0; width];
                let mut var = vec![1.0; width];
                let (m, v) = (sub.role_slice(l, ParamRole::RunningMean).expect("bn"), sub.role_slice(l, ParamRole::RunningVar).expect("bn"));
                for (k, &c) in kept.iter().enumerate() {
                    mean[c] = m[k];
                    var[c] = v[k];
                }
                BnLayerStats { mean, var }
            })
            .collect();
        BnStats { layers }
    }

    pub fn full_len(&self) -> usize {
        self.full_len
    }
}

/// What survives of one layer in the sub-network.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Keep {
    /// Kept filter rows and input columns (channels for conv, expanded
    /// feature columns for dense).
    Weighted { rows: Vec<usize>, cols: Vec<usize> },
    Norm { channels: Vec<usize> },
    Pass,
    Drop,
}

impl ModelGraph {
    /// Layer index of the secret network's output layer.
    pub fn secret_output_layer(&self, adapt: &AdaptationMeta) -> Result<usize> {
        adapt.check(self)?;
        let w = self.weight_layers();
        Ok(match adapt.mode {
            AdaptMode::HiddenExtend => w[w.len() - 2],
            _ => w[w.len() - 1],
        })
    }

    /// Weighted layers that take part in filter selection, in chain order.
    pub fn selectable_layers(&self, adapt: &AdaptationMeta) -> Result<Vec<usize>> {
        let out = self.secret_output_layer(adapt)?;
        Ok(self.weight_layers().into_iter().filter(|&l| l < out).collect())
    }

    fn check_selection(&self, sel: &FilterSelection, adapt: &AdaptationMeta) -> Result<()> {
        let selectable = self.selectable_layers(adapt)?;
        if selectable.len() != sel.layers.len() {
            return Err(GraphError::Selection(format!(
                "{} selectable layers, selection covers {}",
                selectable.len(),
                sel.layers.len()
            )));
        }
        for (&l, s) in selectable.iter().zip(&sel.layers) {
            let d = self.layers()[l].filters().expect("weighted");
            if s.layer != l {
                return Err(GraphError::Selection(format!("expected layer {l}, found {}", s.layer)));
            }
            if s.filters.is_empty() {
                return Err(GraphError::Selection(format!("layer {l} has no selected filter")));
            }
            if !s.filters.windows(2).all(|w| w[0] < w[1]) || s.filters.last().is_some_and(|&f| f >= d) {
                return Err(GraphError::Selection(format!("layer {l} filters must be sorted, distinct and below {d}")));
            }
        }
        Ok(())
    }

    fn keep_plan(&self, sel: &FilterSelection, adapt: &AdaptationMeta) -> Result<Vec<Keep>> {
        self.check_selection(sel, adapt)?;
        let out = self.secret_output_layer(adapt)?;
        let mut chosen = sel.layers.iter();
        // kept channels and the total channel count they index into
        let mut state: Option<(Vec<usize>, usize)> = None;
        let mut plan = Vec::with_capacity(self.layers().len());
        for (l, spec) in self.layers().iter().enumerate() {
            if l > out {
                plan.push(Keep::Drop);
                continue;
            }
            let keep = match *spec {
                LayerSpec::Conv2d { out_filters, in_channels, .. } | LayerSpec::Dense { out_width: out_filters, in_width: in_channels } => {
                    let cols = match (&state, spec) {
                        (None, _) => (0..in_channels).collect(),
                        (Some((kept, _)), LayerSpec::Conv2d { .. }) => kept.clone(),
                        (Some((kept, total)), _) => {
                            let f = in_channels / total;
                            kept.iter().flat_map(|&j| j * f..(j + 1) * f).collect()
                        }
                    };
                    let rows: Vec<usize> = if l == out {
                        (0..adapt.original_output_dim).collect()
                    } else {
                        chosen.next().expect("checked").filters.clone()
                    };
                    state = Some((rows.clone(), out_filters));
                    Keep::Weighted { rows, cols }
                }
                LayerSpec::BatchNorm { channels } => {
                    let kept = state.get_or_insert_with(|| ((0..channels).collect(), channels)).0.clone();
                    Keep::Norm { channels: kept }
                }
                _ => Keep::Pass,
            };
            plan.push(keep);
        }
        Ok(plan)
    }

    /// Mask over this graph's parameters for `sel`.
    pub fn selection_to_mask(&self, sel: &FilterSelection, adapt: &AdaptationMeta) -> Result<ParameterMask> {
        let plan = self.keep_plan(sel, adapt)?;
        let mut trainable = vec![true; self.param_count()];
        for (l, keep) in plan.iter().enumerate() {
            for (full, role) in self.kept_indices(l, keep) {
                if role.is_trainable() {
                    trainable[full] = false;
                }
            }
        }
        Ok(ParameterMask::from_bits(trainable))
    }

    /// Flat indices, in sub-network canonical order, that a layer keeps.
    fn kept_indices(&self, l: usize, keep: &Keep) -> Vec<(usize, ParamRole)> {
        let spec = self.layers()[l];
        let mut out = Vec::new();
        match keep {
            Keep::Weighted { rows, cols } => {
                let w0 = self.role_range(l, ParamRole::Weight).expect("weighted").start;
                let b0 = self.role_range(l, ParamRole::Bias).expect("weighted").start;
                let (in_len, ksize) = match spec {
                    LayerSpec::Conv2d { in_channels, kernel, .. } => (in_channels, kernel.0 * kernel.1),
                    LayerSpec::Dense { in_width, .. } => (in_width, 1),
                    _ => unreachable!(),
                };
                for &r in rows {
                    for &c in cols {
                        let base = w0 + (r * in_len + c) * ksize;
                        out.extend((base..base + ksize).map(|i| (i, ParamRole::Weight)));
                    }
                }
                out.extend(rows.iter().map(|&r| (b0 + r, ParamRole::Bias)));
            }
            Keep::Norm { channels } => {
                for role in [ParamRole::Gamma, ParamRole::Beta, ParamRole::RunningMean, ParamRole::RunningVar] {
                    let s = self.role_range(l, role).expect("bn").start;
                    out.extend(channels.iter().map(|&c| (s + c, role)));
                }
            }
            Keep::Pass | Keep::Drop => {}
        }
        out
    }

    /// The secret network carried by this graph under `sel`.
    pub fn extract_subnetwork(&self, sel: &FilterSelection, bn_stats: &BnStats, adapt: &AdaptationMeta) -> Result<ModelGraph> {
        Ok(self.extract_with_map(sel, bn_stats, adapt)?.0)
    }

    /// [`extract_subnetwork`](Self::extract_subnetwork) plus the index map
    /// back into this graph.
    pub fn extract_with_map(&self, sel: &FilterSelection, bn_stats: &BnStats, adapt: &AdaptationMeta) -> Result<(ModelGraph, SubnetMap)> {
        bn_stats.check(self)?;
        let plan = self.keep_plan(sel, adapt)?;
        let bn_layers = self.batchnorm_layers();
        let mut layers = Vec::new();
        let mut params = Vec::new();
        let mut to_full = Vec::new();
        let mut roles = Vec::new();
        let mut bn_channels = Vec::new();
        for (l, keep) in plan.iter().enumerate() {
            let spec = self.layers()[l];
            let new_spec = match (keep, spec) {
                (Keep::Drop, _) => continue,
                (Keep::Pass, s) => s,
                (Keep::Weighted { rows, cols }, LayerSpec::Conv2d { kernel, stride, padding, .. }) => LayerSpec::Conv2d {
                    out_filters: rows.len(),
                    in_channels: cols.len(),
                    kernel,
                    stride,
                    padding,
                },
                (Keep::Weighted { rows, cols }, LayerSpec::Dense { .. }) => LayerSpec::dense(rows.len(), cols.len()),
                (Keep::Norm { channels }, LayerSpec::BatchNorm { channels: width }) => {
                    bn_channels.push((width, channels.clone()));
                    LayerSpec::BatchNorm { channels: channels.len() }
                }
                _ => unreachable!("plan follows layer kinds"),
            };
            for (full, role) in self.kept_indices(l, keep) {
                let value = match role {
                    ParamRole::RunningMean | ParamRole::RunningVar => {
                        let loc = self.locate(full)?;
                        let k = bn_layers.binary_search(&l).expect("bn layer");
                        let s = &bn_stats.layers[k];
                        if role == ParamRole::RunningMean { s.mean[loc.index[0]] } else { s.var[loc.index[0]] }
                    }
                    _ => self.params()[full],
                };
                params.push(value);
                to_full.push(full);
                roles.push(role);
            }
            layers.push(new_spec);
        }
        let sub = ModelGraph::new(layers, params).map_err(|e| GraphError::Invalid(format!("pruned network is inconsistent: {e}")))?;
        let map = SubnetMap { full_len: self.param_count(), to_full, roles, bn_channels };
        Ok((sub, map))
    }
}
