use crate::graph::{ModelGraph, ParamRole, ParameterMask};
use crate::tasks::{loss_on_tape, Dataset, LossKind, TaskError};
use crate::tensor::{Adam, Tape, TensorError};

use super::{DisguiseError, Result};

/// Minibatch Adam schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    /// Shuffle seed; epoch `e` shuffles with `seed + e`.
    pub seed: u64,
}

fn divergence(e: TensorError) -> DisguiseError {
    match e {
        TensorError::NonFinite(what) => DisguiseError::Divergence(what),
        other => DisguiseError::Task(TaskError::Tensor(other)),
    }
}

/// Trains `model` in place on `data` and returns the mean loss per epoch.
///
/// With a mask only its trainable positions are updated; every other
/// parameter keeps its exact bit pattern. Running statistics are refreshed
/// from the batches either way.
pub fn fit(model: &mut ModelGraph, loss: LossKind, data: &Dataset, opts: &TrainOptions, mask: Option<&ParameterMask>) -> Result<Vec<f64>> {
    let trainable = trainable_positions(model);
    let active: Vec<usize> = match mask {
        Some(m) => {
            if m.len() != model.param_count() {
                return Err(DisguiseError::Config(format!("mask has {} entries for {} parameters", m.len(), model.param_count())));
            }
            m.trainable_indices().filter(|&i| trainable[i]).collect()
        }
        None => (0..model.param_count()).filter(|&i| trainable[i]).collect(),
    };
    let mut adam = Adam::masked(active, opts.lr);
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut total = 0.0f64;
        let mut seen = 0usize;
        for batch in data.batches(opts.batch_size, Some(opts.seed.wrapping_add(epoch as u64))) {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true)?;
            let x = tape.leaf(batch.x.clone());
            let out = model.forward(&mut tape, &bound, x, true).map_err(|e| match e {
                crate::graph::GraphError::Tensor(t) => divergence(t),
                other => other.into(),
            })?;
            let l = loss_on_tape(&mut tape, loss, out, &batch.y).map_err(|e| match e {
                TaskError::Tensor(t) => divergence(t),
                other => other.into(),
            })?;
            let value = tape.value(l).item().map_err(divergence)?;
            if !value.is_finite() {
                return Err(DisguiseError::Divergence(format!("loss {value} in epoch {epoch}")));
            }
            tape.backward(l).map_err(divergence)?;
            let grads = model.flat_grad(&tape, &bound);
            model.store_running_stats(&tape, &bound);
            adam.step(model.params_mut(), &grads).map_err(divergence)?;
            total += value as f64 * batch.len() as f64;
            seen += batch.len();
        }
        history.push(total / seen.max(1) as f64);
    }
    if model.params().iter().any(|p| !p.is_finite()) {
        return Err(DisguiseError::Divergence("non-finite parameter after training".into()));
    }
    Ok(history)
}

fn trainable_positions(model: &ModelGraph) -> Vec<bool> {
    let mut out = vec![true; model.param_count()];
    for l in model.batchnorm_layers() {
        for role in [ParamRole::RunningMean, ParamRole::RunningVar] {
            let r = model.role_range(l, role).expect("bn");
            out[r].iter_mut().for_each(|v| *v = false);
        }
    }
    out
}

/// Fine-tunes every parameter of an extracted secret sub-network.
pub fn finetune_secret(sub: &ModelGraph, loss: LossKind, data: &Dataset, opts: &TrainOptions) -> Result<ModelGraph> {
    let mut tuned = sub.clone();
    fit(&mut tuned, loss, data, opts, None)?;
    Ok(tuned)
}

/// Trains the mask's trainable positions on the stego task.
pub fn train_stego_masked(model: &ModelGraph, mask: &ParameterMask, loss: LossKind, data: &Dataset, opts: &TrainOptions) -> Result<ModelGraph> {
    let mut out = model.clone();
    fit(&mut out, loss, data, opts, Some(mask))?;
    Ok(out)
}
