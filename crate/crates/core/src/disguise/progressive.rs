use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{finetune_secret, fit, train_stego_masked, TrainOptions};
use super::{adapt_output_layer_with, AdaptationMeta, DisguiseError, Result};
use crate::graph::{BnStats, FilterSelection, ModelGraph};
use crate::importance::{score_filters, select_top, GradOptions, TaskGrads};
use crate::tasks::{evaluate, Dataset, MetricKind, TaskSpec};

/// Hyperparameters of the progressive loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisguiseConfig {
    /// Weight of stego-task importance in the filter score.
    pub lambda_g: f64,
    /// Secret fine-tuning learning rate.
    pub lambda_e: f32,
    /// Stego training learning rate.
    pub lambda_t: f32,
    /// Per-iteration shrink factor of the selection.
    pub lambda_p: f64,
    /// Largest tolerated secret-metric reduction; defaults by metric.
    pub tau_se: Option<f64>,
    /// Stego-metric reduction below which the loop stops.
    pub tau_st: f64,
    pub epochs_secret: usize,
    pub epochs_stego: usize,
    pub grad_batches: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Extra hidden neurons when the secret output is wider than the stego
    /// output; defaults to a quarter of the secret width, rounded up.
    pub added_neurons: Option<usize>,
    /// Stego metric of a cover model; trained here when absent.
    pub cover_baseline: Option<f64>,
}

impl Default for DisguiseConfig {
    fn default() -> Self {
        Self {
            lambda_g: 0.01,
            lambda_e: 0.001,
            lambda_t: 0.001,
            lambda_p: 0.9,
            tau_se: None,
            tau_st: 0.01,
            epochs_secret: 5,
            epochs_stego: 10,
            grad_batches: 10,
            batch_size: 32,
            seed: 0,
            added_neurons: None,
            cover_baseline: None,
        }
    }
}

/// Secret tolerance used when none is configured.
pub fn default_tau_se(metric: MetricKind) -> f64 {
    match metric {
        MetricKind::BitErrorRate => 0.0001,
        MetricKind::Accuracy => 0.01,
        MetricKind::Psnr => 0.5,
    }
}

impl DisguiseConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DisguiseError::Config(m.into()));
        if !(self.lambda_p > 0.0 && self.lambda_p < 1.0) {
            return bad("lambda_p must lie in (0, 1)");
        }
        if !(self.lambda_e > 0.0 && self.lambda_t > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.lambda_g >= 0.0) || !(self.tau_st >= 0.0) || self.tau_se.is_some_and(|t| !(t >= 0.0)) {
            return bad("lambda_g and thresholds must be non-negative");
        }
        if self.grad_batches == 0 || self.batch_size == 0 {
            return bad("grad_batches and batch_size must be positive");
        }
        Ok(())
    }

    fn train(&self, epochs: usize, lr: f32, stream: u64) -> TrainOptions {
        TrainOptions { epochs, lr, batch_size: self.batch_size, seed: mix(self.seed, stream) }
    }

    fn grads(&self) -> GradOptions {
        GradOptions { batches: self.grad_batches, batch_size: self.batch_size }
    }
}

fn mix(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Selection size for iteration `t`.
pub fn schedule(lambda_p: f64, total_filters: usize, t: u32) -> usize {
    (lambda_p.powi(t as i32) * total_filters as f64).round() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationOutcome {
    Continue,
    BreakSuccess,
    Rollback,
}

/// Why the loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Both thresholds met.
    Success,
    /// The secret threshold broke; the previous iterate was returned.
    Rollback,
    /// The schedule can no longer shrink the selection; the last iterate
    /// was returned.
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: u32,
    pub p_t: usize,
    pub alpha_se: f64,
    pub alpha_st: f64,
    pub secret_metric: f64,
    pub stego_metric: f64,
    pub selection_sizes: Vec<usize>,
    pub selection: FilterSelection,
    pub outcome: IterationOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisguiseReport {
    pub total_filters: usize,
    pub selectable_layers: Vec<usize>,
    pub secret_metric: MetricKind,
    pub stego_metric: MetricKind,
    pub secret_baseline: f64,
    pub stego_baseline: f64,
    pub tau_se: f64,
    pub tau_st: f64,
    pub iterations: Vec<IterationRecord>,
    /// Iteration whose artifacts were returned.
    pub returned_iteration: u32,
    pub termination: Termination,
}

impl DisguiseReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Result of the progressive loop, before side information is embedded.
#[derive(Debug, Clone)]
pub struct Disguised {
    pub stego: ModelGraph,
    pub selection: FilterSelection,
    pub adaptation: AdaptationMeta,
    pub bn_stats: BnStats,
    /// Sender-side tuned secret sub-network.
    pub secret: ModelGraph,
    pub report: DisguiseReport,
}

/// One task's data and definition.
#[derive(Debug, Clone, Copy)]
pub struct TaskData<'a> {
    pub spec: &'a TaskSpec,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
}

/// Trains a model of `layers` from scratch.
pub fn train_from_scratch(layers: Vec<crate::graph::LayerSpec>, task: &TaskSpec, data: &Dataset, opts: &TrainOptions, init_seed: u64) -> Result<ModelGraph> {
    let mut model = ModelGraph::init(layers, &mut ChaCha8Rng::seed_from_u64(init_seed))?;
    fit(&mut model, task.loss(), data, opts, None)?;
    Ok(model)
}

struct Iterate {
    t: u32,
    stego: ModelGraph,
    selection: FilterSelection,
    bn_stats: BnStats,
    secret: ModelGraph,
}

/// Progressively shrinks the secret selection while training the rest of
/// the network on the stego task.
pub fn progressive_disguise(secret: &ModelGraph, secret_task: TaskData<'_>, stego_task: TaskData<'_>, cfg: &DisguiseConfig) -> Result<Disguised> {
    cfg.validate()?;
    if secret.output_dim() != secret_task.spec.output_dim() {
        return Err(DisguiseError::Config(format!(
            "secret model has {} outputs, secret task needs {}",
            secret.output_dim(),
            secret_task.spec.output_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1));
    let (stego0, adapt) = adapt_output_layer_with(secret, stego_task.spec.output_dim(), cfg.added_neurons, &mut rng)?;
    let selectable = stego0.selectable_layers(&adapt)?;
    if selectable.is_empty() {
        return Err(DisguiseError::Config("secret model has no selectable layer".into()));
    }
    let total = stego0.filter_count(&selectable);
    let secret_metric = secret_task.spec.metric();
    let stego_metric = stego_task.spec.metric();
    let tau_se = cfg.tau_se.unwrap_or_else(|| default_tau_se(secret_metric));

    let secret_baseline = evaluate(secret, secret_task.spec, secret_task.test)?;
    let stego_baseline = match cfg.cover_baseline {
        Some(b) => b,
        None => {
            let cover = train_from_scratch(
                stego0.layers().to_vec(),
                stego_task.spec,
                stego_task.train,
                &cfg.train(cfg.epochs_stego, cfg.lambda_t, 2),
                mix(cfg.seed, 3),
            )?;
            evaluate(&cover, stego_task.spec, stego_task.test)?
        }
    };

    let mut report = DisguiseReport {
        total_filters: total,
        selectable_layers: selectable.clone(),
        secret_metric,
        stego_metric,
        secret_baseline,
        stego_baseline,
        tau_se,
        tau_st: cfg.tau_st,
        iterations: Vec::new(),
        returned_iteration: 0,
        termination: Termination::Exhausted,
    };

    let mut prev = Iterate {
        t: 0,
        selection: FilterSelection::all(&stego0, &adapt)?,
        bn_stats: BnStats::from_graph(secret),
        secret: secret.clone(),
        stego: stego0.clone(),
    };
    let mut t = 1u32;
    let finish = |prev: Iterate, mut report: DisguiseReport, termination| {
        report.returned_iteration = prev.t;
        report.termination = termination;
        Disguised { stego: prev.stego, selection: prev.selection, adaptation: adapt, bn_stats: prev.bn_stats, secret: prev.secret, report }
    };
    loop {
        let p_t = schedule(cfg.lambda_p, total, t);
        if p_t < selectable.len() || p_t >= prev.selection.total() {
            if t == 1 {
                return Err(DisguiseError::Floor(format!("first selection of {p_t} filters cannot shrink {total} filters over {} layers", selectable.len())));
            }
            return Ok(finish(prev, report, Termination::Exhausted));
        }
        let scores = score_filters(
            TaskGrads { model: &prev.secret, loss: secret_task.spec.loss(), data: secret_task.train },
            TaskGrads { model: &prev.stego, loss: stego_task.spec.loss(), data: stego_task.train },
            &prev.selection,
            cfg.lambda_g,
            &cfg.grads(),
        )?;
        let selection = select_top(&scores, p_t)?;

        // warm start from the previous tuned values, which the previous
        // stego model holds exactly
        let warm = prev.stego.extract_subnetwork(&selection, &prev.bn_stats, &adapt)?;
        let tuned = finetune_secret(&warm, secret_task.spec.loss(), secret_task.train, &cfg.train(cfg.epochs_secret, cfg.lambda_e, 10 + 2 * t as u64))?;
        let mut stego = ModelGraph::init(stego0.layers().to_vec(), &mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, 11 + 2 * t as u64)))?;
        let (_, map) = stego.extract_with_map(&selection, &prev.bn_stats, &adapt)?;
        map.scatter_selected(tuned.params(), stego.params_mut());
        let bn_stats = map.bn_stats(&tuned);
        let mask = stego.selection_to_mask(&selection, &adapt)?;
        let stego = train_stego_masked(&stego, &mask, stego_task.spec.loss(), stego_task.train, &cfg.train(cfg.epochs_stego, cfg.lambda_t, 12 + 2 * t as u64))?;

        let recovered = stego.extract_subnetwork(&selection, &bn_stats, &adapt)?;
        let secret_now = evaluate(&recovered, secret_task.spec, secret_task.test)?;
        let stego_now = evaluate(&stego, stego_task.spec, stego_task.test)?;
        let alpha_se = secret_metric.reduction(secret_baseline, secret_now);
        let alpha_st = stego_metric.reduction(stego_baseline, stego_now);
        let mut record = IterationRecord {
            t,
            p_t,
            alpha_se,
            alpha_st,
            secret_metric: secret_now,
            stego_metric: stego_now,
            selection_sizes: selection.sizes(),
            selection: selection.clone(),
            outcome: IterationOutcome::Continue,
        };
        if alpha_se >= tau_se {
            if t == 1 {
                return Err(DisguiseError::SecretViolation { alpha_se, tau_se });
            }
            record.outcome = IterationOutcome::Rollback;
            report.iterations.push(record);
            return Ok(finish(prev, report, Termination::Rollback));
        }
        let current = Iterate { t, stego, selection, bn_stats, secret: tuned };
        if alpha_st < cfg.tau_st {
            record.outcome = IterationOutcome::BreakSuccess;
            report.iterations.push(record);
            return Ok(finish(current, report, Termination::Success));
        }
        report.iterations.push(record);
        prev = current;
        t += 1;
    }
}
