//! Histogram steganalysis: per-model parameter histograms, labelled model
//! pools and learned cover/stego detectors.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::disguise::{adapt_output_layer_with, fit, progressive_disguise, train_from_scratch, DisguiseConfig, DisguiseError, TaskData, TrainOptions};
use crate::graph::{GraphError, LayerSpec, ModelGraph};
use crate::sideinfo::{seal, SideInfoError, StegoKey};
use crate::tasks::{evaluate, evaluate_metric, Dataset, MetricKind, TaskError, TaskSpec, Targets};

pub const HISTOGRAM_BINS: usize = 100;

#[derive(Debug, Error)]
pub enum SteganalysisError {
    #[error("cannot histogram an empty parameter vector")]
    Empty,
    #[error("detector needs both classes and at least {min} samples, got {covers} covers and {stegos} stegos")]
    Degenerate { covers: usize, stegos: usize, min: usize },
    #[error("invalid pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Disguise(#[from] DisguiseError),
    #[error(transparent)]
    SideInfo(#[from] SideInfoError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, SteganalysisError>;

/// Equal-width histogram over `[min, max]` of `values`, normalized to sum
/// to one. A constant vector puts all mass in the first bin.
pub fn histogram(values: &[f32], bins: usize) -> Result<Vec<f64>> {
    if values.is_empty() || bins == 0 {
        return Err(SteganalysisError::Empty);
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    let mut counts = vec![0u64; bins];
    if hi > lo {
        let scale = bins as f64 / (hi - lo);
        for &v in values {
            let b = ((v as f64 - lo) * scale) as usize;
            counts[b.min(bins - 1)] += 1;
        }
    } else {
        counts[0] = values.len() as u64;
    }
    let n = values.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// The 100-bin histogram of every parameter of `model`.
pub fn histogram_feature(model: &ModelGraph) -> Result<Vec<f64>> {
    histogram(model.params(), HISTOGRAM_BINS)
}

/// A conv stack template instantiated per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchTemplate {
    pub name: String,
    /// Filters of each 3×3 conv layer; every conv but the last is followed
    /// by 2×2 max pooling.
    pub conv_filters: Vec<usize>,
    #[serde(default)]
    pub batchnorm: bool,
    /// Width of an optional hidden dense layer after global pooling.
    #[serde(default)]
    pub hidden: Option<usize>,
}

impl ArchTemplate {
    pub fn layers(&self, input_shape: [usize; 3], outputs: usize) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut c = input_shape[0];
        let mut side = input_shape[1].min(input_shape[2]);
        for (k, &d) in self.conv_filters.iter().enumerate() {
            layers.push(LayerSpec::conv(d, c, 3, 1));
            if self.batchnorm {
                layers.push(LayerSpec::BatchNorm { channels: d });
            }
            layers.push(LayerSpec::Relu);
            if k + 1 < self.conv_filters.len() && side >= 2 {
                layers.push(LayerSpec::MaxPool);
                side /= 2;
            }
            c = d;
        }
        layers.push(LayerSpec::AvgPoolGlobal);
        if let Some(h) = self.hidden {
            layers.push(LayerSpec::dense(h, c));
            layers.push(LayerSpec::Relu);
            c = h;
        }
        layers.push(LayerSpec::dense(outputs, c));
        layers
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskPair {
    pub name: String,
    pub secret: TaskSpec,
    pub stego: TaskSpec,
}

/// Training budget of pool members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolTraining {
    /// Epochs and learning rate for training each secret model.
    pub secret_epochs: usize,
    pub secret_lr: f32,
    pub disguise: DisguiseConfig,
}

impl Default for PoolTraining {
    fn default() -> Self {
        Self { secret_epochs: 10, secret_lr: 0.005, disguise: DisguiseConfig::default() }
    }
}

/// Detector training schedule and cross-validation folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub folds: usize,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { folds: 5, epochs: 200, lr: 0.01, batch_size: 16, seed: 0 }
    }
}

/// Grid of task pairs × architectures × seeds; each cell yields one cover
/// and one stego model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub task_pairs: Vec<TaskPair>,
    pub architectures: Vec<ArchTemplate>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub training: PoolTraining,
    #[serde(default)]
    pub detector: DetectorConfig,
    /// Stego keys are `key ^ seed`.
    #[serde(default)]
    pub key: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelLabel {
    Cover,
    Stego,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolMember {
    pub task_pair: String,
    pub architecture: String,
    pub seed: u64,
    pub label: ModelLabel,
    /// Stego-task metric of the model.
    pub metric: f64,
    pub param_count: usize,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolFailure {
    pub task_pair: String,
    pub architecture: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pool {
    pub members: Vec<PoolMember>,
    pub failures: Vec<PoolFailure>,
}

impl Pool {
    pub fn labelled(&self) -> (Vec<Vec<f64>>, Vec<usize>) {
        let x = self.members.iter().map(|m| m.feature.clone()).collect();
        let y = self.members.iter().map(|m| (m.label == ModelLabel::Stego) as usize).collect();
        (x, y)
    }
}

struct Cell<'a> {
    pair: &'a TaskPair,
    arch: &'a ArchTemplate,
    seed: u64,
}

fn train_cell(cell: &Cell<'_>, training: &PoolTraining, key: u64) -> Result<[PoolMember; 2]> {
    let Cell { pair, arch, seed } = *cell;
    let (se_train, se_test) = pair.secret.make_dataset()?;
    let (st_train, st_test) = pair.stego.make_dataset()?;
    let cfg = &training.disguise;
    let secret_layers = arch.layers(pair.secret.input_shape, pair.secret.output_dim());
    let secret_opts = TrainOptions { epochs: training.secret_epochs, lr: training.secret_lr, batch_size: cfg.batch_size, seed };
    let secret = train_from_scratch(secret_layers, &pair.secret, &se_train, &secret_opts, seed)?;

    // the cover shares the adapted stego architecture and the stego budget
    let (adapted, _) = adapt_output_layer_with(&secret, pair.stego.output_dim(), cfg.added_neurons, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let cover_opts = TrainOptions { epochs: cfg.epochs_stego, lr: cfg.lambda_t, batch_size: cfg.batch_size, seed: seed ^ 0xc0 };
    let cover = train_from_scratch(adapted.layers().to_vec(), &pair.stego, &st_train, &cover_opts, seed ^ 0xc1)?;
    let cover_metric = evaluate(&cover, &pair.stego, &st_test)?;

    let cell_cfg = DisguiseConfig { seed: cfg.seed ^ seed, cover_baseline: Some(cover_metric), ..cfg.clone() };
    let d = progressive_disguise(
        &secret,
        TaskData { spec: &pair.secret, train: &se_train, test: &se_test },
        TaskData { spec: &pair.stego, train: &st_train, test: &st_test },
        &cell_cfg,
    )?;
    let stego = seal(&d.stego, &d.selection, &d.adaptation, &d.bn_stats, StegoKey(key ^ seed))?;
    let stego_metric = evaluate(&stego, &pair.stego, &st_test)?;
    let member = |label, model: &ModelGraph, metric| -> Result<PoolMember> {
        Ok(PoolMember {
            task_pair: pair.name.clone(),
            architecture: arch.name.clone(),
            seed,
            label,
            metric,
            param_count: model.param_count(),
            feature: histogram_feature(model)?,
        })
    };
    Ok([member(ModelLabel::Cover, &cover, cover_metric)?, member(ModelLabel::Stego, &stego, stego_metric)?])
}

/// Trains every cell of the grid in parallel. A failing cell is recorded
/// and skipped.
pub fn build_pool(spec: &PoolSpec) -> Result<Pool> {
    if spec.task_pairs.is_empty() || spec.architectures.is_empty() || spec.seeds.is_empty() {
        return Err(SteganalysisError::Pool("task pairs, architectures and seeds must be nonempty".into()));
    }
    spec.training.disguise.validate()?;
    let cells: Vec<Cell<'_>> = spec
        .task_pairs
        .iter()
        .flat_map(|pair| spec.architectures.iter().flat_map(move |arch| spec.seeds.iter().map(move |&seed| Cell { pair, arch, seed })))
        .collect();
    let results: Vec<Result<[PoolMember; 2]>> = cells.par_iter().map(|c| train_cell(c, &spec.training, spec.key)).collect();
    let mut pool = Pool { members: Vec::new(), failures: Vec::new() };
    for (cell, r) in cells.iter().zip(results) {
        match r {
            Ok(pair) => pool.members.extend(pair),
            Err(e) => pool.failures.push(PoolFailure {
                task_pair: cell.pair.name.clone(),
                architecture: cell.arch.name.clone(),
                seed: cell.seed,
                error: e.to_string(),
            }),
        }
    }
    Ok(pool)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    /// Logistic regression, a single dense layer.
    Linear,
    /// One hidden layer of 64 units.
    Mlp,
}

impl DetectorKind {
    fn layers(self, width: usize) -> Vec<LayerSpec> {
        match self {
            DetectorKind::Linear => vec![LayerSpec::dense(2, width)],
            DetectorKind::Mlp => vec![LayerSpec::dense(64, width), LayerSpec::Relu, LayerSpec::dense(2, 64)],
        }
    }
}

/// Per-feature mean and scale fitted on training rows; constant features
/// map to zero.
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: &[&Vec<f64>]) -> Self {
        let w = rows[0].len();
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..w).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale = (0..w)
            .map(|j| {
                let sd = (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    0.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, rows: &[&Vec<f64>], labels: Vec<usize>) -> Dataset {
        let w = self.mean.len();
        let data = rows.iter().flat_map(|r| (0..w).map(move |j| ((r[j] - self.mean[j]) * self.scale[j]) as f32)).collect();
        Dataset::new([1, 1, w], data, Targets::Classes(labels)).expect("consistent rows")
    }
}

/// Fits a detector on `train` rows and returns its accuracy on `test` rows.
pub fn train_detector(kind: DetectorKind, train: (&[&Vec<f64>], &[usize]), test: (&[&Vec<f64>], &[usize]), cfg: &DetectorConfig) -> Result<f64> {
    let covers = train.1.iter().filter(|&&y| y == 0).count();
    let stegos = train.1.len() - covers;
    if covers == 0 || stegos == 0 || train.1.len() < 8 {
        return Err(SteganalysisError::Degenerate { covers, stegos, min: 8 });
    }
    let width = train.0[0].len();
    let std = Standardizer::fit(train.0);
    let train_set = std.apply(train.0, train.1.to_vec());
    let test_set = std.apply(test.0, test.1.to_vec());
    let mut model = ModelGraph::init(kind.layers(width), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let opts = TrainOptions { epochs: cfg.epochs, lr: cfg.lr, batch_size: cfg.batch_size, seed: cfg.seed };
    fit(&mut model, crate::tasks::LossKind::SoftmaxCrossEntropy, &train_set, &opts, None)?;
    Ok(evaluate_metric(&model, MetricKind::Accuracy, 2, &test_set)?)
}

/// Stratified k-fold estimate: every sample is scored once by a detector
/// that never saw it. Returns the pooled test accuracy.
pub fn cross_validate(kind: DetectorKind, features: &[Vec<f64>], labels: &[usize], cfg: &DetectorConfig) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf01d);
    let mut fold_of = vec![0usize; labels.len()];
    for class in 0..2 {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for (k, i) in idx.into_iter().enumerate() {
            fold_of[i] = k % cfg.folds.max(2);
        }
    }
    let folds = cfg.folds.max(2);
    let mut correct = 0.0;
    for f in 0..folds {
        let (tr, te): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| fold_of[i] != f);
        if te.is_empty() {
            continue;
        }
        let rows = |ids: &[usize]| ids.iter().map(|&i| &features[i]).collect::<Vec<_>>();
        let ys = |ids: &[usize]| ids.iter().map(|&i| labels[i]).collect::<Vec<_>>();
        let fold_cfg = DetectorConfig { seed: cfg.seed.wrapping_add(f as u64), ..*cfg };
        let acc = train_detector(kind, (&rows(&tr), &ys(&tr)), (&rows(&te), &ys(&te)), &fold_cfg)?;
        correct += acc * te.len() as f64;
    }
    Ok(correct / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub covers: usize,
    pub stegos: usize,
    pub failures: usize,
    pub folds: usize,
    pub linear_accuracy: f64,
    pub mlp_accuracy: f64,
}

impl DetectionReport {
    pub fn to_table(&self) -> String {
        format!(
            "detector  accuracy\nlinear    {:.4}\nmlp       {:.4}\n({} covers, {} stegos, {}-fold)\n",
            self.linear_accuracy, self.mlp_accuracy, self.covers, self.stegos, self.folds
        )
    }
}

/// Cross-validated accuracy of both detectors on a pool.
pub fn detect(pool: &Pool, cfg: &DetectorConfig) -> Result<DetectionReport> {
    let (x, y) = pool.labelled();
    let stegos = y.iter().sum();
    let (linear, mlp) = rayon::join(|| cross_validate(DetectorKind::Linear, &x, &y, cfg), || cross_validate(DetectorKind::Mlp, &x, &y, cfg));
    Ok(DetectionReport {
        covers: y.len() - stegos,
        stegos,
        failures: pool.failures.len(),
        folds: cfg.folds.max(2),
        linear_accuracy: linear?,
        mlp_accuracy: mlp?,
    })
}
