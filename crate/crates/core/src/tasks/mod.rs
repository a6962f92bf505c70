//! Procedural task pairs: datasets, losses and metrics.
//!
//! Three task kinds are supported. Classification scores accuracy under a
//! softmax cross-entropy loss, denoising scores PSNR under a mean squared
//! error, and bit decoding scores bit error rate under a sigmoid binary
//! cross-entropy.

mod generators;
mod raw;

pub use generators::TEXTURE_CLASSES;
pub use raw::{decode_raw, encode_raw, read_raw, write_raw, RawTensor};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, ModelGraph};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use generators::{Embedder, Geometry};

/// PSNR reported for an exact reconstruction.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TaskError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Denoising,
    BitDecoding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    Mse,
    SigmoidBce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    BitErrorRate,
    Psnr,
}

impl MetricKind {
    pub fn higher_is_better(self) -> bool {
        !matches!(self, MetricKind::BitErrorRate)
    }

    /// How much worse `current` is than `baseline`, in metric units.
    pub fn reduction(self, baseline: f64, current: f64) -> f64 {
        if self.higher_is_better() {
            baseline - current
        } else {
            current - baseline
        }
    }
}

/// Which procedural generator fills the dataset, with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum Generator {
    /// One Gaussian spot per image at a class-specific position.
    Blobs {
        classes: usize,
        /// Distance of class centres from the image centre, as a fraction
        /// of the image side.
        #[serde(default = "default_spread")]
        spread: f32,
        /// Position jitter in pixels.
        #[serde(default = "default_jitter")]
        jitter: f32,
        #[serde(default = "default_noise")]
        noise: f32,
    },
    /// One spot on one arm of a multi-armed spiral.
    Spiral {
        classes: usize,
        #[serde(default = "default_turns")]
        turns: f32,
        #[serde(default = "default_jitter")]
        jitter: f32,
        #[serde(default = "default_noise")]
        noise: f32,
    },
    /// Oriented gratings, six classes.
    Textures {
        #[serde(default = "default_noise")]
        noise: f32,
    },
    /// Textures corrupted by Gaussian noise; the target is the clean image.
    NoisyTextures { sigma: f32 },
    /// Textures carrying a message through a fixed seeded embedder.
    BitMessages {
        bits: usize,
        #[serde(default = "default_strength")]
        strength: f32,
    },
}

fn default_spread() -> f32 {
    0.25
}
fn default_jitter() -> f32 {
    1.0
}
fn default_noise() -> f32 {
    0.05
}
fn default_turns() -> f32 {
    0.75
}
fn default_strength() -> f32 {
    0.3
}

/// A reproducible task definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(flatten)]
    pub generator: Generator,
    pub seed: u64,
    /// `[channels, height, width]` of one input.
    pub input_shape: [usize; 3],
    pub train_size: usize,
    pub test_size: usize,
}

impl TaskSpec {
    pub fn kind(&self) -> TaskKind {
        match self.generator {
            Generator::Blobs { .. } | Generator::Spiral { .. } | Generator::Textures { .. } => TaskKind::Classification,
            Generator::NoisyTextures { .. } => TaskKind::Denoising,
            Generator::BitMessages { .. } => TaskKind::BitDecoding,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.generator {
            Generator::Blobs { classes, .. } | Generator::Spiral { classes, .. } => classes,
            Generator::Textures { .. } => TEXTURE_CLASSES,
            Generator::NoisyTextures { .. } => self.input_len(),
            Generator::BitMessages { bits, .. } => bits,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn loss(&self) -> LossKind {
        match self.kind() {
            TaskKind::Classification => LossKind::SoftmaxCrossEntropy,
            TaskKind::Denoising => LossKind::Mse,
            TaskKind::BitDecoding => LossKind::SigmoidBce,
        }
    }

    pub fn metric(&self) -> MetricKind {
        match self.kind() {
            TaskKind::Classification => MetricKind::Accuracy,
            TaskKind::Denoising => MetricKind::Psnr,
            TaskKind::BitDecoding => MetricKind::BitErrorRate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TaskError::Invalid(m.into()));
        if self.input_shape.contains(&0) {
            return bad("input extents must be positive");
        }
        if self.train_size == 0 || self.test_size == 0 {
            return bad("splits must be nonempty");
        }
        match self.generator {
            Generator::Blobs { classes, .. } | Generator::Spiral { classes, .. } if classes < 2 => bad("need at least two classes"),
            Generator::Blobs { jitter, noise, .. } | Generator::Spiral { jitter, noise, .. } if jitter < 0.0 || noise < 0.0 => {
                bad("jitter and noise must be non-negative")
            }
            Generator::Textures { noise } if noise < 0.0 => bad("noise must be non-negative"),
            Generator::NoisyTextures { sigma } if !(sigma >= 0.0) => bad("sigma must be non-negative"),
            Generator::BitMessages { bits: 0, .. } => bad("need at least one bit"),
            Generator::BitMessages { strength, .. } if !(strength > 0.0) => bad("strength must be positive"),
            _ => Ok(()),
        }
    }

    /// Train and test splits.
    pub fn make_dataset(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let g = Geometry { channels: self.input_shape[0], height: self.input_shape[1], width: self.input_shape[2] };
        // the embedder is shared by both splits
        let embedder = match self.generator {
            Generator::BitMessages { bits, strength } => {
                Some(Embedder::new(&g, bits, strength, &mut ChaCha8Rng::seed_from_u64(self.seed ^ 0xe3bed_de5)))
            }
            _ => None,
        };
        let train = self.generate(&g, embedder.as_ref(), self.train_size, self.seed);
        let test = self.generate(&g, embedder.as_ref(), self.test_size, self.seed ^ 0x7e57_7e57_7e57_7e57);
        Ok((train, test))
    }

    fn generate(&self, g: &Geometry, embedder: Option<&Embedder>, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = g.len();
        let mut inputs = vec![0.0f32; n * len];
        let targets = match self.generator {
            Generator::Blobs { classes, spread, jitter, noise } => {
                let labels = balanced_labels(n, classes, &mut rng);
                for (i, &k) in labels.iter().enumerate() {
                    generators::blob(g, k, classes, spread, jitter, noise, &mut rng, &mut inputs[i * len..(i + 1) * len]);
                }
                Targets::Classes(labels)
            }
            Generator::Spiral { classes, turns, jitter, noise } => {
                let labels = balanced_labels(n, classes, &mut rng);
                for (i, &k) in labels.iter().enumerate() {
                    generators::spiral(g, k, classes, turns, jitter, noise, &mut rng, &mut inputs[i * len..(i + 1) * len]);
                }
                Targets::Classes(labels)
            }
            Generator::Textures { noise } => {
                let labels = balanced_labels(n, TEXTURE_CLASSES, &mut rng);
                for (i, &k) in labels.iter().enumerate() {
                    generators::texture(g, k, noise, &mut rng, &mut inputs[i * len..(i + 1) * len]);
                }
                Targets::Classes(labels)
            }
            Generator::NoisyTextures { sigma } => {
                let mut clean = vec![0.0f32; n * len];
                for i in 0..n {
                    let k = rng.random_range(0..TEXTURE_CLASSES);
                    generators::texture(g, k, 0.0, &mut rng, &mut clean[i * len..(i + 1) * len]);
                }
                inputs.copy_from_slice(&clean);
                if sigma > 0.0 {
                    let normal = rand_distr::Normal::new(0.0f32, sigma).expect("finite sigma");
                    inputs.iter_mut().for_each(|v| *v += rand_distr::Distribution::sample(&normal, &mut rng));
                }
                Targets::Values { width: len, data: clean }
            }
            Generator::BitMessages { bits, .. } => {
                let embedder = embedder.expect("built for bit messages");
                let mut messages = vec![0.0f32; n * bits];
                for i in 0..n {
                    let k = rng.random_range(0..TEXTURE_CLASSES);
                    let img = &mut inputs[i * len..(i + 1) * len];
                    generators::texture(g, k, 0.02, &mut rng, img);
                    let m = &mut messages[i * bits..(i + 1) * bits];
                    m.iter_mut().for_each(|b| *b = if rng.random_bool(0.5) { 1.0 } else { 0.0 });
                    embedder.embed(m, img);
                }
                Targets::Values { width: bits, data: messages }
            }
        };
        Dataset { shape: self.input_shape, inputs, targets }
    }
}

/// Labels cycling through the classes, then shuffled.
fn balanced_labels<R: Rng + ?Sized>(n: usize, classes: usize, rng: &mut R) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values { width: usize, data: Vec<f32> },
}

impl Targets {
    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(l) => Targets::Classes(idx.iter().map(|&i| l[i]).collect()),
            Targets::Values { width, data } => Targets::Values {
                width: *width,
                data: idx.iter().flat_map(|&i| data[i * width..(i + 1) * width].iter().copied()).collect(),
            },
        }
    }
}

/// Inputs plus targets, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    inputs: Vec<f32>,
    targets: Targets,
}

/// One minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub y: Targets,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset {
    pub fn new(shape: [usize; 3], inputs: Vec<f32>, targets: Targets) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || inputs.len() % per != 0 {
            return Err(TaskError::Shape(format!("{} input values do not split into samples of {shape:?}", inputs.len())));
        }
        let n = inputs.len() / per;
        let ok = match &targets {
            Targets::Classes(l) => l.len() == n,
            Targets::Values { width, data } => *width > 0 && data.len() == n * width,
        };
        if !ok || n == 0 {
            return Err(TaskError::Shape(format!("targets do not match {n} samples")));
        }
        Ok(Self { shape, inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.sample_len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn inputs(&self) -> &[f32] {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    /// Samples `idx` as a batch.
    pub fn gather(&self, idx: &[usize]) -> Batch {
        let per = self.sample_len();
        let mut x = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            x.extend_from_slice(&self.inputs[i * per..(i + 1) * per]);
        }
        let shape = vec![idx.len(), self.shape[0], self.shape[1], self.shape[2]];
        Batch { x: Tensor::new(shape, x).expect("batch shape"), y: self.targets.select(idx) }
    }

    /// Batches in sample order, or shuffled by `shuffle_seed`. The last
    /// batch may be short.
    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Batch> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        order.chunks(batch_size.max(1)).map(|c| self.gather(c)).collect()
    }
}

/// Records the task loss of `out` against `y` on the tape.
pub fn loss_on_tape(tape: &mut Tape, loss: LossKind, out: Var, y: &Targets) -> Result<Var> {
    Ok(match (loss, y) {
        (LossKind::SoftmaxCrossEntropy, Targets::Classes(labels)) => tape.softmax_cross_entropy(out, labels)?,
        (LossKind::Mse | LossKind::SigmoidBce, Targets::Values { width, data }) => {
            let n = data.len() / width;
            let target = tape.leaf(Tensor::new(vec![n, *width], data.clone())?);
            if loss == LossKind::Mse {
                tape.mse(out, target)?
            } else {
                tape.sigmoid_bce(out, target)?
            }
        }
        _ => return Err(TaskError::Invalid(format!("{loss:?} does not fit the target kind"))),
    })
}

/// Per-sample scores: 1/0 correctness, wrong-bit counts, or PSNR.
fn score_batch(metric: MetricKind, out: &Tensor, y: &Targets) -> Result<Vec<f64>> {
    let n = out.shape()[0];
    let width = out.len() / n;
    let rows = out.data().chunks_exact(width);
    Ok(match (metric, y) {
        (MetricKind::Accuracy, Targets::Classes(labels)) => rows
            .zip(labels)
            .map(|(r, &l)| {
                // first maximum wins
                let arg = r.iter().enumerate().fold(0, |best, (i, v)| if *v > r[best] { i } else { best });
                (arg == l) as u8 as f64
            })
            .collect(),
        (MetricKind::BitErrorRate, Targets::Values { width: w, data }) if *w == width => rows
            .zip(data.chunks_exact(width))
            .map(|(r, t)| r.iter().zip(t).filter(|(logit, bit)| (**logit > 0.0) != (**bit > 0.5)).count() as f64)
            .collect(),
        (MetricKind::Psnr, Targets::Values { width: w, data }) if *w == width => rows
            .zip(data.chunks_exact(width))
            .map(|(r, t)| psnr(r, t))
            .collect(),
        _ => return Err(TaskError::Shape(format!("{metric:?} cannot score output width {width}"))),
    })
}

/// `10·log10(1/MSE)` on unit-range images, capped for exact matches.
pub fn psnr(pred: &[f32], target: &[f32]) -> f64 {
    let mse = pred.iter().zip(target).map(|(p, t)| (*p as f64 - *t as f64).powi(2)).sum::<f64>() / pred.len() as f64;
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Metric of `model` on `data`.
pub fn evaluate(model: &ModelGraph, task: &TaskSpec, data: &Dataset) -> Result<f64> {
    evaluate_metric(model, task.metric(), task.output_dim(), data)
}

/// [`evaluate`] with the metric given directly. Batches are scored in
/// parallel and the per-sample scores reduced in sample order.
pub fn evaluate_metric(model: &ModelGraph, metric: MetricKind, output_dim: usize, data: &Dataset) -> Result<f64> {
    if model.output_dim() != output_dim {
        return Err(TaskError::Shape(format!("model produces {} outputs, task expects {output_dim}", model.output_dim())));
    }
    let batches = data.batches(128, None);
    let scores: Vec<Vec<f64>> = batches
        .par_iter()
        .map(|b| {
            let out = model.predict(&b.x)?;
            score_batch(metric, &out, &b.y)
        })
        .collect::<Result<_>>()?;
    let total: f64 = scores.iter().flatten().sum();
    let n = data.len() as f64;
    Ok(match metric {
        MetricKind::BitErrorRate => total / (n * output_dim as f64),
        _ => total / n,
    })
}
