//! One function per subcommand; each returns its stdout JSON line.

use std::fs;
use std::path::{Path, PathBuf};

use netdisguise::disguise::{adapt_output_layer, progressive_disguise, train_from_scratch, DisguiseConfig, TaskData, Termination, TrainOptions};
use netdisguise::graph::{load_model, FilterSelection, LayerSpec, ModelGraph};
use netdisguise::importance::{score_filters, GradOptions, TaskGrads};
use netdisguise::recovery::expansion_rate;
use netdisguise::sideinfo::{payload_len, seal, StegoKey};
use netdisguise::steganalysis::{build_pool, detect, ArchTemplate, PoolSpec};
use netdisguise::tasks::{evaluate as metric_on, TaskSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::{CliError, Result};
use crate::schema::load;

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainConfig {
    epochs: usize,
    lr: f32,
    batch_size: usize,
    /// Shuffle seed.
    seed: u64,
    /// Weight initialization seed.
    init_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 0.001, batch_size: 32, seed: 0, init_seed: 0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum Arch {
    Layers(Vec<LayerSpec>),
    Template(ArchTemplate),
}

fn read_model(path: &Path) -> Result<ModelGraph> {
    if !path.exists() {
        return Err(CliError::io(path, "no such file"));
    }
    Ok(load_model(path)?)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_model(path: &Path, model: &ModelGraph) -> Result<()> {
    write_file(path, &netdisguise::graph::write_model(model))
}

fn task(path: &Path) -> Result<TaskSpec> {
    let spec: TaskSpec = load(path, "task")?;
    spec.validate()?;
    Ok(spec)
}

fn metric(spec: &TaskSpec, value: f64) -> Value {
    json!({ "kind": spec.metric(), "value": value })
}

pub fn train(task_path: &Path, arch_path: &Path, config: Option<&Path>, out: &Path) -> Result<Value> {
    let spec = task(task_path)?;
    let cfg: TrainConfig = config.map(|p| load(p, "train")).transpose()?.unwrap_or_default();
    let layers = match load(arch_path, "arch")? {
        Arch::Layers(layers) => layers,
        Arch::Template(t) => t.layers(spec.input_shape, spec.output_dim()),
    };
    let (train, test) = spec.make_dataset()?;
    let opts = TrainOptions { epochs: cfg.epochs, lr: cfg.lr, batch_size: cfg.batch_size, seed: cfg.seed };
    let model = train_from_scratch(layers, &spec, &train, &opts, cfg.init_seed)?;
    let value = metric_on(&model, &spec, &test)?;
    write_model(out, &model)?;
    Ok(json!({ "command": "train", "model": out.display().to_string(), "params": model.param_count(), "metric": metric(&spec, value) }))
}

pub struct DisguiseArgs {
    pub secret: PathBuf,
    pub secret_task: PathBuf,
    pub stego_task: PathBuf,
    pub config: Option<PathBuf>,
    pub key: u64,
    pub out: PathBuf,
    pub report: PathBuf,
}

pub fn disguise(args: &DisguiseArgs) -> Result<Value> {
    let secret = read_model(&args.secret)?;
    let (se_spec, st_spec) = (task(&args.secret_task)?, task(&args.stego_task)?);
    let cfg: DisguiseConfig = args.config.as_deref().map(|p| load(p, "disguise")).transpose()?.unwrap_or_default();
    cfg.validate()?;
    let (se_train, se_test) = se_spec.make_dataset()?;
    let (st_train, st_test) = st_spec.make_dataset()?;
    let d = progressive_disguise(
        &secret,
        TaskData { spec: &se_spec, train: &se_train, test: &se_test },
        TaskData { spec: &st_spec, train: &st_train, test: &st_test },
        &cfg,
    )?;
    let stego = seal(&d.stego, &d.selection, &d.adaptation, &d.bn_stats, StegoKey(args.key))?;
    let stego_value = metric_on(&stego, &st_spec, &st_test)?;
    let returned = d.report.iterations.iter().find(|r| r.t == d.report.returned_iteration).expect("returned iteration is recorded");
    write_model(&args.out, &stego)?;
    write_file(&args.report, format!("{}\n", d.report.to_json()).as_bytes())?;
    let termination = match d.report.termination {
        Termination::Success => "success",
        Termination::Rollback => "rollback",
        Termination::Exhausted => "exhausted",
    };
    Ok(json!({
        "command": "disguise",
        "stego": args.out.display().to_string(),
        "report": args.report.display().to_string(),
        "params": stego.param_count(),
        "termination": termination,
        "iterations": d.report.iterations.len(),
        "secret_metric": metric(&se_spec, returned.secret_metric),
        "stego_metric": metric(&st_spec, stego_value),
        "payload_bytes": payload_len(&stego),
    }))
}

pub fn recover(stego_path: &Path, key: u64, out: &Path) -> Result<Value> {
    let stego = read_model(stego_path)?;
    let secret = netdisguise::recovery::recover(&stego, StegoKey(key))?;
    write_model(out, &secret)?;
    Ok(json!({ "command": "recover", "model": out.display().to_string(), "params": secret.param_count(), "output_dim": secret.output_dim() }))
}

pub fn evaluate(model_path: &Path, task_path: &Path) -> Result<Value> {
    let model = read_model(model_path)?;
    let spec = task(task_path)?;
    if model.output_dim() != spec.output_dim() {
        return Err(CliError::config(format!("model has {} outputs but the task needs {}", model.output_dim(), spec.output_dim())));
    }
    let (_, test) = spec.make_dataset()?;
    let value = metric_on(&model, &spec, &test)?;
    Ok(json!({ "command": "evaluate", "metric": metric(&spec, value), "samples": test.len() }))
}

pub fn capacity(secret_path: &Path, stego_path: &Path) -> Result<Value> {
    let (secret, stego) = (read_model(secret_path)?, read_model(stego_path)?);
    let e = expansion_rate(&secret, &stego);
    Ok(json!({
        "command": "capacity",
        "secret_params": secret.param_count(),
        "stego_params": stego.param_count(),
        "expansion_rate": e,
        "display": format!("{e:.2}"),
    }))
}

pub fn steganalyze(pool_path: &Path, manifest: Option<&Path>, table: Option<&Path>) -> Result<Value> {
    let spec: PoolSpec = load(pool_path, "pool")?;
    let pool = build_pool(&spec)?;
    if let Some(path) = manifest {
        write_file(path, format!("{}\n", serde_json::to_string_pretty(&pool).expect("pool serializes")).as_bytes())?;
    }
    let report = detect(&pool, &spec.detector)?;
    if let Some(path) = table {
        write_file(path, report.to_table().as_bytes())?;
    }
    Ok(json!({
        "command": "steganalyze",
        "covers": report.covers,
        "stegos": report.stegos,
        "failures": report.failures,
        "folds": report.folds,
        "linear_accuracy": report.linear_accuracy,
        "mlp_accuracy": report.mlp_accuracy,
    }))
}

pub struct Scoring {
    pub secret_task: PathBuf,
    pub stego_task: PathBuf,
    pub lambda_g: f64,
    pub batches: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Summary statistics over the finite values; `null` moments when none are.
fn stats(values: &[f32]) -> Value {
    let finite: Vec<f64> = values.iter().filter(|v| v.is_finite()).map(|&v| v as f64).collect();
    let non_finite = values.len() - finite.len();
    if finite.is_empty() {
        return json!({ "min": null, "max": null, "mean": null, "std": null, "non_finite": non_finite });
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    json!({ "min": min, "max": max, "mean": mean, "std": var.sqrt(), "non_finite": non_finite })
}

pub fn inspect(model_path: &Path, scoring: Option<&Scoring>) -> Result<Value> {
    let model = read_model(model_path)?;
    let layers: Vec<Value> = model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let params = &model.params()[model.layer_range(i)];
            json!({ "index": i, "kind": l.name(), "params": params.len(), "filters": l.filters(), "stats": (!params.is_empty()).then(|| stats(params)) })
        })
        .collect();
    let mut out = json!({ "command": "inspect", "params": model.param_count(), "output_dim": model.output_dim(), "layers": layers, "stats": stats(model.params()) });
    if let Some(s) = scoring {
        let (se_spec, st_spec) = (task(&s.secret_task)?, task(&s.stego_task)?);
        if model.output_dim() != se_spec.output_dim() {
            return Err(CliError::config(format!("model has {} outputs but the secret task needs {}", model.output_dim(), se_spec.output_dim())));
        }
        let (se_train, _) = se_spec.make_dataset()?;
        let (st_train, _) = st_spec.make_dataset()?;
        let (adapted, adapt) = adapt_output_layer(&model, st_spec.output_dim(), &mut ChaCha8Rng::seed_from_u64(s.seed))?;
        let candidate = FilterSelection::all(&adapted, &adapt)?;
        let scores = score_filters(
            TaskGrads { model: &model, loss: se_spec.loss(), data: &se_train },
            TaskGrads { model: &adapted, loss: st_spec.loss(), data: &st_train },
            &candidate,
            s.lambda_g,
            &GradOptions { batches: s.batches, batch_size: s.batch_size },
        )?;
        out["scores"] = serde_json::to_value(&scores).expect("scores serialize");
    }
    Ok(out)
}
