//! Command-line front end. Every run writes `run.json` next to its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::autodiff::{grad_check, GradCheckOptions, Tape, Tensor, TensorError};
use crate::layers::Bound;
use crate::metrics::{
    cavity_scores, coplanarity_score, inception_mode_score, mmd_cov, symmetry_score, threshold_curve,
    ClassifierTrainConfig, Ground, MetricError, MirrorPlane, ModeClassifier,
};
use crate::model::{Batch, ModelConfig, ModelError, SagNet};
use crate::seeds::{derive_seed, SeedConcern};
use crate::shapes::{class_id, load_dataset, save_dataset, write_obj, ShapeError, ShapeSample};
use crate::synthjoints::{generate_dataset, save_labels, JointError, JointRanges, JOINT_CLASS_ID};
use crate::tasks::{
    complete, interpolate, map_modality, sample_shapes, CompletionProblem, Direction, MaskPolicy, TaskError,
};
use crate::training::{forward_loss, train, TrainConfig, TrainError};

pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Joint(#[from] JointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
    #[error("gradient check failed: max relative error {0:e}")]
    GradCheck(f64),
}

fn io_err(path: &Path, e: impl ToString) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

#[derive(Debug, Parser)]
#[command(name = "sagnet", version, about = "Part-based voxel shape generation with box structure")]
pub struct Cli {
    /// Worker threads for batch evaluation and data generation (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Sample shapes from the prior.
    Sample(SampleArgs),
    /// Interpolate between two dataset shapes.
    Interpolate(InterpolateArgs),
    /// Complete a shape with missing parts.
    Complete(CompleteArgs),
    /// Infer boxes from voxels (g2s) or voxels from boxes (s2g).
    Map(MapArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Finite-difference check of the end-to-end loss gradient.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    /// Shape class; only `joint` can be generated.
    #[arg(long, default_value = "joint")]
    pub class: String,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub resolution: usize,
    /// Cycle through the eight modes instead of drawing them.
    #[arg(long)]
    pub stratified: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub iters: usize,
    /// Warm-up iterations (default: 20% of --iters).
    #[arg(long)]
    pub phase1: Option<usize>,
    /// Iterations over which the KL and feature weights ramp to 0.8 (default: the rest, at most 60000).
    #[arg(long)]
    pub ramp: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 10.0)]
    pub box_weight: f64,
    #[arg(long, default_value_t = 1000)]
    pub checkpoint_every: usize,
    #[arg(long, default_value_t = 512)]
    pub latent: usize,
    #[arg(long, default_value_t = 512)]
    pub feature: usize,
    /// Attention exchange iterations.
    #[arg(long, default_value_t = 2)]
    pub exchange: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training set whose masks are resampled (default: all parts present).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Also write one OBJ file per shape.
    #[arg(long)]
    pub obj: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub a: usize,
    #[arg(long, default_value_t = 1)]
    pub b: usize,
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    #[arg(long)]
    pub obj: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CompleteArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Comma-separated part indices to knock out and regenerate.
    #[arg(long, value_delimiter = ',', required = true)]
    pub missing: Vec<usize>,
    #[arg(long, default_value_t = 300)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub obj: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MapArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// g2s or s2g.
    #[arg(long)]
    pub direction: String,
    #[arg(long, default_value_t = 300)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub obj: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Training set used as the reference distribution.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated subset of cavity, mmd, cov, inception, symmetry, coplanarity.
    #[arg(long, value_delimiter = ',', default_value = "mmd,cov")]
    pub metrics: Vec<String>,
    /// Number of shapes sampled from the model.
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Point distance for mmd/cov: cd or emd.
    #[arg(long, default_value = "cd")]
    pub ground: String,
    /// Mode classifier directory; trained on fresh joints and saved there if missing.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Part pair for the symmetry score.
    #[arg(long, value_delimiter = ',', default_value = "0,1")]
    pub sym_pair: Vec<usize>,
    /// Four parts for the coplanarity score.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    pub coplanar: Vec<usize>,
    /// Output directory (default: the checkpoint directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    /// Parts of the tiny model under test.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Files and directories created by a run, removed again if it fails.
struct Outputs {
    created_dir: Option<PathBuf>,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, CliError> {
        let created_dir = (!dir.exists()).then(|| dir.to_path_buf());
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Self {
            created_dir,
            files: Vec::new(),
        })
    }

    fn track(&mut self, path: PathBuf) -> PathBuf {
        self.files.push(path.clone());
        path
    }

    fn write(&mut self, path: PathBuf, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        self.track(path);
        Ok(())
    }

    fn write_json(&mut self, path: PathBuf, value: &impl Serialize) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| io_err(&path, e))?;
        self.write(path, text + "\n")
    }

    fn discard(self) {
        if let Some(d) = self.created_dir {
            let _ = fs::remove_dir_all(d);
        } else {
            for f in self.files {
                if f.is_dir() {
                    let _ = fs::remove_dir_all(f);
                } else {
                    let _ = fs::remove_file(f);
                }
            }
        }
    }
}

fn run_record(command: &str, args: &impl Serialize, threads: usize) -> Value {
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    json!({
        "command": command,
        "args": args,
        "threads": threads,
        "version": env!("CARGO_PKG_VERSION"),
        "timestamp": stamp,
    })
}

fn write_samples(out: &mut Outputs, dir: &Path, samples: &[ShapeSample], obj: bool) -> Result<(), CliError> {
    let data_dir = out.track(dir.join("shapes"));
    save_dataset(samples, &data_dir)?;
    if obj {
        let obj_dir = out.track(dir.join("obj"));
        fs::create_dir_all(&obj_dir).map_err(|e| io_err(&obj_dir, e))?;
        for (n, s) in samples.iter().enumerate() {
            let path = obj_dir.join(format!("shape_{n:06}.obj"));
            let mut buf = Vec::new();
            write_obj(&s.binarized(0.5), &mut buf).map_err(|e| io_err(&path, e))?;
            fs::write(&path, buf).map_err(|e| io_err(&path, e))?;
        }
    }
    Ok(())
}

fn pick(data: &[ShapeSample], index: usize) -> Result<&ShapeSample, CliError> {
    data.get(index)
        .ok_or_else(|| CliError::Usage(format!("index {index} out of range for {} shapes", data.len())))
}

fn load_model(dir: &Path) -> Result<SagNet<f32>, CliError> {
    Ok(SagNet::load(dir)?)
}

fn gen_data(a: &GenDataArgs, out: &mut Outputs) -> Result<Value, CliError> {
    match class_id(&a.class) {
        Some(JOINT_CLASS_ID) => {}
        Some(_) => {
            return Err(CliError::Usage(format!(
                "class {:?} has no generator; only joint can be generated",
                a.class
            )))
        }
        None => return Err(CliError::Usage(format!("unknown class {:?}", a.class))),
    }
    let data = generate_dataset(
        a.count,
        derive_seed(a.seed, SeedConcern::Data),
        a.resolution,
        a.stratified,
        &JointRanges::default(),
    )?;
    let manifest = save_dataset(&data.samples, &a.out)?;
    out.files.extend(manifest.files.iter().map(|f| a.out.join(f)));
    out.track(a.out.join("manifest.json"));
    save_labels(&a.out, &data.labels)?;
    out.track(a.out.join("labels.json"));
    info!("wrote {} joints to {}", a.count, a.out.display());
    Ok(json!({ "count": a.count }))
}

fn train_cmd(a: &TrainArgs, out: &mut Outputs) -> Result<Value, CliError> {
    let (manifest, data) = load_dataset(&a.data)?;
    let mut mc = ModelConfig::new(manifest.k, manifest.resolution)?;
    mc.latent_dim = a.latent;
    mc.feature_dim = a.feature;
    mc.iterations = a.exchange;
    mc.seed = a.seed;
    mc.class_id = data.first().map(|s| s.class_id).unwrap_or(0);
    let mut model = SagNet::new(mc)?;
    let mut tc = TrainConfig::desk(a.iters);
    if let Some(p) = a.phase1 {
        tc.phase1_iters = p;
        tc.ramp_iters = a.iters.saturating_sub(p).min(60_000);
    }
    if let Some(r) = a.ramp {
        tc.ramp_iters = r;
    }
    tc.batch_size = a.batch;
    tc.learning_rate = a.lr;
    tc.momentum = a.momentum;
    tc.clip_norm = a.clip;
    tc.box_weight = a.box_weight;
    tc.checkpoint_every = a.checkpoint_every;
    tc.seed = a.seed;
    for f in ["train.json", "loss.csv", "config.json", "model.sagw"] {
        out.track(a.out.join(f));
    }
    let summary = match train(&mut model, &data, &tc, Some(&a.out), |_| {}) {
        Ok(s) => s,
        Err(e @ TrainError::NumericFault { .. }) => {
            // the last good checkpoint stays on disk
            out.files.clear();
            out.created_dir = None;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    let first = summary.reports.first().map(|r| r.l_f);
    let last = summary.reports.last().map(|r| r.l_f);
    info!("trained {} iterations, l_f {first:?} -> {last:?}", a.iters);
    Ok(json!({ "initial_l_f": first, "final_l_f": last, "clipped_steps": summary.clipped }))
}

fn sample_cmd(a: &SampleArgs, out: &mut Outputs) -> Result<Value, CliError> {
    let model = load_model(&a.ckpt)?;
    let policy = match &a.data {
        Some(d) => MaskPolicy::empirical(&load_dataset(d)?.1),
        None => MaskPolicy::All,
    };
    let shapes = sample_shapes(&model, a.count, a.seed, &policy)?;
    write_samples(out, &a.out, &shapes, a.obj)?;
    Ok(json!({ "count": shapes.len() }))
}

fn interpolate_cmd(a: &InterpolateArgs, out: &mut Outputs) -> Result<Value, CliError> {
    let model = load_model(&a.ckpt)?;
    let (_, data) = load_dataset(&a.data)?;
    let path: Vec<_> = interpolate(&model, pick(&data, a.a)?, pick(&data, a.b)?, a.steps)?
        .into_iter()
        .map(|s| s.binarized(0.5))
        .collect();
    write_samples(out, &a.out, &path, a.obj)?;
    Ok(json!({ "steps": path.len() }))
}

fn complete_cmd(a: &CompleteArgs, out: &mut Outputs) -> Result<Value, CliError> {
    let model = load_model(&a.ckpt)?;
    let (_, data) = load_dataset(&a.data)?;
    let mut partial = pick(&data, a.index)?.clone();
    for &m in &a.missing {
        if m >= partial.k() {
            return Err(CliError::Usage(format!("part {m} out of {}", partial.k())));
        }
        partial.mask.set(m, false);
    }
    partial.zero_absent();
    let problem = CompletionProblem {
        iterations: a.iters,
        seed: a.seed,
        ..CompletionProblem::new(partial, a.missing.clone())
    };
    let result = complete(&model, &problem)?;
    write_samples(out, &a.out, std::slice::from_ref(&result.sample), a.obj)?;
    out.write_json(a.out.join("drift.json"), &result.drift)?;
    Ok(json!({ "final_change": result.drift.last() }))
}

fn map_cmd(a: &MapArgs, out: &mut Outputs) -> Result<Value, CliError> {
    let direction: Direction = a.direction.parse().map_err(|e: TaskError| CliError::Usage(e.to_string()))?;
    let model = load_model(&a.ckpt)?;
    let (_, data) = load_dataset(&a.data)?;
    let result = map_modality(&model, pick(&data, a.index)?, direction, a.iters, a.seed)?;
    write_samples(out, &a.out, std::slice::from_ref(&result.sample), a.obj)?;
    out.write_json(a.out.join("drift.json"), &result.drift)?;
    Ok(json!({ "error": result.error, "final_change": result.drift.last() }))
}

const EVAL_METRICS: [&str; 6] = ["cavity", "mmd", "cov", "inception", "symmetry", "coplanarity"];

fn eval_cmd(a: &EvalArgs, out: &mut Outputs, dir: &Path) -> Result<Value, CliError> {
    for m in &a.metrics {
        if !EVAL_METRICS.contains(&m.as_str()) {
            return Err(CliError::Usage(format!("unknown metric {m:?}; choose from {EVAL_METRICS:?}")));
        }
    }
    let ground = match a.ground.as_str() {
        "cd" => Ground::Cd,
        "emd" => Ground::Emd,
        g => return Err(CliError::Usage(format!("unknown ground {g:?}; expected cd or emd"))),
    };
    let wants = |m: &str| a.metrics.iter().any(|x| x == m);
    let model = load_model(&a.ckpt)?;
    let (_, training) = load_dataset(&a.data)?;
    let generated = sample_shapes(&model, a.count, a.seed, &MaskPolicy::empirical(&training))?;
    let mut report = BTreeMap::<String, Value>::new();
    report.insert("count".into(), json!(generated.len()));
    if wants("mmd") || wants("cov") {
        let r = mmd_cov(&generated, &training, ground)?;
        if wants("mmd") {
            report.insert("mmd".into(), json!(r.mmd));
        }
        if wants("cov") {
            report.insert("cov".into(), json!(r.cov));
        }
    }
    if wants("cavity") {
        let c = cavity_scores(&generated)?;
        let rs: Vec<f64> = c.per_sample.iter().map(|s| s.r).collect();
        report.insert("r_over".into(), json!(c.r_over));
        report.insert("cavity".into(), serde_json::to_value(&c.per_sample).map_err(|e| io_err(dir, e))?);
        let thresholds: Vec<f64> = (0..=20).map(|i| i as f64 * 0.1).collect();
        let mut csv = String::from("threshold,percentage\n");
        for (t, p) in threshold_curve(&rs, &thresholds) {
            csv.push_str(&format!("{t},{p}\n"));
        }
        out.write(dir.join("cavity_curve.csv"), csv)?;
    }
    if wants("inception") {
        let classifier = match &a.classifier {
            Some(p) if p.join("classifier.json").exists() => ModeClassifier::load(p)?,
            other => {
                let seed = derive_seed(a.seed, SeedConcern::Eval);
                let labeled = generate_dataset(1000, seed, 16, true, &JointRanges::default())?;
                let mut c = ModeClassifier::new(16, seed)?;
                let acc = c.train(&labeled.samples, &labeled.labels, &ClassifierTrainConfig::default())?;
                info!("mode classifier held-out accuracy {acc:.3}");
                if let Some(p) = other {
                    c.save(p)?;
                }
                c
            }
        };
        report.insert("inception".into(), json!(inception_mode_score(&generated, &classifier)?));
    }
    if wants("symmetry") {
        let [i, j] = a.sym_pair[..] else {
            return Err(CliError::Usage("--sym-pair takes two part indices".into()));
        };
        let scores: Vec<Option<f64>> = generated
            .iter()
            .map(|s| MirrorPlane::mid_sagittal(s).and_then(|p| symmetry_score(s, (i, j), p)).ok())
            .collect();
        report.insert("symmetry".into(), json!(scores));
    }
    if wants("coplanarity") {
        let parts: [usize; 4] = a.coplanar[..]
            .try_into()
            .map_err(|_| CliError::Usage("--coplanar takes four part indices".into()))?;
        let scores: Vec<Option<f64>> = generated.iter().map(|s| coplanarity_score(s, parts).ok()).collect();
        report.insert("coplanarity".into(), json!(scores));
    }
    out.write_json(dir.join("report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(|e| io_err(dir, e))?);
    Ok(json!({ "report": "report.json" }))
}

fn grad_check_cmd(a: &GradCheckArgs) -> Result<Value, CliError> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    if a.k < 2 {
        return Err(CliError::Usage("--k must be at least 2".into()));
    }
    let config = ModelConfig {
        k: a.k,
        resolution: 4,
        latent_dim: 3,
        feature_dim: 5,
        iterations: 2,
        channels: vec![2, 3],
        seed: a.seed,
        class_id: 0,
    };
    let model = SagNet::<f64>::new(config)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(a.seed, SeedConcern::Eval));
    let samples: Vec<ShapeSample> = (0..2)
        .map(|_| {
            let (parts, boxes) = (0..a.k).map(|_| crate::tasks::random_part(&mut rng, 4)).unzip();
            ShapeSample::new(0, parts, boxes, crate::shapes::PartMask::all(a.k))
        })
        .collect::<Result<_, _>>()?;
    let refs: Vec<&ShapeSample> = samples.iter().collect();
    let batch = Batch::<f64>::new(&model.config, &refs)?;
    let noise: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
    let noise = Tensor::new(vec![2, 3], noise).map_err(ModelError::from)?;
    let params: Vec<Tensor<f64>> = model.store.iter().map(|(_, t)| t.clone()).collect();
    let report = grad_check(
        |tape: &mut Tape<f64>, vars| {
            let p = Bound::from_vars(vars.to_vec());
            forward_loss(&model, tape, &p, &batch, Some(noise.clone()), 0.5, 0.5, 10.0)
                .map(|l| l.total)
                .map_err(|e| TensorError::Contract(e.to_string()))
        },
        &params,
        &GradCheckOptions {
            tolerance: a.tolerance,
            seed: a.seed,
            ..Default::default()
        },
    );
    let max = report.max_rel_error();
    println!("max relative error {max:e} (tolerance {:e})", a.tolerance);
    if !report.passed() {
        return Err(CliError::GradCheck(max));
    }
    Ok(json!({ "max_rel_error": max }))
}

fn thread_count(cli: Option<usize>) -> Result<usize, CliError> {
    let env = match std::env::var("SAGNET_THREADS") {
        Ok(v) => Some(
            v.parse::<usize>()
                .map_err(|_| CliError::Usage(format!("SAGNET_THREADS={v:?} is not a count")))?,
        ),
        Err(_) => None,
    };
    let n = env.or(cli).unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    if n == 0 {
        return Err(CliError::Usage("thread count must be positive".into()));
    }
    Ok(n)
}

fn dispatch(cli: &Cli, threads: usize) -> Result<(), CliError> {
    let (name, dir, args): (&str, Option<&Path>, Value) = match &cli.command {
        Command::GenData(a) => ("gen-data", Some(&a.out), to_value(a)?),
        Command::Train(a) => ("train", Some(&a.out), to_value(a)?),
        Command::Sample(a) => ("sample", Some(&a.out), to_value(a)?),
        Command::Interpolate(a) => ("interpolate", Some(&a.out), to_value(a)?),
        Command::Complete(a) => ("complete", Some(&a.out), to_value(a)?),
        Command::Map(a) => ("map", Some(&a.out), to_value(a)?),
        Command::Eval(a) => ("eval", Some(a.out.as_deref().unwrap_or(&a.ckpt)), to_value(a)?),
        Command::GradCheck(a) => ("grad-check", a.out.as_deref(), to_value(a)?),
    };
    let mut out = match dir {
        Some(d) => Some(Outputs::new(d)?),
        None => None,
    };
    let result = match (&cli.command, out.as_mut()) {
        (Command::GenData(a), Some(o)) => gen_data(a, o),
        (Command::Train(a), Some(o)) => train_cmd(a, o),
        (Command::Sample(a), Some(o)) => sample_cmd(a, o),
        (Command::Interpolate(a), Some(o)) => interpolate_cmd(a, o),
        (Command::Complete(a), Some(o)) => complete_cmd(a, o),
        (Command::Map(a), Some(o)) => map_cmd(a, o),
        (Command::Eval(a), Some(o)) => eval_cmd(a, o, a.out.as_deref().unwrap_or(&a.ckpt)),
        (Command::GradCheck(a), _) => grad_check_cmd(a),
        _ => unreachable!("every file-writing command has an output directory"),
    };
    match (result, out, dir) {
        (Ok(summary), Some(mut o), Some(d)) => {
            let mut record = run_record(name, &args, threads);
            record["result"] = summary;
            o.write_json(d.join(RUN_FILE), &record)
        }
        (Ok(_), _, _) => Ok(()),
        (Err(e), Some(o), _) => {
            o.discard();
            Err(e)
        }
        (Err(e), None, _) => Err(e),
    }
}

fn to_value(a: &impl Serialize) -> Result<Value, CliError> {
    serde_json::to_value(a).map_err(|e| CliError::Usage(e.to_string()))
}

/// Parse `argv`, run, and return the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let threads = match thread_count(cli.threads) {
        Ok(n) => n,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        warn!("thread pool already configured: {e}");
    }
    match dispatch(&cli, threads) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests;
