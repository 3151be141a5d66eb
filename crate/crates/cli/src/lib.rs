//! The `zsldb` command line: corpus synthesis, staged training, deblurring and evaluation.

pub mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use zsldb::checkpoint::{fingerprint, Checkpoint, ModelBundle, ModelConfig, Stage};
use zsldb::control::{normalize_depth, ControlKind};
use zsldb::image::Image;
use zsldb::io::{self, load_scene, make_corpus, Manifest, MANIFEST_FILE};
use zsldb::metrics::{aligned_kernel_tv, psnr, ssim};
use zsldb::ops;
use zsldb::optimizer::{optimize, DeblurResult, ZsldbConfig};
use zsldb::perceptual::PerceptualMetric;
use zsldb::pipeline::{cache_dir, reference_path, train_stage, Corpus, ReferenceSetup, SceneRecord, StageSettings};
use zsldb::synth::SynthConfig;
use zsldb::train::TrainConfig;
use zsldb::{Error, Result};

use report::{aggregate, grid, ExperimentReport, Row, INFORMATIONAL, REPORT_SCHEMA_VERSION};

pub const CORPUS_CONFIG_FILE: &str = "corpus.json";
pub const RUN_FILE: &str = "run.json";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "report.txt";
pub const GRID_DIR: &str = "grids";

/// Name of the pseudo-method whose output is the blurred input itself.
pub const INPUT_METHOD: &str = "input";

#[derive(Debug, Parser)]
#[command(name = "zsldb", version, about = "Depth-guided zero-shot blind deblurring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with a manifest.
    Synth(SynthArgs),
    /// Train one stage into a checkpoint.
    Train(TrainArgs),
    /// Deblur a scene directory or every scene of a manifest split.
    Deblur(DeblurArgs),
    /// Score result directories against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Corpus configuration (JSON); defaults apply to absent fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_stage)]
    pub stage: Stage,
    /// Corpus manifest; the train split is fitted and the val split scored.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to update, created if absent.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Architecture (JSON) for a new checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Training configuration (JSON) for the stage.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Continue a completed denoiser from its step counter.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct DeblurArgs {
    /// A scene directory, a corpus directory or a manifest file.
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to the cached reference model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Optimizer configuration (JSON); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind)]
    pub conditioning: Option<ControlKind>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub invert_steps: Option<usize>,
    #[arg(long)]
    pub sample_steps: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub kernel_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Result directory per method, as `NAME=DIR` or `DIR` (named after the directory).
    #[arg(long = "results", required = true)]
    pub results: Vec<String>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Supplies the perceptual feature extractor; defaults to the cached reference model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kind(s: &str) -> std::result::Result<ControlKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Process exit code for an error: 1 for problems with the user's input, 2 for internal ones.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Shape(_) | Error::Data { .. } | Error::Dependency(_) | Error::Io(_) => 1,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(&a),
        Command::Deblur(a) => deblur(&a),
        Command::Evaluate(a) => evaluate(&a).map(|_| ()),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data {
        path: path.into(),
        msg: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub synth: SynthConfig,
    pub scenes: usize,
    pub ratios: (f64, f64, f64),
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let r = ReferenceSetup::default();
        Self {
            synth: r.synth,
            scenes: r.scenes,
            ratios: r.ratios,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.ratios;
        if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "corpus config field `ratios`: must lie in [0, 1] and sum to 1, got {a}/{b}/{c}"
            )));
        }
        self.synth.validate()
    }
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut cfg: CorpusConfig = a.config.as_deref().map(read_json).transpose()?.unwrap_or_default();
    if let Some(n) = a.scenes {
        cfg.scenes = n;
    }
    if let Some(s) = a.seed {
        cfg.synth.seed = s;
    }
    cfg.validate()?;
    let workers = pool(a.jobs)?;
    let manifest = make_corpus(&cfg.synth, cfg.scenes, cfg.ratios, &a.out, |f, n| {
        workers.install(|| (0..n).into_par_iter().try_for_each(f))
    })?;
    let echo = serde_json::json!({ "config": cfg, "fingerprint": fingerprint(&cfg)? });
    fs::write(a.out.join(CORPUS_CONFIG_FILE), serde_json::to_string_pretty(&echo)?)?;
    info!(
        "wrote {} scenes ({} train / {} val / {} test) to {}",
        cfg.scenes,
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len(),
        a.out.display()
    );
    Ok(())
}

fn load_split(manifest_path: &Path, split: &str) -> Result<Vec<SceneRecord>> {
    let manifest = Manifest::load(manifest_path)?;
    manifest.resolve(manifest_path, split)?.iter().map(|d| SceneRecord::load(d)).collect()
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let corpus = Corpus {
        train: load_split(&a.data, "train")?,
        val: load_split(&a.data, "val")?,
    };
    let model: Option<ModelConfig> = a.model.as_deref().map(read_json).transpose()?;
    let mut ckpt = if a.checkpoint.exists() {
        let ckpt = Checkpoint::load(&a.checkpoint)?;
        if model.as_ref().is_some_and(|m| *m != ckpt.meta.model) {
            return Err(Error::Config(format!(
                "--model differs from the architecture stored in {}",
                a.checkpoint.display()
            )));
        }
        ckpt
    } else {
        Checkpoint::new(model.unwrap_or_default())?
    };
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => StageSettings::default().get(a.stage).clone(),
    };
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    let curves = train_stage(&mut ckpt, a.stage, &corpus, &cfg, a.resume, &Device::Cpu)?;
    ckpt.save(&a.checkpoint)?;
    let curve_path = a.checkpoint.with_extension(format!("{}.curves.json", a.stage));
    fs::write(&curve_path, serde_json::to_string_pretty(&curves)?)?;
    info!(
        "stage `{}` complete at step {}; curves in {}",
        a.stage,
        ckpt.steps(a.stage),
        curve_path.display()
    );
    Ok(())
}

/// The checkpoint given on the command line, or the cached reference model.
fn resolve_checkpoint(path: Option<&Path>) -> Result<(PathBuf, Checkpoint)> {
    let path = match path {
        Some(p) => p.to_path_buf(),
        None => {
            let p = reference_path(&ReferenceSetup::default(), &cache_dir())?;
            if !p.exists() {
                return Err(Error::Config(format!(
                    "no --checkpoint given and no cached reference model at {} (set {} or train one)",
                    p.display(),
                    zsldb::pipeline::CACHE_ENV
                )));
            }
            p
        }
    };
    let ckpt = Checkpoint::load(&path)?;
    Ok((path, ckpt))
}

/// Scene directories named by `input`: a manifest file, a corpus directory or one scene.
fn scene_dirs(input: &Path, split: &str) -> Result<Vec<PathBuf>> {
    let manifest = if input.is_dir() { input.join(MANIFEST_FILE) } else { input.to_path_buf() };
    if manifest.is_file() {
        Manifest::load(&manifest)?.resolve(&manifest, split)
    } else if input.is_dir() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(Error::Data {
            path: input.into(),
            msg: "neither a scene directory nor a manifest".into(),
        })
    }
}

fn dir_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default()
}

/// What a deblur run records next to its results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ZsldbConfig,
    pub config_fingerprint: String,
    pub checkpoint: PathBuf,
    pub checkpoint_fingerprint: String,
    pub scenes: Vec<String>,
}

pub fn deblur(a: &DeblurArgs) -> Result<()> {
    let mut cfg: ZsldbConfig = a.config.as_deref().map(read_json).transpose()?.unwrap_or_default();
    macro_rules! apply {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { cfg.$field = v; } )* };
    }
    apply!(conditioning, gamma, lambda, invert_steps, sample_steps, iterations, kernel_size, seed);
    cfg.validate()?;
    let (ckpt_path, ckpt) = resolve_checkpoint(a.checkpoint.as_deref())?;
    let bundle = ModelBundle::from_checkpoint(&ckpt, DType::F32, &Device::Cpu)?;
    let dirs = scene_dirs(&a.input, &a.split)?;
    fs::create_dir_all(&a.out)?;
    let record = RunRecord {
        config_fingerprint: fingerprint(&cfg)?,
        config: cfg.clone(),
        checkpoint: ckpt_path,
        checkpoint_fingerprint: fingerprint(&ckpt.meta)?,
        scenes: dirs.iter().map(|d| dir_name(d)).collect(),
    };
    fs::write(a.out.join(RUN_FILE), serde_json::to_string_pretty(&record)?)?;
    let start = Instant::now();
    pool(a.jobs)?.install(|| {
        dirs.par_iter().try_for_each(|dir| -> Result<()> {
            let scene = load_scene(dir)?;
            let r = optimize(&scene.blurred, Some(&scene.depth), &bundle, &cfg)?;
            r.save(&a.out.join(dir_name(dir)))?;
            info!(
                "{}: loss {:.4} -> {:.4}",
                dir_name(dir),
                r.summary.trace[0].total,
                r.summary.best_loss.total
            );
            Ok(())
        })
    })?;
    info!("deblurred {} scenes in {:.0}s", dirs.len(), start.elapsed().as_secs_f64());
    Ok(())
}

fn parse_method(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, dir)) => (name.to_string(), PathBuf::from(dir)),
        None => {
            let dir = PathBuf::from(spec);
            (dir_name(&dir), dir)
        }
    }
}

fn depth_picture(scene: &zsldb::synth::SceneTriple) -> Result<Image> {
    let (h, w) = (scene.sharp.height, scene.sharp.width);
    let ctrl = normalize_depth(&scene.depth, (h, w))?;
    let data = ctrl.map.iter().flat_map(|v| [*v; 3]).collect();
    Image::new(h, w, 3, data)
}

pub fn evaluate(a: &EvaluateArgs) -> Result<ExperimentReport> {
    let start = Instant::now();
    let methods: Vec<(String, PathBuf)> = a.results.iter().map(|s| parse_method(s)).collect();
    let mut names: Vec<String> = vec![INPUT_METHOD.to_string()];
    for (m, _) in &methods {
        if names.contains(m) {
            return Err(Error::Config(format!("method name `{m}` is used twice")));
        }
        names.push(m.clone());
    }
    let (_, ckpt) = resolve_checkpoint(a.checkpoint.as_deref())?;
    let bundle = ModelBundle::from_checkpoint(&ckpt, DType::F32, &Device::Cpu)?;
    let dirs = Manifest::load(&a.manifest)?.resolve(&a.manifest, &a.split)?;
    let distance = |x: &Image, y: &Image| -> Result<f64> {
        let d = bundle
            .extractor
            .distance(&x.to_tensor(&bundle.device, bundle.dtype)?, &y.to_tensor(&bundle.device, bundle.dtype)?)?;
        ops::scalar(&d)
    };
    let grid_dir = a.out.join(GRID_DIR);
    fs::create_dir_all(&grid_dir)?;
    let per_scene: Vec<Vec<Row>> = pool(a.jobs)?.install(|| {
        dirs.par_iter()
            .map(|dir| -> Result<Vec<Row>> {
                let scene_name = dir_name(dir);
                let scene = load_scene(dir)?;
                let mut outputs = vec![(INPUT_METHOD.to_string(), scene.blurred.clone(), None)];
                for (m, root) in &methods {
                    let rdir = root.join(&scene_name);
                    if !rdir.is_dir() {
                        return Err(Error::Data {
                            path: rdir,
                            msg: format!("method `{m}` has no result for scene `{scene_name}`"),
                        });
                    }
                    let r = DeblurResult::load(&rdir)?;
                    outputs.push((m.clone(), r.x_hat, Some(r.kernel_hat)));
                }
                let rows = outputs
                    .iter()
                    .map(|(m, x, k)| -> Result<Row> {
                        Ok(Row {
                            scene: scene_name.clone(),
                            method: m.clone(),
                            perceptual: distance(&scene.sharp, x)?,
                            psnr: psnr(x, &scene.sharp)?,
                            ssim: ssim(x, &scene.sharp)?,
                            kernel_tv: match (k, &scene.true_kernel) {
                                (Some(k), Some(t)) => Some(aligned_kernel_tv(k, t, 1)),
                                _ => None,
                            },
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let top = vec![scene.blurred.clone(), depth_picture(&scene)?, scene.sharp.clone()];
                let bottom: Vec<Image> = outputs.into_iter().skip(1).map(|(_, x, _)| x).collect();
                let mut cells = vec![top];
                if !bottom.is_empty() {
                    cells.push(bottom);
                }
                io::write_png(&grid_dir.join(format!("{scene_name}.png")), &grid(&cells, 2))?;
                Ok(rows)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let rows: Vec<Row> = per_scene.into_iter().flatten().collect();
    let mut fingerprints = BTreeMap::new();
    fingerprints.insert("checkpoint".to_string(), fingerprint(&ckpt.meta)?);
    for (m, root) in &methods {
        if let Ok(run) = read_json::<RunRecord>(&root.join(RUN_FILE)) {
            fingerprints.insert(m.clone(), run.config_fingerprint);
        }
    }
    let report = ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        split: a.split.clone(),
        aggregates: aggregate(&names, &rows),
        methods: names,
        rows,
        informational: INFORMATIONAL.iter().map(|s| s.to_string()).collect(),
        fingerprints,
        runtime_secs: start.elapsed().as_secs_f64(),
    };
    fs::write(a.out.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    let table = report.table();
    fs::write(a.out.join(TABLE_FILE), &table)?;
    println!("{table}");
    Ok(report)
}
