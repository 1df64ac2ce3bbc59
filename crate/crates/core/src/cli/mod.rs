//! Command-line front end.

pub mod checkpoint;
pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use checkpoint::Checkpoint;
pub use config::RunConfig;

use crate::data::{self, load_dataset, read_image, resize_bilinear, Normalization};
use crate::error::{Error, Result};
use crate::eval;
use crate::fsutil::atomic_write;
use crate::gradcam;
use crate::graph::{predict, Network, NetworkConfig};
use crate::tensor::Mode;
use crate::train::{train, LogRow};

#[derive(Debug, Parser)]
#[command(name = "plcnn", version, about = "Three-branch CNN for protein localization images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a dataset tree and write a checkpoint and training log.
    Train(RunArgs),
    /// k-fold cross-validation with pooled reports.
    Xval(RunArgs),
    /// Accuracy as the training share shrinks.
    Ablate(RunArgs),
    /// Classify one image or every PNG under a directory.
    Predict(PredictArgs),
    /// Write an attention overlay for one image.
    Gradcam(GradcamArgs),
    /// Generate a synthetic dataset tree.
    Synth(SynthArgs),
    /// Build a checkpoint from random init plus mapped external tensors.
    ImportWeights(ImportArgs),
}

/// Flags overriding `key = value` entries of the config file.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub halving_period: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub mean: Option<String>,
    #[arg(long)]
    pub std: Option<String>,
    #[arg(long)]
    pub log_interval: Option<u64>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    #[arg(long)]
    pub fractions: Option<String>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut o: Vec<(&str, String)> = Vec::new();
        let mut put = |k, v: Option<String>| {
            if let Some(v) = v {
                o.push((k, v));
            }
        };
        let s = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string());
        put("preset", self.preset.clone());
        put("data", s(&self.data));
        put("k", self.k.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("iterations", self.iterations.map(|v| v.to_string()));
        put("batch", self.batch.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("momentum", self.momentum.map(|v| v.to_string()));
        put("weight-decay", self.weight_decay.map(|v| v.to_string()));
        put("halving-period", self.halving_period.map(|v| v.to_string()));
        put("out", s(&self.out));
        put("augment", self.no_augment.then(|| "off".to_string()));
        put("mean", self.mean.clone());
        put("std", self.std.clone());
        put("log-interval", self.log_interval.map(|v| v.to_string()));
        put("checkpoint-interval", self.checkpoint_interval.map(|v| v.to_string()));
        put("fractions", self.fractions.clone());
        RunConfig::from_sources(self.config.as_deref(), &o)
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image file or directory searched recursively for PNGs.
    pub input: PathBuf,
    /// Expected preset; must match the checkpoint.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub mean: Option<String>,
    #[arg(long)]
    pub std: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradcamArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    /// Target class by name or index; defaults to the predicted class.
    #[arg(long)]
    pub class: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one overlay per branch next to `--out`.
    #[arg(long)]
    pub branches: bool,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub mean: Option<String>,
    #[arg(long)]
    pub std: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 12)]
    pub per_class: usize,
    /// Image size as `S` or `HxW`.
    #[arg(long, default_value = "64")]
    pub size: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// Checkpoint-format file holding the source tensors.
    #[arg(long)]
    pub source: PathBuf,
    /// Lines of `<source name> <parameter name>`.
    #[arg(long)]
    pub mapping: PathBuf,
    #[arg(long, default_value = "desk64")]
    pub preset: String,
    #[arg(long)]
    pub num_classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Executes a parsed command, writing human-readable output to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a.resolve()?, stdout),
        Command::Xval(a) => cmd_xval(&a.resolve()?, stdout),
        Command::Ablate(a) => cmd_ablate(&a.resolve()?, stdout),
        Command::Predict(a) => cmd_predict(&a, stdout),
        Command::Gradcam(a) => cmd_gradcam(&a, stdout),
        Command::Synth(a) => cmd_synth(&a, stdout),
        Command::ImportWeights(a) => cmd_import(&a, stdout),
    }
}

fn say(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn load(cfg: &RunConfig, k: usize) -> Result<(data::DatasetMeta, Vec<data::Sample<f32>>, NetworkConfig)> {
    let probe = NetworkConfig::preset(&cfg.preset, 2)?;
    let (_, h, w) = probe.input_dims;
    let (meta, samples) = load_dataset(cfg.data_root()?, k, cfg.seed, Some((h, w)))?;
    let net_cfg = NetworkConfig::preset(&cfg.preset, meta.num_classes())?;
    Ok((meta, samples, net_cfg))
}

pub const CHECKPOINT_FILE: &str = "checkpoint.plcn";
pub const LOG_FILE: &str = "train_log.csv";

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    say(out, &cfg.render())?;
    let (meta, samples, net_cfg) = load(cfg, 1)?;
    let manifest = data::read_manifest(cfg.data_root()?)?;
    let (train_set, test_set) = match &manifest {
        Some(m) => {
            let (train_set, _, test_set) = data::manifest_split(&samples, m)?;
            (train_set, test_set)
        }
        None => (samples.iter().collect(), Vec::new()),
    };
    let ckpt_path = cfg.out.join(CHECKPOINT_FILE);
    save_class_list(&ckpt_path, &meta.class_names)?;
    let mut net = Network::<f32>::new(&net_cfg, cfg.seed)?;
    let mut log = String::from("iteration,lr,loss,accuracy\n");
    let summary = train(&mut net, &train_set, &cfg.train_config(cfg.seed), &mut |row: &LogRow, n| {
        log.push_str(&format!(
            "{},{},{},{}\n",
            row.iteration,
            row.lr,
            row.loss,
            100.0 * row.accuracy
        ));
        if row.iteration % cfg.checkpoint_interval == 0 {
            Checkpoint::from_network(n, row.iteration).save(&ckpt_path)?;
            atomic_write(&cfg.out.join(LOG_FILE), log.as_bytes())?;
        }
        Ok(())
    })?;
    Checkpoint::from_network(&net, cfg.iterations()).save(&ckpt_path)?;
    atomic_write(&cfg.out.join(LOG_FILE), log.as_bytes())?;
    say(
        out,
        &format!(
            "final loss {:.6}, batch accuracy {:.1}\n",
            summary.final_loss,
            100.0 * summary.final_accuracy
        ),
    )?;
    if !test_set.is_empty() {
        let report = eval::evaluate(&net, &test_set, &meta.class_names, &cfg.normalization())?;
        write_reports(&cfg.out, &report)?;
        say(out, &eval::summary_text(&report))?;
    }
    Ok(())
}

fn save_class_list(ckpt: &Path, names: &[String]) -> Result<()> {
    checkpoint::save_class_names(ckpt, names)
}

fn write_reports(dir: &Path, report: &eval::EvalReport) -> Result<()> {
    eval::write_confusion_csv(&dir.join("confusion.csv"), &report.confusion)?;
    eval::write_confidences_csv(&dir.join("confidences.csv"), report)?;
    eval::write_summary(&dir.join("summary.txt"), report)
}

pub fn cmd_xval(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    say(out, &cfg.render())?;
    let (meta, samples, net_cfg) = load(cfg, cfg.k)?;
    let cv = eval::cross_validate(
        &net_cfg,
        &samples,
        &meta.class_names,
        cfg.k,
        &cfg.train_config(cfg.seed),
    )?;
    write_reports(&cfg.out, &cv.aggregate)?;
    say(out, &eval::summary_text(&cv.aggregate))
}

pub fn cmd_ablate(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    say(out, &cfg.render())?;
    let (meta, samples, net_cfg) = load(cfg, 1)?;
    let rows = eval::split_ablation(
        &net_cfg,
        &samples,
        &meta.class_names,
        &cfg.fractions,
        &cfg.train_config(cfg.seed),
    )?;
    eval::write_ablation_csv(&cfg.out.join("ablation.csv"), &rows)?;
    for r in &rows {
        let split = format!(
            "{:.0}/{:.0}",
            100.0 * r.train_fraction,
            100.0 * (1.0 - r.train_fraction)
        );
        say(out, &format!("{split}: {:.1}\n", r.accuracy))?;
    }
    Ok(())
}

fn normalization_from(mean: &Option<String>, std: &Option<String>) -> Result<Normalization> {
    let mut cfg = RunConfig::default();
    if let Some(m) = mean {
        cfg.set("mean", m)?;
    }
    if let Some(s) = std {
        cfg.set("std", s)?;
    }
    cfg.validate()?;
    Ok(cfg.normalization())
}

fn load_model(path: &Path, preset: &Option<String>) -> Result<(Network<f32>, Vec<String>)> {
    let ckpt = Checkpoint::load(path)?;
    if let Some(p) = preset {
        if *p != ckpt.preset {
            return Err(Error::config(format!(
                "checkpoint was trained with preset `{}`, not `{p}`",
                ckpt.preset
            )));
        }
    }
    let net = ckpt.network()?;
    let names = checkpoint::load_class_names(path, net.config().num_classes)?;
    Ok((net, names))
}

fn collect_pngs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_pngs(&path, out)?;
        } else if path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        {
            out.push(path);
        }
    }
    Ok(())
}

/// One image, resized to the network input and normalized.
fn prepare(net: &Network<f32>, path: &Path, norm: &Normalization) -> Result<crate::tensor::Tensor<f32>> {
    let (_, h, w) = net.config().input_dims;
    let raw = resize_bilinear(&read_image::<f32>(path)?, (h, w))?;
    data::normalize(&raw, norm)
}

pub fn cmd_predict(a: &PredictArgs, out: &mut dyn Write) -> Result<()> {
    let (net, names) = load_model(&a.checkpoint, &a.preset)?;
    let norm = normalization_from(&a.mean, &a.std)?;
    let mut paths = Vec::new();
    if a.input.is_dir() {
        collect_pngs(&a.input, &mut paths)?;
        paths.sort();
    } else {
        paths.push(a.input.clone());
    }
    for path in paths {
        let x = prepare(&net, &path, &norm)?;
        let pass = net.forward(&x, Mode::Inference)?;
        let (label, confidence) = predict(pass.logits().data());
        say(out, &format!("{},{},{}\n", path.display(), names[label], confidence))?;
    }
    Ok(())
}

pub fn cmd_gradcam(a: &GradcamArgs, out: &mut dyn Write) -> Result<()> {
    let (net, names) = load_model(&a.checkpoint, &a.preset)?;
    let norm = normalization_from(&a.mean, &a.std)?;
    let target = match &a.class {
        None => None,
        Some(c) => Some(match names.iter().position(|n| n == c) {
            Some(i) => i,
            None => c
                .parse::<usize>()
                .map_err(|_| Error::input(format!("unknown class `{c}`")))?,
        }),
    };
    let (_, h, w) = net.config().input_dims;
    let base = resize_bilinear(&read_image::<f32>(&a.image)?, (h, w))?;
    let x = data::normalize(&base, &norm)?;
    let map = gradcam::grad_cam(&net, &x, target)?;
    gradcam::render_heatmap(&map, &base, &a.out)?;
    say(
        out,
        &format!("{} (class {})\n", a.out.display(), names[map.target_class]),
    )?;
    if a.branches {
        let maps = gradcam::branch_cams(&net, &x, Some(map.target_class))?;
        let stem = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("gradcam");
        for (branch, m) in ["dense", "residual", "plain"].iter().zip(&maps) {
            let path = a.out.with_file_name(format!("{stem}_{branch}.png"));
            gradcam::render_heatmap(m, &base, &path)?;
            say(out, &format!("{}\n", path.display()))?;
        }
    }
    Ok(())
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::config(format!("invalid size `{s}`, expected S or HxW"));
    match s.split_once('x') {
        Some((h, w)) => Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?)),
        None => {
            let v = s.parse().map_err(|_| bad())?;
            Ok((v, v))
        }
    }
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let dims = parse_size(&a.size)?;
    data::make_synthetic(&a.out, a.classes, a.per_class, dims, a.seed)?;
    say(
        out,
        &format!(
            "wrote {} images in {} classes to {}\n",
            a.classes * a.per_class,
            a.classes,
            a.out.display()
        ),
    )
}

pub fn cmd_import(a: &ImportArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = NetworkConfig::preset(&a.preset, a.num_classes)?;
    let net = Network::<f32>::new(&cfg, a.seed)?;
    let source = Checkpoint::load(&a.source)?;
    let text = fs::read_to_string(&a.mapping).map_err(|e| Error::io(&a.mapping, e))?;
    let mapping = checkpoint::parse_mapping(&text)?;
    let mut ckpt = Checkpoint::from_network(&net, 0);
    let untouched = checkpoint::import_weights(&mut ckpt.params, &source.params, &mapping)?;
    ckpt.save(&a.out)?;
    say(
        out,
        &format!("mapped {} tensors; kept random init for:\n", mapping.len()),
    )?;
    for name in untouched {
        say(out, &format!("  {name}\n"))?;
    }
    Ok(())
}
