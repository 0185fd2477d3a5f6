//! The `hipseg` command line. Every command writes its outputs and a
//! `manifest.json` into one run directory.

pub mod config;
pub mod dataset;
pub mod manifest;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::fusion::{segment_native, ActivationSource, SegmentOptions};
use crate::io::{read_mask, read_volume, write_mask, write_volume};
use crate::metrics::{
    aggregate, consensus_vs_single_report, evaluate_subjects, evaluate_volume, format_cross_domain, format_summaries,
    write_records_csv, CrossDomainRow, EvalRecord, Summary, ARMS,
};
use crate::phantoms::Cohort;
use crate::plot;
use crate::postprocess::Connectivity;
use crate::sampling::Subject;
use crate::training::{ablation_grid, format_ablation, load_ensemble, train_ensemble, AblationRow};
use crate::volumes::{CanonicalTransform, EdgeMode, LabelMask, Orientation, Volume};

use config::ConfigArgs;
use dataset::{Dataset, Subset, SynthOptions};
use manifest::RunManifest;

/// Environment variable naming the root under which run directories are
/// created when `--out` is not given.
pub const RUNS_ENV: &str = "HIPSEG_RUNS";
pub const DEFAULT_RUNS_ROOT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "hipseg", version, about = "Tri-planar hippocampus segmentation ensemble")]
pub struct Cli {
    /// Run directory. Defaults to `$HIPSEG_RUNS/<timestamp>-<command>[-seed<n>]`.
    #[arg(long, global = true, alias = "run-dir", value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset.
    Synth(SynthArgs),
    /// Train the three orientation networks.
    Train(TrainArgs),
    /// Segment volumes with a trained ensemble.
    Predict(PredictArgs),
    /// Score predictions, or build a trained-on/tested-on matrix.
    Evaluate(EvaluateArgs),
    /// Train and score the hyperparameter grid.
    Ablate(AblateArgs),
    /// Compare consensus against each single-orientation network.
    ConsensusReport(ConsensusArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Predict(_) => "predict",
            Command::Evaluate(_) => "evaluate",
            Command::Ablate(_) => "ablate",
            Command::ConsensusReport(_) => "consensus-report",
        }
    }

    fn seed(&self) -> Option<u64> {
        match self {
            Command::Synth(a) => Some(a.seed),
            Command::Train(a) => Some(config::resolve(&a.config).map(|(c, _)| c.seed).unwrap_or(a.config.seed.unwrap_or(0))),
            Command::Ablate(a) => Some(config::resolve(&a.config).map(|(c, _)| c.seed).unwrap_or(a.config.seed.unwrap_or(0))),
            _ => None,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Total phantoms, spread evenly over the cohorts.
    #[arg(long, default_value_t = 30)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "control")]
    pub cohorts: Vec<Cohort>,
    #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"], default_values_t = [64, 64, 64])]
    pub shape: Vec<usize>,
    #[arg(long, default_value_t = 0.03)]
    pub noise_sigma: f64,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.7, 0.1, 0.2])]
    pub split: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory or manifest; repeat to train on the union.
    #[arg(long, required = true)]
    pub dataset: Vec<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Orientations trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SegmentArgs {
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    /// Connected components kept.
    #[arg(long, default_value_t = 2)]
    pub keep: usize,
    /// 6 or 26.
    #[arg(long, default_value = "26")]
    pub connectivity: Connectivity,
    /// Fill for neighbor slices past the volume edge: replicate or zero.
    #[arg(long, default_value = "replicate", value_parser = parse_edge)]
    pub edge: EdgeMode,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

impl SegmentArgs {
    fn options(&self) -> SegmentOptions {
        SegmentOptions {
            threshold: self.threshold,
            keep: self.keep,
            connectivity: self.connectivity,
            edge: self.edge,
            workers: self.workers.max(1),
        }
    }
}

fn parse_edge(s: &str) -> Result<EdgeMode> {
    match s {
        "replicate" => Ok(EdgeMode::Replicate),
        "zero" => Ok(EdgeMode::Zero),
        other => Err(Error::InvalidArgument(format!("unknown edge mode '{other}' (replicate, zero)"))),
    }
}

fn segment_config(options: &SegmentOptions) -> serde_json::Value {
    json!({
        "threshold": options.threshold,
        "keep": options.keep,
        "connectivity": options.connectivity,
        "edge": options.edge,
        "workers": options.workers,
    })
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Directory holding sagittal.ckpt, coronal.ckpt and axial.ckpt.
    #[arg(long)]
    pub checkpoints: PathBuf,
    /// Input volumes (NIfTI or raw).
    #[arg(long, num_args = 1.., conflicts_with = "dataset")]
    pub input: Vec<PathBuf>,
    /// Predict the volumes of a dataset instead.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub subset: Subset,
    /// Also write the three orientation activations and their consensus.
    #[arg(long)]
    pub save_activations: bool,
    /// Treat inputs without orientation metadata as canonical.
    #[arg(long)]
    pub assume_canonical: bool,
    #[command(flatten)]
    pub segment: SegmentArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of `<id>_mask.nii.gz` files written by `predict`.
    #[arg(long, requires = "dataset", conflicts_with_all = ["model", "test"])]
    pub predictions: Option<PathBuf>,
    /// Ground truth for `--predictions`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub subset: Subset,
    /// Trained ensemble for the matrix, as TAG=DIR; repeatable.
    #[arg(long, value_parser = parse_tagged, requires = "test")]
    pub model: Vec<(String, PathBuf)>,
    /// Test dataset for the matrix, as TAG=DATASET[@SUBSET]; repeatable.
    /// The subset defaults to `--subset`.
    #[arg(long, value_parser = parse_test_set, requires = "model")]
    pub test: Vec<TestSet>,
    /// Matrix cells as MODEL:TEST; every combination when omitted.
    #[arg(long, value_parser = parse_pair)]
    pub pair: Vec<(String, String)>,
    #[command(flatten)]
    pub segment: SegmentArgs,
}

fn parse_tagged(s: &str) -> Result<(String, PathBuf)> {
    match s.split_once('=') {
        Some((tag, path)) if !tag.is_empty() && !path.is_empty() => Ok((tag.to_string(), PathBuf::from(path))),
        _ => Err(Error::InvalidArgument(format!("expected TAG=PATH, got '{s}'"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestSet {
    pub tag: String,
    pub path: PathBuf,
    pub subset: Option<Subset>,
}

fn parse_test_set(s: &str) -> Result<TestSet> {
    let (tag, rest) = parse_tagged(s)?;
    let rest = rest.to_string_lossy().into_owned();
    let (path, subset) = match rest.rsplit_once('@') {
        Some((path, subset)) if !path.is_empty() => (PathBuf::from(path), Some(subset.parse()?)),
        _ => (PathBuf::from(rest), None),
    };
    Ok(TestSet { tag, path, subset })
}

fn parse_pair(s: &str) -> Result<(String, String)> {
    match s.split_once(':') {
        Some((m, t)) if !m.is_empty() && !t.is_empty() => Ok((m.to_string(), t.to_string())),
        _ => Err(Error::InvalidArgument(format!("expected MODEL:TEST, got '{s}'"))),
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, required = true)]
    pub dataset: Vec<PathBuf>,
    /// Shared settings (scale, seed, sampler); each row replaces optimizer,
    /// learning rate, loss and head.
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Rows to run (1 to 6); all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub rows: Vec<usize>,
    /// Write the resolved rows and stop.
    #[arg(long)]
    pub dry_run: bool,
    #[command(flatten)]
    pub segment: SegmentArgs,
}

#[derive(Debug, Args)]
pub struct ConsensusArgs {
    #[arg(long)]
    pub checkpoints: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "test")]
    pub subset: Subset,
    #[command(flatten)]
    pub segment: SegmentArgs,
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// run directory.
pub fn run(argv: Vec<String>) -> Result<PathBuf> {
    let cli = Cli::try_parse_from(&argv).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    execute(&cli, argv)
}

pub fn execute(cli: &Cli, argv: Vec<String>) -> Result<PathBuf> {
    let name = cli.command.name();
    let dir = match &cli.out {
        Some(dir) => dir.clone(),
        None => default_run_dir(name, cli.command.seed()),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut manifest = RunManifest::new(name, argv);
    let result = match &cli.command {
        Command::Synth(a) => synth(a, &dir, &mut manifest),
        Command::Train(a) => train(a, &dir, &mut manifest),
        Command::Predict(a) => predict(a, &dir, &mut manifest),
        Command::Evaluate(a) => evaluate(a, &dir, &mut manifest),
        Command::Ablate(a) => ablate(a, &dir, &mut manifest),
        Command::ConsensusReport(a) => consensus_report(a, &dir, &mut manifest),
    };
    manifest.write(&dir, &result)?;
    result.map(|()| dir)
}

fn default_run_dir(command: &str, seed: Option<u64>) -> PathBuf {
    let root = std::env::var_os(RUNS_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_RUNS_ROOT));
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let base = match seed {
        Some(s) => format!("{stamp}-{command}-seed{s}"),
        None => format!("{stamp}-{command}"),
    };
    let mut dir = root.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{base}-{n}"));
        n += 1;
    }
    dir
}

fn write_text(path: &Path, text: &str) -> Result<PathBuf> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn open_datasets(paths: &[PathBuf], manifest: &mut RunManifest) -> Result<Vec<Dataset>> {
    paths
        .iter()
        .map(|p| {
            let ds = Dataset::open(p)?;
            manifest.inputs.push(ds.root.join(dataset::DATASET_FILE));
            Ok(ds)
        })
        .collect()
}

fn load_union(datasets: &[Dataset], subset: Subset) -> Result<Vec<Subject>> {
    let mut out = Vec::new();
    for ds in datasets {
        out.extend(ds.load(subset)?);
    }
    Ok(out)
}

fn synth(a: &SynthArgs, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    if a.split.len() != 3 {
        return Err(Error::InvalidArgument(format!("--split takes three fractions, got {}", a.split.len())));
    }
    let options = SynthOptions {
        count: a.count,
        seed: a.seed,
        cohorts: a.cohorts.clone(),
        shape: [a.shape[0], a.shape[1], a.shape[2]],
        noise_sigma: a.noise_sigma,
        split: [a.split[0], a.split[1], a.split[2]],
    };
    manifest.config = serde_json::to_value(&options)?;
    manifest.seeds = vec![a.seed];
    let (ds, written) = Dataset::synthesize(dir, &options)?;
    manifest.record_outputs(written)?;
    println!("wrote {} phantoms to {}", ds.manifest.items.len(), dir.display());
    Ok(())
}

fn train(a: &TrainArgs, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    let (config, sources) = config::resolve(&a.config)?;
    manifest.config = serde_json::to_value(&config)?;
    manifest.config_sources = sources;
    manifest.seeds = vec![config.seed];
    let datasets = open_datasets(&a.dataset, manifest)?;
    let train = load_union(&datasets, Subset::Train)?;
    let val = load_union(&datasets, Subset::Val)?;
    if train.is_empty() {
        return Err(Error::EmptySubset("train"));
    }
    if val.is_empty() {
        return Err(Error::EmptySubset("val"));
    }
    log::info!("training on {} volumes, validating on {}", train.len(), val.len());
    let run = train_ensemble(&train, &val, &config, a.workers.max(1))?;
    run.save(dir)?;
    let mut outputs = vec![write_json(&dir.join("config.json"), &config)?];
    for (o, outcome) in Orientation::ALL.iter().zip(&run.outcomes) {
        let train_dice: Vec<f64> = outcome.report.epochs.iter().map(|e| e.train_dice).collect();
        let val_dice: Vec<f64> = outcome.report.epochs.iter().map(|e| e.val_dice).collect();
        let png = dir.join(format!("{o}_curves.png"));
        if !train_dice.is_empty() {
            plot::line_chart(&png, &[&train_dice, &val_dice])?;
        }
        for name in [format!("{o}.ckpt"), format!("{o}_report.json"), format!("{o}_curves.csv")] {
            outputs.push(dir.join(name));
        }
        outputs.push(png);
        println!(
            "{o}: best validation Dice {:.4} at epoch {} ({:?} after {} epochs)",
            outcome.report.best_val_dice,
            outcome.report.best_epoch,
            outcome.report.stop_reason,
            outcome.report.epochs.len()
        );
    }
    manifest.record_outputs(outputs)?;
    run.check()
}

/// Input id: the file name without its volume extension.
fn volume_id(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("volume");
    for ext in [".nii.gz", ".nii", ".raw", ".f32"] {
        if let Some(stem) = name.strip_suffix(ext) {
            return stem.to_string();
        }
    }
    path.file_stem().and_then(|s| s.to_str()).unwrap_or(name).to_string()
}

pub fn mask_file(id: &str) -> String {
    format!("{id}_mask.nii.gz")
}

fn predict(a: &PredictArgs, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    let options = a.segment.options();
    let ensemble = load_ensemble(&a.checkpoints)?;
    let inputs: Vec<(String, PathBuf)> = match &a.dataset {
        Some(path) => {
            let ds = open_datasets(std::slice::from_ref(path), manifest)?.remove(0);
            ds.items(a.subset).into_iter().map(|i| (i.id.clone(), ds.root.join(&i.volume))).collect()
        }
        None => a.input.iter().map(|p| (volume_id(p), p.clone())).collect(),
    };
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("nothing to predict: give --input files or a --dataset".into()));
    }
    manifest.config = json!({
        "checkpoints": a.checkpoints,
        "subset": a.dataset.as_ref().map(|_| a.subset.to_string()),
        "save_activations": a.save_activations,
        "assume_canonical": a.assume_canonical,
        "segment": segment_config(&options),
    });
    manifest.inputs.push(a.checkpoints.clone());

    let mut outputs = Vec::new();
    for (id, path) in &inputs {
        manifest.inputs.push(path.clone());
        let loaded = read_volume(path)?;
        let (mask, seg, transform) = segment_native(&ensemble, &loaded.volume, &options, a.assume_canonical)?;
        let out = dir.join(mask_file(id));
        write_mask(&out, &mask, &loaded.header)?;
        outputs.push(out);
        if a.save_activations {
            for act in seg.activations.iter().chain(std::iter::once(&seg.consensus)) {
                let data = transform.invert(act.data.view());
                let vol = Volume::new(data, loaded.volume.spacing, loaded.volume.axes)?;
                let out = dir.join(format!("{id}_{}.nii.gz", act.source));
                write_volume(&out, &vol, Some(&loaded.header))?;
                outputs.push(out);
            }
        }
        log::info!("{id}: {} foreground voxels", mask.count());
    }
    manifest.record_outputs(outputs)?;
    println!("wrote {} masks to {}", inputs.len(), dir.display());
    Ok(())
}

/// Scores `<id>_mask.nii.gz` files against a dataset's ground truth. Both
/// masks are brought to canonical order so the left/right split is on the
/// anatomical midline.
pub fn evaluate_predictions(predictions: &Path, ds: &Dataset, subset: Subset) -> Result<Vec<EvalRecord>> {
    let entries = std::fs::read_dir(predictions).map_err(|e| Error::io(predictions, e))?;
    let mut found = std::collections::BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(predictions, e))?;
        if let Some(id) = entry.file_name().to_str().and_then(|n| n.strip_suffix("_mask.nii.gz")) {
            found.insert(id.to_string());
        }
    }
    if found.is_empty() {
        return Err(Error::InvalidArgument(format!("no predicted masks (*_mask.nii.gz) in {}", predictions.display())));
    }
    let items = ds.items(subset);
    if items.is_empty() {
        return Err(Error::EmptySubset("evaluation"));
    }
    let missing: Vec<&str> = items.iter().map(|i| i.id.as_str()).filter(|id| !found.contains(*id)).collect();
    if !missing.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} has no prediction for: {}",
            predictions.display(),
            missing.join(", ")
        )));
    }
    items
        .into_iter()
        .map(|item| {
            let axes = read_volume(&ds.root.join(&item.volume))?.volume.axes;
            let transform = axes.map(CanonicalTransform::from_axes).unwrap_or_else(CanonicalTransform::identity);
            let canonical = |m: LabelMask| LabelMask::new(transform.apply(m.data().view()));
            let truth = canonical(read_mask(&ds.root.join(&item.mask))?)?;
            let pred = canonical(read_mask(&predictions.join(mask_file(&item.id)))?)?;
            evaluate_volume(&item.id, item.cohort.name(), &pred, &truth, 0)
        })
        .collect()
}

fn evaluate(a: &EvaluateArgs, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    let options = a.segment.options();
    if let Some(predictions) = &a.predictions {
        let path = a.dataset.as_ref().expect("clap requires --dataset with --predictions");
        let ds = open_datasets(std::slice::from_ref(path), manifest)?.remove(0);
        manifest.inputs.push(predictions.clone());
        manifest.config = json!({ "predictions": predictions, "subset": a.subset.to_string() });
        let records = evaluate_predictions(predictions, &ds, a.subset)?;
        return write_evaluation(dir, &records, manifest);
    }
    if a.model.is_empty() {
        return Err(Error::InvalidArgument("give --predictions with --dataset, or --model and --test".into()));
    }
    let pairs: Vec<(String, String)> = if a.pair.is_empty() {
        a.model.iter().flat_map(|(m, _)| a.test.iter().map(move |t| (m.clone(), t.tag.clone()))).collect()
    } else {
        a.pair.clone()
    };
    let unknown = |what: &str, tag: &str| Error::InvalidArgument(format!("--pair refers to unknown {what} '{tag}'"));
    manifest.config = json!({
        "models": a.model,
        "tests": a.test,
        "pairs": pairs,
        "subset": a.subset.to_string(),
        "segment": segment_config(&options),
    });
    let mut rows = Vec::with_capacity(pairs.len());
    let mut all_records = Vec::new();
    let mut outputs = Vec::new();
    for (model, test) in &pairs {
        let ckpt = a.model.iter().find(|(t, _)| t == model).map(|(_, p)| p.clone()).ok_or_else(|| unknown("model", model))?;
        let set = a.test.iter().find(|t| &t.tag == test).ok_or_else(|| unknown("test set", test))?;
        manifest.inputs.push(ckpt.clone());
        let ensemble = load_ensemble(&ckpt)?;
        let ds = open_datasets(std::slice::from_ref(&set.path), manifest)?.remove(0);
        let subjects = ds.load(set.subset.unwrap_or(a.subset))?;
        if subjects.is_empty() {
            return Err(Error::EmptySubset("evaluation"));
        }
        log::info!("evaluating {model} on {test} ({} volumes)", subjects.len());
        let records = evaluate_subjects(&ensemble, &subjects, &options)?;
        let refs: Vec<&EvalRecord> = records.iter().collect();
        let summary = Summary::of(test, &refs)?;
        let csv = dir.join(format!("records_{model}_on_{test}.csv"));
        write_records_csv(&csv, &records)?;
        outputs.push(csv);
        rows.push(CrossDomainRow { trained_on: model.clone(), tested_on: test.clone(), summary });
        all_records.extend(records);
    }
    let table = format_cross_domain(&rows);
    outputs.push(write_text(&dir.join("cross_domain.md"), &table)?);
    outputs.push(write_json(&dir.join("cross_domain.json"), &rows)?);
    manifest.record_outputs(outputs)?;
    print!("{table}");
    Ok(())
}

fn write_evaluation(dir: &Path, records: &[EvalRecord], manifest: &mut RunManifest) -> Result<()> {
    let summaries = aggregate(records)?;
    let table = format_summaries(&summaries);
    let csv = dir.join("records.csv");
    write_records_csv(&csv, records)?;
    let outputs = vec![
        csv,
        write_json(&dir.join("summary.json"), &summaries)?,
        write_text(&dir.join("summary.md"), &table)?,
    ];
    manifest.record_outputs(outputs)?;
    print!("{table}");
    Ok(())
}

fn ablate(a: &AblateArgs, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    let (base, sources) = config::resolve(&a.config)?;
    let options = a.segment.options();
    let mut rows = AblationRow::table_s1(&base);
    if !a.rows.is_empty() {
        if let Some(bad) = a.rows.iter().find(|r| !(1..=rows.len()).contains(*r)) {
            return Err(Error::InvalidArgument(format!("ablation row {bad} is not in 1..=6")));
        }
        rows = a.rows.iter().map(|&r| rows[r - 1].clone()).collect();
    }
    manifest.config = json!({ "rows": rows, "segment": segment_config(&options) });
    manifest.config_sources = sources;
    manifest.seeds = vec![base.seed];
    let mut outputs = vec![write_json(&dir.join("ablation_rows.json"), &rows)?];
    if a.dry_run {
        manifest.record_outputs(outputs)?;
        for r in &rows {
            println!("{}: {} lr {} {}", r.name, r.config.optimizer.label(), r.config.initial_lr, r.config.loss.label());
        }
        return Ok(());
    }
    let datasets = open_datasets(&a.dataset, manifest)?;
    let train = load_union(&datasets, Subset::Train)?;
    let val = load_union(&datasets, Subset::Val)?;
    let test = load_union(&datasets, Subset::Test)?;
    let results = ablation_grid(&train, &val, &test, &rows, &options)?;
    let table = format_ablation(&results);

    let csv = dir.join("ablation.csv");
    let mut w = csv::Writer::from_path(&csv).map_err(|e| crate::metrics::csv_io(&csv, e))?;
    w.write_record(["name", "optimizer", "initial_lr", "loss", "dice_mean", "dice_std", "error"])?;
    for r in &results {
        let (mean, std) = r.dice.as_ref().map(|s| (s.mean.to_string(), s.std.to_string())).unwrap_or_default();
        w.write_record([
            r.name.as_str(),
            r.optimizer.as_str(),
            &r.initial_lr.to_string(),
            r.loss.as_str(),
            &mean,
            &std,
            r.error.as_deref().unwrap_or(""),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&csv, e))?;
    outputs.push(csv);
    let means: Vec<f64> = results.iter().map(|r| r.dice.as_ref().map_or(0.0, |s| s.mean)).collect();
    let png = dir.join("ablation.png");
    plot::line_chart(&png, &[&means])?;
    outputs.push(png);
    outputs.push(write_json(&dir.join("ablation.json"), &results)?);
    outputs.push(write_text(&dir.join("ablation.md"), &table)?);
    manifest.record_outputs(outputs)?;
    print!("{table}");
    Ok(())
}

fn consensus_report(a: &ConsensusArgs, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    let options = a.segment.options();
    let ensemble = load_ensemble(&a.checkpoints)?;
    manifest.inputs.push(a.checkpoints.clone());
    let ds = open_datasets(std::slice::from_ref(&a.dataset), manifest)?.remove(0);
    manifest.config = json!({ "subset": a.subset.to_string(), "segment": segment_config(&options) });
    let subjects = ds.load(a.subset)?;
    if subjects.is_empty() {
        return Err(Error::EmptySubset("evaluation"));
    }
    let report = consensus_vs_single_report(&ensemble, &subjects, &options)?;
    let csv = dir.join("consensus.csv");
    report.write_csv(&csv)?;
    let groups: Vec<Vec<f64>> = ARMS
        .iter()
        .map(|&arm| report.scores.iter().filter(|s| s.arm == arm).map(|s| s.dice).collect())
        .collect();
    let refs: Vec<&[f64]> = groups.iter().map(Vec::as_slice).collect();
    let png = dir.join("consensus.png");
    plot::boxplot(&png, &refs)?;
    let text = report.format();
    let outputs = vec![csv, png, write_text(&dir.join("consensus.md"), &text)?, write_json(&dir.join("consensus.json"), &report)?];
    manifest.record_outputs(outputs)?;
    print!("{text}");
    let consensus = report.arm(ActivationSource::Consensus).mean;
    println!("consensus {consensus:.4} vs single-network mean {:.4}", report.single_arm_mean());
    Ok(())
}
